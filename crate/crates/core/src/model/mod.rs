//! The restoration network and its cost-reference baseline.
//!
//! Layers are written once against [`Graph`]: [`Exec`] runs them on a tape,
//! [`crate::cost::CostTracer`] counts them.

pub mod blocks;
pub mod config;
pub mod graph;
pub mod net;
pub mod params;

pub use blocks::{align_forward, attention_forward, drdb_forward, pdub_forward, DenseConv, DrdbShape, PdubShape};
pub use config::{Architecture, BlockKind, InitMode, ModelConfig, Resolution, Upsample, Variant};
pub use graph::{Exec, Graph, Init, ParamDecl};
pub use net::{model_forward, msenc_forward, FrameFeatures, INPUT_CHANNELS, REFERENCE};
pub use params::{init_params, manifest_diff, param_decls, Checkpoint, CheckpointManifest};

use crate::autodiff::{ParamStore, Tape};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// Forward pass without gradient bookkeeping beyond the tape itself.
pub fn predict<T: Real>(cfg: &ModelConfig, params: &ParamStore<T>, frames: [&Tensor<T>; 3]) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = frames.map(|f| tape.input(f.clone()));
    let out = model_forward(&mut Exec::new(&mut tape, params), cfg, &vars)?;
    Ok(tape.value(out).clone())
}
