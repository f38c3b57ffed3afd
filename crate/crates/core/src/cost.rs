//! Multiply-accumulate and parameter accounting.
//!
//! [`CostTracer`] implements [`Graph`] over shapes only, so the model code that
//! runs on the tape is the code that gets counted.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::graph::{declare, Graph, Init, ParamDecl};
use crate::model::{model_forward, ModelConfig, INPUT_CHANNELS};
use crate::tensor::{ConvSpec, Shape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv { spec: ConvSpec },
    ConvTranspose { spec: ConvSpec },
    BilinearResize { out_h: usize, out_w: usize },
    Elementwise,
    /// Channel concatenation; `parts` lists the channel count of each operand
    /// after the first, whose shape is the input shape.
    Concat { parts: Vec<usize> },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::ConvTranspose { .. } => "conv_transpose",
            LayerSpec::BilinearResize { .. } => "bilinear_resize",
            LayerSpec::Elementwise => "elementwise",
            LayerSpec::Concat { .. } => "concat",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CountOptions {
    /// Also count one accumulate per output value for each bias.
    pub bias_maccs: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub maccs: u64,
    pub params: u64,
    pub out_shape: Shape,
}

/// Cost of one layer applied to `input`.
pub fn count_layer(spec: &LayerSpec, input: Shape) -> Result<LayerCost> {
    count_layer_with(spec, input, CountOptions::default())
}

pub fn count_layer_with(spec: &LayerSpec, input: Shape, opts: CountOptions) -> Result<LayerCost> {
    let bias_extra = |s: &ConvSpec, out: Shape| if opts.bias_maccs && s.has_bias { out.len() as u64 } else { 0 };
    match spec {
        LayerSpec::Conv { spec: s } => {
            let out = s.output_shape(input)?;
            let per_pixel = (s.in_channels / s.groups * s.out_channels * s.kernel_size * s.kernel_size) as u64;
            Ok(LayerCost {
                maccs: per_pixel * (out.n * out.h * out.w) as u64 + bias_extra(s, out),
                params: s.param_count() as u64,
                out_shape: out,
            })
        }
        LayerSpec::ConvTranspose { spec: s } => {
            let out = s.transposed_output_shape(input)?;
            // every input value is stamped through k*k taps into out/groups channels
            let per_pixel = (s.in_channels * (s.out_channels / s.groups) * s.kernel_size * s.kernel_size) as u64;
            Ok(LayerCost {
                maccs: per_pixel * (input.n * input.h * input.w) as u64 + bias_extra(s, out),
                params: (s.transposed_weight_shape().len() + if s.has_bias { s.out_channels } else { 0 }) as u64,
                out_shape: out,
            })
        }
        LayerSpec::BilinearResize { out_h, out_w } => {
            if *out_h == 0 || *out_w == 0 {
                return Err(Error::shape("bilinear_resize", format!("target extent {out_h}x{out_w} is empty")));
            }
            Ok(LayerCost { maccs: 0, params: 0, out_shape: input.with_spatial(*out_h, *out_w) })
        }
        LayerSpec::Elementwise => Ok(LayerCost { maccs: 0, params: 0, out_shape: input }),
        LayerSpec::Concat { parts } => {
            let c = input.c + parts.iter().sum::<usize>();
            Ok(LayerCost { maccs: 0, params: 0, out_shape: input.with_channels(c) })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub kind: String,
    pub maccs: u64,
    /// Parameters owned by this entry; a reused layer reports them only at
    /// its first use.
    pub params: u64,
    pub out_shape: Shape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerEntry>,
    pub total_maccs: u64,
    pub total_params: u64,
    pub maccs_g: f64,
    pub params_k: f64,
    /// Resolution asked for, as (height, width).
    pub resolution: [usize; 2],
    /// Resolution the graph was evaluated at after rounding up to the
    /// model's spatial multiple.
    pub evaluated_resolution: [usize; 2],
}

impl CostReport {
    pub fn from_layers(layers: Vec<LayerEntry>, resolution: [usize; 2], evaluated: [usize; 2]) -> Self {
        let total_maccs = layers.iter().map(|l| l.maccs).sum();
        let total_params = layers.iter().map(|l| l.params).sum();
        CostReport {
            layers,
            total_maccs,
            total_params,
            maccs_g: round2(total_maccs as f64 / 1e9),
            params_k: round2(total_params as f64 / 1e3),
            resolution,
            evaluated_resolution: evaluated,
        }
    }

    pub fn empty() -> Self {
        Self::from_layers(Vec::new(), [0, 0], [0, 0])
    }

    /// Aligned human-readable table of the layers that carry cost.
    pub fn to_table(&self) -> String {
        let rows: Vec<&LayerEntry> = self.layers.iter().filter(|l| l.maccs > 0 || l.params > 0).collect();
        let wn = rows.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<wn$}  {:<14}  {:>16}  {:>10}  {}", "layer", "kind", "maccs", "params", "output");
        for l in rows {
            let _ = writeln!(s, "{:<wn$}  {:<14}  {:>16}  {:>10}  {}", l.name, l.kind, l.maccs, l.params, l.out_shape);
        }
        let _ = writeln!(
            s,
            "total: {:.2} G MAccs, {:.2} k params at {}x{} (evaluated {}x{})",
            self.maccs_g,
            self.params_k,
            self.resolution[1],
            self.resolution[0],
            self.evaluated_resolution[1],
            self.evaluated_resolution[0]
        );
        s
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Shape-only [`Graph`] that records a [`LayerEntry`] per op and declares
/// every parameter.
#[derive(Debug, Default)]
pub struct CostTracer {
    pub layers: Vec<LayerEntry>,
    pub params: Vec<ParamDecl>,
    pub options: CountOptions,
    seen: HashSet<String>,
    anon: usize,
}

impl CostTracer {
    pub fn new(options: CountOptions) -> Self {
        CostTracer { options, ..Default::default() }
    }

    fn record(&mut self, name: String, spec: &LayerSpec, input: Shape, owns_params: bool) -> Result<Shape> {
        let cost = count_layer_with(spec, input, self.options).map_err(|e| e.in_layer(&name))?;
        self.layers.push(LayerEntry {
            name,
            kind: spec.kind().to_string(),
            maccs: cost.maccs,
            params: if owns_params { cost.params } else { 0 },
            out_shape: cost.out_shape,
        });
        Ok(cost.out_shape)
    }

    fn anon(&mut self, op: &str) -> String {
        self.anon += 1;
        format!("{op}#{}", self.anon)
    }

    fn conv_layer(&mut self, name: &str, x: Shape, spec: &ConvSpec, init: Init, transposed: bool) -> Result<Shape> {
        let (layer, wshape) = if transposed {
            (LayerSpec::ConvTranspose { spec: *spec }, spec.transposed_weight_shape())
        } else {
            (LayerSpec::Conv { spec: *spec }, spec.weight_shape())
        };
        let fan_in = spec.in_channels / spec.groups * spec.kernel_size * spec.kernel_size;
        declare(&mut self.params, name, wshape, spec, init, fan_in).map_err(|e| e.in_layer(name))?;
        let first = self.seen.insert(name.to_string());
        self.record(name.to_string(), &layer, x, first)
    }

    pub fn report(&self, resolution: [usize; 2], evaluated: [usize; 2]) -> CostReport {
        CostReport::from_layers(self.layers.clone(), resolution, evaluated)
    }
}

impl Graph for CostTracer {
    type V = Shape;

    fn shape(&self, v: Shape) -> Shape {
        v
    }

    fn conv(&mut self, name: &str, x: Shape, spec: &ConvSpec, init: Init) -> Result<Shape> {
        self.conv_layer(name, x, spec, init, false)
    }

    fn conv_transpose(&mut self, name: &str, x: Shape, spec: &ConvSpec, init: Init) -> Result<Shape> {
        self.conv_layer(name, x, spec, init, true)
    }

    fn resize(&mut self, x: Shape, out_h: usize, out_w: usize) -> Result<Shape> {
        let name = self.anon("resize");
        self.record(name, &LayerSpec::BilinearResize { out_h, out_w }, x, false)
    }

    fn leaky_relu(&mut self, x: Shape) -> Result<Shape> {
        let name = self.anon("leaky_relu");
        self.record(name, &LayerSpec::Elementwise, x, false)
    }

    fn sigmoid(&mut self, x: Shape) -> Result<Shape> {
        let name = self.anon("sigmoid");
        self.record(name, &LayerSpec::Elementwise, x, false)
    }

    fn add(&mut self, a: Shape, b: Shape) -> Result<Shape> {
        if a != b {
            return Err(Error::shape("add", format!("{a} vs {b}")));
        }
        let name = self.anon("add");
        self.record(name, &LayerSpec::Elementwise, a, false)
    }

    fn mul(&mut self, a: Shape, b: Shape) -> Result<Shape> {
        if a != b {
            return Err(Error::shape("mul", format!("{a} vs {b}")));
        }
        let name = self.anon("mul");
        self.record(name, &LayerSpec::Elementwise, a, false)
    }

    fn concat(&mut self, parts: &[Shape]) -> Result<Shape> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat", "no operands"));
        };
        if let Some(bad) = parts.iter().find(|p| (p.n, p.h, p.w) != (first.n, first.h, first.w)) {
            return Err(Error::shape("concat", format!("{bad} vs {first}")));
        }
        let name = self.anon("concat");
        let spec = LayerSpec::Concat { parts: parts[1..].iter().map(|p| p.c).collect() };
        self.record(name, &spec, first, false)
    }

    fn slice_channels(&mut self, x: Shape, start: usize, len: usize) -> Result<Shape> {
        if len == 0 || start + len > x.c {
            return Err(Error::shape("slice_channels", format!("[{start}, {}) out of {x}", start + len)));
        }
        let name = self.anon("slice");
        self.record(name, &LayerSpec::Elementwise, x.with_channels(len), false)
    }
}

/// Traces `config` on a batch-1 input of `height x width`, rounded up to the
/// model's spatial multiple.
pub fn count_model(config: &ModelConfig, height: usize, width: usize) -> Result<CostReport> {
    count_model_with(config, height, width, CountOptions::default())
}

pub fn count_model_with(config: &ModelConfig, height: usize, width: usize, opts: CountOptions) -> Result<CostReport> {
    let (tracer, eh, ew) = trace_model(config, height, width, opts)?;
    Ok(tracer.report([height, width], [eh, ew]))
}

pub(crate) fn trace_model(
    config: &ModelConfig,
    height: usize,
    width: usize,
    opts: CountOptions,
) -> Result<(CostTracer, usize, usize)> {
    let m = config.spatial_multiple();
    let (eh, ew) = (height.div_ceil(m) * m, width.div_ceil(m) * m);
    let mut tracer = CostTracer::new(opts);
    let x = Shape::new(1, INPUT_CHANNELS, eh, ew);
    model_forward(&mut tracer, config, &[x, x, x])?;
    Ok((tracer, eh, ew))
}
