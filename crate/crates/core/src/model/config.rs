use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Eapnet,
    /// The attention-guided dense-block network used as the cost baseline.
    AhdrReference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Standard,
    Lightweight,
    TinyTest,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Pdub,
    Drdb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    Full,
    Half,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    Bilinear,
    Transposed,
}

/// How parameters are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Fan-in uniform weights plus the identity/zero starts of the
    /// alignment predictor and residual fusions.
    #[default]
    Standard,
    /// Every tensor, biases included, drawn fan-in uniform. Used to exercise
    /// all gradient paths.
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub variant: Variant,
    /// Channels of each encoder scale.
    pub encoder_channels: usize,
    /// Width of the restoration trunk.
    pub trunk_channels: usize,
    /// Widths of the second and third U-shape levels.
    pub pdub_widths: [usize; 2],
    pub pdub_dilations: [usize; 3],
    pub block_kind: BlockKind,
    pub block_count: usize,
    pub drdb_growth: usize,
    pub drdb_layers: usize,
    pub weight_sharing: bool,
    pub align_resolution: Resolution,
    pub align_hidden: usize,
    pub upsample: Upsample,
    pub head_channels: usize,
    pub seed: u64,
    #[serde(default)]
    pub init: InitMode,
}

impl ModelConfig {
    /// Four blocks, half-resolution attention/alignment, transposed upsampling.
    pub fn standard() -> Self {
        ModelConfig {
            architecture: Architecture::Eapnet,
            variant: Variant::Standard,
            encoder_channels: 32,
            trunk_channels: 64,
            pdub_widths: [96, 128],
            pdub_dilations: [1, 2, 4],
            block_kind: BlockKind::Pdub,
            block_count: 4,
            drdb_growth: 32,
            drdb_layers: 6,
            weight_sharing: false,
            align_resolution: Resolution::Half,
            align_hidden: 16,
            upsample: Upsample::Transposed,
            head_channels: 32,
            seed: 0,
            init: InitMode::Standard,
        }
    }

    /// Three blocks, full-resolution attention/alignment, bilinear upsampling.
    pub fn lightweight() -> Self {
        ModelConfig {
            variant: Variant::Lightweight,
            block_count: 3,
            align_resolution: Resolution::Full,
            upsample: Upsample::Bilinear,
            ..Self::standard()
        }
    }

    /// Lightweight topology at 8 encoder channels for fast tests.
    pub fn tiny() -> Self {
        ModelConfig {
            variant: Variant::TinyTest,
            encoder_channels: 8,
            trunk_channels: 16,
            pdub_widths: [24, 32],
            block_count: 2,
            drdb_growth: 8,
            align_hidden: 4,
            head_channels: 8,
            ..Self::lightweight()
        }
    }

    /// The 64-channel dense-block baseline with shared encoder and attention.
    pub fn ahdr() -> Self {
        ModelConfig {
            architecture: Architecture::AhdrReference,
            variant: Variant::Custom,
            encoder_channels: 64,
            trunk_channels: 64,
            block_kind: BlockKind::Drdb,
            block_count: 3,
            weight_sharing: true,
            head_channels: 64,
            ..Self::standard()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "standard" => Ok(Self::standard()),
            "lightweight" => Ok(Self::lightweight()),
            "tiny" => Ok(Self::tiny()),
            "ahdr" => Ok(Self::ahdr()),
            other => Err(Error::Config(format!("unknown preset `{other}` (standard, lightweight, tiny, ahdr)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.block_count == 0 {
            return bad("block_count must be at least 1".into());
        }
        let positive = [
            ("encoder_channels", self.encoder_channels),
            ("trunk_channels", self.trunk_channels),
            ("head_channels", self.head_channels),
            ("align_hidden", self.align_hidden),
            ("drdb_growth", self.drdb_growth),
            ("drdb_layers", self.drdb_layers),
            ("pdub_widths[0]", self.pdub_widths[0]),
            ("pdub_widths[1]", self.pdub_widths[1]),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if self.pdub_dilations.contains(&0) {
            return bad("pdub_dilations must be positive".into());
        }
        if self.architecture == Architecture::Eapnet && self.trunk_channels != 2 * self.encoder_channels {
            return bad(format!(
                "trunk_channels ({}) must be twice encoder_channels ({})",
                self.trunk_channels, self.encoder_channels
            ));
        }
        Ok(())
    }

    /// Both spatial extents of the input must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        match (self.architecture, self.block_kind) {
            (Architecture::AhdrReference, _) => 1,
            (Architecture::Eapnet, BlockKind::Pdub) => 8,
            (Architecture::Eapnet, BlockKind::Drdb) => match self.align_resolution {
                Resolution::Full => 2,
                Resolution::Half => 4,
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
