use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Whether gaze heads get their own decoder and how it is tied to the human one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderTopology {
    /// One decoder feeds every head.
    Single,
    /// Two decoders with no guided embedding between them.
    SeparateDual,
    #[default]
    JointDual,
}

/// How the weight guided embedding is learned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WgeMode {
    /// No weight guided embedding: the scene term of the agglomeration is zero.
    None,
    /// Refined by its own stack of decoder layers.
    Separate,
    /// Concatenated with the human queries inside the human decoder.
    #[default]
    Joint,
}

/// Which human-decoder layers feed which gaze-decoder layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Coupling {
    LastToLast,
    LastToAll,
    #[default]
    OneToOne,
}

/// Which inputs form the gaze-decoder positional queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GazeQueryInit {
    HumanQuery,
    WeightGuided,
    #[default]
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub decoder: DecoderTopology,
    pub wge: WgeMode,
    pub coupling: Coupling,
    pub gaze_query_init: GazeQueryInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Channel width. Must equal the token count `(H/32) * (W/32)`.
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    /// Depth `L` of both decoders.
    pub n_decoder_layers: usize,
    /// Query count `N_q`, shared by both decoders.
    pub num_queries: usize,
    /// Object category count `N_o` (the no-object class is extra).
    pub num_categories: usize,
    pub heatmap_height: usize,
    pub heatmap_width: usize,
    pub heatmap_sigma: f64,
    pub ffn_dim: usize,
    /// Output channels of the five stride-2 backbone blocks.
    pub backbone_channels: Vec<usize>,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    /// The 256x256 desk-scale configuration.
    fn default() -> Self {
        Self {
            input_height: 256,
            input_width: 256,
            d_model: 64,
            n_heads: 8,
            n_encoder_layers: 6,
            n_decoder_layers: 3,
            num_queries: 20,
            num_categories: 4,
            heatmap_height: 64,
            heatmap_width: 64,
            heatmap_sigma: 3.0,
            ffn_dim: 256,
            backbone_channels: vec![16, 32, 64, 96, 128],
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    /// 512x512 input, 256 channels, as in the full-scale detector.
    pub fn full_scale(num_categories: usize) -> Self {
        Self {
            input_height: 512,
            input_width: 512,
            d_model: 256,
            ffn_dim: 2048,
            num_categories,
            backbone_channels: vec![64, 128, 256, 512, 1024],
            ..Self::default()
        }
    }

    /// Smallest useful model (128x128 input, `d_model` 16, 4 queries) for
    /// gradient checks and smoke runs.
    pub fn tiny() -> Self {
        Self {
            input_height: 128,
            input_width: 128,
            d_model: 16,
            n_heads: 8,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            num_queries: 4,
            num_categories: 3,
            heatmap_height: 8,
            heatmap_width: 8,
            heatmap_sigma: 1.0,
            ffn_dim: 32,
            backbone_channels: vec![4, 4, 8, 8, 8],
            ablation: Ablation::default(),
        }
    }

    pub fn token_rows(&self) -> usize {
        self.input_height / 32
    }

    pub fn token_cols(&self) -> usize {
        self.input_width / 32
    }

    pub fn num_tokens(&self) -> usize {
        self.token_rows() * self.token_cols()
    }

    pub fn heatmap_cells(&self) -> usize {
        self.heatmap_height * self.heatmap_width
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_height == 0 || self.input_width == 0 || self.input_height % 32 != 0 || self.input_width % 32 != 0 {
            return bad(format!(
                "input {}x{} must be a positive multiple of 32",
                self.input_height, self.input_width
            ));
        }
        if self.d_model != self.num_tokens() {
            return bad(format!(
                "d_model = {} must equal the token count (H/32)*(W/32) = {} so the weight guided embedding can select tokens",
                self.d_model,
                self.num_tokens()
            ));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_model % 4 != 0 {
            return bad(format!("d_model {} must be divisible by 4 for the 2-D positional encoding", self.d_model));
        }
        if self.n_decoder_layers == 0 || self.n_encoder_layers == 0 {
            return bad("encoder and decoder depth must be at least 1".into());
        }
        if self.num_queries == 0 || self.num_categories == 0 {
            return bad("num_queries and num_categories must be positive".into());
        }
        if self.heatmap_height == 0 || self.heatmap_width == 0 || !(self.heatmap_sigma > 0.0) {
            return bad("heatmap grid and sigma must be positive".into());
        }
        if self.backbone_channels.len() != 5 || self.backbone_channels.contains(&0) {
            return bad(format!(
                "backbone_channels must list 5 positive widths, got {:?}",
                self.backbone_channels
            ));
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim must be positive".into());
        }
        Ok(())
    }

    /// Names of the top-level fields that differ, for mismatch reports.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("serializable");
        let b = serde_json::to_value(other).expect("serializable");
        match (a, b) {
            (serde_json::Value::Object(a), serde_json::Value::Object(b)) => a
                .iter()
                .filter(|(k, v)| b.get(*k) != Some(*v))
                .map(|(k, v)| format!("{k} ({} vs {})", v, b.get(k).cloned().unwrap_or_default()))
                .collect(),
            _ => vec![],
        }
    }
}
