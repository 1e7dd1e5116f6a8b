//! Model and training configuration.

use serde::{Deserialize, Serialize};

/// Which perspective feeds which stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    EncoderOnlyTemporal,
    EncoderOnlySpatial,
    EncDecTemporalSpatial,
    EncDecSpatialTemporal,
}

impl Variant {
    pub fn has_decoder(self) -> bool {
        matches!(self, Variant::EncDecTemporalSpatial | Variant::EncDecSpatialTemporal)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialEmbedding {
    Linear,
    /// Three Conv–GeLU–Pool blocks, the last pooling being global.
    CnnOriginal,
    /// Two Conv–GeLU–Pool blocks, then Conv–GeLU–Conv–GeLU–GAP.
    CnnEnhanced,
}

/// Local temporal window applied to selected temporal self-attention blocks.
/// An empty `blocks` list disables it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub back: usize,
    pub fwd: usize,
    /// Indices of the temporal stream's self-attention blocks that use it.
    pub blocks: Vec<usize>,
}

impl WindowConfig {
    pub fn disabled() -> Self {
        WindowConfig { back: 0, fwd: 0, blocks: vec![] }
    }
}

/// Top-k ROI masking on the spatial stream's self-attention blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankConfig {
    pub k: usize,
    pub applied: bool,
}

impl RankConfig {
    pub fn disabled() -> Self {
        RankConfig { k: 1, applied: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Time frames per segment (T).
    pub seq_len: usize,
    /// ROI count (S).
    pub n_rois: usize,
    pub d_model: usize,
    pub d_a: usize,
    pub d_ff: usize,
    pub heads_encoder: usize,
    pub heads_decoder: usize,
    pub blocks_encoder: usize,
    pub blocks_decoder: usize,
    pub p_drop: f64,
    pub variant: Variant,
    pub spatial_embedding: SpatialEmbedding,
    /// Conv output channels: 3 entries for `cnn_original`, 4 for `cnn_enhanced`.
    pub cnn_channels: Vec<usize>,
    pub cnn_kernel: usize,
    pub window: WindowConfig,
    pub rank: RankConfig,
    pub pheno_dim: usize,
    pub classifier_sizes: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            seq_len: 60,
            n_rois: 190,
            d_model: 256,
            d_a: 256,
            d_ff: 1024,
            heads_encoder: 8,
            heads_decoder: 4,
            blocks_encoder: 2,
            blocks_decoder: 2,
            p_drop: 0.1,
            variant: Variant::EncDecTemporalSpatial,
            spatial_embedding: SpatialEmbedding::CnnEnhanced,
            cnn_channels: vec![32, 64, 256, 256],
            cnn_kernel: 5,
            window: WindowConfig {
                back: 20,
                fwd: 20,
                blocks: vec![0],
            },
            rank: RankConfig {
                k: 60,
                applied: true,
            },
            pheno_dim: crate::data::PHENO_DIM,
            classifier_sizes: vec![256, 10, 1],
        }
    }
}

/// Sequence extent entering a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Perspective {
    Temporal,
    Spatial,
}

impl ModelConfig {
    /// Perspectives of (encoder, decoder).
    pub fn streams(&self) -> (Perspective, Option<Perspective>) {
        use Perspective::*;
        match self.variant {
            Variant::EncoderOnlyTemporal => (Temporal, None),
            Variant::EncoderOnlySpatial => (Spatial, None),
            Variant::EncDecTemporalSpatial => (Temporal, Some(Spatial)),
            Variant::EncDecSpatialTemporal => (Spatial, Some(Temporal)),
        }
    }

    /// Number of self-attention blocks in the stream carrying `p`.
    pub fn self_attention_blocks(&self, p: Perspective) -> usize {
        let (enc, dec) = self.streams();
        if enc == p {
            self.blocks_encoder
        } else if dec == Some(p) {
            self.blocks_decoder.saturating_sub(1)
        } else {
            0
        }
    }

    /// Time-axis length after each pooling stage of the CNN embedding.
    fn cnn_lengths(&self) -> Vec<usize> {
        let pools = match self.spatial_embedding {
            SpatialEmbedding::Linear => 0,
            SpatialEmbedding::CnnOriginal | SpatialEmbedding::CnnEnhanced => 2,
        };
        let mut lens = vec![self.seq_len];
        for _ in 0..pools {
            let l = *lens.last().unwrap();
            lens.push(if l >= 2 { (l - 2) / 2 + 1 } else { 0 });
        }
        lens
    }

    /// Every violated constraint, one message per offending key.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let mut req = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        req(self.seq_len >= 1, "model.seq_len must be at least 1".into());
        req(self.n_rois >= 1, "model.n_rois must be at least 1".into());
        req(
            self.d_model >= 2 && self.d_model % 2 == 0,
            format!("model.d_model = {} must be even", self.d_model),
        );
        req(self.d_a >= 1, "model.d_a must be at least 1".into());
        req(self.d_ff >= 1, "model.d_ff must be at least 1".into());
        req(
            self.heads_encoder >= 1 && self.d_a % self.heads_encoder == 0,
            format!("model.heads_encoder = {} must divide d_a = {}", self.heads_encoder, self.d_a),
        );
        req(
            self.heads_decoder >= 1 && self.d_a % self.heads_decoder == 0,
            format!("model.heads_decoder = {} must divide d_a = {}", self.heads_decoder, self.d_a),
        );
        req(self.blocks_encoder >= 1, "model.blocks_encoder must be at least 1".into());
        if self.variant.has_decoder() {
            req(
                self.blocks_decoder >= 1,
                "model.blocks_decoder must be at least 1 (the co-attention block)".into(),
            );
        }
        req(
            (0.0..1.0).contains(&self.p_drop),
            format!("model.p_drop = {} outside [0, 1)", self.p_drop),
        );

        match self.spatial_embedding {
            SpatialEmbedding::Linear => {}
            kind => {
                let want = if kind == SpatialEmbedding::CnnOriginal { 3 } else { 4 };
                req(
                    self.cnn_channels.len() == want,
                    format!(
                        "model.cnn_channels needs {want} entries for {kind:?}, got {}",
                        self.cnn_channels.len()
                    ),
                );
                req(
                    self.cnn_channels.last() == Some(&self.d_model),
                    format!("model.cnn_channels must end with d_model = {}", self.d_model),
                );
                req(
                    self.cnn_channels.iter().all(|&c| c >= 1),
                    "model.cnn_channels entries must be positive".into(),
                );
                req(self.cnn_kernel >= 1, "model.cnn_kernel must be at least 1".into());
                let last = *self.cnn_lengths().last().unwrap();
                req(
                    last >= self.cnn_kernel.max(1),
                    format!(
                        "model.seq_len = {} is pooled down to {last}, shorter than cnn_kernel = {}",
                        self.seq_len, self.cnn_kernel
                    ),
                );
            }
        }

        let w = &self.window;
        let n = self.self_attention_blocks(Perspective::Temporal);
        req(
            w.blocks.iter().all(|&b| b < n),
            format!("model.window.blocks {:?} outside the {n} temporal self-attention blocks", w.blocks),
        );
        let r = &self.rank;
        if r.applied {
            req(
                r.k >= 1 && r.k <= self.n_rois,
                format!("model.rank.k = {} must lie in [1, n_rois = {}]", r.k, self.n_rois),
            );
        }
        req(
            self.classifier_sizes.last() == Some(&1),
            "model.classifier_sizes must end with 1".into(),
        );
        req(
            self.classifier_sizes.iter().all(|&c| c >= 1),
            "model.classifier_sizes entries must be positive".into(),
        );
        errs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    Acc,
    Auc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Training segment length, must equal `model.seq_len`.
    pub segment_length: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub selection_metric: SelectionMetric,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 1e-5,
            batch_size: 128,
            segment_length: 60,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            selection_metric: SelectionMetric::Acc,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Vec<String> {
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push("train.batch_size must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            errs.push(format!("train.learning_rate = {} is invalid", self.learning_rate));
        }
        if self.segment_length != model.seq_len {
            errs.push(format!(
                "train.segment_length = {} differs from model.seq_len = {}",
                self.segment_length, model.seq_len
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            errs.push(format!("train.beta1 = {} outside [0, 1)", self.beta1));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            errs.push(format!("train.beta2 = {} outside [0, 1)", self.beta2));
        }
        if self.adam_eps <= 0.0 {
            errs.push("train.adam_eps must be positive".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            errs.push(format!("train.val_fraction = {} outside (0, 1)", self.val_fraction));
        }
        errs
    }
}
