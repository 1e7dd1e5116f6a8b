//! Checkpoint container.
//!
//! Layout: the 8-byte magic `ROIFMR01`, a little-endian `u64` header
//! length, a JSON header (config, metadata, tensor names and shapes), then
//! every tensor's values as little-endian `f64` in header order. Values are
//! stored as raw bits, so a save/load round trip is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::PhenoStats;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::params::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ROIFMR01";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub epoch: usize,
    pub params: ParamSet,
    pub validation: Option<MetricsReport>,
    pub pheno_stats: PhenoStats,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    epoch: usize,
    validation: Option<MetricsReport>,
    pheno_stats: PhenoStats,
    train_ids: Vec<String>,
    val_ids: Vec<String>,
    tensors: Vec<(String, Vec<usize>)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            validation: self.validation.clone(),
            pheno_stats: self.pheno_stats,
            train_ids: self.train_ids.clone(),
            val_ids: self.val_ids.clone(),
            tensors: self
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + self.params.numel() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut offset = 16 + hlen;
        let mut params = ParamSet::new();
        for (name, shape) in header.tensors {
            let n: usize = shape.iter().product();
            let raw = bytes
                .get(offset..offset + n * 8)
                .ok_or_else(|| bad("truncated tensor data"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(name, Tensor::new(shape, data)?);
            offset += n * 8;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint {
            config: header.config,
            epoch: header.epoch,
            params,
            validation: header.validation,
            pheno_stats: header.pheno_stats,
            train_ids: header.train_ids,
            val_ids: header.val_ids,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_parameters;

    #[test]
    fn roundtrip_is_bit_exact() {
        let config = ModelConfig {
            seq_len: 8,
            n_rois: 3,
            d_model: 4,
            d_a: 4,
            d_ff: 8,
            heads_encoder: 2,
            heads_decoder: 2,
            cnn_channels: vec![2, 2, 4, 4],
            cnn_kernel: 2,
            window: crate::config::WindowConfig::disabled(),
            rank: crate::config::RankConfig::disabled(),
            ..ModelConfig::default()
        };
        let ck = Checkpoint {
            params: init_parameters(&config, 9),
            config,
            epoch: 3,
            validation: Some(crate::metrics::compute_metrics(&[0.1, 0.7], &[0, 1], 0.5).unwrap()),
            pheno_stats: PhenoStats {
                age_mean: 11.0 / 3.0,
                age_std: 0.1,
                iq_mean: 101.0,
                iq_std: 13.3,
            },
            train_ids: vec!["a".into()],
            val_ids: vec!["b".into()],
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
