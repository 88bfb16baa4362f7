//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "CMFCKPT\0"
//! version  u32
//! hlen     u64      length of the JSON header
//! header   hlen bytes of JSON (configs, epoch counters, parameter names and shapes)
//! values   f64 per parameter entry, parameters in header order
//! adam     optional: first moments, then second moments, same order
//! ```
//!
//! The encoding is a pure function of the checkpoint contents.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CmRobertaModel, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{AdamState, TrainConfig};

pub const MAGIC: &[u8; 8] = b"CMFCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: Option<TrainConfig>,
    epochs_completed: usize,
    best_epoch: usize,
    params: Vec<ParamEntry>,
    adam_step: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub epochs_completed: usize,
    pub best_epoch: usize,
    pub params: Vec<(String, Tensor)>,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn capture(model: &CmRobertaModel) -> Self {
        Self {
            model_config: model.config().clone(),
            train_config: None,
            epochs_completed: 0,
            best_epoch: 0,
            params: model
                .params()
                .iter()
                .map(|(_, p)| (p.name().to_string(), p.value().clone()))
                .collect(),
            adam: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let Some(adam) = &self.adam {
            let ok = adam.m.len() == self.params.len()
                && adam.v.len() == self.params.len()
                && self
                    .params
                    .iter()
                    .zip(adam.m.iter().zip(&adam.v))
                    .all(|((_, t), (m, v))| m.len() == t.len() && v.len() == t.len());
            if !ok {
                return Err(Error::Checkpoint("Adam state does not match parameters".into()));
            }
        }
        let header = Header {
            model: self.model_config.clone(),
            train: self.train_config.clone(),
            epochs_completed: self.epochs_completed,
            best_epoch: self.best_epoch,
            params: self
                .params
                .iter()
                .map(|(name, t)| ParamEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            adam_step: self.adam.as_ref().map(|a| a.t),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let n: usize = self.params.iter().map(|(_, t)| t.len()).sum();
        let blobs = if self.adam.is_some() { 3 * n } else { n };
        let mut out = Vec::with_capacity(20 + json.len() + 8 * blobs);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for (_, t) in &self.params {
            put(t.data());
        }
        if let Some(adam) = &self.adam {
            adam.m.iter().for_each(|m| put(m));
            adam.v.iter().for_each(|v| put(v));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic bytes, not a checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let body = &bytes[20..];
        let hlen = usize::try_from(hlen)
            .ok()
            .filter(|&h| h <= body.len())
            .ok_or_else(|| corrupt("header length exceeds file size"))?;
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut values = body[hlen..].chunks_exact(8);
        if !values.remainder().is_empty() {
            return Err(corrupt("truncated value section"));
        }
        let sizes: Vec<usize> = header
            .params
            .iter()
            .map(|p| p.shape.iter().product())
            .collect();
        let n: usize = sizes.iter().sum();
        let expected = if header.adam_step.is_some() { 3 * n } else { n };
        if values.len() != expected {
            return Err(Error::Checkpoint(format!(
                "value section holds {} numbers, header implies {expected}",
                values.len()
            )));
        }
        let mut take = |k: usize| -> Vec<f64> {
            (&mut values)
                .take(k)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect()
        };
        let mut params = Vec::with_capacity(sizes.len());
        for (entry, &k) in header.params.iter().zip(&sizes) {
            let data = take(k);
            if !data.iter().all(|v| v.is_finite()) {
                return Err(Error::Checkpoint(format!("non-finite value in {}", entry.name)));
            }
            let t = Tensor::new(entry.shape.clone(), data)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", entry.name)))?;
            params.push((entry.name.clone(), t));
        }
        let adam = header.adam_step.map(|t| {
            let m: Vec<Vec<f64>> = sizes.iter().map(|&k| take(k)).collect();
            let v: Vec<Vec<f64>> = sizes.iter().map(|&k| take(k)).collect();
            AdamState { m, v, t }
        });
        if let Some(a) = &adam {
            if !a.m.iter().chain(&a.v).flatten().all(|x| x.is_finite()) {
                return Err(corrupt("non-finite optimiser moment"));
            }
        }
        Ok(Self {
            model_config: header.model,
            train_config: header.train,
            epochs_completed: header.epochs_completed,
            best_epoch: header.best_epoch,
            params,
            adam,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model and overwrites its parameters with the stored values.
    pub fn to_model(&self) -> Result<CmRobertaModel> {
        let mut model = CmRobertaModel::new(self.model_config.clone())
            .map_err(|e| Error::Checkpoint(format!("stored model config: {e}")))?;
        let ids: Vec<_> = model.params().ids().collect();
        if ids.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                ids.len()
            )));
        }
        for (id, (name, value)) in ids.into_iter().zip(&self.params) {
            let store = model.params_mut();
            if store.name(id) != name || store.value(id).shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {:?} does not match model parameter {} {:?}",
                    value.shape(),
                    store.name(id),
                    store.value(id).shape()
                )));
            }
            store.set_value(id, value.clone())?;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> CmRobertaModel {
        CmRobertaModel::new(ModelConfig {
            d_audio_in: 5,
            d_text_in: 4,
            d_model: 4,
            n_sca_layers: 1,
            n_classes: 3,
            audio_lld_dim: 2,
            seed: 9,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn with_adam() -> Checkpoint {
        let m = model();
        let mut ck = Checkpoint::capture(&m);
        let mut adam = AdamState::new(m.params());
        adam.t = 7;
        adam.m[0][1] = 0.25;
        adam.v[2][0] = 1e-9;
        ck.adam = Some(adam);
        ck.train_config = Some(TrainConfig::default());
        ck.epochs_completed = 12;
        ck.best_epoch = 4;
        ck
    }

    #[test]
    fn roundtrip_and_determinism() {
        let ck = with_adam();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(bytes, ck.to_bytes().unwrap());
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let rebuilt = back.to_model().unwrap();
        for ((_, a), (_, b)) in rebuilt.params().iter().zip(model().params().iter()) {
            assert_eq!(a.value(), b.value());
        }
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = with_adam().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version"));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("moment"));
        let mut bad = bytes;
        let hlen = u64::from_le_bytes(bad[12..20].try_into().unwrap()) as usize;
        bad[20 + hlen..20 + hlen + 8].copy_from_slice(&f64::INFINITY.to_le_bytes());
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn mismatched_parameters_are_rejected() {
        let mut ck = Checkpoint::capture(&model());
        ck.params[0].1 = Tensor::zeros(&[1, 1]);
        assert!(matches!(ck.to_model(), Err(Error::Checkpoint(_))));
        let mut ck = Checkpoint::capture(&model());
        ck.params.pop();
        assert!(ck.to_model().is_err());
    }
}
