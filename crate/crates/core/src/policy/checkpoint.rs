use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LoraAdapter, ModelConfig, ModelError, PolicyModel};
use crate::autodiff::{hex_digest, Tensor};

const FORMAT: &str = "stylealign-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayRecord {
    pub shape: Vec<usize>,
    pub trainable: bool,
    /// Little-endian f64, base64.
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterRecord {
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
    pub a: ArrayRecord,
    pub b: ArrayRecord,
}

/// Serialized model: config, base weights, adapters kept apart from the
/// base, and any extra named heads (value or reward heads).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub base: BTreeMap<String, ArrayRecord>,
    pub adapters: Vec<AdapterRecord>,
    pub heads: BTreeMap<String, ArrayRecord>,
    pub checksum: String,
}

fn encode(t: &Tensor) -> ArrayRecord {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    ArrayRecord {
        shape: t.shape().to_vec(),
        trainable: t.requires_grad,
        data: STANDARD.encode(bytes),
    }
}

fn decode(name: &str, r: &ArrayRecord) -> Result<Tensor, ModelError> {
    let bytes = STANDARD
        .decode(&r.data)
        .map_err(|e| ModelError::Checkpoint(format!("{name}: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(ModelError::Checkpoint(format!("{name}: truncated array")));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(r.shape.clone(), data)
        .map(|t| t.with_requires_grad(r.trainable))
        .map_err(|e| ModelError::Checkpoint(format!("{name}: {e}")))
}

impl Checkpoint {
    pub fn from_model(model: &PolicyModel, heads: &BTreeMap<String, Tensor>) -> Self {
        let mut c = Self {
            format: FORMAT.into(),
            config: model.config.clone(),
            base: model.weights().iter().map(|(k, t)| (k.clone(), encode(t))).collect(),
            adapters: model
                .adapters()
                .iter()
                .map(|a| AdapterRecord {
                    target: a.target.clone(),
                    rank: a.rank,
                    alpha: a.alpha,
                    a: encode(&a.a),
                    b: encode(&a.b),
                })
                .collect(),
            heads: heads.iter().map(|(k, t)| (k.clone(), encode(t))).collect(),
            checksum: String::new(),
        };
        c.checksum = c.compute_checksum();
        c
    }

    fn compute_checksum(&self) -> String {
        let mut body = self.clone();
        body.checksum.clear();
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&body).expect("checkpoint serializes"));
        hex_digest(h)
    }

    pub fn verify(&self) -> Result<(), ModelError> {
        if self.format != FORMAT {
            return Err(ModelError::Checkpoint(format!("unsupported format {:?}", self.format)));
        }
        let expect = self.compute_checksum();
        if expect != self.checksum {
            return Err(ModelError::Checkpoint("checksum mismatch".into()));
        }
        Ok(())
    }

    pub fn into_model(self) -> Result<(PolicyModel, BTreeMap<String, Tensor>), ModelError> {
        self.verify()?;
        let base = self
            .base
            .iter()
            .map(|(k, r)| decode(k, r).map(|t| (k.clone(), t)))
            .collect::<Result<BTreeMap<_, _>, _>>()?;
        let adapters = self
            .adapters
            .iter()
            .map(|r| {
                Ok(LoraAdapter {
                    target: r.target.clone(),
                    rank: r.rank,
                    alpha: r.alpha,
                    a: decode(&r.target, &r.a)?,
                    b: decode(&r.target, &r.b)?,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        let heads = self
            .heads
            .iter()
            .map(|(k, r)| decode(k, r).map(|t| (k.clone(), t)))
            .collect::<Result<BTreeMap<_, _>, _>>()?;
        Ok((PolicyModel::from_parts(self.config, base, adapters)?, heads))
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &PolicyModel,
    heads: &BTreeMap<String, Tensor>,
) -> Result<Checkpoint, ModelError> {
    let c = Checkpoint::from_model(model, heads);
    let text = serde_json::to_string(&c).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    fs::write(path, text)?;
    Ok(c)
}

pub fn load_checkpoint(path: &Path) -> Result<(PolicyModel, BTreeMap<String, Tensor>), ModelError> {
    let text = fs::read_to_string(path)?;
    let c: Checkpoint =
        serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    c.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Parameters;
    use crate::policy::LayerSelection;

    #[test]
    fn round_trip_preserves_everything() {
        let cfg = ModelConfig {
            vocab_size: 10,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            n_layers: 2,
            max_seq_len: 8,
            seed: 1,
        };
        let mut m = PolicyModel::new(cfg).unwrap();
        m.attach_lora(&LayerSelection::top(1, 2).unwrap(), 2, 4.0).unwrap();
        let mut heads = BTreeMap::new();
        heads.insert("value.w".to_string(), Tensor::full(&[8, 1], 0.25));
        let c = Checkpoint::from_model(&m, &heads);
        let (m2, h2) = c.clone().into_model().unwrap();
        assert_eq!(m2, m);
        assert_eq!(h2, heads);
        assert_eq!(m2.census(), m.census());

        let mut bad = c;
        bad.base.get_mut("head").unwrap().shape = vec![10, 8];
        assert!(bad.into_model().is_err());
    }
}
