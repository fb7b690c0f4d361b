//! JSON checkpoints: configuration plus every named tensor, in store order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const FORMAT: &str = "dsrd-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<NamedTensor>,
}

/// Serializes `model`; float text round-trips to the same bits.
pub fn to_json(model: &Model) -> Result<String> {
    let tensors = model
        .params()
        .iter()
        .map(|(_, name, t)| NamedTensor {
            name: name.to_string(),
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().to_vec(),
        })
        .collect();
    let ck = Checkpoint {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config().clone(),
        tensors,
    };
    let mut s = serde_json::to_string_pretty(&ck)?;
    s.push('\n');
    Ok(s)
}

pub fn from_json(text: &str) -> Result<Model> {
    let ck: Checkpoint =
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if ck.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "unexpected format {:?}",
            ck.format
        )));
    }
    if ck.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {}",
            ck.version
        )));
    }
    let mut tensors = Vec::with_capacity(ck.tensors.len());
    for t in ck.tensors {
        if t.rows * t.cols != t.data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has {} values for {}×{}",
                t.name,
                t.data.len(),
                t.rows,
                t.cols
            )));
        }
        tensors.push((t.name, Tensor::from_vec(t.rows, t.cols, t.data)));
    }
    Model::from_parts(ck.config, tensors)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_json(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig {
            dim: 8,
            heads: 2,
            time_dim: 4,
            node_dim: 3,
            edge_dim: 2,
            seed: 11,
            ..ModelConfig::default()
        };
        let m = Model::new(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save(&m, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.params().checksum(), m.params().checksum());
        assert_eq!(to_json(&back).unwrap(), to_json(&m).unwrap());
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(matches!(from_json("{}"), Err(Error::Checkpoint(_))));
        let m = Model::new(ModelConfig {
            dim: 4,
            heads: 1,
            time_dim: 2,
            ..ModelConfig::default()
        })
        .unwrap();
        let text = to_json(&m).unwrap().replace(FORMAT, "other");
        assert!(matches!(from_json(&text), Err(Error::Checkpoint(_))));
    }
}
