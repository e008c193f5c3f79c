//! Flat JSON parameter manifest: tensor name → shape → row-major `f64` data,
//! plus the RNG seed the parameters came from.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::block::MoeParams;
use super::expert::SwiGluExpert;
use super::gate::GateParams;
use super::linalg::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seed: u64,
    pub tensors: BTreeMap<String, TensorEntry>,
}

impl Checkpoint {
    pub fn new(seed: u64) -> Self {
        Checkpoint {
            seed,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, m: &Mat) {
        self.tensors.insert(
            name.into(),
            TensorEntry {
                shape: vec![m.rows(), m.cols()],
                data: m.as_slice().to_vec(),
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<Mat> {
        let entry = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::invalid("checkpoint", format!("missing tensor {name:?}")))?;
        match entry.shape[..] {
            [rows, cols] => Mat::from_vec(rows, cols, entry.data.clone()).ok_or_else(|| {
                Error::invalid(
                    "checkpoint",
                    format!("tensor {name:?} data does not match its shape"),
                )
            }),
            _ => Err(Error::invalid(
                "checkpoint",
                format!("tensor {name:?} is not two-dimensional"),
            )),
        }
    }

    /// Stores every tensor of `params` under `prefix`.
    pub fn insert_block(&mut self, prefix: &str, params: &MoeParams) {
        for (name, m) in params.tensors() {
            self.insert(format!("{prefix}{name}"), m);
        }
    }

    /// Reads back a block stored with [`Checkpoint::insert_block`].
    pub fn block(&self, prefix: &str) -> Result<MoeParams> {
        let gate = GateParams {
            weight: self.get(&format!("{prefix}gate.weight"))?,
        };
        let expert = |p: String| -> Result<SwiGluExpert> {
            Ok(SwiGluExpert {
                gate_proj: self.get(&format!("{p}gate_proj"))?,
                up_proj: self.get(&format!("{p}up_proj"))?,
                down_proj: self.get(&format!("{p}down_proj"))?,
            })
        };
        let experts = (0..gate.experts())
            .map(|i| expert(format!("{prefix}expert.{i}.")))
            .collect::<Result<Vec<_>>>()?;
        let shared_key = format!("{prefix}shared.gate_proj");
        let shared = if self.tensors.contains_key(&shared_key) {
            Some(expert(format!("{prefix}shared."))?)
        } else {
            None
        };
        let params = MoeParams {
            gate,
            experts,
            shared,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::kernel::BlockDims;

    #[test]
    fn block_survives_a_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dims = BlockDims {
            model_dim: 3,
            experts: 4,
            expert_dim: 2,
            shared_dim: 5,
        };
        let p = MoeParams::random(dims, 0.3, &mut rng);
        let mut ck = Checkpoint::new(9);
        ck.insert_block("block.", &p);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.seed, 9);
        assert_eq!(back.block("block.").unwrap(), p);
        assert!(back.block("other.").is_err());
    }
}
