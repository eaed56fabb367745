//! JSON checkpoints of named tensors. See `docs/checkpoint.md`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::GateParams;
use crate::error::{IcpaError, Result};
use crate::model::{FeatureVocab, ModelConfig, ModelParams};
use crate::nn::{Mlp, Parameters};

pub const CHECKPOINT_FORMAT: &str = "icpa-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Header {
    Model {
        config: ModelConfig,
        num_types: usize,
        /// `(source, feature)` key of every embedding row, in row order.
        vocab: Vec<(usize, u64)>,
    },
    Gate {
        num_sources: usize,
        rep_dim: usize,
        hidden: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub header: Header,
    /// SHA-256 over the tensor bit patterns.
    pub fingerprint: String,
    pub tensors: Vec<NamedTensor>,
}

fn named<P: Parameters>(p: &P) -> Vec<NamedTensor> {
    p.tensors()
        .into_iter()
        .map(|t| NamedTensor {
            name: t.name,
            shape: t.shape,
            data: t.data.to_vec(),
        })
        .collect()
}

/// Copies `tensors` into `target`, requiring identical names and shapes.
fn fill<P: Parameters>(target: &mut P, tensors: &[NamedTensor]) -> Result<()> {
    let expected: Vec<(String, Vec<usize>)> = target
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.shape))
        .collect();
    if expected.len() != tensors.len() {
        return Err(IcpaError::Checkpoint(format!(
            "expected {} tensors, found {}",
            expected.len(),
            tensors.len()
        )));
    }
    for ((name, shape), t) in expected.iter().zip(tensors) {
        if *name != t.name || *shape != t.shape {
            return Err(IcpaError::Checkpoint(format!(
                "tensor {} {:?} does not match expected {name} {shape:?}",
                t.name, t.shape
            )));
        }
        if t.data.len() != shape.iter().product::<usize>() {
            return Err(IcpaError::Checkpoint(format!("tensor {name} has {} values", t.data.len())));
        }
    }
    for (dst, t) in target.slices_mut().into_iter().zip(tensors) {
        dst.copy_from_slice(&t.data);
    }
    Ok(())
}

impl Checkpoint {
    pub fn of_model(model: &ModelParams) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            header: Header::Model {
                config: model.config.clone(),
                num_types: model.num_types,
                vocab: model.vocab.keys(),
            },
            fingerprint: model.fingerprint(),
            tensors: named(model),
        }
    }

    pub fn of_gate(gate: &GateParams) -> Self {
        let layers = &gate.mlp.layers;
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            header: Header::Gate {
                num_sources: gate.num_sources,
                rep_dim: layers.first().map_or(0, |l| l.in_dim),
                hidden: layers[..layers.len().saturating_sub(1)].iter().map(|l| l.out_dim).collect(),
            },
            fingerprint: gate.fingerprint(),
            tensors: named(gate),
        }
    }

    fn check(&self, restored: String) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(IcpaError::Checkpoint(format!("unknown format {}", self.format)));
        }
        if restored != self.fingerprint {
            return Err(IcpaError::Checkpoint("fingerprint mismatch".into()));
        }
        Ok(())
    }

    pub fn to_model(&self) -> Result<ModelParams> {
        let Header::Model {
            config,
            num_types,
            vocab,
        } = &self.header
        else {
            return Err(IcpaError::Checkpoint("not a model checkpoint".into()));
        };
        config.validate()?;
        let in_dim = config.embed_dim * (1 + num_types);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = ModelParams {
            config: config.clone(),
            num_types: *num_types,
            vocab: Arc::new(FeatureVocab::from_keys(vocab.clone())),
            embeddings: vec![0.0; vocab.len() * config.embed_dim],
            tower_a: Mlp::init(in_dim, &config.hidden_dims, true, &mut rng),
            tower_b: Mlp::init(in_dim, &config.hidden_dims, true, &mut rng),
        };
        fill(&mut model, &self.tensors)?;
        self.check(model.fingerprint())?;
        Ok(model)
    }

    pub fn to_gate(&self) -> Result<GateParams> {
        let Header::Gate {
            num_sources,
            rep_dim,
            hidden,
        } = &self.header
        else {
            return Err(IcpaError::Checkpoint("not a gate checkpoint".into()));
        };
        if *num_sources < 2 || *rep_dim == 0 {
            return Err(IcpaError::Checkpoint("gate needs two sources and a positive input size".into()));
        }
        let mut gate = GateParams::new(*rep_dim, hidden, *num_sources, 0);
        fill(&mut gate, &self.tensors)?;
        self.check(gate.fingerprint())?;
        Ok(gate)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
