//! Named parameter store shared by every model in the crate, plus the
//! versioned JSON checkpoint format.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of named parameters with matching gradient buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint is missing parameter {0}")]
    Missing(String),
    #[error("shape mismatch for {name}: checkpoint {found:?}, model {expected:?}")]
    Shape { name: String, found: Vec<usize>, expected: Vec<usize> },
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter name {name}");
        let grad = Tensor::zeros(&value.shape);
        let id = self.entries.len();
        self.by_name.insert(name.to_string(), id);
        self.entries.push(ParamEntry { name: name.to_string(), value, grad });
        ParamId(id)
    }

    /// Uniform init in [-bound, bound] with bound = sqrt(1 / fan_in).
    pub fn add_linear_init(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::from_vec(shape, data))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].grad
    }

    /// Value and gradient of one parameter, borrowed simultaneously.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&Tensor, &mut Tensor) {
        let e = &mut self.entries[id.0];
        (&e.value, &mut e.grad)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.entries.iter().all(|e| e.grad.data.iter().all(|v| v.is_finite()))
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut Vec<ParamEntry> {
        &mut self.entries
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            params: self
                .entries
                .iter()
                .map(|e| (e.name.clone(), CheckpointParam { shape: e.value.shape.clone(), data: e.value.data.clone() }))
                .collect(),
        };
        serde_json::to_writer(&mut w, &file)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    /// Load values into an already-built store; every parameter must be
    /// present with a matching shape.
    pub fn load<R: BufRead>(&mut self, r: R) -> Result<(), CheckpointError> {
        let file: CheckpointFile = serde_json::from_reader(r)?;
        if file.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(file.version));
        }
        for e in &mut self.entries {
            let p = file.params.get(&e.name).ok_or_else(|| CheckpointError::Missing(e.name.clone()))?;
            if p.shape != e.value.shape {
                return Err(CheckpointError::Shape {
                    name: e.name.clone(),
                    found: p.shape.clone(),
                    expected: e.value.shape.clone(),
                });
            }
            e.value.data = p.data.clone();
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    params: HashMap<String, CheckpointParam>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointParam {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample_store(seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamSet::new();
        s.add_linear_init("a.w", &[3, 4], 3, &mut rng);
        s.add_linear_init("a.b", &[4], 1, &mut rng);
        s
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let store = sample_store(1);
        let mut buf = Vec::new();
        store.save(&mut buf).unwrap();
        let mut other = sample_store(2);
        other.load(std::io::BufReader::new(&buf[..])).unwrap();
        for (a, b) in store.entries().iter().zip(other.entries()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let store = sample_store(1);
        let mut buf = Vec::new();
        store.save(&mut buf).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut other = ParamSet::new();
        other.add_linear_init("a.w", &[4, 4], 4, &mut rng);
        other.add_linear_init("a.b", &[4], 1, &mut rng);
        match other.load(std::io::BufReader::new(&buf[..])) {
            Err(CheckpointError::Shape { name, .. }) => assert_eq!(name, "a.w"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }
}
