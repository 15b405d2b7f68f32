//! Named parameter storage and the per-forward execution context.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tencore::{NormStats, Tape, Tensor, Var};

use crate::error::{AtPath, Error, Result};

/// Insertion-ordered map from hierarchical path (`decoder.up1.conv1.weight`)
/// to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor) -> Result<()> {
        let path = path.into();
        if self.index.contains_key(&path) {
            return Err(Error::config(format!("duplicate parameter path {path}")));
        }
        self.index.insert(path.clone(), self.names.len());
        self.names.push(path);
        self.tensors.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, path: &str) -> Option<usize> {
        self.index.get(path).copied()
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.position(path).map(|i| &self.tensors[i])
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    /// Replace the value at `path`, keeping its shape.
    pub fn set(&mut self, path: &str, t: Tensor) -> Result<()> {
        let i = self
            .position(path)
            .ok_or_else(|| Error::config(format!("unknown parameter path {path}")))?;
        if self.tensors[i].shape() != t.shape() {
            return Err(Error::config(format!(
                "{path}: expected shape {:?}, got {:?}",
                self.tensors[i].shape(),
                t.shape()
            )));
        }
        self.tensors[i] = t;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Total scalar count over all stored arrays.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Creates parameters in declaration order from one seeded stream, so the
/// initial weights depend only on the seed and the architecture.
pub struct Builder {
    pub params: ParamStore,
    pub buffers: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Self {
            params: ParamStore::new(),
            buffers: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Kaiming-uniform weights, bound `sqrt(6 / fan_in)`.
    pub fn kaiming(&mut self, path: String, shape: &[usize], fan_in: usize) -> Result<()> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let t = Tensor::rand_uniform(shape.to_vec(), -bound, bound, &mut self.rng);
        self.params.insert(path, t)
    }

    pub fn normal(&mut self, path: String, shape: &[usize], std: f64) -> Result<()> {
        let t = Tensor::rand_normal(shape.to_vec(), 0.0, std, &mut self.rng);
        self.params.insert(path, t)
    }

    pub fn constant(&mut self, path: String, shape: &[usize], value: f64) -> Result<()> {
        self.params.insert(path, Tensor::full(shape.to_vec(), value))
    }

    pub fn buffer(&mut self, path: String, t: Tensor) -> Result<()> {
        self.buffers.insert(path, t)
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// What a forward pass is for.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mode {
    /// Batch norm normalizes with batch statistics (and reports them) instead
    /// of its running estimates.
    pub batch_stats: bool,
    /// Drop probability at every dropout site.
    pub dropout: f64,
}

impl Mode {
    pub fn train(dropout: f64) -> Self {
        Self {
            batch_stats: true,
            dropout,
        }
    }

    pub fn eval() -> Self {
        Self {
            batch_stats: false,
            dropout: 0.0,
        }
    }

    /// Inference with dropout left on, as used for test-time sampling.
    pub fn sampling(dropout: f64) -> Self {
        Self {
            batch_stats: false,
            dropout,
        }
    }
}

/// State threaded through one forward pass: the tape, the parameter leaves
/// registered so far, the dropout stream and collected batch statistics.
pub struct Ctx<'m> {
    pub tape: Tape,
    params: &'m ParamStore,
    buffers: &'m ParamStore,
    leaves: HashMap<usize, Var>,
    mode: Mode,
    rng: ChaCha8Rng,
    stats: Vec<(String, NormStats)>,
}

impl<'m> Ctx<'m> {
    pub fn new(params: &'m ParamStore, buffers: &'m ParamStore, mode: Mode, seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            params,
            buffers,
            leaves: HashMap::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            stats: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// The trainable leaf for `path`, registered on first use.
    pub fn param(&mut self, path: &str) -> Result<Var> {
        let i = self
            .params
            .position(path)
            .ok_or_else(|| Error::config(format!("missing parameter {path}")))?;
        if let Some(&v) = self.leaves.get(&i) {
            return Ok(v);
        }
        let v = self.tape.param(self.params.tensor(i).clone());
        self.leaves.insert(i, v);
        Ok(v)
    }

    pub fn buffer(&self, path: &str) -> Result<&'m Tensor> {
        self.buffers
            .get(path)
            .ok_or_else(|| Error::config(format!("missing buffer {path}")))
    }

    pub fn input(&mut self, x: Tensor) -> Var {
        self.tape.constant(x)
    }

    pub fn dropout(&mut self, path: &str, x: Var) -> Result<Var> {
        let p = self.mode.dropout;
        self.tape.dropout(x, p, p > 0.0, &mut self.rng).at(path)
    }

    pub(crate) fn record_stats(&mut self, path: String, stats: NormStats) {
        self.stats.push((path, stats));
    }

    /// Batch statistics observed by batch-norm layers, keyed by layer path.
    pub fn batch_stats(&self) -> &[(String, NormStats)] {
        &self.stats
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Gradients of `loss` for every stored parameter, in store order.
    /// Parameters the pass never touched get zeros.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Tensor>> {
        let mut grads = self.tape.backward(loss).at("loss")?;
        Ok((0..self.params.len())
            .map(|i| match self.leaves.get(&i).and_then(|&v| grads.take(v)) {
                Some(g) => g,
                None => Tensor::zeros(self.params.tensor(i).shape().to_vec()),
            })
            .collect())
    }
}
