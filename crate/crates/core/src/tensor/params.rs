use std::ops::{Deref, DerefMut};

use super::{Gradients, NormKind, Result, Tape, Tensor, TensorError, Var};

/// Index of a named tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

/// Ordered collection of named model tensors: trainable parameters plus
/// non-trainable buffers such as batch-norm running statistics.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

/// Batch-norm running-statistics update produced by a training-mode forward.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Whether batch norm normalizes with batch statistics or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.push(name.into(), tensor, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.push(name.into(), tensor, false)
    }

    fn push(&mut self, name: String, tensor: Tensor, trainable: bool) -> ParamId {
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        self.entries.push(Entry { name, tensor, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.numel()).sum()
    }

    /// Named tensors in insertion order (checkpoint order).
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    /// Replace every tensor from a name -> tensor list; names and shapes must
    /// match the store exactly.
    pub fn load_named(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.entries.len() {
            return Err(TensorError::Checkpoint(format!(
                "{} tensors in checkpoint, model has {}",
                named.len(),
                self.entries.len()
            )));
        }
        for (name, tensor) in &named {
            let id = self
                .find(name)
                .ok_or_else(|| TensorError::Checkpoint(format!("unknown tensor {name}")))?;
            let current = &self.entries[id.0].tensor;
            if current.shape() != tensor.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "{name}: shape {:?} in checkpoint, model expects {:?}",
                    tensor.shape(),
                    current.shape()
                )));
            }
        }
        for (name, tensor) in named {
            let id = self.find(&name).expect("checked above");
            let data = tensor.into_data();
            self.entries[id.0].tensor.data_mut().copy_from_slice(&data);
        }
        Ok(())
    }

    /// Exponential moving update of running statistics.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate], momentum: f64) {
        for u in updates {
            for (id, fresh) in [(u.mean_id, &u.mean), (u.var_id, &u.var)] {
                let t = self.entries[id.0].tensor.data_mut();
                for (r, f) in t.iter_mut().zip(fresh) {
                    *r = (1.0 - momentum) * *r + momentum * f;
                }
            }
        }
    }

    /// Gradient for each entry (None for buffers and unreached parameters).
    pub fn collect_grads(&self, vars: &[Var], grads: &mut Gradients) -> Vec<Option<Vec<f64>>> {
        vars.iter()
            .zip(&self.entries)
            .map(|(v, e)| if e.trainable { grads.take(*v) } else { None })
            .collect()
    }
}

/// A forward pass in progress: a tape with the store's tensors bound as leaves.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    vars: Vec<Var>,
    mode: Mode,
    stats: Vec<StatUpdate>,
}

impl<'a> Ctx<'a> {
    /// Bind every store entry onto a fresh tape. Trainable entries are tracked
    /// leaves when `track` is set.
    pub fn new(store: &'a ParamStore, mode: Mode, track: bool) -> Self {
        let mut tape = Tape::new();
        let vars = store
            .entries
            .iter()
            .map(|e| {
                let mut t = e.tensor.clone();
                t.set_requires_grad(track && e.trainable);
                tape.leaf(t)
            })
            .collect();
        Self {
            tape,
            store,
            vars,
            mode,
            stats: Vec::new(),
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    /// Batch norm that uses batch statistics in `Train` mode (recording a
    /// running-statistics update) and the running statistics in `Eval` mode.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running: (ParamId, ParamId),
        kind: NormKind,
    ) -> Result<Var> {
        let (g, b) = (self.p(gamma), self.p(beta));
        match self.mode {
            Mode::Train => {
                let (out, mean, var) = self.tape.norm(x, g, b, kind)?;
                self.stats.push(StatUpdate {
                    mean_id: running.0,
                    var_id: running.1,
                    mean,
                    var,
                });
                Ok(out)
            }
            Mode::Eval => {
                let mean = self.store.get(running.0).data();
                let var = self.store.get(running.1).data();
                self.tape.norm_frozen(x, g, b, kind, mean, var)
            }
        }
    }

    /// Normalization that always uses the statistics of `x` (layer/group norm).
    pub fn norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, kind: NormKind) -> Result<Var> {
        let (g, b) = (self.p(gamma), self.p(beta));
        Ok(self.tape.norm(x, g, b, kind)?.0)
    }

    pub fn take_stats(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stats)
    }
}

impl Deref for Ctx<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Ctx<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}
