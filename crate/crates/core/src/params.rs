//! Named parameter storage and the per-forward binding onto a tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Checkpoint, DType, Entry, Mode, Tape, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BnId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    running: Vec<RunningStats>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    /// Weight of shape `[fan_in, fan_out]` with He-normal entries.
    pub fn add_kaiming<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        self.add_normal(name, &[fan_in, fan_out], std, rng)
    }

    pub fn add_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(shape, |_| normal.sample(rng));
        self.add(name, t)
    }

    pub fn add_running(&mut self, name: impl Into<String>, c: usize) -> BnId {
        self.running.push(RunningStats {
            name: name.into(),
            mean: vec![0.0; c],
            var: vec![1.0; c],
        });
        BnId(self.running.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn running(&self, id: BnId) -> &RunningStats {
        &self.running[id.0]
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn running_mut(&mut self, id: BnId) -> &mut RunningStats {
        &mut self.running[id.0]
    }

    /// Total trainable scalars (running statistics excluded).
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape` as a gradient-carrying leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Copies leaf gradients from `tape` into each parameter's grad slot.
    pub fn collect_grads(&mut self, tape: &Tape, vars: &[Var]) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            if let Some(g) = tape.grad(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_bn_updates(&mut self, updates: &[(BnId, BatchStats)]) {
        for (id, stats) in updates {
            let r = &mut self.running[id.0];
            for (m, b) in r.mean.iter_mut().zip(&stats.mean) {
                *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b;
            }
            for (v, b) in r.var.iter_mut().zip(&stats.var) {
                *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * b;
            }
        }
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint) {
        for (name, t) in self.names.iter().zip(&self.tensors) {
            ckpt.push(Entry::from_tensor(name, t, DType::F64));
        }
        for r in &self.running {
            let c = r.mean.len();
            let mean = Tensor::new(vec![c], r.mean.clone()).expect("running mean");
            let var = Tensor::new(vec![c], r.var.clone()).expect("running var");
            ckpt.push(Entry::from_tensor(&format!("{}.running_mean", r.name), &mean, DType::F64));
            ckpt.push(Entry::from_tensor(&format!("{}.running_var", r.name), &var, DType::F64));
        }
    }

    /// Overwrites values from a checkpoint; every name and shape must match.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let loaded = ckpt.tensor(name)?;
            if loaded.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(loaded.data());
        }
        for r in &mut self.running {
            let mean = ckpt.tensor(&format!("{}.running_mean", r.name))?;
            let var = ckpt.tensor(&format!("{}.running_var", r.name))?;
            if mean.numel() != r.mean.len() || var.numel() != r.var.len() {
                return Err(Error::Config(format!("running stats {} size mismatch", r.name)));
            }
            r.mean.copy_from_slice(mean.data());
            r.var.copy_from_slice(var.data());
        }
        Ok(())
    }
}

/// One forward pass: parameter leaves on a tape plus collected BN statistics.
pub struct Forward<'t> {
    pub tape: &'t mut Tape,
    vars: Vec<Var>,
    pub mode: Mode,
    pub bn_updates: Vec<(BnId, BatchStats)>,
}

impl<'t> Forward<'t> {
    /// Binds `store` onto `tape`.
    pub fn new(tape: &'t mut Tape, store: &ParamStore, mode: Mode) -> Self {
        let vars = store.bind(tape);
        Self::with_vars(tape, vars, mode)
    }

    /// Uses already-recorded parameter leaves, aligned with the store order.
    pub fn with_vars(tape: &'t mut Tape, vars: Vec<Var>, mode: Mode) -> Self {
        Self {
            tape,
            vars,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Returns the parameter leaves and the collected BN statistics.
    pub fn finish(self) -> (Vec<Var>, Vec<(BnId, BatchStats)>) {
        (self.vars, self.bn_updates)
    }
}
