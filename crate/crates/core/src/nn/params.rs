use std::collections::HashMap;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state, e.g. batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Ordered, uniquely named parameters of a model.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, kind });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_param",
                format!("{}: {:?} vs {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.iter().filter(|(_, p)| p.kind == ParamKind::Trainable)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.trainable().map(|(id, _)| id).collect()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|(_, p)| p.value.numel()).sum()
    }

    pub fn num_buffer(&self) -> usize {
        self.iter()
            .filter(|(_, p)| p.kind == ParamKind::Buffer)
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    kind: p.kind,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Deterministic parameter initialisation. Each tensor draws from its own
/// stream keyed by (seed, name), so values do not depend on build order or dtype.
pub struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub seed: u64,
}

impl<T: Scalar> Init<'_, T> {
    /// He-uniform: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn he_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut rng = rng_for(self.seed, name);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.store
            .add(name, Tensor::from_f64(shape.to_vec(), &data)?, ParamKind::Trainable)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.add(
            name,
            Tensor::full(shape.to_vec(), T::from_f64(value)),
            ParamKind::Trainable,
        )
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.add(
            name,
            Tensor::full(shape.to_vec(), T::from_f64(value)),
            ParamKind::Buffer,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running-statistic update produced by a batch-norm layer in training mode.
#[derive(Debug, Clone)]
pub struct StatUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// One forward pass: a tape with the model's parameters bound as leaves.
pub struct Session<'a, T> {
    pub tape: &'a mut Tape<T>,
    vars: Vec<Var>,
    pub mode: Mode,
    stat_updates: Vec<StatUpdate<T>>,
    layer_macs: Vec<(String, u64)>,
    layer_index: HashMap<String, usize>,
}

impl<'a, T: Scalar> Session<'a, T> {
    /// Binds trainable parameters as differentiable leaves and buffers as constants.
    pub fn new(tape: &'a mut Tape<T>, store: &ParamStore<T>, mode: Mode) -> Self {
        let vars = store
            .iter()
            .map(|(_, p)| match p.kind {
                ParamKind::Trainable => tape.param(p.value.clone()),
                ParamKind::Buffer => tape.constant(p.value.clone()),
            })
            .collect();
        Self::from_vars(tape, vars, mode)
    }

    /// Binds trainable parameters to caller-provided vars (in
    /// [`ParamStore::trainable`] order); buffers become constants.
    pub fn with_trainable(
        tape: &'a mut Tape<T>,
        store: &ParamStore<T>,
        trainable: &[Var],
        mode: Mode,
    ) -> Result<Self> {
        let mut it = trainable.iter();
        let mut vars = Vec::with_capacity(store.len());
        for (_, p) in store.iter() {
            let v = match p.kind {
                ParamKind::Trainable => {
                    let v = *it
                        .next()
                        .ok_or_else(|| Error::invalid("too few trainable vars"))?;
                    if tape.shape(v) != p.value.shape() {
                        return Err(Error::shape(
                            "bind",
                            format!("{}: {:?} vs {:?}", p.name, tape.shape(v), p.value.shape()),
                        ));
                    }
                    v
                }
                ParamKind::Buffer => tape.constant(p.value.clone()),
            };
            vars.push(v);
        }
        if it.next().is_some() {
            return Err(Error::invalid("too many trainable vars"));
        }
        Ok(Self::from_vars(tape, vars, mode))
    }

    fn from_vars(tape: &'a mut Tape<T>, vars: Vec<Var>, mode: Mode) -> Self {
        Self {
            tape,
            vars,
            mode,
            stat_updates: Vec::new(),
            layer_macs: Vec::new(),
            layer_index: HashMap::new(),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub(crate) fn push_stat_update(&mut self, u: StatUpdate<T>) {
        self.stat_updates.push(u);
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Attributes the tape's MAC count since `before` to layer `name`.
    pub fn record_macs(&mut self, name: &str, before: u64) {
        let delta = self.tape.macs() - before;
        match self.layer_index.get(name) {
            Some(&i) => self.layer_macs[i].1 += delta,
            None => {
                self.layer_index.insert(name.to_string(), self.layer_macs.len());
                self.layer_macs.push((name.to_string(), delta));
            }
        }
    }

    /// Per-layer instrumented MAC counts, in first-use order.
    pub fn layer_macs(&self) -> &[(String, u64)] {
        &self.layer_macs
    }
}

/// Applies batch-norm running-statistic updates to a store, in order.
pub fn apply_stat_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[StatUpdate<T>]) {
    for u in updates {
        let m = T::from_f64(u.momentum);
        let keep = T::ONE - m;
        for (id, batch) in [(u.running_mean, &u.batch_mean), (u.running_var, &u.batch_var)] {
            let mut t = store.value(id).clone();
            for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                *r = keep * *r + m * b;
            }
            store.set(id, t).expect("same shape");
        }
    }
}
