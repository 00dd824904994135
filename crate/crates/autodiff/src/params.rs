use std::collections::HashMap;
use std::ops::{Deref, DerefMut};
use std::sync::Arc;

use crate::{Error, Real, Result, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<F> {
    name: String,
    value: Arc<Tensor<F>>,
    trainable: bool,
}

/// Named model parameters. Values are reference counted so a tape can bind
/// them without copying; updates go through [`ParamStore::get_mut`], which
/// only copies when a tape still holds the old value.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    entries: Vec<Entry<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(Entry {
            name,
            value: Arc::new(value),
            trainable: true,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor<F>> {
        Arc::clone(&self.entries[id.0].value)
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Replaces every value from `entries`, matched by name. All names and
    /// shapes must agree.
    pub fn load(&mut self, entries: &[(String, Tensor<F>)]) -> Result<()> {
        if entries.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.entries.len(),
                entries.len()
            )));
        }
        for (name, tensor) in entries {
            let idx = *self
                .by_name
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            if self.entries[idx].value.shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                    self.entries[idx].value.shape(),
                    tensor.shape()
                )));
            }
            self.entries[idx].value = Arc::new(tensor.clone());
        }
        Ok(())
    }

    /// `(name, value)` pairs in registration order.
    pub fn export(&self) -> Vec<(String, Tensor<F>)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), (*e.value).clone()))
            .collect()
    }
}

/// A tape plus lazy bindings from parameters to leaves.
///
/// Dereferences to the underlying [`Tape`], so ops are called directly on
/// the graph. When built with `grad = false` parameters are bound as
/// constants and the backward pass has nothing to do.
pub struct Graph<'p, F> {
    tape: Tape<F>,
    params: &'p ParamStore<F>,
    bound: Vec<Option<Var>>,
    grad: bool,
}

impl<'p, F: Real> Graph<'p, F> {
    pub fn new(params: &'p ParamStore<F>, grad: bool) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            grad,
        }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let rg = self.grad && self.params.is_trainable(id);
        let v = self.tape.shared_leaf(self.params.shared(id), rg);
        self.bound[id.0] = Some(v);
        v
    }

    /// Backward pass; gradients are returned per parameter.
    pub fn backward(&mut self, loss: Var) -> Result<ParamGrads<F>> {
        let mut grads = self.tape.backward(loss)?;
        let per_param = self
            .bound
            .iter_mut()
            .map(|b| b.take().and_then(|v| grads.take(v)))
            .collect();
        Ok(ParamGrads { grads: per_param })
    }
}

impl<F> Deref for Graph<'_, F> {
    type Target = Tape<F>;

    fn deref(&self) -> &Tape<F> {
        &self.tape
    }
}

impl<F> DerefMut for Graph<'_, F> {
    fn deref_mut(&mut self) -> &mut Tape<F> {
        &mut self.tape
    }
}

/// Gradients of one backward pass, indexed by parameter.
#[derive(Debug)]
pub struct ParamGrads<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> ParamGrads<F> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

/// Dense gradient accumulator matching a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradBuffer<F> {
    grads: Vec<Vec<F>>,
}

impl<F: Real> GradBuffer<F> {
    pub fn zeros_like(params: &ParamStore<F>) -> Self {
        GradBuffer {
            grads: params
                .ids()
                .map(|id| vec![F::zero(); params.get(id).numel()])
                .collect(),
        }
    }

    pub fn accumulate(&mut self, grads: &ParamGrads<F>) {
        for (dst, src) in self.grads.iter_mut().zip(&grads.grads) {
            if let Some(src) = src {
                for (d, &s) in dst.iter_mut().zip(src.data()) {
                    *d += s;
                }
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for g in &mut self.grads {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = F::zero());
        }
    }

    pub fn get(&self, id: ParamId) -> &[F] {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn is_all_zero(&self) -> bool {
        self.grads.iter().flatten().all(|&g| g == F::zero())
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.is_finite())
    }

    pub fn norm(&self) -> F {
        self.grads
            .iter()
            .flatten()
            .map(|&g| g * g)
            .sum::<F>()
            .sqrt()
    }
}
