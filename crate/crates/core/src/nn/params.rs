use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// Role of a parameter; everything except `Weight` is excluded from LARS
/// trust-ratio adaptation and weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
}

impl ParamKind {
    pub fn is_adapted(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Clone, Debug)]
pub struct Param<E> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<E>,
    pub grad: Tensor<E>,
    pub frozen: bool,
}

#[derive(Clone, Debug)]
pub struct Buffer<E> {
    pub name: String,
    pub value: Tensor<E>,
}

/// Owns every trainable tensor, its gradient accumulator and the
/// non-trainable buffers (batch-norm running statistics).
///
/// Gradients accumulate across backward passes until [`ParamStore::zero_grad`]
/// is called.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<E> {
    params: Vec<Param<E>>,
    buffers: Vec<Buffer<E>>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add_param(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<E>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.into(),
            kind,
            value,
            grad,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<E>) -> BufferId {
        self.buffers.push(Buffer {
            name: name.into(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Param<E> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<E> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<E> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<E> {
        &mut self.buffers[id.0].value
    }

    pub fn params(&self) -> &[Param<E>] {
        &self.params
    }

    pub fn buffers(&self) -> &[Buffer<E>] {
        &self.buffers
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn buffer_ids(&self) -> impl Iterator<Item = BufferId> {
        (0..self.buffers.len()).map(BufferId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        self.buffers.iter().position(|b| b.name == name).map(BufferId)
    }

    /// Number of scalar parameters among `ids`.
    pub fn count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|id| self.params[id.0].value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = E::zero());
        }
    }

    pub fn set_frozen(&mut self, ids: &[ParamId], frozen: bool) {
        for id in ids {
            self.params[id.0].frozen = frozen;
        }
    }

    /// Order-sensitive checksum over every parameter and buffer bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: f64| {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for p in &self.params {
            p.value.data().iter().for_each(|v| feed(v.as_f64()));
        }
        for b in &self.buffers {
            b.value.data().iter().for_each(|v| feed(v.as_f64()));
        }
        h
    }

    /// Copies values (not gradients) of every parameter and buffer from
    /// `other`, matching by name.
    pub fn load_values_from(&mut self, other: &ParamStore<E>, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            let src = other
                .params
                .iter()
                .find(|q| q.name == p.name)
                .ok_or_else(|| Error::config(format!("parameter {} missing from source", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::shape(format!(
                    "parameter {} has shape {:?}, source has {:?}",
                    p.name,
                    p.value.shape(),
                    src.value.shape()
                )));
            }
            p.value = src.value.clone();
            copied += 1;
        }
        for b in self.buffers.iter_mut().filter(|b| b.name.starts_with(prefix)) {
            if let Some(src) = other.buffers.iter().find(|q| q.name == b.name) {
                b.value = src.value.clone();
            }
        }
        Ok(copied)
    }
}

/// One forward/backward episode: a fresh tape plus lazy binding of store
/// parameters onto it.
pub struct Session<'s, E: Element> {
    pub tape: Tape<E>,
    store: &'s mut ParamStore<E>,
    bound: HashMap<ParamId, Var>,
    grad_all: bool,
}

impl<'s, E: Element> Session<'s, E> {
    pub fn new(store: &'s mut ParamStore<E>) -> Self {
        Self::with_tape(store, Tape::new())
    }

    pub fn with_tape(store: &'s mut ParamStore<E>, tape: Tape<E>) -> Self {
        Self {
            tape,
            store,
            bound: HashMap::new(),
            grad_all: false,
        }
    }

    /// Binds every parameter as differentiable, frozen or not. Used by
    /// gradient audits that must observe exact zeros everywhere.
    pub fn grad_all(mut self) -> Self {
        self.grad_all = true;
        self
    }

    pub fn store(&self) -> &ParamStore<E> {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<E> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = &self.store.params[id.0];
        let v = self.tape.leaf(p.value.clone(), self.grad_all || !p.frozen);
        self.bound.insert(id, v);
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound.get(&id).copied()
    }

    /// Gradient of each bound parameter under `grads`; unreached parameters
    /// are omitted.
    pub fn param_grads<'g>(&self, grads: &'g Gradients<E>) -> Vec<(ParamId, &'g Tensor<E>)> {
        let mut out: Vec<_> = self
            .bound
            .iter()
            .filter_map(|(&id, &v)| grads.get(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Adds `grads` into the accumulators of non-frozen bound parameters.
    pub fn accumulate(&mut self, grads: &Gradients<E>) {
        let mut ids: Vec<_> = self.bound.iter().map(|(&id, &v)| (id, v)).collect();
        ids.sort();
        for (id, v) in ids {
            let p = &mut self.store.params[id.0];
            if p.frozen {
                continue;
            }
            if let Some(g) = grads.get(v) {
                for (acc, &gi) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *acc = *acc + gi;
                }
            }
        }
    }

    /// Backward from a scalar loss and accumulate into the store.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let grads = self.tape.backward(loss)?;
        self.accumulate(&grads);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_receive_nothing() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add_param("a", ParamKind::Weight, Tensor::scalar(2.0));
        let b = store.add_param("b", ParamKind::Weight, Tensor::scalar(3.0));
        store.set_frozen(&[b], true);
        let mut s = Session::new(&mut store);
        let (va, vb) = (s.param(a), s.param(b));
        let y = s.tape.mul(va, vb).unwrap();
        s.backward(y).unwrap();
        assert_eq!(store.param(a).grad.data(), &[3.0]);
        assert_eq!(store.param(b).grad.data(), &[0.0]);
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add_param("a", ParamKind::Weight, Tensor::scalar(2.0));
        for _ in 0..2 {
            let mut s = Session::new(&mut store);
            let va = s.param(a);
            let y = s.tape.square(va);
            s.backward(y).unwrap();
        }
        assert_eq!(store.param(a).grad.data(), &[8.0]);
        store.zero_grad();
        assert_eq!(store.param(a).grad.data(), &[0.0]);
    }
}
