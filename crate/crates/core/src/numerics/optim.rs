use std::collections::BTreeMap;

use super::checkpoint::{Checkpoint, Entry};
use super::graph::{Gradients, Graph, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const MOMENT1_PREFIX: &str = "adam.m/";
const MOMENT2_PREFIX: &str = "adam.v/";

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub frozen: bool,
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Named parameters plus Adam moment estimates.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real = f32> {
    params: BTreeMap<String, Param<T>>,
    adam_steps: u64,
}

/// Graph leaves created for a store's parameters during one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` is not bound")))
    }
}

impl<S: Into<String>> FromIterator<(S, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (S, Var)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().map(|(n, v)| (n.into(), v)).collect(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            adam_steps: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        let shape = value.shape().to_vec();
        self.params.insert(
            name,
            Param {
                value,
                grad: None,
                frozen: false,
                m: Tensor::zeros(shape.clone()),
                v: Tensor::zeros(shape),
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn adam_steps(&self) -> u64 {
        self.adam_steps
    }

    /// Freezes (or unfreezes) every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    /// Registers every parameter as a leaf on `graph`. Frozen parameters are
    /// added as constants.
    pub fn bind(&self, graph: &Graph<T>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), graph.leaf(p.value.clone(), !p.frozen)))
            .collect();
        Bound { vars }
    }

    /// Like [`Self::bind`] but only parameters accepted by `trainable` are
    /// differentiable; the rest are constants on this graph.
    pub fn bind_where(&self, graph: &Graph<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), graph.leaf(p.value.clone(), !p.frozen && trainable(name))))
            .collect();
        Bound { vars }
    }

    /// Registers every parameter as a constant, for inference.
    pub fn bind_constants(&self, graph: &Graph<T>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), graph.constant(p.value.clone())))
            .collect();
        Bound { vars }
    }

    /// Moves gradients for bound, trainable parameters into the store.
    pub fn collect_grads(&mut self, bound: &Bound, grads: &mut Gradients<T>) {
        for (name, &var) in &bound.vars {
            if let Some(p) = self.params.get_mut(name) {
                if !p.frozen {
                    p.grad = grads.take(var);
                }
            }
        }
    }

    /// Like [`Self::collect_grads`] but adds to any gradient already held.
    pub fn accumulate_grads(&mut self, bound: &Bound, grads: &mut Gradients<T>) -> Result<()> {
        for (name, &var) in &bound.vars {
            let Some(p) = self.params.get_mut(name) else { continue };
            if p.frozen {
                continue;
            }
            let Some(new) = grads.take(var) else { continue };
            match &mut p.grad {
                None => p.grad = Some(new),
                Some(acc) => {
                    if acc.shape() != new.shape() {
                        return Err(Error::Shape(format!("gradient shape mismatch for `{name}`")));
                    }
                    for (a, b) in acc.data_mut().iter_mut().zip(new.data()) {
                        *a += *b;
                    }
                }
            }
        }
        Ok(())
    }

    /// Multiplies every held gradient by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        let f = T::from_f64_lossy(factor);
        for g in self.params.values_mut().filter_map(|p| p.grad.as_mut()) {
            g.data_mut().iter_mut().for_each(|v| *v *= f);
        }
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// One Adam update over all trainable parameters; gradients are consumed.
    pub fn adam_step(&mut self, lr: f64) -> Result<()> {
        if let Some((name, _)) = self.params.iter().find(|(_, p)| !p.frozen && p.grad.is_none()) {
            return Err(Error::Contract(format!("parameter `{name}` has no gradient")));
        }
        self.adam_steps += 1;
        let t = self.adam_steps as i32;
        let b1 = T::from_f64_lossy(ADAM_BETA1);
        let b2 = T::from_f64_lossy(ADAM_BETA2);
        let eps = T::from_f64_lossy(ADAM_EPS);
        let one = T::one();
        let lr_t = T::from_f64_lossy(lr);
        let bc1 = T::from_f64_lossy(1.0 - ADAM_BETA1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - ADAM_BETA2.powi(t));
        for p in self.params.values_mut().filter(|p| !p.frozen) {
            let grad = p.grad.take().expect("checked above");
            if grad.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} does not match parameter {:?}",
                    grad.shape(),
                    p.value.shape()
                )));
            }
            let (m, v, w) = (p.m.data_mut(), p.v.data_mut(), p.value.data_mut());
            for i in 0..w.len() {
                let gi = grad.data()[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.value.all_finite())
    }

    pub fn to_checkpoint(&self, include_optimizer: bool) -> Checkpoint {
        let mut entries = Vec::new();
        for (name, p) in &self.params {
            entries.push(Entry::from_tensor(name.clone(), &p.value));
            if include_optimizer {
                entries.push(Entry::from_tensor(format!("{MOMENT1_PREFIX}{name}"), &p.m));
                entries.push(Entry::from_tensor(format!("{MOMENT2_PREFIX}{name}"), &p.v));
            }
        }
        let mut ck = Checkpoint::new(entries);
        if include_optimizer {
            ck.metadata.insert("adam_steps".into(), self.adam_steps.into());
        }
        ck
    }

    /// Loads values (and optimizer state, when present) for every parameter
    /// in the store. Missing entries and shape mismatches are errors; extra
    /// entries are ignored.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        for (name, p) in self.params.iter_mut() {
            let entry = ck
                .entry(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            p.value = entry.to_tensor_checked(p.value.shape())?;
            if let Some(m) = ck.entry(&format!("{MOMENT1_PREFIX}{name}")) {
                p.m = m.to_tensor_checked(p.value.shape())?;
            }
            if let Some(v) = ck.entry(&format!("{MOMENT2_PREFIX}{name}")) {
                p.v = v.to_tensor_checked(p.value.shape())?;
            }
            p.grad = None;
        }
        if let Some(steps) = ck.metadata.get("adam_steps").and_then(|v| v.as_u64()) {
            self.adam_steps = steps;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_step(store: &mut ParamStore<f64>, lr: f64) {
        let g = Graph::<f64>::new();
        let bound = store.bind(&g);
        let w = bound.get("w").unwrap();
        let sq = g.square(w);
        let loss = g.sum(sq);
        let mut grads = g.backward(loss).unwrap();
        store.collect_grads(&bound, &mut grads);
        store.adam_step(lr).unwrap();
    }

    #[test]
    fn adam_descends_on_square() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::scalar(1.0)).unwrap();
        quadratic_step(&mut store, 0.1);
        let w = store.get("w").unwrap().item().unwrap();
        assert!(w.abs() < 1.0);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::new(vec![2], vec![0.3, -0.7]).unwrap()).unwrap();
        let before = store.get("w").unwrap().clone();
        let g = Graph::<f64>::new();
        let bound = store.bind(&g);
        let w = bound.get("w").unwrap();
        let zero = g.scale(w, 0.0);
        let loss = g.sum(zero);
        let mut grads = g.backward(loss).unwrap();
        store.collect_grads(&bound, &mut grads);
        store.adam_step(0.1).unwrap();
        assert_eq!(store.get("w").unwrap(), &before);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(store.adam_step(0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a.w", Tensor::scalar(1.0)).unwrap();
        store.insert("b.w", Tensor::scalar(1.0)).unwrap();
        store.set_frozen("b.", true);
        let g = Graph::<f64>::new();
        let bound = store.bind(&g);
        let a = bound.get("a.w").unwrap();
        let b = bound.get("b.w").unwrap();
        let s = g.mul(a, b).unwrap();
        let loss = g.sum(s);
        let mut grads = g.backward(loss).unwrap();
        store.collect_grads(&bound, &mut grads);
        store.adam_step(0.1).unwrap();
        assert_eq!(store.get("b.w").unwrap().item().unwrap(), 1.0);
        assert!(store.get("a.w").unwrap().item().unwrap() < 1.0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(store.insert("w", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn checkpoint_restores_optimizer_state() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        quadratic_step(&mut store, 0.05);
        let bytes = store.to_checkpoint(true).encode();

        let mut restored = ParamStore::<f64>::new();
        restored.insert("w", Tensor::zeros(vec![3])).unwrap();
        restored.load_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();

        quadratic_step(&mut store, 0.05);
        quadratic_step(&mut restored, 0.05);
        assert_eq!(store.get("w").unwrap(), restored.get("w").unwrap());
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::zeros(vec![2, 2])).unwrap();
        let ck = store.to_checkpoint(false);
        let mut other = ParamStore::<f32>::new();
        other.insert("w", Tensor::zeros(vec![4])).unwrap();
        assert!(matches!(other.load_checkpoint(&ck), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn accumulated_gradients_sum_then_scale() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::new(vec![2], vec![1.5, -2.0]).unwrap()).unwrap();
        for _ in 0..2 {
            let g = Graph::<f64>::new();
            let bound = store.bind(&g);
            let loss = g.sum(g.square(bound.get("w").unwrap()));
            let mut grads = g.backward(loss).unwrap();
            store.accumulate_grads(&bound, &mut grads).unwrap();
        }
        store.scale_grads(0.5);
        let grad = store.param("w").unwrap().grad.clone().unwrap();
        assert_eq!(grad.data(), &[3.0, -4.0]);
    }
}
