//! Named parameter storage, tape binding and the AdamW optimizer.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
    trainable: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), trainable: Vec::new(), index: HashMap::new() }
    }

    /// Registers a parameter. Panics on duplicate names, which indicates a model wiring bug.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        id
    }

    /// Normal init with the given standard deviation.
    pub fn normal<R: Rng + ?Sized>(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut R) -> ParamId {
        self.insert(name, Matrix::randn(rows, cols, std, rng), true)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.insert(name, Matrix::zeros(rows, cols), true)
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.insert(name, Matrix::filled(rows, cols, T::one()), true)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.values[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Matrix::cast).collect(),
            trainable: self.trainable.clone(),
            index: self.index.clone(),
        }
    }
}

/// Binds parameters onto a tape on first use, so a forward pass only copies
/// the weights it touches.
pub struct Binder<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    bound: HashMap<ParamId, Var>,
    /// Bind everything as constants, e.g. for sampling.
    frozen: bool,
}

impl<'a, T: Scalar> Binder<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self { store, bound: HashMap::new(), frozen: false }
    }

    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Self { store, bound: HashMap::new(), frozen: true }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let grad = !self.frozen && self.store.is_trainable(id);
        let v = tape.leaf(self.store.get(id).clone(), grad);
        self.bound.insert(id, v);
        v
    }

    /// Gradients of every bound trainable parameter, keyed by id.
    pub fn collect(&self, grads: &mut Gradients<T>) -> Vec<(ParamId, Matrix<T>)> {
        let mut out: Vec<(ParamId, Matrix<T>)> =
            self.bound.iter().filter_map(|(&id, &v)| grads.take(v).map(|g| (id, g))).collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

/// Dense gradient accumulator aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradBuffer<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> GradBuffer<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self { grads: vec![None; store.len()] }
    }

    pub fn accumulate(&mut self, parts: Vec<(ParamId, Matrix<T>)>, weight: T) {
        for (id, mut g) in parts {
            g.scale_assign(weight);
            match &mut self.grads[id.0] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(|g| g.sq_norm().f64()).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = T::of(max_norm / norm);
            for g in self.grads.iter_mut().flatten() {
                g.scale_assign(s);
            }
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Matrix::is_finite)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 4e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = |s: &ParamStore<T>| s.values.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self { config, step: 0, m: zeros(store), v: zeros(store) }
    }

    /// Applies one update with learning rate `lr` to every trainable parameter that has a gradient.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &GradBuffer<T>, lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one, eps) = (T::one(), T::of(c.eps));
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let decay = T::of(1.0 - lr * c.weight_decay);
        for id in 0..store.len() {
            if !store.trainable[id] {
                continue;
            }
            let Some(g) = grads.grads[id].as_ref() else { continue };
            let p = &mut store.values[id];
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                *pv = *pv * decay - step_size * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("x", Matrix::from_vec(1, 2, vec![3.0, -2.0]), true);
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, ..Default::default() }, &store);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let mut b = Binder::new(&store);
            let x = b.var(&mut tape, id);
            let l = tape.mse_const(x, Matrix::zeros(1, 2));
            let mut g = tape.backward(l);
            let mut buf = GradBuffer::new(&store);
            buf.accumulate(b.collect(&mut g), 1.0);
            opt.update(&mut store, &buf, 0.1);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn clip_bounds_global_norm() {
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("a", Matrix::zeros(1, 2), true);
        let mut buf = GradBuffer::new(&store);
        buf.accumulate(vec![(a, Matrix::from_vec(1, 2, vec![3.0, 4.0]))], 1.0);
        let pre = buf.clip_global_norm(1.0);
        assert_eq!(pre, 5.0);
        assert!((buf.global_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_params_are_untouched() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("frozen", Matrix::filled(1, 1, 1.0), false);
        let mut buf = GradBuffer::new(&store);
        buf.accumulate(vec![(id, Matrix::filled(1, 1, 1.0))], 1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.update(&mut store, &buf, 1.0);
        assert_eq!(store.get(id).get(0, 0), 1.0);
    }
}
