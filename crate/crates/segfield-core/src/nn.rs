//! Named parameter storage, layer helpers and the Adam optimizer.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names
//! (`field.trunk.0.w`, `fusion.enc.1.attn.q.b`, ...). A [`ParamSession`]
//! binds store entries to tape leaves for one forward/backward pass and
//! collects the gradients of everything that is not frozen.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::hash::mix_seed;
use crate::tape::{Gradients, Matrix, Tape, VarId};

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Matrix,
    pub frozen: bool,
}

/// Ordered (BTreeMap) collection of named parameter matrices.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Matrix) {
        let prev = self.params.insert(
            name.to_string(),
            Param {
                value,
                frozen: false,
            },
        );
        assert!(prev.is_none(), "parameter {name} registered twice");
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn value(&self, name: &str) -> &Matrix {
        &self.params.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn set_value(&mut self, name: &str, value: Matrix) {
        let p = self.params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(p.value.dim(), value.dim(), "shape change for {name}");
        p.value = value;
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.params[name].frozen
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .frozen = frozen;
    }

    /// Mark every parameter whose name starts with `prefix` non-trainable.
    /// Idempotent. Returns how many parameters matched.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = true;
                n += 1;
            }
        }
        n
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

/// Binds store parameters to leaves of one tape, at most once each.
pub struct ParamSession<'s> {
    store: &'s ParamStore,
    ids: BTreeMap<String, VarId>,
}

impl<'s> ParamSession<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            ids: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str) -> VarId {
        if let Some(id) = self.ids.get(name) {
            return *id;
        }
        let id = tape.leaf(self.store.value(name).clone());
        self.ids.insert(name.to_string(), id);
        id
    }

    /// Gradients of every bound, non-frozen parameter, in name order.
    pub fn collect_grads(&self, grads: &Gradients) -> Vec<(String, Matrix)> {
        self.ids
            .iter()
            .filter(|(name, _)| !self.store.is_frozen(name))
            .filter_map(|(name, id)| grads.get(*id).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, name))
}

/// Register `name.w` (Xavier-uniform) and `name.b` (zeros).
pub fn init_linear(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, seed: u64) {
    let wname = format!("{name}.w");
    let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let mut rng = param_rng(seed, &wname);
    let w = Array2::from_shape_fn((in_dim, out_dim), |_| rng.random_range(-limit..limit));
    store.register(&wname, w);
    store.register(&format!("{name}.b"), Matrix::zeros((1, out_dim)));
}

pub fn linear(tape: &mut Tape, sess: &mut ParamSession, name: &str, x: VarId) -> VarId {
    let w = sess.var(tape, &format!("{name}.w"));
    let b = sess.var(tape, &format!("{name}.b"));
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

/// Register layer-norm gain (`name.g`, ones) and bias (`name.b`, zeros).
pub fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.register(&format!("{name}.g"), Matrix::from_elem((1, dim), 1.0));
    store.register(&format!("{name}.b"), Matrix::zeros((1, dim)));
}

pub fn layer_norm(tape: &mut Tape, sess: &mut ParamSession, name: &str, x: VarId) -> VarId {
    let g = sess.var(tape, &format!("{name}.g"));
    let b = sess.var(tape, &format!("{name}.b"));
    tape.layer_norm(x, g, b, 1e-5)
}

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Serializable optimizer state (step count and first/second moments).
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Matrix>,
    pub v: BTreeMap<String, Matrix>,
}

/// Adam with bias correction. Moment tensors are created lazily per name.
#[derive(Debug, Default)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn export_state(&self) -> AdamState {
        AdamState {
            t: self.t,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn from_state(cfg: AdamConfig, state: AdamState) -> Self {
        Self {
            cfg,
            t: state.t,
            m: state.m,
            v: state.v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(String, Matrix)], lr: f64) {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (name, g) in grads {
            if store.is_frozen(name) {
                continue;
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(g.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(g.dim()));
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let mut update = Matrix::zeros(g.dim());
            ndarray::Zip::from(&mut update)
                .and(&*m)
                .and(&*v)
                .for_each(|u, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *u = lr * mhat / (vhat.sqrt() + self.cfg.eps);
                });
            let p = store.params.get_mut(name).expect("param");
            p.value -= &update;
        }
    }
}

/// Exponential decay from `lr0` at iteration 0 to `lr_final` at `total`.
pub fn lr_schedule(lr0: f64, lr_final: f64, iter: u64, total: u64) -> f64 {
    if total == 0 || lr0 <= 0.0 {
        return lr0;
    }
    let frac = (iter as f64 / total as f64).clamp(0.0, 1.0);
    lr0 * (lr_final / lr0).powf(frac)
}
