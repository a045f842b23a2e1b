//! Named parameter tensors and their binding onto a tape.
//!
//! Each tensor is initialised from its own generator seeded by
//! `(seed, name)`, so two models that share a parameter name start from the
//! same values regardless of which other parameters exist.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Result, Tape, Tensor, TensorError, Var};

/// How a fresh parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    /// `ln(i + 1)` along the only axis (log-rates of the transition).
    LogRamp,
}

/// Stable 64-bit FNV-1a; `DefaultHasher` is not guaranteed stable across releases.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn mix_seed(seed: u64, label: &str) -> u64 {
    fnv1a(label.as_bytes()) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::InvalidArgument {
                op: "param insert",
                msg: format!("duplicate parameter {name}"),
            });
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    /// Creates and inserts a parameter initialised from `(seed, name)`.
    pub fn init(&mut self, seed: u64, name: &str, shape: &[usize], init: Init) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, name));
        let t = match init {
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Const(v) => Tensor::full(shape.to_vec(), T::lit(v)),
            Init::FanIn(fan_in) => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.random_range(-b..b)))
            }
            Init::LogRamp => Tensor::from_fn(shape.to_vec(), |i| T::lit(((i + 1) as f64).ln())),
        };
        self.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.numel());
        for (_, t) in &self.entries {
            v.extend_from_slice(t.data());
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(TensorError::DataLength {
                shape: vec![self.numel()],
                expected: self.numel(),
                actual: flat.len(),
            });
        }
        let mut off = 0;
        for (_, t) in &mut self.entries {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Records every parameter on `tape` as a gradient leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> Bound {
        self.bind_with(tape, true)
    }

    /// Records every parameter as a constant (no gradients).
    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape<'a, T>) -> Bound {
        self.bind_with(tape, false)
    }

    fn bind_with<'a>(&'a self, tape: &mut Tape<'a, T>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(name, t)| {
                let v = if trainable { tape.param(t) } else { tape.leaf(t) };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Gradients of every parameter after `tape.backward`, flattened in store order.
    pub fn collect_grads(&self, tape: &Tape<'_, T>, bound: &Bound) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(self.numel());
        for (name, t) in &self.entries {
            let v = bound.var(name)?;
            match tape.grad(v) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(T::zero(), t.numel())),
            }
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }
}

/// Name to tape handle map produced by [`ParamStore::bind`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    /// Builds a binding from explicit handles, e.g. leaves recorded elsewhere.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::InvalidArgument {
                op: "param lookup",
                msg: format!("no parameter named {name}"),
            })
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }
}

/// Applies `x * w + b` with parameters `{prefix}.w` and `{prefix}.b`.
pub fn linear<T: Real>(tape: &mut Tape<'_, T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.w"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    tape.linear(x, w, Some(b))
}

/// Registers `{prefix}.w [fan_in, fan_out]` and a zero `{prefix}.b`.
pub fn init_linear<T: Real>(
    store: &mut ParamStore<T>,
    seed: u64,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    store.init(seed, &format!("{prefix}.w"), &[fan_in, fan_out], Init::FanIn(fan_in))?;
    store.init(seed, &format!("{prefix}.b"), &[fan_out], Init::Zeros)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_only_on_seed_and_name() {
        let mut a = ParamStore::<f32>::new();
        a.init(3, "x.w", &[4, 5], Init::FanIn(4)).unwrap();
        let mut b = ParamStore::<f32>::new();
        b.init(3, "other", &[2], Init::FanIn(2)).unwrap();
        b.init(3, "x.w", &[4, 5], Init::FanIn(4)).unwrap();
        assert_eq!(a.get("x.w"), b.get("x.w"));
        let mut c = ParamStore::<f32>::new();
        c.init(4, "x.w", &[4, 5], Init::FanIn(4)).unwrap();
        assert_ne!(a.get("x.w"), c.get("x.w"));
    }

    #[test]
    fn flatten_roundtrip_and_duplicates() {
        let mut s = ParamStore::<f64>::new();
        s.init(0, "a", &[3], Init::LogRamp).unwrap();
        s.init(0, "b", &[2, 2], Init::Const(0.5)).unwrap();
        assert!(s.init(0, "a", &[1], Init::Zeros).is_err());
        let mut flat = s.flatten();
        assert_eq!(flat.len(), 7);
        assert!((flat[2] - 3f64.ln()).abs() < 1e-15);
        flat[6] = 9.0;
        s.set_flat(&flat).unwrap();
        assert_eq!(s.get("b").unwrap().data()[3], 9.0);
        assert!(s.set_flat(&flat[..6]).is_err());
    }

    #[test]
    fn unused_parameters_get_zero_grads() {
        let mut s = ParamStore::<f64>::new();
        s.init(1, "used", &[2], Init::Const(2.0)).unwrap();
        s.init(1, "idle", &[3], Init::Const(1.0)).unwrap();
        let mut tape = Tape::new();
        let b = s.bind(&mut tape);
        let u = b.var("used").unwrap();
        let sq = tape.mul(u, u).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(s.collect_grads(&tape, &b).unwrap(), vec![4.0, 4.0, 0.0, 0.0, 0.0]);
    }
}
