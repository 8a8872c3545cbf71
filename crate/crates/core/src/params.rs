//! Named parameter containers, graph binding and the Adam optimizer.

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::{Dual, Real};
use crate::tensor::Tensor;

/// Ordered map of named arrays. Iteration order is the name order, which
/// fixes the checkpoint layout and every reduction over parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries.get(name).ok_or_else(|| Error::Invalid(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Lifts every array into dual numbers with zero tangent.
    pub fn to_dual(&self) -> ParamSet<Dual<T>> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| {
                    let d = v.data().iter().map(|&x| Dual::constant(x)).collect();
                    (k.clone(), Tensor::from_vec(v.shape(), d).expect("same shape"))
                })
                .collect(),
        }
    }

    /// Places every array on the graph; `trainable` decides which receive gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| {
                let var = g.leaf(v.clone(), trainable(k));
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter {name} not bound"),
        }
    }

    /// Gradients of every bound parameter that received one.
    pub fn collect<T: Real>(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars.iter().filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone()))).collect()
    }
}

pub type GradMap<T> = BTreeMap<String, Tensor<T>>;

/// Adds `scale · other` into `acc`, creating missing entries.
pub fn accumulate_grads<T: Real>(acc: &mut GradMap<T>, other: &GradMap<T>, scale: T) {
    for (k, g) in other {
        let scaled = g.scale(scale);
        match acc.get_mut(k) {
            Some(a) => a.add_assign(&scaled),
            None => {
                acc.insert(k.clone(), scaled);
            }
        }
    }
}

/// Adam with bias correction. Step counts are kept per array so that arrays
/// updated only occasionally (per-item codes) are corrected properly.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    counts: BTreeMap<String, i32>,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, step: 0, counts: BTreeMap::new(), m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates exactly the arrays named in `grads`; everything else is untouched.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &GradMap<T>) {
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let t = self.counts.entry(name.clone()).or_insert(0);
            *t += 1;
            let c1 = T::one() - b1.powi(*t);
            let c2 = T::one() - b2.powi(*t);
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *pi -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
