//! Named parameters and the Adam optimizer.

use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::{Real, Tensor};
use crate::error::{ensure, Error, Result};

/// A named tensor with its Adam moments.
#[derive(Debug, Clone)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    /// Buffers such as running statistics are stored alongside weights but never updated by Adam.
    pub trainable: bool,
    m: Vec<S>,
    v: Vec<S>,
    steps: u64,
}

impl<S: Real> Parameter<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>, trainable: bool) -> Self {
        let n = value.len();
        Self {
            name: name.into(),
            value,
            trainable,
            m: vec![S::zero(); n],
            v: vec![S::zero(); n],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn reset_state(&mut self) {
        self.m.iter_mut().for_each(|v| *v = S::zero());
        self.v.iter_mut().for_each(|v| *v = S::zero());
        self.steps = 0;
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
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

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<S> {
    params: Vec<Parameter<S>>,
}

/// Graph handles for every parameter of a [`ParamSet`], in set order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }
}

impl<S: Real> ParamSet<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: Tensor<S>,
        trainable: bool,
    ) -> Result<usize> {
        let name = name.into();
        ensure!(
            self.index_of(&name).is_none(),
            InvalidArgument,
            "duplicate parameter name {name}"
        );
        self.params.push(Parameter::new(name, value, trainable));
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<S>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn at(&self, index: usize) -> &Parameter<S> {
        &self.params[index]
    }

    pub fn at_mut(&mut self, index: usize) -> &mut Parameter<S> {
        &mut self.params[index]
    }

    /// Replaces a value in place, keeping its shape. Optimizer state is reset.
    pub fn set(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let idx = self
            .index_of(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))?;
        let p = &mut self.params[idx];
        ensure!(
            p.value.shape() == value.shape(),
            Shape,
            "parameter {name} has shape {:?}, replacement {:?}",
            p.value.shape(),
            value.shape()
        );
        p.value = value;
        p.reset_state();
        Ok(())
    }

    /// Count of trainable scalar values.
    pub fn n_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Adds every parameter to `g` as a leaf; trainable ones track gradients when `grads` is set.
    pub fn bind(&self, g: &mut Graph<S>, grads: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), grads && p.trainable))
            .collect();
        Bound { vars }
    }

    /// Like [`ParamSet::bind`], but parameters named in `names` use the given existing
    /// variables; the rest become constant leaves.
    pub fn bind_with(&self, g: &mut Graph<S>, names: &[String], vars: &[Var]) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| match names.iter().position(|n| *n == p.name) {
                Some(k) => vars[k],
                None => g.leaf(p.value.clone(), false),
            })
            .collect();
        Bound { vars }
    }

    /// One bias-corrected Adam update of every trainable parameter that received a gradient.
    pub fn adam_step(
        &mut self,
        g: &Graph<S>,
        bound: &Bound,
        lr: f64,
        cfg: &AdamConfig,
    ) -> Result<()> {
        ensure!(
            bound.vars.len() == self.params.len(),
            InvalidArgument,
            "bindings from another set"
        );
        let grads: Vec<Option<&[S]>> = bound.vars.iter().map(|&v| g.grad(v)).collect();
        self.apply_adam(&grads, lr, cfg)
    }

    /// Adam from explicit gradients, one slot per parameter.
    pub fn apply_adam(&mut self, grads: &[Option<&[S]>], lr: f64, cfg: &AdamConfig) -> Result<()> {
        ensure!(
            lr > 0.0 && lr.is_finite(),
            InvalidArgument,
            "learning rate must be positive, got {lr}"
        );
        ensure!(
            grads.len() == self.params.len(),
            Shape,
            "{} gradient slots for {} parameters",
            grads.len(),
            self.params.len()
        );
        for (p, grad) in self.params.iter_mut().zip(grads) {
            let Some(grad) = grad else { continue };
            if !p.trainable {
                continue;
            }
            ensure!(
                grad.len() == p.value.len(),
                Shape,
                "gradient for {} has {} values, expected {}",
                p.name,
                grad.len(),
                p.value.len()
            );
            p.steps += 1;
            let t = p.steps as i32;
            let (b1, b2) = (S::of(cfg.beta1), S::of(cfg.beta2));
            let c1 = S::of(1.0 - cfg.beta1.powi(t));
            let c2 = S::of(1.0 - cfg.beta2.powi(t));
            let (lr, eps) = (S::of(lr), S::of(cfg.eps));
            let values = p.value.data_mut();
            for (((w, &gr), m), v) in values
                .iter_mut()
                .zip(grad.iter())
                .zip(&mut p.m)
                .zip(&mut p.v)
            {
                *m = b1 * *m + (S::one() - b1) * gr;
                *v = b2 * *v + (S::one() - b2) * gr * gr;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Converts values to another precision; optimizer state starts fresh.
    pub fn cast<T: Real>(&self) -> ParamSet<T> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Parameter::new(p.name.clone(), p.value.cast(), p.trainable))
                .collect(),
        }
    }
}

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Glorot-uniform tensor.
pub fn glorot<S: Real, R: Rng>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<S> {
    Tensor::uniform(shape, glorot_bound(fan_in, fan_out), rng)
}
