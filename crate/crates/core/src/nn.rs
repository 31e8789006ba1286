use rand::Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{BnMode, BnState, Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BnState,
}

impl BatchNorm1d {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64, momentum: f64) -> Result<Self> {
        Ok(BatchNorm1d {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
            state: BnState::new(dim, eps, momentum),
        })
    }

    pub fn forward_train(&mut self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma, store.get(self.gamma));
        let beta = g.param(self.beta, store.get(self.beta));
        g.batch_norm(x, gamma, beta, &mut self.state, BnMode::Train)
    }

    pub fn forward_eval(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma, store.get(self.gamma));
        let beta = g.param(self.beta, store.get(self.beta));
        let mut state = self.state.clone();
        g.batch_norm(x, gamma, beta, &mut state, BnMode::Eval)
    }
}

/// `y = x W^T + b` with `W[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let w = (0..input * output).map(|_| rng.gen_range(-bound..bound)).collect();
        Ok(Linear {
            weight: store.add(format!("{name}.weight"), Tensor::new(&[output, input], w)?)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[output]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(self.weight, store.get(self.weight));
        let b = g.param(self.bias, store.get(self.bias));
        let y = g.linear(x, w)?;
        g.add_bias(y, b)
    }
}

/// Batch norm followed by the identity classifier for one pooled vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub bn: BatchNorm1d,
    pub fc: Linear,
}

impl ClassifierHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        classes: usize,
        eps: f64,
        momentum: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(ClassifierHead {
            bn: BatchNorm1d::new(store, &format!("{name}.bn"), dim, eps, momentum)?,
            fc: Linear::new(store, &format!("{name}.fc"), dim, classes, rng)?,
        })
    }

    /// Returns `(post-BN features, logits)` for `x[N, D]`.
    pub fn forward(&mut self, g: &mut Graph, store: &ParamStore, x: Var, mode: BnMode) -> Result<(Var, Var)> {
        let t = match mode {
            BnMode::Train => self.bn.forward_train(g, store, x)?,
            BnMode::Eval => self.bn.forward_eval(g, store, x)?,
        };
        let p = self.fc.forward(g, store, t)?;
        Ok((t, p))
    }

    pub fn forward_eval(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let t = self.bn.forward_eval(g, store, x)?;
        let p = self.fc.forward(g, store, t)?;
        Ok((t, p))
    }
}
