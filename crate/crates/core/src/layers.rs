//! Parameterised building blocks shared by the modulation layer and the
//! backbone. Each holds only parameter ids; values live in a
//! [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParamStore};
use crate::real::Real;

/// `y = x W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            Init::UnitVariance(cin).tensor(&[cin, cout], rng),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Init::Zeros.tensor(&[cout], rng))?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }

    pub fn param_count(cin: usize, cout: usize, bias: bool) -> usize {
        cin * cout + if bias { cout } else { 0 }
    }
}

/// Layer normalisation over the channel axis with affine parameters.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        dim: usize,
    ) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.weight"), Init::Ones.tensor(&[dim], rng))?,
            beta: store.add(format!("{name}.bias"), Init::Zeros.tensor(&[dim], rng))?,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}
