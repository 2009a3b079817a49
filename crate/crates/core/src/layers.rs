//! Learnable building blocks shared by the fusion module and the model head.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Matrix, ParamId, ParamStore, Var};

/// `x · W + b` with `W` stored as `(d_in × d_out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        params: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = params.add(format!("{name}.weight"), xavier(d_in, d_out, rng));
        let bias = bias.then(|| params.add(format!("{name}.bias"), Matrix::zeros((1, d_out))));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn dims(&self, params: &ParamStore) -> (usize, usize) {
        params.get(self.weight).dim()
    }

    /// Overwrite with the identity map (square weights only) and zero bias.
    pub fn set_identity(&self, params: &mut ParamStore) {
        let (i, o) = self.dims(params);
        assert_eq!(i, o, "identity needs a square weight");
        *params.get_mut(self.weight) = Matrix::eye(i);
        if let Some(b) = self.bias {
            params.get_mut(b).fill(0.0);
        }
    }

    pub fn set_zero(&self, params: &mut ParamStore) {
        params.get_mut(self.weight).fill(0.0);
        if let Some(b) = self.bias {
            params.get_mut(b).fill(0.0);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Identity,
}

/// Two-layer perceptron `W₂ · act(W₁ x + b₁) + b₂`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub activation: Activation,
}

impl FeedForward {
    pub fn new(
        params: &mut ParamStore,
        name: &str,
        d_model: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            up: Linear::new(params, &format!("{name}.up"), d_model, hidden, true, rng),
            down: Linear::new(params, &format!("{name}.down"), hidden, d_model, true, rng),
            activation: Activation::Gelu,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = match self.activation {
            Activation::Gelu => g.gelu(h),
            Activation::Identity => h,
        };
        self.down.forward(g, h)
    }

    pub fn set_zero(&self, params: &mut ParamStore) {
        self.up.set_zero(params);
        self.down.set_zero(params);
    }
}

/// Row-wise layer normalization followed by a learnable affine map.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(params: &mut ParamStore, name: &str, dim: usize, eps: f64) -> Self {
        Self {
            gamma: params.add(format!("{name}.gamma"), Matrix::ones((1, dim))),
            beta: params.add(format!("{name}.beta"), Matrix::zeros((1, dim))),
            eps,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm_rows(x, self.eps);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }
}

fn xavier(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Matrix {
    let std = (2.0 / (d_in + d_out) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Matrix::from_shape_fn((d_in, d_out), |_| normal.sample(rng))
}
