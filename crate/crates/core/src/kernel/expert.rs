//! SwiGLU feed-forward expert without biases:
//! `E(x) = W_down · (silu(W_gate·x) ⊙ (W_up·x))`.

use rand::Rng;

use super::linalg::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct SwiGluExpert {
    /// `D_e × D_m`
    pub gate_proj: Mat,
    /// `D_e × D_m`
    pub up_proj: Mat,
    /// `D_m × D_e`
    pub down_proj: Mat,
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ExpertCache {
    gate_pre: Vec<f64>,
    up: Vec<f64>,
    hidden: Vec<f64>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

impl SwiGluExpert {
    pub fn zeros(model_dim: usize, width: usize) -> Self {
        SwiGluExpert {
            gate_proj: Mat::zeros(width, model_dim),
            up_proj: Mat::zeros(width, model_dim),
            down_proj: Mat::zeros(model_dim, width),
        }
    }

    pub fn random<R: Rng + ?Sized>(model_dim: usize, width: usize, std: f64, rng: &mut R) -> Self {
        SwiGluExpert {
            gate_proj: Mat::random(width, model_dim, std, rng),
            up_proj: Mat::random(width, model_dim, std, rng),
            down_proj: Mat::random(model_dim, width, std, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.gate_proj.rows()
    }

    pub fn model_dim(&self) -> usize {
        self.gate_proj.cols()
    }

    pub(crate) fn dims_ok(&self, model_dim: usize) -> bool {
        let w = self.width();
        self.gate_proj.shape() == (w, model_dim)
            && self.up_proj.shape() == (w, model_dim)
            && self.down_proj.shape() == (model_dim, w)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, ExpertCache) {
        let gate_pre = self.gate_proj.matvec(x);
        let up = self.up_proj.matvec(x);
        let hidden: Vec<f64> = gate_pre
            .iter()
            .zip(&up)
            .map(|(&a, &b)| silu(a) * b)
            .collect();
        let out = self.down_proj.matvec(&hidden);
        (
            out,
            ExpertCache {
                gate_pre,
                up,
                hidden,
            },
        )
    }

    /// Accumulates `scale`-weighted gradients for `d_out` into `grads` and
    /// `dx`.
    pub(crate) fn backward(
        &self,
        x: &[f64],
        cache: &ExpertCache,
        d_out: &[f64],
        grads: &mut SwiGluExpert,
        dx: &mut [f64],
    ) {
        grads.down_proj.add_outer(d_out, &cache.hidden);
        let mut d_hidden = vec![0.0; self.width()];
        self.down_proj.add_matvec_t(d_out, &mut d_hidden);
        let d_gate: Vec<f64> = d_hidden
            .iter()
            .zip(&cache.gate_pre)
            .zip(&cache.up)
            .map(|((&dh, &a), &b)| dh * b * silu_grad(a))
            .collect();
        let d_up: Vec<f64> = d_hidden
            .iter()
            .zip(&cache.gate_pre)
            .map(|(&dh, &a)| dh * silu(a))
            .collect();
        grads.gate_proj.add_outer(&d_gate, x);
        grads.up_proj.add_outer(&d_up, x);
        self.gate_proj.add_matvec_t(&d_gate, dx);
        self.up_proj.add_matvec_t(&d_up, dx);
    }
}
