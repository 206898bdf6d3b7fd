use alloc::vec;
use alloc::vec::Vec;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::math::{axpy, exp, tanh, Matrix};
use crate::{rng, Error, Result};

/// Maps an ordered prototype pair `(c_a, c_b)` to the mean and log standard
/// deviation of the transition score `a → b`:
/// `h = tanh(W_l c_a + W_r c_b + b)`, `(μ, log σ) = W_o h + b_o`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionGenParams {
    pub w_left: Matrix,
    pub w_right: Matrix,
    pub bias: Vec<f64>,
    /// Row 0 produces μ, row 1 produces log σ.
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

/// Gaussian moments of every transition score plus the hidden activations
/// needed for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMoments {
    pub mu: Matrix,
    pub log_sigma: Matrix,
    hidden: Vec<f64>,
}

impl TransitionMoments {
    pub fn sigma(&self) -> Matrix {
        self.log_sigma.map(exp)
    }
}

impl TransitionGenParams {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            w_left: Matrix::zeros(hidden, hidden),
            w_right: Matrix::zeros(hidden, hidden),
            bias: vec![0.0; hidden],
            w_out: Matrix::zeros(2, hidden),
            b_out: vec![0.0; 2],
        }
    }

    pub fn init(hidden: usize, log_sigma_bias: f64, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[rng::tag("transition-init")]);
        let scale = 1.0 / crate::math::sqrt(hidden as f64);
        let mut p = Self::zeros(hidden);
        for m in [&mut p.w_left, &mut p.w_right, &mut p.w_out] {
            m.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-scale..scale));
        }
        p.b_out[1] = log_sigma_bias;
        p
    }

    pub fn hidden(&self) -> usize {
        self.bias.len()
    }

    pub fn tensors(&self) -> [&[f64]; 5] {
        [
            self.w_left.as_slice(),
            self.w_right.as_slice(),
            &self.bias,
            self.w_out.as_slice(),
            &self.b_out,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.w_left.as_mut_slice(),
            self.w_right.as_mut_slice(),
            &mut self.bias,
            self.w_out.as_mut_slice(),
            &mut self.b_out,
        ]
    }

    pub fn forward(&self, prototypes: &Matrix) -> Result<TransitionMoments> {
        let h = self.hidden();
        if prototypes.cols() != h {
            return Err(Error::ShapeMismatch("prototype width vs generator".into()));
        }
        let l = prototypes.rows();
        let (left, right) = self.project(prototypes);
        let mut mu = Matrix::zeros(l, l);
        let mut log_sigma = Matrix::zeros(l, l);
        let mut hidden = vec![0.0; l * l * h];
        for a in 0..l {
            for b in 0..l {
                let act = &mut hidden[(a * l + b) * h..(a * l + b + 1) * h];
                for k in 0..h {
                    act[k] = tanh(left[(a, k)] + right[(b, k)] + self.bias[k]);
                }
                mu[(a, b)] = crate::math::dot(self.w_out.row(0), act) + self.b_out[0];
                log_sigma[(a, b)] = crate::math::dot(self.w_out.row(1), act) + self.b_out[1];
            }
        }
        Ok(TransitionMoments {
            mu,
            log_sigma,
            hidden,
        })
    }

    fn project(&self, prototypes: &Matrix) -> (Matrix, Matrix) {
        let (l, h) = prototypes.shape();
        let mut left = Matrix::zeros(l, h);
        let mut right = Matrix::zeros(l, h);
        for a in 0..l {
            self.w_left.matvec(prototypes.row(a), left.row_mut(a));
            self.w_right.matvec(prototypes.row(a), right.row_mut(a));
        }
        (left, right)
    }

    /// Accumulates parameter gradients into `grads` and prototype gradients
    /// into `d_protos`.
    pub fn backward(
        &self,
        prototypes: &Matrix,
        moments: &TransitionMoments,
        d_mu: &Matrix,
        d_log_sigma: &Matrix,
        grads: &mut TransitionGenParams,
        d_protos: &mut Matrix,
    ) {
        let (l, h) = prototypes.shape();
        let mut d_left = Matrix::zeros(l, h);
        let mut d_right = Matrix::zeros(l, h);
        let mut d_pre = vec![0.0; h];
        for a in 0..l {
            for b in 0..l {
                let gm = d_mu[(a, b)];
                let gs = d_log_sigma[(a, b)];
                if gm == 0.0 && gs == 0.0 {
                    continue;
                }
                let act = &moments.hidden[(a * l + b) * h..(a * l + b + 1) * h];
                axpy(grads.w_out.row_mut(0), gm, act);
                axpy(grads.w_out.row_mut(1), gs, act);
                grads.b_out[0] += gm;
                grads.b_out[1] += gs;
                for k in 0..h {
                    let dh = gm * self.w_out[(0, k)] + gs * self.w_out[(1, k)];
                    d_pre[k] = dh * (1.0 - act[k] * act[k]);
                }
                axpy(d_left.row_mut(a), 1.0, &d_pre);
                axpy(d_right.row_mut(b), 1.0, &d_pre);
                axpy(&mut grads.bias, 1.0, &d_pre);
            }
        }
        for a in 0..l {
            grads.w_left.rank1_acc(1.0, d_left.row(a), prototypes.row(a));
            grads.w_right.rank1_acc(1.0, d_right.row(a), prototypes.row(a));
            self.w_left.matvec_t_acc(d_left.row(a), d_protos.row_mut(a));
            self.w_right.matvec_t_acc(d_right.row(a), d_protos.row_mut(a));
        }
    }
}

/// `R` reparameterized draws `T_r = μ + σ ⊙ ε_r` with the noise kept, so the
/// draws are reproducible and differentiable in `μ` and `σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSamples {
    pub samples: Vec<Matrix>,
    pub noise: Vec<Matrix>,
}

impl TransitionSamples {
    pub fn from_noise(mu: &Matrix, sigma: &Matrix, noise: Vec<Matrix>) -> Result<Self> {
        if !mu.is_finite() {
            return Err(Error::NonFinite("transition mean"));
        }
        if !sigma.is_finite() || sigma.as_slice().iter().any(|&s| s < 0.0) {
            return Err(Error::NonFinite("transition scale"));
        }
        let samples = noise
            .iter()
            .map(|eps| {
                if eps.shape() != mu.shape() {
                    return Err(Error::ShapeMismatch("noise shape".into()));
                }
                let mut t = mu.clone();
                for ((v, s), e) in t
                    .as_mut_slice()
                    .iter_mut()
                    .zip(sigma.as_slice())
                    .zip(eps.as_slice())
                {
                    *v += s * e;
                }
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples, noise })
    }

    /// Folds per-sample gradients back to `(∂/∂μ, ∂/∂log σ)`.
    pub fn backward(&self, sigma: &Matrix, d_samples: &[Matrix]) -> (Matrix, Matrix) {
        let (l, _) = sigma.shape();
        let mut d_mu = Matrix::zeros(l, l);
        let mut d_ls = Matrix::zeros(l, l);
        for (d, eps) in d_samples.iter().zip(&self.noise) {
            d_mu.add_scaled(1.0, d);
            for i in 0..l * l {
                d_ls.as_mut_slice()[i] +=
                    d.as_slice()[i] * sigma.as_slice()[i] * eps.as_slice()[i];
            }
        }
        (d_mu, d_ls)
    }
}

pub fn sample_transition_scores(
    mu: &Matrix,
    sigma: &Matrix,
    count: usize,
    seed: u64,
) -> Result<TransitionSamples> {
    if count == 0 {
        return Err(Error::InvalidConfig("sample count must be at least 1".into()));
    }
    let mut rng = rng::stream(seed, &[rng::tag("transition-noise")]);
    let (r, c) = mu.shape();
    let noise = (0..count)
        .map(|_| {
            Matrix::from_vec(
                r,
                c,
                (0..r * c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
            )
        })
        .collect();
    TransitionSamples::from_noise(mu, sigma, noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn zero_scale_reproduces_the_mean() {
        let mu = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]);
        let s = sample_transition_scores(&mu, &Matrix::zeros(2, 2), 4, 1).unwrap();
        assert!(s.samples.iter().all(|t| *t == mu));
    }

    #[test]
    fn single_draw_rebuilds_from_noise() {
        let mu = Matrix::from_rows(&[vec![0.2, 0.1], vec![-0.3, 0.0]]);
        let sigma = Matrix::from_rows(&[vec![0.5, 1.0], vec![2.0, 0.1]]);
        let s = sample_transition_scores(&mu, &sigma, 1, 3).unwrap();
        let again = TransitionSamples::from_noise(&mu, &sigma, s.noise.clone()).unwrap();
        assert_eq!(s, again);
        for i in 0..4 {
            let expect = mu.as_slice()[i] + sigma.as_slice()[i] * s.noise[0].as_slice()[i];
            assert_eq!(s.samples[0].as_slice()[i], expect);
        }
    }

    #[test]
    fn monte_carlo_mean_converges() {
        let mu = Matrix::from_rows(&[vec![1.5]]);
        let sigma = Matrix::from_rows(&[vec![2.0]]);
        let s = sample_transition_scores(&mu, &sigma, 10_000, 17).unwrap();
        let mean: f64 = s.samples.iter().map(|t| t[(0, 0)]).sum::<f64>() / 10_000.0;
        assert!((mean - 1.5).abs() < 3.0 * 2.0 / 100.0);
    }

    #[test]
    fn non_finite_moments_rejected() {
        let mu = Matrix::from_rows(&[vec![f64::INFINITY]]);
        assert!(sample_transition_scores(&mu, &Matrix::zeros(1, 1), 1, 0).is_err());
        assert!(sample_transition_scores(&Matrix::zeros(1, 1), &Matrix::zeros(1, 1), 0, 0).is_err());
    }

    #[test]
    fn generator_gradient_matches_finite_differences() {
        let mut rng = rng::stream(12, &[]);
        let h = 3;
        let l = 3;
        let params = TransitionGenParams::init(h, -0.5, 4);
        let protos = Matrix::from_vec(l, h, (0..l * h).map(|_| rng.random_range(-1.0..1.0)).collect());
        let wm = Matrix::from_vec(l, l, (0..l * l).map(|_| rng.random_range(-1.0..1.0)).collect());
        let ws = Matrix::from_vec(l, l, (0..l * l).map(|_| rng.random_range(-1.0..1.0)).collect());
        let f = |p: &TransitionGenParams, c: &Matrix| {
            let m = p.forward(c).unwrap();
            crate::math::dot(m.mu.as_slice(), wm.as_slice())
                + crate::math::dot(m.log_sigma.as_slice(), ws.as_slice())
        };
        let moments = params.forward(&protos).unwrap();
        let mut grads = TransitionGenParams::zeros(h);
        let mut d_protos = Matrix::zeros(l, h);
        params.backward(&protos, &moments, &wm, &ws, &mut grads, &mut d_protos);
        let eps = 1e-6;
        for (ti, g) in grads.tensors().iter().enumerate() {
            for i in 0..g.len() {
                let mut p = params.clone();
                p.tensors_mut()[ti][i] += eps;
                let mut q = params.clone();
                q.tensors_mut()[ti][i] -= eps;
                let fd = (f(&p, &protos) - f(&q, &protos)) / (2.0 * eps);
                assert!((fd - g[i]).abs() < 1e-6 * fd.abs().max(1.0), "tensor {ti}[{i}]");
            }
        }
        for i in 0..l * h {
            let mut p = protos.clone();
            p.as_mut_slice()[i] += eps;
            let mut q = protos.clone();
            q.as_mut_slice()[i] -= eps;
            let fd = (f(&params, &p) - f(&params, &q)) / (2.0 * eps);
            assert!((fd - d_protos.as_slice()[i]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }
}
