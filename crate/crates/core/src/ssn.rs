//! Low-rank Gaussian logit head.
//!
//! Logits follow `N(μ, diag(D) + PᵀP)` with `D = softplus(raw)` and `P` the
//! `rank x S` factor read straight from the variance head. Samples use the
//! exact reparameterization `η = μ + √D ⊙ ε₀ + Pᵀ ε₁`, so no `S x S` matrix is
//! ever formed.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::net::{sigmoid, SegForward, SegNet};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-image Gaussian over the logit map.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitDistribution {
    /// Mean logits `μ`, one per pixel.
    pub mean: Vec<f64>,
    /// Diagonal variances `D ≥ 0`.
    pub diag: Vec<f64>,
    /// Row-major `rank x S` factor `P`.
    pub factor: Vec<f64>,
    pub rank: usize,
}

impl LogitDistribution {
    /// Zero-variance distribution at `mean`.
    pub fn dirac(mean: Vec<f64>) -> Self {
        let n = mean.len();
        Self { mean, diag: vec![0.0; n], factor: Vec::new(), rank: 0 }
    }

    pub fn new(mean: Vec<f64>, diag: Vec<f64>, factor: Vec<f64>, rank: usize) -> Result<Self> {
        let s = mean.len();
        if diag.len() != s || factor.len() != rank * s {
            return Err(Error::Shape(format!(
                "logit distribution over {s} pixels given {} variances and {} factor entries at rank {rank}",
                diag.len(),
                factor.len()
            )));
        }
        if diag.iter().any(|&d| d < 0.0 || !d.is_finite()) {
            return Err(Error::Numeric("logit variances must be finite and nonnegative".into()));
        }
        Ok(Self { mean, diag, factor, rank })
    }

    pub fn pixels(&self) -> usize {
        self.mean.len()
    }

    /// `Σ[i][j] = D_i δ_ij + Σ_k P_ki P_kj`.
    pub fn covariance(&self, i: usize, j: usize) -> f64 {
        let s = self.pixels();
        let low: f64 = (0..self.rank).map(|k| self.factor[k * s + i] * self.factor[k * s + j]).sum();
        if i == j {
            self.diag[i] + low
        } else {
            low
        }
    }

    pub fn is_dirac(&self) -> bool {
        self.diag.iter().all(|&d| d == 0.0) && self.factor.iter().all(|&p| p == 0.0)
    }

    /// `η = μ + √D ⊙ ε₀ + Pᵀ ε₁` for one noise draw.
    pub fn reparameterize(&self, eps_pixel: &[f64], eps_rank: &[f64]) -> Vec<f64> {
        let s = self.pixels();
        let mut eta: Vec<f64> =
            self.mean.iter().zip(&self.diag).zip(eps_pixel).map(|((m, d), e)| m + d.sqrt() * e).collect();
        for (k, &e) in eps_rank.iter().enumerate().take(self.rank) {
            let row = &self.factor[k * s..(k + 1) * s];
            eta.iter_mut().zip(row).for_each(|(v, p)| *v += p * e);
        }
        eta
    }
}

/// Numerically stable `ln(1 + eˣ)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logit distribution predicted for image `x`.
pub fn predict_logit_distribution(net: &SegNet, x: &Tensor) -> Result<LogitDistribution> {
    let fwd = net.forward(x)?;
    Ok(distribution_from_forward(net, &fwd))
}

pub(crate) fn distribution_from_forward(net: &SegNet, fwd: &SegForward) -> LogitDistribution {
    let mean = fwd.mean_logits().data().to_vec();
    let s = mean.len();
    match &fwd.var_raw {
        Some(raw) => {
            let raw = raw.data();
            let diag = raw[..s].iter().map(|&r| softplus(r)).collect();
            let factor = raw[s..].to_vec();
            LogitDistribution { mean, diag, factor, rank: net.rank() }
        }
        None => LogitDistribution::dirac(mean),
    }
}

/// Standard-normal draws behind `m` logit samples.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitNoise {
    pub samples: usize,
    /// `m x S`
    pub pixel: Vec<f64>,
    /// `m x rank`
    pub rank: Vec<f64>,
}

impl LogitNoise {
    pub fn draw(samples: usize, pixels: usize, rank: usize, rng: &mut Rng) -> Self {
        let pixel = (0..samples * pixels).map(|_| StandardNormal.sample(rng)).collect();
        let rank = (0..samples * rank).map(|_| StandardNormal.sample(rng)).collect();
        Self { samples, pixel, rank }
    }

    fn pixel_row(&self, m: usize) -> &[f64] {
        let s = self.pixel.len() / self.samples;
        &self.pixel[m * s..(m + 1) * s]
    }

    fn rank_row(&self, m: usize) -> &[f64] {
        let r = self.rank.len() / self.samples;
        &self.rank[m * r..(m + 1) * r]
    }
}

/// `m` logit maps drawn from `dist`.
pub fn sample_logits(dist: &LogitDistribution, m: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    if m == 0 {
        return Err(Error::Config("need at least one logit sample".into()));
    }
    let noise = LogitNoise::draw(m, dist.pixels(), dist.rank, rng);
    Ok((0..m).map(|i| dist.reparameterize(noise.pixel_row(i), noise.rank_row(i))).collect())
}

/// `log p(y | η) = Σ_s y_s η_s − softplus(η_s)`.
fn bernoulli_log_lik(eta: &[f64], y: &[f64]) -> f64 {
    eta.iter().zip(y).map(|(&e, &t)| t * e - softplus(e)).sum()
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Loss value and its gradients w.r.t. `μ`, `√D` and `P`.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: f64,
    pub d_mean: Vec<f64>,
    pub d_std: Vec<f64>,
    pub d_factor: Vec<f64>,
}

fn check_mask(y: &[f64], pixels: usize) -> Result<()> {
    if y.len() != pixels {
        return Err(Error::Shape(format!("mask has {} pixels, distribution {pixels}", y.len())));
    }
    if y.iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::Config("mask must be binary".into()));
    }
    Ok(())
}

/// Monte-Carlo negative marginal log-likelihood
/// `−logsumexp_m(Σ_s log p(y_s | η_s⁽ᵐ⁾)) + log M`, in nats.
pub fn ssn_loss(dist: &LogitDistribution, y: &[f64], m: usize, rng: &mut Rng) -> Result<f64> {
    if m == 0 {
        return Err(Error::Config("need at least one logit sample".into()));
    }
    let noise = LogitNoise::draw(m, dist.pixels(), dist.rank, rng);
    Ok(ssn_loss_with_noise(dist, y, &noise)?.loss)
}

/// [`ssn_loss`] at fixed noise, with gradients.
pub fn ssn_loss_with_noise(dist: &LogitDistribution, y: &[f64], noise: &LogitNoise) -> Result<LossEval> {
    let s = dist.pixels();
    check_mask(y, s)?;
    let m = noise.samples;
    if m == 0 {
        return Err(Error::Config("need at least one logit sample".into()));
    }
    let etas: Vec<Vec<f64>> = (0..m).map(|i| dist.reparameterize(noise.pixel_row(i), noise.rank_row(i))).collect();
    let log_liks: Vec<f64> = etas.iter().map(|eta| bernoulli_log_lik(eta, y)).collect();
    let lse = log_sum_exp(&log_liks);
    let loss = -lse + (m as f64).ln();

    let mut d_mean = vec![0.0; s];
    let mut d_std = vec![0.0; s];
    let mut d_factor = vec![0.0; dist.rank * s];
    for (i, eta) in etas.iter().enumerate() {
        let weight = (log_liks[i] - lse).exp();
        if weight == 0.0 {
            continue;
        }
        let e0 = noise.pixel_row(i);
        let e1 = noise.rank_row(i);
        for p in 0..s {
            // d(-log p(y|η))/dη = σ(η) − y
            let g = weight * (sigmoid(eta[p]) - y[p]);
            d_mean[p] += g;
            d_std[p] += g * e0[p];
            for k in 0..dist.rank {
                d_factor[k * s + p] += g * e1[k];
            }
        }
    }
    Ok(LossEval { loss, d_mean, d_std, d_factor })
}

/// Pixelwise binary cross-entropy of `sigmoid(logits)` against `y`, summed.
pub fn bce(logits: &[f64], y: &[f64]) -> f64 {
    logits.iter().zip(y).map(|(&e, &t)| softplus(e) - t * e).sum()
}

/// Loss and gradient w.r.t. every network weight for one image at fixed noise.
pub fn loss_and_grad(net: &SegNet, x: &Tensor, y: &[f64], noise: &LogitNoise) -> Result<(f64, Vec<f64>)> {
    let fwd = net.forward(x)?;
    let dist = distribution_from_forward(net, &fwd);
    let eval = ssn_loss_with_noise(&dist, y, noise)?;
    let shape = fwd.mean_logits().shape().to_vec();
    let d_mean = Tensor::from_parts(shape, eval.d_mean);
    let d_var = fwd.var_raw.as_ref().map(|raw| {
        let s = dist.pixels();
        let mut g = Vec::with_capacity(raw.len());
        // √softplus(r) has derivative σ(r) / (2 √softplus(r))
        for p in 0..s {
            let sd = dist.diag[p].sqrt();
            let r = raw.data()[p];
            g.push(if sd > 0.0 { eval.d_std[p] * sigmoid(r) / (2.0 * sd) } else { 0.0 });
        }
        g.extend_from_slice(&eval.d_factor);
        Tensor::from_parts(raw.shape().to_vec(), g)
    });
    let grads = net.backward(&fwd, &d_mean, d_var.as_ref())?;
    Ok((eval.loss, grads))
}
