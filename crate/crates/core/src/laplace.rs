//! Post-hoc diagonal Laplace approximation over shared plus mean-head weights.
//!
//! The variance head is excluded from the posterior: sampled networks carry
//! the MAP variance-head weights unchanged.

use rand::RngCore;
use rayon::prelude::*;

use crate::curvature::{accumulate_dataset_curvature, GgnDiagonal, PROB_CLAMP};
use crate::error::{Error, Result};
use crate::net::{sigmoid, SegNet};
use crate::rng::{self, Rng};
use crate::ssn::{distribution_from_forward, LogitDistribution, LogitNoise};
use crate::tensor::Tensor;
use crate::train::Example;
use rand_distr::{Distribution, StandardNormal};

pub const DEFAULT_PRIOR_PRECISION: f64 = 1e-2;
/// Weight samples per prediction.
pub const DEFAULT_POSTERIOR_SAMPLES: usize = 50;
/// Logit samples per weight sample.
pub const DEFAULT_LOGIT_SAMPLES: usize = 20;

/// `N(θ*_MAP, diag(curvature + τ)⁻¹)` over the mean-path weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LaplacePosterior {
    map_weights: Vec<f64>,
    curvature: Vec<f64>,
    precision: Vec<f64>,
    prior_precision: f64,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("prior precision must be positive and finite, got {tau}")))
    }
}

impl LaplacePosterior {
    pub fn from_curvature(map_weights: Vec<f64>, curvature: GgnDiagonal, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        if curvature.len() != map_weights.len() {
            return Err(Error::Shape(format!(
                "{} MAP weights but {} curvature entries",
                map_weights.len(),
                curvature.len()
            )));
        }
        if curvature.values.iter().any(|&c| c < 0.0 || !c.is_finite()) {
            return Err(Error::Numeric("curvature must be finite and nonnegative".into()));
        }
        let curvature = curvature.values;
        let precision = curvature.iter().map(|c| c + tau).collect();
        Ok(Self { map_weights, curvature, precision, prior_precision: tau })
    }

    /// Same curvature, different prior precision.
    pub fn with_prior_precision(&self, tau: f64) -> Result<Self> {
        Self::from_curvature(self.map_weights.clone(), GgnDiagonal { values: self.curvature.clone() }, tau)
    }

    pub fn map_weights(&self) -> &[f64] {
        &self.map_weights
    }

    pub fn precision(&self) -> &[f64] {
        &self.precision
    }

    pub fn curvature(&self) -> &[f64] {
        &self.curvature
    }

    pub fn prior_precision(&self) -> f64 {
        self.prior_precision
    }

    pub fn variance(&self) -> Vec<f64> {
        self.precision.iter().map(|p| 1.0 / p).collect()
    }

    pub fn len(&self) -> usize {
        self.map_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map_weights.is_empty()
    }

    /// `θ*_MAP + precision^(-1/2) ⊙ ε`.
    pub fn sample_weight(&self, rng: &mut Rng) -> Vec<f64> {
        self.map_weights
            .iter()
            .zip(&self.precision)
            .map(|(m, p)| {
                let e: f64 = StandardNormal.sample(rng);
                m + e / p.sqrt()
            })
            .collect()
    }

    pub fn sample_weights(&self, n: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        if n == 0 {
            return Err(Error::Config("need at least one posterior sample".into()));
        }
        Ok((0..n).map(|_| self.sample_weight(rng)).collect())
    }

    /// Copy of `net` with the mean-path weights replaced by `weights`.
    pub fn load_into(&self, net: &SegNet, weights: &[f64]) -> Result<SegNet> {
        let mut out = net.clone();
        out.set_mean_params(weights)?;
        Ok(out)
    }
}

/// Fits the posterior at the current weights of `net` from the summed
/// per-image curvature plus `tau`.
pub fn fit(net: &SegNet, images: &[Tensor], tau: f64) -> Result<LaplacePosterior> {
    check_tau(tau)?;
    let curvature = accumulate_dataset_curvature(net, images)?;
    LaplacePosterior::from_curvature(net.mean_params(), curvature, tau)
}

/// Prediction of one weight sample.
#[derive(Clone, Debug)]
pub struct PredictiveSample {
    pub dist: LogitDistribution,
    /// `m_η x S` values `sigmoid(η)`.
    pub logit_probs: Vec<Vec<f64>>,
    /// Marginal pixel probability: mean over logit samples of `sigmoid(η)`.
    pub probs: Vec<f64>,
    /// `sigmoid(μ)`.
    pub mean_logit_probs: Vec<f64>,
}

/// Evaluates one network and integrates its logit distribution with `m_eta`
/// samples. A zero-variance distribution is integrated exactly.
pub fn predict_sample(net: &SegNet, x: &Tensor, m_eta: usize, rng: &mut Rng) -> Result<PredictiveSample> {
    if m_eta == 0 {
        return Err(Error::Config("need at least one logit sample".into()));
    }
    predict_with_noise(net, x, &logit_noise(net, m_eta, rng))
}

fn logit_noise(net: &SegNet, m_eta: usize, rng: &mut Rng) -> LogitNoise {
    let rank = if net.has_variance_head() { net.rank() } else { 0 };
    LogitNoise::draw(m_eta, net.pixels(), rank, rng)
}

/// [`predict_sample`] at fixed logit noise.
pub fn predict_with_noise(net: &SegNet, x: &Tensor, noise: &LogitNoise) -> Result<PredictiveSample> {
    let m_eta = noise.samples;
    if m_eta == 0 {
        return Err(Error::Config("need at least one logit sample".into()));
    }
    let fwd = net.forward(x)?;
    let dist = distribution_from_forward(net, &fwd);
    let mean_logit_probs: Vec<f64> = dist.mean.iter().map(|&m| sigmoid(m)).collect();
    if dist.is_dirac() {
        return Ok(PredictiveSample {
            logit_probs: vec![mean_logit_probs.clone(); m_eta],
            probs: mean_logit_probs.clone(),
            mean_logit_probs,
            dist,
        });
    }
    let s = dist.pixels();
    if noise.pixel.len() != m_eta * s || noise.rank.len() != m_eta * dist.rank {
        return Err(Error::Shape(format!("logit noise does not fit {s} pixels at rank {}", dist.rank)));
    }
    let logit_probs: Vec<Vec<f64>> = (0..m_eta)
        .map(|i| {
            let r = &noise.rank[i * dist.rank..(i + 1) * dist.rank];
            dist.reparameterize(&noise.pixel[i * s..(i + 1) * s], r).into_iter().map(sigmoid).collect()
        })
        .collect();
    let mut probs = vec![0.0; s];
    for row in &logit_probs {
        probs.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    probs.iter_mut().for_each(|p| *p /= m_eta as f64);
    Ok(PredictiveSample { dist, logit_probs, probs, mean_logit_probs })
}

/// Bayesian model average inputs: `n_theta` posterior networks, each
/// integrated over `m_eta` logit samples.
///
/// All weight samples share one draw of logit noise, so differences between
/// them are due to the weights alone. Sample `i` draws its weights from a
/// stream derived from one draw of `rng` and `i`, so the result does not
/// depend on thread count.
pub fn predictive_ensemble(
    net: &SegNet,
    post: &LaplacePosterior,
    x: &Tensor,
    n_theta: usize,
    m_eta: usize,
    rng: &mut Rng,
) -> Result<Vec<PredictiveSample>> {
    if n_theta == 0 {
        return Err(Error::Config("need at least one posterior sample".into()));
    }
    if m_eta == 0 {
        return Err(Error::Config("need at least one logit sample".into()));
    }
    let base = rng.next_u64();
    let noise = logit_noise(net, m_eta, rng);
    (0..n_theta)
        .into_par_iter()
        .map(|i| {
            let weights = post.sample_weight(&mut rng::stream(base, &[i as u64]));
            predict_with_noise(&post.load_into(net, &weights)?, x, &noise)
        })
        .collect()
}

/// Same as [`predictive_ensemble`] for an explicit list of networks of one
/// architecture.
pub fn member_predictions(
    members: &[SegNet],
    x: &Tensor,
    m_eta: usize,
    rng: &mut Rng,
) -> Result<Vec<PredictiveSample>> {
    let Some(first) = members.first() else {
        return Err(Error::Config("need at least one ensemble member".into()));
    };
    if m_eta == 0 {
        return Err(Error::Config("need at least one logit sample".into()));
    }
    let noise = logit_noise(first, m_eta, rng);
    members.par_iter().map(|net| predict_with_noise(net, x, &noise)).collect()
}

/// Mean over examples of `−Σ_s log p̄_s(y_s)` with `p̄` the model-averaged
/// pixel probability from `n_theta` weight and `m_eta` logit samples.
pub fn predictive_nll(
    net: &SegNet,
    post: &LaplacePosterior,
    examples: &[Example],
    n_theta: usize,
    m_eta: usize,
    seed: u64,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Config("predictive NLL needs at least one example".into()));
    }
    let per_image = examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let preds = predictive_ensemble(net, post, &ex.image, n_theta, m_eta, &mut rng::stream(seed, &[i as u64]))?;
            if ex.mask.len() != net.pixels() {
                return Err(Error::Shape(format!("mask has {} pixels, image {}", ex.mask.len(), net.pixels())));
            }
            let mut nll = 0.0;
            for (p, &y) in ex.mask.iter().enumerate() {
                let mean = preds.iter().map(|q| q.probs[p]).sum::<f64>() / n_theta as f64;
                let mean = mean.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                nll -= if y == 1.0 { mean.ln() } else { (1.0 - mean).ln() };
            }
            Ok(nll)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_image.iter().sum::<f64>() / examples.len() as f64)
}

/// Prior precision from `grid` with the lowest [`predictive_nll`] on
/// `examples`, and the NLL of every grid value. Ties keep the earlier value.
pub fn select_prior_precision(
    net: &SegNet,
    post: &LaplacePosterior,
    examples: &[Example],
    grid: &[f64],
    n_theta: usize,
    m_eta: usize,
    seed: u64,
) -> Result<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(Error::Config("prior precision grid is empty".into()));
    }
    let mut curve = Vec::with_capacity(grid.len());
    for &tau in grid {
        let candidate = post.with_prior_precision(tau)?;
        curve.push((tau, predictive_nll(net, &candidate, examples, n_theta, m_eta, seed)?));
    }
    let best = curve.iter().fold(curve[0], |b, &c| if c.1 < b.1 { c } else { b });
    Ok((best.0, curve))
}
