//! Uncertainty measures over posterior and logit samples, and aggregation of
//! per-pixel maps to image scores.
//!
//! Entropies and divergences are in nats.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::laplace::PredictiveSample;

pub const PROB_EPS: f64 = 1e-7;
/// Side of the patch window used for patch aggregation.
pub const DEFAULT_PATCH: usize = 10;

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Pixel probabilities for `n_theta` weight samples, each with `m_eta` logit
/// samples. All values are clamped to `[ε, 1−ε]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleCube {
    n_theta: usize,
    m_eta: usize,
    pixels: usize,
    /// `n_θ x m_η x S`
    probs: Vec<f64>,
    /// `n_θ x S`
    mean_probs_per_theta: Vec<f64>,
    /// `n_θ x S` values `sigmoid(μ_θ)`.
    mean_logit_probs: Vec<f64>,
}

impl SampleCube {
    pub fn new(
        n_theta: usize,
        m_eta: usize,
        pixels: usize,
        probs: Vec<f64>,
        mean_logit_probs: Vec<f64>,
    ) -> Result<Self> {
        if n_theta == 0 || m_eta == 0 || pixels == 0 {
            return Err(Error::Config("sample cube needs at least one sample of each kind and one pixel".into()));
        }
        if probs.len() != n_theta * m_eta * pixels || mean_logit_probs.len() != n_theta * pixels {
            return Err(Error::Shape(format!(
                "cube {n_theta}x{m_eta}x{pixels} given {} probabilities and {} mean-logit probabilities",
                probs.len(),
                mean_logit_probs.len()
            )));
        }
        if probs.iter().chain(&mean_logit_probs).any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Numeric("probabilities must lie in [0, 1]".into()));
        }
        let probs: Vec<f64> = probs.into_iter().map(clamp).collect();
        let mean_logit_probs = mean_logit_probs.into_iter().map(clamp).collect();
        let mut mean_probs_per_theta = vec![0.0; n_theta * pixels];
        for t in 0..n_theta {
            let row = &mut mean_probs_per_theta[t * pixels..(t + 1) * pixels];
            for m in 0..m_eta {
                let off = (t * m_eta + m) * pixels;
                row.iter_mut().zip(&probs[off..off + pixels]).for_each(|(a, b)| *a += b);
            }
            row.iter_mut().for_each(|v| *v = clamp(*v / m_eta as f64));
        }
        Ok(Self { n_theta, m_eta, pixels, probs, mean_probs_per_theta, mean_logit_probs })
    }

    /// Stacks per-weight-sample predictions along the θ axis.
    pub fn from_predictions(samples: &[PredictiveSample]) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::Config("sample cube needs at least one weight sample".into()));
        };
        let m_eta = first.logit_probs.len();
        let pixels = first.mean_logit_probs.len();
        let mut probs = Vec::with_capacity(samples.len() * m_eta * pixels);
        let mut mean_logit = Vec::with_capacity(samples.len() * pixels);
        for s in samples {
            if s.logit_probs.len() != m_eta || s.mean_logit_probs.len() != pixels {
                return Err(Error::Shape("predictions differ in sample count or pixel count".into()));
            }
            for row in &s.logit_probs {
                if row.len() != pixels {
                    return Err(Error::Shape("logit sample has wrong pixel count".into()));
                }
                probs.extend_from_slice(row);
            }
            mean_logit.extend_from_slice(&s.mean_logit_probs);
        }
        Self::new(samples.len(), m_eta, pixels, probs, mean_logit)
    }

    pub fn n_theta(&self) -> usize {
        self.n_theta
    }

    pub fn m_eta(&self) -> usize {
        self.m_eta
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn mean_probs(&self, theta: usize) -> &[f64] {
        &self.mean_probs_per_theta[theta * self.pixels..(theta + 1) * self.pixels]
    }

    pub fn mean_logit_probs(&self, theta: usize) -> &[f64] {
        &self.mean_logit_probs[theta * self.pixels..(theta + 1) * self.pixels]
    }

    /// Mean over all `(θ, η)` samples.
    pub fn marginal_probs(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.pixels];
        for t in 0..self.n_theta {
            out.iter_mut().zip(self.mean_probs(t)).for_each(|(a, b)| *a += b);
        }
        out.into_iter().map(|v| clamp(v / self.n_theta as f64)).collect()
    }
}

/// Bernoulli entropy.
pub fn bernoulli_entropy(p: f64) -> f64 {
    let p = clamp(p);
    -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
}

/// `KL(Bern(p) ‖ Bern(q))`, never negative.
pub fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let (p, q) = (clamp(p), clamp(q));
    (p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()).max(0.0)
}

pub fn predictive_entropy(cube: &SampleCube) -> Vec<f64> {
    cube.marginal_probs().into_iter().map(bernoulli_entropy).collect()
}

pub fn expected_entropy(cube: &SampleCube) -> Vec<f64> {
    let mut out = vec![0.0; cube.pixels];
    for t in 0..cube.n_theta {
        out.iter_mut().zip(cube.mean_probs(t)).for_each(|(a, &p)| *a += bernoulli_entropy(p));
    }
    out.iter_mut().for_each(|v| *v /= cube.n_theta as f64);
    out
}

/// `PE − EE`, unfloored.
pub fn mutual_information_raw(cube: &SampleCube) -> Vec<f64> {
    predictive_entropy(cube).iter().zip(expected_entropy(cube)).map(|(pe, ee)| pe - ee).collect()
}

/// `PE − EE` floored at zero.
pub fn mutual_information(cube: &SampleCube) -> Vec<f64> {
    mutual_information_raw(cube).into_iter().map(|v| v.max(0.0)).collect()
}

/// Mean Bernoulli KL over ordered pairs of distinct weight samples, summed
/// over pixels.
pub fn epkl(cube: &SampleCube) -> Result<f64> {
    let n = cube.n_theta;
    if n < 2 {
        return Err(Error::Undefined("EPKL needs at least two weight samples".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let pi = cube.mean_probs(i);
        for j in (i + 1)..n {
            let pj = cube.mean_probs(j);
            total += pi.iter().zip(pj).map(|(&a, &b)| bernoulli_kl(a, b) + bernoulli_kl(b, a)).sum::<f64>();
        }
    }
    Ok(total / (n * (n - 1)) as f64)
}

/// Population variance over θ of `sigmoid(μ_θ)`.
pub fn pixel_variance(cube: &SampleCube) -> Vec<f64> {
    let n = cube.n_theta as f64;
    let mut mean = vec![0.0; cube.pixels];
    for t in 0..cube.n_theta {
        mean.iter_mut().zip(cube.mean_logit_probs(t)).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|v| *v /= n);
    let mut var = vec![0.0; cube.pixels];
    for t in 0..cube.n_theta {
        for ((v, m), p) in var.iter_mut().zip(&mean).zip(cube.mean_logit_probs(t)) {
            *v += (p - m).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    var
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    Pe,
    Ee,
    Mi,
    Epkl,
    Pv,
}

impl Measure {
    pub const ALL: [Measure; 5] = [Measure::Pe, Measure::Ee, Measure::Mi, Measure::Epkl, Measure::Pv];

    pub fn name(self) -> &'static str {
        match self {
            Measure::Pe => "pe",
            Measure::Ee => "ee",
            Measure::Mi => "mi",
            Measure::Epkl => "epkl",
            Measure::Pv => "pv",
        }
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Measure::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::Config(format!("unknown measure `{s}`")))
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Sum,
    Patch(usize),
    /// Image-level measure; no pixel map to aggregate.
    Image,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregation::Sum => f.write_str("sum"),
            Aggregation::Patch(k) => write!(f, "patch{k}"),
            Aggregation::Image => f.write_str("image"),
        }
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Aggregation::Sum),
            "image" => Ok(Aggregation::Image),
            _ => s
                .strip_prefix("patch")
                .and_then(|k| k.parse().ok())
                .map(Aggregation::Patch)
                .ok_or_else(|| Error::Config(format!("unknown aggregation `{s}`"))),
        }
    }
}

/// Sum of the whole map.
pub fn aggregate_sum(map: &[f64]) -> f64 {
    map.iter().sum()
}

/// Largest sum over all `k x k` windows fully inside the `h x w` map.
pub fn aggregate_patch(map: &[f64], h: usize, w: usize, k: usize) -> Result<f64> {
    if map.len() != h * w {
        return Err(Error::Shape(format!("map of {} values is not {h}x{w}", map.len())));
    }
    if k == 0 || k > h || k > w {
        return Err(Error::Config(format!("patch size {k} does not fit a {h}x{w} map")));
    }
    // summed-area table with a zero border
    let mut sat = vec![0.0; (h + 1) * (w + 1)];
    for i in 0..h {
        let mut row = 0.0;
        for j in 0..w {
            row += map[i * w + j];
            sat[(i + 1) * (w + 1) + j + 1] = sat[i * (w + 1) + j + 1] + row;
        }
    }
    let at = |i: usize, j: usize| sat[i * (w + 1) + j];
    let mut best = f64::NEG_INFINITY;
    for i in 0..=(h - k) {
        for j in 0..=(w - k) {
            let s = at(i + k, j + k) - at(i, j + k) - at(i + k, j) + at(i, j);
            best = best.max(s);
        }
    }
    Ok(best)
}

pub fn aggregate(map: &[f64], h: usize, w: usize, agg: Aggregation) -> Result<f64> {
    match agg {
        Aggregation::Sum => {
            if map.len() != h * w {
                return Err(Error::Shape(format!("map of {} values is not {h}x{w}", map.len())));
            }
            Ok(aggregate_sum(map))
        }
        Aggregation::Patch(k) => aggregate_patch(map, h, w, k),
        Aggregation::Image => Err(Error::Config("pixel maps need sum or patch aggregation".into())),
    }
}

/// All five measures for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyReport {
    pub height: usize,
    pub width: usize,
    pub pe: Vec<f64>,
    pub ee: Vec<f64>,
    pub mi: Vec<f64>,
    pub mi_raw: Vec<f64>,
    pub pv: Vec<f64>,
    /// `None` when fewer than two weight samples exist.
    pub epkl: Option<f64>,
}

impl UncertaintyReport {
    pub fn from_cube(cube: &SampleCube, height: usize, width: usize) -> Result<Self> {
        if height * width != cube.pixels {
            return Err(Error::Shape(format!("{height}x{width} does not match {} pixels", cube.pixels)));
        }
        let pe = predictive_entropy(cube);
        let ee = expected_entropy(cube);
        let mi_raw: Vec<f64> = pe.iter().zip(&ee).map(|(a, b)| a - b).collect();
        let mi = mi_raw.iter().map(|v| v.max(0.0)).collect();
        let epkl = match epkl(cube) {
            Ok(v) => Some(v),
            Err(Error::Undefined(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self { height, width, pe, ee, mi, mi_raw, pv: pixel_variance(cube), epkl })
    }

    pub fn map(&self, m: Measure) -> Option<&[f64]> {
        match m {
            Measure::Pe => Some(&self.pe),
            Measure::Ee => Some(&self.ee),
            Measure::Mi => Some(&self.mi),
            Measure::Pv => Some(&self.pv),
            Measure::Epkl => None,
        }
    }

    /// Image-level scores: every pixel measure under every aggregation in
    /// `aggs`, then EPKL under [`Aggregation::Image`]. Undefined scores are
    /// `None`.
    pub fn scores(&self, aggs: &[Aggregation]) -> Result<Vec<(Measure, Aggregation, Option<f64>)>> {
        let mut out = Vec::new();
        for m in Measure::ALL {
            match self.map(m) {
                Some(map) => {
                    for &a in aggs {
                        out.push((m, a, Some(aggregate(map, self.height, self.width, a)?)));
                    }
                }
                None => out.push((m, Aggregation::Image, self.epkl)),
            }
        }
        Ok(out)
    }
}
