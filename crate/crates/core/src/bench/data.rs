//! Synthetic segmentation data: soft-edged ellipses over a textured background.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::train::Example;

const DATA_STREAM: u64 = 0x6461_7461;
const MIN_FOREGROUND: f64 = 0.05;
const MAX_FOREGROUND: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Std of the additive noise in every generated image.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_images: 200, height: 32, width: 32, train_fraction: 0.7, val_fraction: 0.1, noise_std: 0.02, seed: 0 }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_images < 10 {
            return Err(Error::Config(format!("need at least 10 images, got {}", self.n_images)));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("images must be at least 8x8".into()));
        }
        let (t, v) = (self.train_fraction, self.val_fraction);
        if !(t > 0.0 && v >= 0.0 && t + v < 1.0) {
            return Err(Error::Config("split fractions must leave a nonempty test set".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be nonnegative".into()));
        }
        Ok(())
    }

    /// `(train, val, test)` sizes.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.n_images;
        let train = ((n as f64) * self.train_fraction).round() as usize;
        let val = ((n as f64) * self.val_fraction).round() as usize;
        (train, val, n - train - val)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub angle: f64,
    pub intensity: f64,
}

impl Ellipse {
    /// Normalized radius: `< 1` inside.
    fn radius(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub index: usize,
    pub ellipses: Vec<Ellipse>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub image: Tensor,
    pub mask: Vec<f64>,
    pub provenance: Provenance,
}

impl SyntheticSample {
    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().sum::<f64>() / self.mask.len() as f64
    }

    pub fn example(&self) -> Example {
        Example { image: self.image.clone(), mask: self.mask.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<SyntheticSample>,
    pub val: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn train_examples(&self) -> Vec<Example> {
        self.train.iter().map(SyntheticSample::example).collect()
    }
}

fn draw_ellipses(h: usize, w: usize, r: &mut rng::Rng) -> Vec<Ellipse> {
    let n = r.random_range(1..=3);
    let side = h.min(w) as f64;
    (0..n)
        .map(|_| Ellipse {
            cx: r.random_range(0.2..0.8) * w as f64,
            cy: r.random_range(0.2..0.8) * h as f64,
            a: r.random_range(0.1..0.3) * side,
            b: r.random_range(0.1..0.3) * side,
            angle: r.random_range(0.0..std::f64::consts::PI),
            intensity: r.random_range(0.65..0.9),
        })
        .collect()
}

fn mask_of(ellipses: &[Ellipse], h: usize, w: usize) -> Vec<f64> {
    let mut mask = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
            if ellipses.iter().any(|e| e.radius(x, y) <= 1.0) {
                mask[i * w + j] = 1.0;
            }
        }
    }
    mask
}

/// One image; deterministic in `(seed, index)`.
pub fn generate_sample(cfg: &DataConfig, index: usize) -> SyntheticSample {
    let (h, w) = (cfg.height, cfg.width);
    let mut r = rng::stream(cfg.seed, &[DATA_STREAM, index as u64]);
    let (ellipses, mask) = loop {
        let e = draw_ellipses(h, w, &mut r);
        let m = mask_of(&e, h, w);
        let frac = m.iter().sum::<f64>() / m.len() as f64;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            break (e, m);
        }
    };

    let level = r.random_range(0.15..0.35);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let fx = r.random_range(0.5..3.0);
            let fy = r.random_range(0.5..3.0);
            let phase = r.random_range(0.0..std::f64::consts::TAU);
            let amp = r.random_range(0.02..0.06);
            (fx, fy, phase, amp)
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_std).expect("validated noise std");
    let mut img = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
            let (u, v) = (x / w as f64, y / h as f64);
            let bg = level
                + waves
                    .iter()
                    .map(|&(fx, fy, p, a)| a * (std::f64::consts::TAU * (fx * u + fy * v) + p).sin())
                    .sum::<f64>();
            let mut val = bg;
            for e in &ellipses {
                // soft edge about one pixel wide
                let edge = (e.radius(x, y) - 1.0) * e.a.min(e.b);
                let weight = 1.0 / (1.0 + (edge / 0.5).exp());
                val = val * (1.0 - weight) + e.intensity * weight;
            }
            img[i * w + j] = (val + noise.sample(&mut r)).clamp(0.0, 1.0);
        }
    }
    SyntheticSample {
        image: Tensor::from_parts(vec![1, h, w], img),
        mask,
        provenance: Provenance { seed: cfg.seed, index, ellipses },
    }
}

pub fn generate(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (n_train, n_val, _) = cfg.split_sizes();
    let mut all: Vec<SyntheticSample> = (0..cfg.n_images).map(|i| generate_sample(cfg, i)).collect();
    let test = all.split_off(n_train + n_val);
    let val = all.split_off(n_train);
    Ok(Dataset { train: all, val, test })
}

/// 32x32 dataset of `n` images with the default split.
pub fn generate_dataset(n: usize, seed: u64) -> Result<Dataset> {
    generate(&DataConfig { n_images: n, seed, ..Default::default() })
}
