//! MAP training of the segmentation network with Adam.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curvature::pairwise_sum;
use crate::error::{Error, Result};
use crate::net::SegNet;
use crate::rng;
use crate::ssn::{loss_and_grad, LogitNoise};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Logit samples `M` per loss evaluation.
    pub samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 3e-3, batch_size: 10, epochs: 40, samples: 20, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("train.samples must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// One labelled training image.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image: Tensor,
    pub mask: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: SegNet,
    /// Mean batch loss after each optimizer step.
    pub step_losses: Vec<f64>,
    /// Mean loss over each epoch.
    pub epoch_losses: Vec<f64>,
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

const TRAIN_STREAM: u64 = 0x7472_6169_6e;

/// Minimizes the mean Monte-Carlo loss over minibatches.
///
/// Per-image logit noise comes from a stream keyed by `(seed, epoch, index)`,
/// so the trajectory is identical regardless of thread count.
pub fn train_map(mut net: SegNet, data: &[Example], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() && cfg.epochs > 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut params = net.params();
    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let rank = if net.has_variance_head() { net.rank() } else { 0 };
    let pixels = net.pixels();
    let mut step_losses = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, &[TRAIN_STREAM, epoch as u64]));
        let mut epoch_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let mut r = rng::stream(cfg.seed, &[TRAIN_STREAM, epoch as u64, i as u64]);
                    let noise = LogitNoise::draw(cfg.samples, pixels, rank, &mut r);
                    loss_and_grad(&net, &data[i].image, &data[i].mask, &noise)
                })
                .collect::<Vec<_>>();
            let mut losses = Vec::with_capacity(batch.len());
            let mut grads = Vec::with_capacity(batch.len());
            for r in results {
                let (l, g) = match r {
                    Ok(v) => v,
                    Err(Error::Numeric(_)) => return Err(Error::Diverged { epoch, loss: f64::NAN }),
                    Err(e) => return Err(e),
                };
                losses.push(l);
                grads.push(g);
            }
            let batch_loss = losses.iter().sum::<f64>() / batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { epoch, loss: batch_loss });
            }
            let mut g = pairwise_sum(grads);
            let scale = 1.0 / batch.len() as f64;
            g.iter_mut().for_each(|v| *v *= scale);
            adam.step(&mut params, &g);
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged { epoch, loss: batch_loss });
            }
            net.set_params(&params)?;
            step_losses.push(batch_loss);
            epoch_total += losses.iter().sum::<f64>();
        }
        epoch_losses.push(epoch_total / data.len() as f64);
    }
    Ok(TrainOutcome { net, step_losses, epoch_losses })
}
