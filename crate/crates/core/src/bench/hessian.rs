//! Timing and storage of the diagonal recursion against the exact oracle as
//! the input grows.

use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::curvature::{
    bce_logit_hessian, db_diag_observed, ggn_diag_exact, DbStats, ORACLE_MAX_OUTPUTS, ORACLE_MAX_PARAMS,
};
use crate::error::{Error, Result};
use crate::net::{build_unet, sigmoid, ArchitectureConfig};
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng as _;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub side: usize,
    pub pixels: usize,
    pub params: usize,
    pub db_seconds: f64,
    /// Entries of the largest curvature message.
    pub db_peak_message: usize,
    /// Entries held at once by the recursion.
    pub db_peak_aux: usize,
    pub exact_seconds: Option<f64>,
}

/// Growth factors per doubling of the pixel count between consecutive sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    pub db_time_ratios: Vec<f64>,
    pub db_memory_ratios: Vec<f64>,
    pub exact_time_ratios: Vec<f64>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn per_doubling(a: f64, b: f64, pixel_ratio: f64) -> f64 {
    (b / a).powf(1.0 / pixel_ratio.log2())
}

/// Runs both curvature routines on a U-net with the given channel ladder at
/// every side length in `sides`; the exact oracle only where it fits its caps.
pub fn bench_hessian(sides: &[usize], channels: &[usize], reps: usize, seed: u64) -> Result<ScalingReport> {
    if sides.len() < 2 || reps == 0 {
        return Err(Error::Config("need at least two sizes and one repetition".into()));
    }
    let mut rows = Vec::with_capacity(sides.len());
    for &side in sides {
        let arch = ArchitectureConfig {
            height: side,
            width: side,
            channels: channels.to_vec(),
            variance_head: false,
            rank: 0,
            ..Default::default()
        };
        let mut r = rng::stream(seed, &[side as u64]);
        let net = build_unet(&arch, &mut r)?;
        let x = Tensor::new(vec![1, side, side], (0..side * side).map(|_| r.random::<f64>()).collect())?;
        let mean = net.mean_network();
        let logits = mean.predict(&x)?;
        let probs = Tensor::new(logits.shape().to_vec(), logits.data().iter().map(|&v| sigmoid(v)).collect())?;
        let loss_h = bce_logit_hessian(&probs);

        let mut times = Vec::with_capacity(reps);
        let mut stats = DbStats::default();
        for _ in 0..reps {
            let t = Instant::now();
            stats = db_diag_observed(mean, &x, &loss_h, &mut |_| {})?.1;
            times.push(t.elapsed().as_secs_f64());
        }
        let exact_seconds = if mean.param_count() <= ORACLE_MAX_PARAMS && side * side <= ORACLE_MAX_OUTPUTS {
            let mut t_exact = Vec::with_capacity(reps);
            for _ in 0..reps {
                let t = Instant::now();
                ggn_diag_exact(mean, &x, &loss_h)?;
                t_exact.push(t.elapsed().as_secs_f64());
            }
            Some(median(t_exact))
        } else {
            None
        };
        rows.push(ScalingRow {
            side,
            pixels: side * side,
            params: mean.param_count(),
            db_seconds: median(times),
            db_peak_message: stats.peak_message,
            db_peak_aux: stats.peak_aux,
            exact_seconds,
        });
    }
    let mut db_time_ratios = Vec::new();
    let mut db_memory_ratios = Vec::new();
    let mut exact_time_ratios = Vec::new();
    for w in rows.windows(2) {
        let pr = w[1].pixels as f64 / w[0].pixels as f64;
        db_time_ratios.push(per_doubling(w[0].db_seconds, w[1].db_seconds, pr));
        db_memory_ratios.push(per_doubling(w[0].db_peak_aux as f64, w[1].db_peak_aux as f64, pr));
        if let (Some(a), Some(b)) = (w[0].exact_seconds, w[1].exact_seconds) {
            exact_time_ratios.push(per_doubling(a, b, pr));
        }
    }
    Ok(ScalingReport { rows, db_time_ratios, db_memory_ratios, exact_time_ratios })
}
