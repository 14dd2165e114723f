//! Generalized Gauss-Newton diagonals.
//!
//! [`db_diag`] is the linear-in-pixels diagonal backpropagation: it walks the
//! network backwards carrying only the diagonal of the curvature message `M`,
//! emitting `D(J_θᵀ M J_θ)` per layer and replacing `M` by `D(J_xᵀ M J_x)`.
//! Every Jacobian entry of the supported layers is a single weight, a single
//! input value or a fixed scalar, so both diagonals are the ordinary transposed
//! pass run on squared coefficients.
//!
//! [`ggn_diag_exact`] is the reference: it materializes `J_θ f` row by row and
//! is quadratic in the number of output pixels.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::net::kernels;
use crate::net::{avg_pool_transpose, sigmoid, upsample_transpose, Layer, Network, SegNet, Trace};
use crate::tensor::Tensor;

/// Probability clamp applied before the Bernoulli logit Hessian.
pub const PROB_CLAMP: f64 = 1e-7;
/// Largest network the exact oracle accepts.
pub const ORACLE_MAX_PARAMS: usize = 5_000;
/// Largest output the exact oracle accepts.
pub const ORACLE_MAX_OUTPUTS: usize = 4_096;

/// Diagonal curvature matrix over a layer input or output.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvatureMessage {
    pub diag: Tensor,
}

impl CurvatureMessage {
    pub fn new(diag: Tensor) -> Self {
        Self { diag }
    }

    pub fn trace(&self) -> f64 {
        self.diag.sum()
    }
}

/// Per-parameter curvature, in network parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct GgnDiagonal {
    pub values: Vec<f64>,
}

impl GgnDiagonal {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Hessian of pixelwise binary cross-entropy w.r.t. the logits: `p (1 - p)`.
pub fn bce_logit_hessian(probs: &Tensor) -> CurvatureMessage {
    let diag = probs
        .data()
        .iter()
        .map(|&p| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            p * (1.0 - p)
        })
        .collect();
    CurvatureMessage::new(Tensor::from_parts(probs.shape().to_vec(), diag))
}

/// What one step of the recursion did.
#[derive(Debug)]
pub enum StepKind<'a> {
    /// An atomic layer: `message_in = D(J_xᵀ diag(message_out) J_x)`.
    Layer { layer: &'a Layer, input: &'a Tensor },
    /// A skip merge: `message_in = branch + identity`.
    SkipMerge { branch: &'a [f64], identity: &'a [f64] },
}

/// Observation hook for [`db_diag_observed`].
#[derive(Debug)]
pub struct DbStep<'a> {
    /// Layer index path from the top-level network into nested skips.
    pub path: &'a [usize],
    pub kind: StepKind<'a>,
    /// Diagonal message at the layer output.
    pub message_out: &'a [f64],
    /// Diagonal message handed to the layer input.
    pub message_in: &'a [f64],
}

/// Auxiliary storage of one [`db_diag`] run, in f64 slots.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DbStats {
    /// Largest curvature message held.
    pub peak_message: usize,
    /// Largest simultaneous message-in + message-out + layer-block footprint.
    pub peak_aux: usize,
}

/// Diagonal backpropagation of `loss_h` through `net` at input `x`.
pub fn db_diag(net: &Network, x: &Tensor, loss_h: &CurvatureMessage) -> Result<GgnDiagonal> {
    Ok(db_diag_observed(net, x, loss_h, &mut |_| {})?.0)
}

/// [`db_diag`] with a per-step observer and storage statistics.
pub fn db_diag_observed(
    net: &Network,
    x: &Tensor,
    loss_h: &CurvatureMessage,
    observer: &mut dyn FnMut(&DbStep),
) -> Result<(GgnDiagonal, DbStats)> {
    let trace = net.forward(x)?;
    db_diag_from_trace(net, &trace, loss_h, observer)
}

pub(crate) fn db_diag_from_trace(
    net: &Network,
    trace: &Trace,
    loss_h: &CurvatureMessage,
    observer: &mut dyn FnMut(&DbStep),
) -> Result<(GgnDiagonal, DbStats)> {
    if loss_h.diag.len() != trace.output().len() {
        return Err(Error::Shape(format!(
            "loss Hessian has {} entries, network output {}",
            loss_h.diag.len(),
            trace.output().len()
        )));
    }
    if !loss_h.diag.is_finite() {
        return Err(Error::Numeric("loss Hessian".into()));
    }
    let mut values = vec![0.0; net.param_count()];
    let mut stats = DbStats::default();
    let mut path = Vec::new();
    backprop_diag(net, trace, loss_h.diag.data().to_vec(), &mut values, &mut path, observer, &mut stats)?;
    Ok((GgnDiagonal { values }, stats))
}

fn backprop_diag(
    net: &Network,
    trace: &Trace,
    mut m: Vec<f64>,
    out: &mut [f64],
    path: &mut Vec<usize>,
    observer: &mut dyn FnMut(&DbStep),
    stats: &mut DbStats,
) -> Result<Vec<f64>> {
    let ranges = net.param_ranges();
    for (i, layer) in net.layers().iter().enumerate().rev() {
        path.push(i);
        let x = trace.layer_input(i);
        let m_in = match layer {
            Layer::Skip(sub) => {
                let inner = trace.inner(i).expect("skip layer records its sub-trace");
                let split = inner.output().len();
                if split > m.len() {
                    return Err(Error::Structure(format!("skip message at {path:?} too short")));
                }
                let identity = m.split_off(split);
                let branch = backprop_diag(sub, inner, m.clone(), &mut out[ranges[i].clone()], path, observer, stats)?;
                let merged: Vec<f64> = branch.iter().zip(&identity).map(|(a, b)| a + b).collect();
                let mut full_out = m;
                full_out.extend_from_slice(&identity);
                observer(&DbStep {
                    path,
                    kind: StepKind::SkipMerge { branch: &branch, identity: &identity },
                    message_out: &full_out,
                    message_in: &merged,
                });
                merged
            }
            _ => {
                let (block, m_in) = layer_diag_step(layer, x, &m)?;
                stats.peak_aux = stats.peak_aux.max(m.len() + m_in.len() + block.len());
                if !block.is_empty() {
                    out[ranges[i].clone()].copy_from_slice(&block);
                }
                observer(&DbStep {
                    path,
                    kind: StepKind::Layer { layer, input: x },
                    message_out: &m,
                    message_in: &m_in,
                });
                m_in
            }
        };
        if m_in.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("curvature message below layer {path:?} ({:?})", layer.kind())));
        }
        stats.peak_message = stats.peak_message.max(m_in.len());
        m = m_in;
        path.pop();
    }
    Ok(m)
}

/// `(D(J_θᵀ M J_θ), D(J_xᵀ M J_x))` for a non-skip layer with diagonal `M`.
fn layer_diag_step(layer: &Layer, x: &Tensor, m: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let xs = x.data();
    let sq = |v: &[f64]| v.iter().map(|a| a * a).collect::<Vec<f64>>();
    Ok(match layer {
        Layer::Dense(d) => {
            let (mut dw, db, dx) = kernels::dense_backward(d.in_dim, d.out_dim, &sq(&d.weight), &sq(xs), m, true, true);
            dw.extend(db);
            (dw, dx)
        }
        Layer::Conv2d(c) => {
            let (_, h, w) = x.chw()?;
            let (mut dw, db, dx) = kernels::conv_backward(c.geom(h, w), &sq(&c.weight), &sq(xs), m, true, true);
            dw.extend(db);
            (dw, dx)
        }
        Layer::Relu => (Vec::new(), xs.iter().zip(m).map(|(&x, &v)| if x > 0.0 { v } else { 0.0 }).collect()),
        Layer::Sigmoid => (
            Vec::new(),
            xs.iter()
                .zip(m)
                .map(|(&x, &v)| {
                    let s = sigmoid(x);
                    let d = s * (1.0 - s);
                    v * d * d
                })
                .collect(),
        ),
        Layer::Flatten => (Vec::new(), m.to_vec()),
        Layer::AvgPool2 => {
            let (c, h, w) = x.chw()?;
            (Vec::new(), avg_pool_transpose(m, c, h, w, 1.0 / 16.0))
        }
        Layer::Upsample2 => {
            let (c, h, w) = x.chw()?;
            (Vec::new(), upsample_transpose(m, c, h, w))
        }
        Layer::Skip(_) => unreachable!("skip layers recurse"),
    })
}

/// One recursion step through a skip layer `x -> (sub(x), x)`:
/// `D(J_subᵀ M₁₁ J_sub) + M₂₂` for diagonal `M` over the concatenated output.
pub fn skip_step(m: &CurvatureMessage, sub: &Network, x: &Tensor) -> Result<CurvatureMessage> {
    let trace = sub.forward(x)?;
    let split = trace.output().len();
    if m.diag.len() != split + x.len() {
        return Err(Error::Structure(format!(
            "message of {} entries does not split into branch {} + identity {}",
            m.diag.len(),
            split,
            x.len()
        )));
    }
    let (m11, m22) = m.diag.data().split_at(split);
    let mut scratch = vec![0.0; sub.param_count()];
    let mut stats = DbStats::default();
    let branch = backprop_diag(sub, &trace, m11.to_vec(), &mut scratch, &mut Vec::new(), &mut |_| {}, &mut stats)?;
    let merged = branch.iter().zip(m22).map(|(a, b)| a + b).collect();
    Ok(CurvatureMessage::new(Tensor::from_parts(x.shape().to_vec(), merged)))
}

/// Exact GGN diagonal `diag(J_θᵀ H J_θ)` from one reverse pass per output entry.
pub fn ggn_diag_exact(net: &Network, x: &Tensor, loss_h: &CurvatureMessage) -> Result<GgnDiagonal> {
    let n_params = net.param_count();
    if n_params > ORACLE_MAX_PARAMS {
        return Err(Error::Config(format!("exact GGN oracle refuses {n_params} parameters (cap {ORACLE_MAX_PARAMS})")));
    }
    let trace = net.forward(x)?;
    let out = trace.output();
    if out.len() > ORACLE_MAX_OUTPUTS {
        return Err(Error::Config(format!(
            "exact GGN oracle refuses {} outputs (cap {ORACLE_MAX_OUTPUTS})",
            out.len()
        )));
    }
    if loss_h.diag.len() != out.len() {
        return Err(Error::Shape(format!(
            "loss Hessian has {} entries, network output {}",
            loss_h.diag.len(),
            out.len()
        )));
    }
    let mut values = vec![0.0; n_params];
    let mut unit = Tensor::zeros(out.shape());
    for (o, &h) in loss_h.diag.data().iter().enumerate() {
        if h == 0.0 {
            continue;
        }
        unit.data_mut()[o] = 1.0;
        let (row, _) = net.backward_inner(&trace, &unit, true)?;
        unit.data_mut()[o] = 0.0;
        for (v, r) in values.iter_mut().zip(&row) {
            *v += h * r * r;
        }
    }
    Ok(GgnDiagonal { values })
}

/// Elementwise sum of equal-length vectors by pairwise halving in index order.
pub(crate) fn pairwise_sum(mut parts: Vec<Vec<f64>>) -> Vec<f64> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap_or_default()
}

/// Curvature of one image under the zero-variance (BCE) reduction of the loss,
/// over shared plus mean-head weights.
pub fn image_curvature(net: &SegNet, image: &Tensor) -> Result<GgnDiagonal> {
    let mean_net = net.mean_network();
    let trace = mean_net.forward(image)?;
    let probs = Tensor::from_parts(
        trace.output().shape().to_vec(),
        trace.output().data().iter().map(|&v| sigmoid(v)).collect(),
    );
    let loss_h = bce_logit_hessian(&probs);
    Ok(db_diag_from_trace(mean_net, &trace, &loss_h, &mut |_| {})?.0)
}

/// Sum of per-image [`image_curvature`] over a dataset.
///
/// Images are processed in parallel; the sum is reduced pairwise in image
/// order, so the result does not depend on the thread count.
pub fn accumulate_dataset_curvature(net: &SegNet, images: &[Tensor]) -> Result<GgnDiagonal> {
    if images.is_empty() {
        return Err(Error::Config("curvature needs a nonempty dataset".into()));
    }
    let parts = images.par_iter().map(|img| image_curvature(net, img).map(|g| g.values)).collect::<Result<Vec<_>>>()?;
    Ok(GgnDiagonal { values: pairwise_sum(parts) })
}
