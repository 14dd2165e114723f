use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeom};
use super::network::{Network, Trace};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Fully connected layer `y = W x + b` on flat vectors, `W` stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, weight: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    pub fn identity(n: usize) -> Self {
        let mut d = Self::new(n, n);
        for i in 0..n {
            d.weight[i * n + i] = 1.0;
        }
        d
    }

    pub fn with_weights(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::Shape(format!(
                "dense {in_dim}->{out_dim} given {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self { in_dim, out_dim, weight, bias })
    }
}

/// 2-D convolution, stride 1, zero "same" padding, odd square kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    pub(crate) fn geom(&self, h: usize, w: usize) -> ConvGeom {
        ConvGeom { cin: self.in_channels, cout: self.out_channels, k: self.kernel, h, w }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    Relu,
    Sigmoid,
    /// `[C, H, W]` to `[C*H*W]`.
    Flatten,
    /// 2x2 average pooling.
    AvgPool2,
    /// 2x nearest-neighbour upsampling.
    Upsample2,
    /// `x -> concat(sub(x), x)` along the leading (channel) axis.
    Skip(Network),
}

/// Layer kind tag, used in manifests and error messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Conv2d,
    Relu,
    Sigmoid,
    Flatten,
    AvgPool2,
    Upsample2,
    Skip,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense(_) => LayerKind::Dense,
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::Relu => LayerKind::Relu,
            Layer::Sigmoid => LayerKind::Sigmoid,
            Layer::Flatten => LayerKind::Flatten,
            Layer::AvgPool2 => LayerKind::AvgPool2,
            Layer::Upsample2 => LayerKind::Upsample2,
            Layer::Skip(_) => LayerKind::Skip,
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = || Error::Shape(format!("{:?} layer cannot take input {:?}", self.kind(), input));
        match self {
            Layer::Dense(d) => match input {
                [n] if *n == d.in_dim => Ok(vec![d.out_dim]),
                _ => Err(bad()),
            },
            Layer::Conv2d(c) => match input {
                [ch, h, w] if *ch == c.in_channels => Ok(vec![c.out_channels, *h, *w]),
                _ => Err(bad()),
            },
            Layer::Relu | Layer::Sigmoid => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::AvgPool2 => match input {
                [c, h, w] if h % 2 == 0 && w % 2 == 0 => Ok(vec![*c, h / 2, w / 2]),
                _ => Err(bad()),
            },
            Layer::Upsample2 => match input {
                [c, h, w] => Ok(vec![*c, h * 2, w * 2]),
                _ => Err(bad()),
            },
            Layer::Skip(sub) => {
                let inner = sub.output_shape(input)?;
                concat_shape(&inner, input)
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense(d) => d.weight.len() + d.bias.len(),
            Layer::Conv2d(c) => c.weight.len() + c.bias.len(),
            Layer::Skip(sub) => sub.param_count(),
            _ => 0,
        }
    }

    pub(crate) fn write_params(&self, out: &mut Vec<f64>) {
        match self {
            Layer::Dense(d) => {
                out.extend_from_slice(&d.weight);
                out.extend_from_slice(&d.bias);
            }
            Layer::Conv2d(c) => {
                out.extend_from_slice(&c.weight);
                out.extend_from_slice(&c.bias);
            }
            Layer::Skip(sub) => {
                for l in sub.layers() {
                    l.write_params(out);
                }
            }
            _ => {}
        }
    }

    /// Loads parameters from the front of `src`, returning how many were consumed.
    pub(crate) fn read_params(&mut self, src: &[f64]) -> usize {
        fn take(dst: &mut [f64], src: &[f64], at: usize) -> usize {
            dst.copy_from_slice(&src[at..at + dst.len()]);
            at + dst.len()
        }
        match self {
            Layer::Dense(d) => {
                let at = take(&mut d.weight, src, 0);
                take(&mut d.bias, src, at)
            }
            Layer::Conv2d(c) => {
                let at = take(&mut c.weight, src, 0);
                take(&mut c.bias, src, at)
            }
            Layer::Skip(sub) => {
                let mut at = 0;
                for l in sub.layers_mut() {
                    at += l.read_params(&src[at..]);
                }
                at
            }
            _ => 0,
        }
    }

    /// He-uniform weights, zero biases.
    pub(crate) fn init(&mut self, rng: &mut Rng) {
        match self {
            Layer::Dense(d) => {
                let bound = (6.0 / d.in_dim as f64).sqrt();
                d.weight.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
                d.bias.iter_mut().for_each(|b| *b = 0.0);
            }
            Layer::Conv2d(c) => {
                let fan_in = (c.in_channels * c.kernel * c.kernel) as f64;
                let bound = (6.0 / fan_in).sqrt();
                c.weight.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
                c.bias.iter_mut().for_each(|b| *b = 0.0);
            }
            Layer::Skip(sub) => sub.init(rng),
            _ => {}
        }
    }

    /// Forward pass. Skip layers also return the trace of their sub-network.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Option<Trace>)> {
        let out_shape = self.output_shape(x.shape())?;
        let xs = x.data();
        let y = match self {
            Layer::Dense(d) => kernels::dense_forward(d.in_dim, d.out_dim, &d.weight, &d.bias, xs),
            Layer::Conv2d(c) => {
                let (_, h, w) = x.chw()?;
                kernels::conv_forward(c.geom(h, w), &c.weight, &c.bias, xs)
            }
            Layer::Relu => xs.iter().map(|v| v.max(0.0)).collect(),
            Layer::Sigmoid => xs.iter().map(|&v| sigmoid(v)).collect(),
            Layer::Flatten => xs.to_vec(),
            Layer::AvgPool2 => {
                let (c, h, w) = x.chw()?;
                avg_pool(xs, c, h, w)
            }
            Layer::Upsample2 => {
                let (c, h, w) = x.chw()?;
                upsample(xs, c, h, w)
            }
            Layer::Skip(sub) => {
                let trace = sub.forward(x)?;
                let mut y = trace.output().data().to_vec();
                y.extend_from_slice(xs);
                return Ok((Tensor::from_parts(out_shape, y), Some(trace)));
            }
        };
        Ok((Tensor::from_parts(out_shape, y), None))
    }

    /// Vector-Jacobian products `(J_θᵀ v, J_xᵀ v)` at input `x`.
    ///
    /// `inner` must be the sub-network trace for skip layers and is ignored
    /// otherwise; pass `None` to have it recomputed.
    pub fn vjp(&self, x: &Tensor, inner: Option<&Trace>, v: &Tensor, want_params: bool) -> Result<(Vec<f64>, Tensor)> {
        let out_shape = self.output_shape(x.shape())?;
        if v.shape() != out_shape.as_slice() {
            return Err(Error::Shape(format!(
                "{:?} cotangent {:?} does not match output {:?}",
                self.kind(),
                v.shape(),
                out_shape
            )));
        }
        let xs = x.data();
        let gs = v.data();
        let in_shape = x.shape().to_vec();
        match self {
            Layer::Dense(d) => {
                let (mut dw, db, dx) =
                    kernels::dense_backward(d.in_dim, d.out_dim, &d.weight, xs, gs, want_params, true);
                dw.extend(db);
                Ok((dw, Tensor::from_parts(in_shape, dx)))
            }
            Layer::Conv2d(c) => {
                let (_, h, w) = x.chw()?;
                let (mut dw, db, dx) = kernels::conv_backward(c.geom(h, w), &c.weight, xs, gs, want_params, true);
                dw.extend(db);
                Ok((dw, Tensor::from_parts(in_shape, dx)))
            }
            Layer::Relu => {
                let dx = xs.iter().zip(gs).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect();
                Ok((Vec::new(), Tensor::from_parts(in_shape, dx)))
            }
            Layer::Sigmoid => {
                let dx = xs
                    .iter()
                    .zip(gs)
                    .map(|(&x, &g)| {
                        let s = sigmoid(x);
                        g * s * (1.0 - s)
                    })
                    .collect();
                Ok((Vec::new(), Tensor::from_parts(in_shape, dx)))
            }
            Layer::Flatten => Ok((Vec::new(), Tensor::from_parts(in_shape, gs.to_vec()))),
            Layer::AvgPool2 => {
                let (c, h, w) = x.chw()?;
                let dx = avg_pool_transpose(gs, c, h, w, 0.25);
                Ok((Vec::new(), Tensor::from_parts(in_shape, dx)))
            }
            Layer::Upsample2 => {
                let (c, h, w) = x.chw()?;
                Ok((Vec::new(), Tensor::from_parts(in_shape, upsample_transpose(gs, c, h, w))))
            }
            Layer::Skip(sub) => {
                let owned;
                let trace = match inner {
                    Some(t) => t,
                    None => {
                        owned = sub.forward(x)?;
                        &owned
                    }
                };
                let split = trace.output().len();
                let (v_sub, v_id) = gs.split_at(split);
                let v_sub = Tensor::from_parts(trace.output().shape().to_vec(), v_sub.to_vec());
                let (dp, mut dx) = sub.backward_inner(trace, &v_sub, want_params)?;
                for (d, g) in dx.data_mut().iter_mut().zip(v_id) {
                    *d += g;
                }
                Ok((dp, dx))
            }
        }
    }
}

pub(crate) fn concat_shape(first: &[usize], second: &[usize]) -> Result<Vec<usize>> {
    match (first, second) {
        ([a], [b]) => Ok(vec![a + b]),
        ([c1, h1, w1], [c2, h2, w2]) if h1 == h2 && w1 == w2 => Ok(vec![c1 + c2, *h1, *w1]),
        _ => Err(Error::Shape(format!("skip branch output {first:?} cannot be concatenated with input {second:?}"))),
    }
}

fn avg_pool(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut y = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let base = ch * h * w + 2 * i * w + 2 * j;
                y[(ch * ho + i) * wo + j] = 0.25 * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]);
            }
        }
    }
    y
}

/// Spreads each pooled value times `scale` back over its 2x2 window.
pub(crate) fn avg_pool_transpose(g: &[f64], c: usize, h: usize, w: usize, scale: f64) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let v = scale * g[(ch * ho + i) * wo + j];
                let base = ch * h * w + 2 * i * w + 2 * j;
                dx[base] = v;
                dx[base + 1] = v;
                dx[base + w] = v;
                dx[base + w + 1] = v;
            }
        }
    }
    dx
}

fn upsample(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut y = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                y[(ch * ho + i) * wo + j] = x[(ch * h + i / 2) * w + j / 2];
            }
        }
    }
    y
}

/// Sums each 2x2 block of the upsampled gradient.
pub(crate) fn upsample_transpose(g: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                dx[(ch * h + i / 2) * w + j / 2] += g[(ch * ho + i) * wo + j];
            }
        }
    }
    dx
}
