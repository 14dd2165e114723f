use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layer::{Conv2d, Layer};
use super::network::{Network, Trace};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// U-net shape parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    /// Feature channels per resolution level, finest first.
    pub channels: Vec<usize>,
    pub kernel: usize,
    /// Rank of the low-rank covariance factor. Zero gives a diagonal covariance.
    pub rank: usize,
    /// Without a variance head the model is a plain U-net with Dirac logits.
    pub variance_head: bool,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            in_channels: 1,
            channels: vec![4, 8, 16],
            kernel: 3,
            rank: 5,
            variance_head: true,
        }
    }
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("channel ladder must be nonempty and positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("need at least one input channel".into()));
        }
        let step = 1usize << (self.channels.len() - 1);
        if self.height == 0 || self.width == 0 || self.height % step != 0 || self.width % step != 0 {
            return Err(Error::Config(format!(
                "{}x{} input is not divisible by 2^{} for a {}-level ladder",
                self.height,
                self.width,
                self.channels.len() - 1,
                self.channels.len()
            )));
        }
        Ok(())
    }

    /// Short stable digest of the architecture, stored in checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Segmentation network: shared body, a one-conv mean head and an optional
/// one-conv variance head.
///
/// The mean head is the last layer of [`SegNet::mean_network`], so curvature
/// code sees the shared body plus mean head as one ordinary network. The
/// variance head reads the same final feature map and emits `1 + rank`
/// channels: the raw diagonal followed by the `rank` factor rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SegNet {
    input_shape: Vec<usize>,
    mean_path: Network,
    var_head: Option<Conv2d>,
    rank: usize,
}

/// The shared / mean-head / variance-head split of all weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamPartition {
    pub shared: Vec<f64>,
    pub mean_head: Vec<f64>,
    pub var_head: Vec<f64>,
}

impl ParamPartition {
    /// Shared plus mean-head weights, the space the Laplace posterior lives in.
    pub fn mean_params(&self) -> Vec<f64> {
        let mut v = self.shared.clone();
        v.extend_from_slice(&self.mean_head);
        v
    }

    pub fn total_len(&self) -> usize {
        self.shared.len() + self.mean_head.len() + self.var_head.len()
    }
}

/// Forward result: mean-path trace (its output is the mean logit map) plus the
/// raw variance-head output.
#[derive(Clone, Debug)]
pub struct SegForward {
    pub trace: Trace,
    pub var_raw: Option<Tensor>,
}

impl SegForward {
    pub fn mean_logits(&self) -> &Tensor {
        self.trace.output()
    }

    pub fn features(&self) -> &Tensor {
        let acts = self.trace.activations();
        &acts[acts.len() - 2]
    }
}

fn conv_block(layers: &mut Vec<Layer>, cin: usize, cout: usize, k: usize) {
    layers.push(Layer::Conv2d(Conv2d::new(cin, cout, k)));
    layers.push(Layer::Relu);
    layers.push(Layer::Conv2d(Conv2d::new(cout, cout, k)));
    layers.push(Layer::Relu);
}

fn unet_level(ladder: &[usize], cin: usize, k: usize) -> Vec<Layer> {
    let c = ladder[0];
    let mut layers = Vec::new();
    conv_block(&mut layers, cin, c, k);
    if ladder.len() > 1 {
        let mut inner = vec![Layer::AvgPool2];
        inner.extend(unet_level(&ladder[1..], c, k));
        inner.push(Layer::Upsample2);
        layers.push(Layer::Skip(Network::new(inner)));
        conv_block(&mut layers, ladder[1] + c, c, k);
    }
    layers
}

/// Builds the U-net described by `cfg` with He-uniform weights drawn from `rng`.
pub fn build_unet(cfg: &ArchitectureConfig, rng: &mut Rng) -> Result<SegNet> {
    cfg.validate()?;
    let mut layers = unet_level(&cfg.channels, cfg.in_channels, cfg.kernel);
    layers.push(Layer::Conv2d(Conv2d::new(cfg.channels[0], 1, cfg.kernel)));
    let mut mean_path = Network::new(layers);
    mean_path.init(rng);
    let var_head = if cfg.variance_head {
        let mut head = Layer::Conv2d(Conv2d::new(cfg.channels[0], 1 + cfg.rank, cfg.kernel));
        head.init(rng);
        match head {
            Layer::Conv2d(c) => Some(c),
            _ => unreachable!(),
        }
    } else {
        None
    };
    SegNet::new(vec![cfg.in_channels, cfg.height, cfg.width], mean_path, var_head, cfg.rank)
}

impl SegNet {
    /// `mean_path` must end in a single-output-channel conv (the mean head).
    pub fn new(input_shape: Vec<usize>, mean_path: Network, var_head: Option<Conv2d>, rank: usize) -> Result<Self> {
        let out = mean_path.output_shape(&input_shape)?;
        match (mean_path.layers().last(), out.as_slice()) {
            (Some(Layer::Conv2d(c)), [1, _, _]) if c.out_channels == 1 => {}
            _ => return Err(Error::Structure("mean path must end in a 1-channel conv head".into())),
        }
        if let Some(v) = &var_head {
            let Some(Layer::Conv2d(mh)) = mean_path.layers().last() else { unreachable!() };
            if v.in_channels != mh.in_channels || v.out_channels != 1 + rank {
                return Err(Error::Structure(format!(
                    "variance head {}->{} does not fit features of {} channels at rank {rank}",
                    v.in_channels, v.out_channels, mh.in_channels
                )));
            }
        }
        Ok(Self { input_shape, mean_path, var_head, rank })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn pixels(&self) -> usize {
        self.input_shape[1] * self.input_shape[2]
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn has_variance_head(&self) -> bool {
        self.var_head.is_some()
    }

    /// Shared body followed by the mean head.
    pub fn mean_network(&self) -> &Network {
        &self.mean_path
    }

    pub fn mean_head_len(&self) -> usize {
        self.mean_path.layers().last().map_or(0, Layer::param_count)
    }

    pub fn shared_len(&self) -> usize {
        self.mean_path.param_count() - self.mean_head_len()
    }

    pub fn var_head_len(&self) -> usize {
        self.var_head.as_ref().map_or(0, |c| c.weight.len() + c.bias.len())
    }

    pub fn param_count(&self) -> usize {
        self.mean_path.param_count() + self.var_head_len()
    }

    /// All weights: shared, mean head, variance head.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.mean_path.params();
        if let Some(v) = &self.var_head {
            p.extend_from_slice(&v.weight);
            p.extend_from_slice(&v.bias);
        }
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape(format!("segnet has {} parameters, got {}", self.param_count(), params.len())));
        }
        let n = self.mean_path.param_count();
        self.mean_path.set_params(&params[..n])?;
        if let Some(v) = &mut self.var_head {
            let (w, b) = params[n..].split_at(v.weight.len());
            v.weight.copy_from_slice(w);
            v.bias.copy_from_slice(b);
        }
        Ok(())
    }

    pub fn partition(&self) -> ParamPartition {
        let mut all = self.params();
        let var_head = all.split_off(self.mean_path.param_count());
        let mean_head = all.split_off(self.shared_len());
        ParamPartition { shared: all, mean_head, var_head }
    }

    /// Shared plus mean-head weights.
    pub fn mean_params(&self) -> Vec<f64> {
        self.mean_path.params()
    }

    /// Replaces shared plus mean-head weights; the variance head is untouched.
    pub fn set_mean_params(&mut self, params: &[f64]) -> Result<()> {
        self.mean_path.set_params(params)
    }

    pub fn forward(&self, x: &Tensor) -> Result<SegForward> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::Shape(format!("input {:?} does not match declared {:?}", x.shape(), self.input_shape)));
        }
        let trace = self.mean_path.forward(x)?;
        let var_raw = match &self.var_head {
            Some(head) => {
                let acts = trace.activations();
                let feat = &acts[acts.len() - 2];
                let (_, h, w) = feat.chw()?;
                let y = super::kernels::conv_forward(head.geom(h, w), &head.weight, &head.bias, feat.data());
                let t = Tensor::from_parts(vec![head.out_channels, h, w], y);
                t.ensure_finite("variance head output")?;
                Some(t)
            }
            None => None,
        };
        Ok(SegForward { trace, var_raw })
    }

    /// Gradient w.r.t. all weights given upstream gradients on the mean logit
    /// map and (when present) the raw variance-head output.
    pub fn backward(&self, fwd: &SegForward, d_mean: &Tensor, d_var: Option<&Tensor>) -> Result<Vec<f64>> {
        d_mean.ensure_finite("mean-logit gradient")?;
        let last = self.mean_path.len() - 1;
        let head = &self.mean_path.layers()[last];
        let feat = fwd.features();
        let (d_head, mut d_feat) = head.vjp(feat, None, d_mean, true)?;
        let mut d_var_params = Vec::new();
        if let (Some(vh), Some(dv)) = (&self.var_head, d_var) {
            dv.ensure_finite("variance-head gradient")?;
            let (_, h, w) = feat.chw()?;
            let (mut dw, db, dx) =
                super::kernels::conv_backward(vh.geom(h, w), &vh.weight, feat.data(), dv.data(), true, true);
            dw.extend(db);
            d_var_params = dw;
            for (a, b) in d_feat.data_mut().iter_mut().zip(&dx) {
                *a += b;
            }
        } else if self.var_head.is_some() {
            d_var_params = vec![0.0; self.var_head_len()];
        }
        let (mut grads, _) = self.mean_path.backward_from(&fwd.trace, last, &d_feat, true)?;
        let range = self.mean_path.param_ranges()[last].clone();
        grads[range].copy_from_slice(&d_head);
        grads.extend(d_var_params);
        Ok(grads)
    }
}
