//! Image corruptions used to build the out-of-distribution test sets.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::data::SyntheticSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionKind {
    Noise,
    Blur,
    Spike,
    Ghosting,
}

impl CorruptionKind {
    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::Noise => "noise",
            CorruptionKind::Blur => "blur",
            CorruptionKind::Spike => "spike",
            CorruptionKind::Ghosting => "ghosting",
        }
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(Self::Noise),
            "blur" => Ok(Self::Blur),
            "spike" => Ok(Self::Spike),
            "ghosting" => Ok(Self::Ghosting),
            other => Err(Error::Config(format!("unknown corruption kind `{other}`"))),
        }
    }
}

/// A corruption family at one severity. Written `kind:severity`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: f64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: f64) -> Result<Self> {
        let spec = Self { kind, severity };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.severity >= 0.0 && self.severity.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("corruption severity must be finite and >= 0, got {}", self.severity)))
        }
    }

    /// Default OOD sets: noise 0.3, blur 2.0, spike 0.5, ghosting 0.6.
    pub fn defaults() -> Vec<Self> {
        vec![
            Self { kind: CorruptionKind::Noise, severity: 0.3 },
            Self { kind: CorruptionKind::Blur, severity: 2.0 },
            Self { kind: CorruptionKind::Spike, severity: 0.5 },
            Self { kind: CorruptionKind::Ghosting, severity: 0.6 },
        ]
    }
}

impl fmt::Display for CorruptionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.name(), self.severity)
    }
}

impl FromStr for CorruptionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, sev) =
            s.split_once(':').ok_or_else(|| Error::Config(format!("corruption `{s}` is not kind:severity")))?;
        let severity = sev.parse().map_err(|_| Error::Config(format!("bad severity in corruption `{s}`")))?;
        Self::new(kind.parse()?, severity)
    }
}

fn gaussian_kernel(std: f64) -> Vec<f64> {
    let radius = (3.0 * std).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * std * std)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

fn blur(img: &[f64], h: usize, w: usize, std: f64) -> Vec<f64> {
    let k = gaussian_kernel(std);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] =
                k.iter().enumerate().map(|(t, kv)| kv * img[i * w + reflect(j as isize + t as isize - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] =
                k.iter().enumerate().map(|(t, kv)| kv * tmp[reflect(i as isize + t as isize - r, h) * w + j]).sum();
        }
    }
    out
}

/// Applies `spec` to a single-channel image, clipping to `[0, 1]`. Severity 0
/// returns the input unchanged.
pub fn corrupt_image(image: &Tensor, spec: &CorruptionSpec, rng: &mut Rng) -> Result<Tensor> {
    spec.validate()?;
    let (c, h, w) = image.chw()?;
    if c != 1 {
        return Err(Error::Shape(format!("corruptions expect one channel, got {c}")));
    }
    if spec.severity == 0.0 {
        return Ok(image.clone());
    }
    let s = spec.severity;
    let x = image.data();
    let out: Vec<f64> = match spec.kind {
        CorruptionKind::Noise => {
            let n = Normal::new(0.0, s).expect("validated severity");
            x.iter().map(|v| v + n.sample(rng)).collect()
        }
        CorruptionKind::Blur => blur(x, h, w, s),
        CorruptionKind::Spike => {
            // one k-space spike is one sinusoidal stripe pattern in image space
            let top = (h.min(w) / 4).max(2);
            let fx = rng.random_range(2..=top) as f64;
            let fy = rng.random_range(2..=top) as f64;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let mut out = x.to_vec();
            for i in 0..h {
                for j in 0..w {
                    let arg = std::f64::consts::TAU * (fx * j as f64 / w as f64 + fy * i as f64 / h as f64) + phase;
                    out[i * w + j] += s * arg.sin();
                }
            }
            out
        }
        CorruptionKind::Ghosting => {
            let shift = h / 4;
            let mut out = vec![0.0; h * w];
            for i in 0..h {
                let src = (i + h - shift) % h;
                for j in 0..w {
                    out[i * w + j] = (x[i * w + j] + s * x[src * w + j]) / (1.0 + s);
                }
            }
            out
        }
    };
    Ok(Tensor::from_parts(vec![1, h, w], out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()))
}

/// Corrupted copy of `sample`; the mask is kept.
pub fn corrupt(sample: &SyntheticSample, spec: &CorruptionSpec, rng: &mut Rng) -> Result<SyntheticSample> {
    Ok(SyntheticSample { image: corrupt_image(&sample.image, spec, rng)?, ..sample.clone() })
}
