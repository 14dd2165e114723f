//! Binary artifacts: a magic tag, a format version, a JSON manifest and the
//! float64 arrays it lists, little-endian.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::curvature::GgnDiagonal;
use crate::error::{Error, Result};
use crate::laplace::LaplacePosterior;
use crate::net::{build_unet, ArchitectureConfig, SegNet};
use crate::rng;
use crate::tensor::Tensor;

use super::data::{DataConfig, Dataset, Provenance, SyntheticSample};

const MAGIC: &[u8; 4] = b"LSNB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    meta: Value,
    arrays: Vec<ArrayEntry>,
}

/// Decoded artifact.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub kind: String,
    pub meta: Value,
    pub arrays: Vec<(String, Vec<f64>)>,
}

impl Blob {
    pub fn array(&self, name: &str) -> Option<&[f64]> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }
}

pub fn write_blob(path: &Path, blob: &Blob) -> Result<()> {
    let manifest = Manifest {
        kind: blob.kind.clone(),
        meta: blob.meta.clone(),
        arrays: blob.arrays.iter().map(|(n, v)| ArrayEntry { name: n.clone(), len: v.len() }).collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * blob.arrays.iter().map(|(_, v)| v.len()).sum::<usize>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, v) in &blob.arrays {
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_blob(path: &Path, kind: &str) -> Result<Blob> {
    let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("missing magic tag".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + json_len).ok_or_else(|| bad("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(body).map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.kind != kind {
        return Err(bad(format!("holds a {}, expected a {kind}", manifest.kind)));
    }
    let mut at = 16 + json_len;
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for a in manifest.arrays {
        let end = at + 8 * a.len;
        let raw = bytes.get(at..end).ok_or_else(|| bad(format!("array {} truncated", a.name)))?;
        let v = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        arrays.push((a.name, v));
        at = end;
    }
    if at != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - at)));
    }
    Ok(Blob { kind: manifest.kind, meta: manifest.meta, arrays })
}

fn missing(path: &Path, what: &str) -> Error {
    Error::Format { path: path.to_path_buf(), reason: format!("missing {what}") }
}

pub fn save_segnet(path: &Path, net: &SegNet, arch: &ArchitectureConfig) -> Result<()> {
    let meta = serde_json::json!({ "arch": arch, "arch_hash": arch.hash() });
    write_blob(path, &Blob { kind: "segnet".into(), meta, arrays: vec![("params".into(), net.params())] })
}

pub fn load_segnet(path: &Path) -> Result<(SegNet, ArchitectureConfig)> {
    let blob = read_blob(path, "segnet")?;
    let arch: ArchitectureConfig =
        serde_json::from_value(blob.meta.get("arch").cloned().ok_or_else(|| missing(path, "arch"))?)?;
    let mut net = build_unet(&arch, &mut rng::seeded(0))?;
    let params = blob.array("params").ok_or_else(|| missing(path, "params"))?;
    net.set_params(params).map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })?;
    Ok((net, arch))
}

pub fn save_posterior(path: &Path, post: &LaplacePosterior, arch: &ArchitectureConfig) -> Result<()> {
    let meta = serde_json::json!({ "prior_precision": post.prior_precision(), "arch_hash": arch.hash() });
    let arrays = vec![
        ("map_weights".into(), post.map_weights().to_vec()),
        ("precision".into(), post.precision().to_vec()),
        ("curvature".into(), post.curvature().to_vec()),
    ];
    write_blob(path, &Blob { kind: "laplace".into(), meta, arrays })
}

pub fn load_posterior(path: &Path) -> Result<LaplacePosterior> {
    let blob = read_blob(path, "laplace")?;
    let tau =
        blob.meta.get("prior_precision").and_then(Value::as_f64).ok_or_else(|| missing(path, "prior_precision"))?;
    let map = blob.array("map_weights").ok_or_else(|| missing(path, "map_weights"))?;
    let curv = blob.array("curvature").ok_or_else(|| missing(path, "curvature"))?;
    let post = LaplacePosterior::from_curvature(map.to_vec(), GgnDiagonal { values: curv.to_vec() }, tau)
        .map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })?;
    if blob.array("precision") != Some(post.precision()) {
        return Err(Error::Format { path: path.to_path_buf(), reason: "precision is not curvature + prior".into() });
    }
    Ok(post)
}

pub fn save_dataset(path: &Path, data: &Dataset, cfg: &DataConfig) -> Result<()> {
    let mut arrays = Vec::new();
    let mut provenance = serde_json::Map::new();
    for (split, samples) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        arrays.push((format!("{split}.images"), samples.iter().flat_map(|s| s.image.data().to_vec()).collect()));
        arrays.push((format!("{split}.masks"), samples.iter().flat_map(|s| s.mask.clone()).collect()));
        let prov: Vec<&Provenance> = samples.iter().map(|s| &s.provenance).collect();
        provenance.insert(split.into(), serde_json::to_value(prov)?);
    }
    let meta = serde_json::json!({ "config": cfg, "provenance": provenance });
    write_blob(path, &Blob { kind: "dataset".into(), meta, arrays })
}

pub fn load_dataset(path: &Path) -> Result<(Dataset, DataConfig)> {
    let blob = read_blob(path, "dataset")?;
    let cfg: DataConfig =
        serde_json::from_value(blob.meta.get("config").cloned().ok_or_else(|| missing(path, "config"))?)?;
    let pixels = cfg.height * cfg.width;
    let split = |name: &str| -> Result<Vec<SyntheticSample>> {
        let prov: Vec<Provenance> = serde_json::from_value(
            blob.meta.pointer(&format!("/provenance/{name}")).cloned().ok_or_else(|| missing(path, name))?,
        )?;
        let images = blob.array(&format!("{name}.images")).ok_or_else(|| missing(path, name))?;
        let masks = blob.array(&format!("{name}.masks")).ok_or_else(|| missing(path, name))?;
        if images.len() != prov.len() * pixels || masks.len() != prov.len() * pixels {
            return Err(Error::Format { path: path.to_path_buf(), reason: format!("{name} arrays have wrong size") });
        }
        Ok(prov
            .into_iter()
            .enumerate()
            .map(|(i, provenance)| SyntheticSample {
                image: Tensor::new(vec![1, cfg.height, cfg.width], images[i * pixels..(i + 1) * pixels].to_vec())
                    .expect("sized above"),
                mask: masks[i * pixels..(i + 1) * pixels].to_vec(),
                provenance,
            })
            .collect())
    };
    Ok((Dataset { train: split("train")?, val: split("val")?, test: split("test")? }, cfg))
}
