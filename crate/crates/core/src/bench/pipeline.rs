//! End-to-end benchmark: data, training, Laplace fits, evaluation of every
//! model and posterior combination on ID and corrupted test sets, and reports.

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::laplace::{
    self, member_predictions, predictive_ensemble, LaplacePosterior, DEFAULT_LOGIT_SAMPLES, DEFAULT_POSTERIOR_SAMPLES,
    DEFAULT_PRIOR_PRECISION,
};
use crate::measures::{Aggregation, Measure, SampleCube, UncertaintyReport, DEFAULT_PATCH};
use crate::net::{build_unet, sigmoid, ArchitectureConfig, SegNet};
use crate::rng;
use crate::tensor::Tensor;
use crate::train::{train_map, TrainConfig};

use super::corrupt::{corrupt, CorruptionSpec};
use super::data::{generate, DataConfig, Dataset, SyntheticSample};
use super::io;
use super::metrics::{auroc_sets, epkl_ratio_report, RatioReport};

const INIT_STREAM: u64 = 0x696e_6974;
const CORRUPT_STREAM: u64 = 0x636f_7272;
const EVAL_STREAM: u64 = 0x6576_616c;
const TUNE_STREAM: u64 = 0x7475_6e65;

pub const ID_SPLIT: &str = "id";
/// Combination whose heatmaps are written and which the headline checks use.
pub const LSN_COMBINATION: &str = "ssn+laplace";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Plain U-net, Dirac logits.
    Unet,
    /// Variance head with rank 0.
    SsnDiag,
    /// Variance head with the configured rank.
    Ssn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Unet, ModelKind::SsnDiag, ModelKind::Ssn];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Unet => "unet",
            ModelKind::SsnDiag => "ssn_diag",
            ModelKind::Ssn => "ssn",
        }
    }

    pub fn arch(self, base: &ArchitectureConfig) -> ArchitectureConfig {
        match self {
            ModelKind::Unet => ArchitectureConfig { variance_head: false, rank: 0, ..base.clone() },
            ModelKind::SsnDiag => ArchitectureConfig { variance_head: true, rank: 0, ..base.clone() },
            ModelKind::Ssn => ArchitectureConfig { variance_head: true, ..base.clone() },
        }
    }

    fn tag(self) -> u64 {
        self as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Ensemble,
    Laplace,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ensemble => "ensemble",
            Method::Laplace => "laplace",
        }
    }
}

pub fn combination_name(kind: ModelKind, method: Method) -> String {
    format!("{}+{}", kind.name(), method.name())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LaplaceConfig {
    /// Used as given unless `tune_prior_precision` is set.
    pub prior_precision: f64,
    pub posterior_samples: usize,
    pub logit_samples: usize,
    /// Pick the prior precision from `prior_grid` by validation predictive NLL.
    pub tune_prior_precision: bool,
    pub prior_grid: Vec<f64>,
    pub tune_posterior_samples: usize,
    pub tune_logit_samples: usize,
}

impl Default for LaplaceConfig {
    fn default() -> Self {
        Self {
            prior_precision: DEFAULT_PRIOR_PRECISION,
            posterior_samples: DEFAULT_POSTERIOR_SAMPLES,
            logit_samples: DEFAULT_LOGIT_SAMPLES,
            tune_prior_precision: true,
            prior_grid: (-2..=6).map(|e| 10f64.powi(e)).collect(),
            tune_posterior_samples: 20,
            tune_logit_samples: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub corruptions: Vec<CorruptionSpec>,
    pub patch: usize,
    pub ensemble_size: usize,
    pub models: Vec<ModelKind>,
    /// Test images per set whose heatmaps are written.
    pub heatmaps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            corruptions: CorruptionSpec::defaults(),
            patch: DEFAULT_PATCH,
            ensemble_size: 5,
            models: ModelKind::ALL.to_vec(),
            heatmaps: 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub arch: ArchitectureConfig,
    pub train: TrainConfig,
    pub laplace: LaplaceConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    /// Small run: 40 images, 20 epochs.
    pub fn smoke() -> Self {
        let mut cfg = Self::default();
        cfg.data.n_images = 40;
        cfg.train.epochs = 20;
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets both the data and the training seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        if (self.arch.height, self.arch.width) != (self.data.height, self.data.width) {
            return Err(Error::Config(format!(
                "architecture expects {}x{} images, data are {}x{}",
                self.arch.height, self.arch.width, self.data.height, self.data.width
            )));
        }
        if self.arch.in_channels != 1 {
            return Err(Error::Config("synthetic images have one channel".into()));
        }
        if !(self.laplace.prior_precision > 0.0 && self.laplace.prior_precision.is_finite()) {
            return Err(Error::Config("laplace.prior_precision must be positive".into()));
        }
        if self.laplace.posterior_samples == 0 || self.laplace.logit_samples == 0 {
            return Err(Error::Config("laplace sample counts must be at least 1".into()));
        }
        if self.laplace.tune_prior_precision {
            if self.laplace.prior_grid.is_empty()
                || self.laplace.prior_grid.iter().any(|t| !(*t > 0.0 && t.is_finite()))
            {
                return Err(Error::Config("laplace.prior_grid must be nonempty and positive".into()));
            }
            if self.laplace.tune_posterior_samples == 0 || self.laplace.tune_logit_samples == 0 {
                return Err(Error::Config("laplace tuning sample counts must be at least 1".into()));
            }
            if self.data.split_sizes().1 == 0 {
                return Err(Error::Config("tuning the prior precision needs a validation split".into()));
            }
        }
        if self.eval.ensemble_size == 0 {
            return Err(Error::Config("eval.ensemble_size must be at least 1".into()));
        }
        if self.eval.patch == 0 || self.eval.patch > self.data.height || self.eval.patch > self.data.width {
            return Err(Error::Config(format!("patch {} does not fit the images", self.eval.patch)));
        }
        if self.eval.models.is_empty() {
            return Err(Error::Config("eval.models is empty".into()));
        }
        if self.eval.models.contains(&ModelKind::Ssn) && self.arch.rank == 0 {
            return Err(Error::Config("the low-rank model needs arch.rank >= 1".into()));
        }
        for c in &self.eval.corruptions {
            c.validate()?;
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn aggregations(&self) -> Vec<Aggregation> {
        vec![Aggregation::Sum, Aggregation::Patch(self.eval.patch)]
    }
}

/// Ensemble members of one model kind; member 0 is also the Laplace mode.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub kind: ModelKind,
    pub arch: ArchitectureConfig,
    pub members: Vec<SegNet>,
    pub final_losses: Vec<f64>,
}

impl TrainedModel {
    pub fn map(&self) -> &SegNet {
        &self.members[0]
    }
}

/// Trains `ensemble_size` members per model kind from independent seeds.
pub fn train_models(cfg: &PipelineConfig, data: &Dataset) -> Result<Vec<TrainedModel>> {
    let examples = data.train_examples();
    let jobs: Vec<(ModelKind, usize)> =
        cfg.eval.models.iter().flat_map(|&k| (0..cfg.eval.ensemble_size).map(move |m| (k, m))).collect();
    let trained = jobs
        .par_iter()
        .map(|&(kind, member)| {
            let arch = kind.arch(&cfg.arch);
            let mut r = rng::stream(cfg.train.seed, &[INIT_STREAM, kind.tag(), member as u64]);
            let net = build_unet(&arch, &mut r)?;
            let tc = TrainConfig { seed: r.next_u64(), ..cfg.train.clone() };
            let out = train_map(net, &examples, &tc)?;
            Ok((out.net, out.epoch_losses.last().copied().unwrap_or(f64::NAN)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut it = trained.into_iter();
    Ok(cfg
        .eval
        .models
        .iter()
        .map(|&kind| {
            let (members, final_losses) = it.by_ref().take(cfg.eval.ensemble_size).unzip();
            TrainedModel { kind, arch: kind.arch(&cfg.arch), members, final_losses }
        })
        .collect())
}

/// Validation NLL per grid value and the chosen prior precision of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSelection {
    pub model: String,
    pub prior_precision: f64,
    pub validation_nll: Vec<(f64, f64)>,
}

/// Laplace posterior at member 0 of every model, on the training images,
/// with the prior precision fixed or chosen on the validation split.
pub fn fit_posteriors(
    cfg: &PipelineConfig,
    data: &Dataset,
    models: &[TrainedModel],
) -> Result<(Vec<LaplacePosterior>, Vec<PriorSelection>)> {
    let lc = &cfg.laplace;
    let images: Vec<Tensor> = data.train.iter().map(|s| s.image.clone()).collect();
    let val: Vec<_> = data.val.iter().map(SyntheticSample::example).collect();
    let mut posts = Vec::with_capacity(models.len());
    let mut selections = Vec::new();
    for m in models {
        let post = laplace::fit(m.map(), &images, lc.prior_precision)?;
        if !lc.tune_prior_precision {
            posts.push(post);
            continue;
        }
        let seed = rng::stream(cfg.train.seed, &[TUNE_STREAM, m.kind.tag()]).next_u64();
        let (tau, curve) = laplace::select_prior_precision(
            m.map(),
            &post,
            &val,
            &lc.prior_grid,
            lc.tune_posterior_samples,
            lc.tune_logit_samples,
            seed,
        )?;
        posts.push(post.with_prior_precision(tau)?);
        selections.push(PriorSelection { model: m.kind.name().into(), prior_precision: tau, validation_nll: curve });
    }
    Ok((posts, selections))
}

#[derive(Clone, Debug)]
pub struct EvalSet {
    pub name: String,
    pub samples: Vec<SyntheticSample>,
}

/// ID test split followed by one corrupted copy of it per configured corruption.
pub fn evaluation_sets(cfg: &PipelineConfig, data: &Dataset) -> Result<Vec<EvalSet>> {
    let mut sets = vec![EvalSet { name: ID_SPLIT.into(), samples: data.test.clone() }];
    for (ci, spec) in cfg.eval.corruptions.iter().enumerate() {
        let samples = data
            .test
            .iter()
            .map(|s| {
                let mut r = rng::stream(cfg.data.seed, &[CORRUPT_STREAM, ci as u64, s.provenance.index as u64]);
                corrupt(s, spec, &mut r)
            })
            .collect::<Result<Vec<_>>>()?;
        sets.push(EvalSet { name: format!("ood:{spec}"), samples });
    }
    Ok(sets)
}

/// One row of the results table.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub image_id: usize,
    pub split: String,
    pub model: String,
    pub measure: Measure,
    pub aggregation: Aggregation,
    pub score: Option<f64>,
}

/// Uncertainty of every combination on one image, in combination order.
pub fn image_reports(
    cfg: &PipelineConfig,
    models: &[TrainedModel],
    posteriors: &[LaplacePosterior],
    x: &Tensor,
    key: &[u64],
) -> Result<Vec<(String, UncertaintyReport)>> {
    let (h, w) = (cfg.data.height, cfg.data.width);
    let mut out = Vec::with_capacity(2 * models.len());
    for (mi, (model, post)) in models.iter().zip(posteriors).enumerate() {
        for (method, tag) in [(Method::Ensemble, 0), (Method::Laplace, 1)] {
            let mut tags = vec![EVAL_STREAM];
            tags.extend_from_slice(key);
            tags.extend_from_slice(&[mi as u64, tag]);
            let mut r = rng::stream(cfg.train.seed, &tags);
            let preds = match method {
                Method::Ensemble => member_predictions(&model.members, x, cfg.laplace.logit_samples, &mut r)?,
                Method::Laplace => predictive_ensemble(
                    model.map(),
                    post,
                    x,
                    cfg.laplace.posterior_samples,
                    cfg.laplace.logit_samples,
                    &mut r,
                )?,
            };
            let mut report = UncertaintyReport::from_cube(&SampleCube::from_predictions(&preds)?, h, w)?;
            if !model.arch.variance_head {
                report.epkl = None;
            }
            out.push((combination_name(model.kind, method), report));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Heatmap {
    pub split: String,
    pub image_id: usize,
    pub model: String,
    pub report: UncertaintyReport,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub records: Vec<EvalRecord>,
    pub heatmaps: Vec<Heatmap>,
}

/// Scores every image of every set under every combination, measure and
/// aggregation. Record order is canonical: set, image, combination, measure,
/// aggregation.
pub fn evaluate(
    cfg: &PipelineConfig,
    models: &[TrainedModel],
    posteriors: &[LaplacePosterior],
    sets: &[EvalSet],
) -> Result<Evaluation> {
    if models.len() != posteriors.len() {
        return Err(Error::Config("one posterior per model is required".into()));
    }
    let aggs = cfg.aggregations();
    let jobs: Vec<(usize, usize)> =
        sets.iter().enumerate().flat_map(|(si, s)| (0..s.samples.len()).map(move |i| (si, i))).collect();
    let per_image = jobs
        .par_iter()
        .map(|&(si, i)| {
            let sample = &sets[si].samples[i];
            let id = sample.provenance.index;
            let reports = image_reports(cfg, models, posteriors, &sample.image, &[si as u64, id as u64])?;
            let mut records = Vec::new();
            let mut heat = Vec::new();
            for (model, report) in reports {
                for (measure, aggregation, score) in report.scores(&aggs)? {
                    records.push(EvalRecord {
                        image_id: id,
                        split: sets[si].name.clone(),
                        model: model.clone(),
                        measure,
                        aggregation,
                        score,
                    });
                }
                if i < cfg.eval.heatmaps && model == LSN_COMBINATION {
                    heat.push(Heatmap { split: sets[si].name.clone(), image_id: id, model, report });
                }
            }
            Ok((records, heat))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut records = Vec::new();
    let mut heatmaps = Vec::new();
    for (r, h) in per_image {
        records.extend(r);
        heatmaps.extend(h);
    }
    Ok(Evaluation { records, heatmaps })
}

/// AUROC of one (combination, measure, aggregation) triple.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub model: String,
    pub measure: Measure,
    pub aggregation: String,
    /// ID against each OOD set alone.
    pub per_set_auroc: BTreeMap<String, Option<f64>>,
    /// ID against the union of all OOD sets.
    pub pooled_auroc: Option<f64>,
}

pub type Summary = BTreeMap<String, SummaryEntry>;

pub fn summary_key(model: &str, measure: Measure, aggregation: Aggregation) -> String {
    format!("{model}/{measure}/{aggregation}")
}

/// Scores grouped by summary key, then by split, in record order.
pub fn group_scores(records: &[EvalRecord]) -> BTreeMap<String, BTreeMap<String, Vec<Option<f64>>>> {
    let mut groups: BTreeMap<String, BTreeMap<String, Vec<Option<f64>>>> = BTreeMap::new();
    for r in records {
        groups
            .entry(summary_key(&r.model, r.measure, r.aggregation))
            .or_default()
            .entry(r.split.clone())
            .or_default()
            .push(r.score);
    }
    groups
}

fn defined(v: &[Option<f64>]) -> Option<Vec<f64>> {
    v.iter().copied().collect()
}

pub fn summarize(records: &[EvalRecord]) -> Result<Summary> {
    let mut out = Summary::new();
    for r in records {
        let key = summary_key(&r.model, r.measure, r.aggregation);
        out.entry(key).or_insert_with(|| SummaryEntry {
            model: r.model.clone(),
            measure: r.measure,
            aggregation: r.aggregation.to_string(),
            per_set_auroc: BTreeMap::new(),
            pooled_auroc: None,
        });
    }
    for (key, splits) in group_scores(records) {
        let entry = out.get_mut(&key).expect("inserted above");
        let Some(id) = splits.get(ID_SPLIT).and_then(|v| defined(v)) else {
            for name in splits.keys().filter(|n| *n != ID_SPLIT) {
                entry.per_set_auroc.insert(name.clone(), None);
            }
            continue;
        };
        let mut pooled = Some(Vec::new());
        for (name, scores) in splits.iter().filter(|(n, _)| *n != ID_SPLIT) {
            let ood = defined(scores);
            let a = match &ood {
                Some(o) => Some(auroc_sets(&id, o)?),
                None => None,
            };
            entry.per_set_auroc.insert(name.clone(), a);
            pooled = match (pooled, ood) {
                (Some(mut p), Some(o)) => {
                    p.extend(o);
                    Some(p)
                }
                _ => None,
            };
        }
        entry.pooled_auroc = match pooled {
            Some(p) if !p.is_empty() => Some(auroc_sets(&id, &p)?),
            _ => None,
        };
    }
    Ok(out)
}

/// EPKL ratio report per combination; `None` where EPKL is undefined.
pub fn ratio_reports(records: &[EvalRecord]) -> Result<BTreeMap<String, Option<RatioReport>>> {
    let mut out = BTreeMap::new();
    for (key, splits) in group_scores(records) {
        let Some(model) = key.strip_suffix(&format!("/{}/{}", Measure::Epkl, Aggregation::Image)) else {
            continue;
        };
        let id = splits.get(ID_SPLIT).and_then(|v| defined(v));
        let ood: Option<Vec<(String, Vec<f64>)>> =
            splits.iter().filter(|(n, _)| *n != ID_SPLIT).map(|(n, v)| defined(v).map(|d| (n.clone(), d))).collect();
        let report = match (id, ood) {
            (Some(id), Some(ood)) => Some(epkl_ratio_report(&id, &ood)?),
            _ => None,
        };
        out.insert(model.to_string(), report);
    }
    Ok(out)
}

pub fn write_results_csv(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["image_id", "split", "model", "measure", "aggregation", "score"])
        .map_err(|e| csv_error(path, e))?;
    for r in records {
        let score = r.score.map_or_else(|| "undefined".to_string(), |s| s.to_string());
        w.write_record([
            r.image_id.to_string(),
            r.split.clone(),
            r.model.clone(),
            r.measure.to_string(),
            r.aggregation.to_string(),
            score,
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<EvalRecord>> {
    let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        if row.len() != 6 {
            return Err(bad(format!("row with {} fields", row.len())));
        }
        let score = match &row[5] {
            "undefined" => None,
            s => Some(s.parse().map_err(|_| bad(format!("bad score `{s}`")))?),
        };
        out.push(EvalRecord {
            image_id: row[0].parse().map_err(|_| bad(format!("bad image id `{}`", &row[0])))?,
            split: row[1].to_string(),
            model: row[2].to_string(),
            measure: row[3].parse()?,
            aggregation: row[4].parse()?,
            score,
        });
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format { path: path.to_path_buf(), reason: e.to_string() }
}

/// Writes `map` as an 8-bit binary PGM scaled linearly from its minimum to
/// its maximum, and returns both.
pub fn write_pgm(path: &Path, map: &[f64], h: usize, w: usize) -> Result<(f64, f64)> {
    if map.len() != h * w {
        return Err(Error::Shape(format!("{} values for a {h}x{w} heatmap", map.len())));
    }
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend(map.iter().map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 }));
    fs::write(path, buf)?;
    Ok((lo, hi))
}

fn write_heatmaps(dir: &Path, heatmaps: &[Heatmap]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for hm in heatmaps {
        for m in [Measure::Pe, Measure::Ee, Measure::Mi, Measure::Pv] {
            let map = hm.report.map(m).expect("pixel measure");
            let stem = format!("{}_{}_{}_{}", hm.split.replace(':', "-"), hm.image_id, hm.model.replace('+', "-"), m);
            let (lo, hi) = write_pgm(&dir.join(format!("{stem}.pgm")), map, hm.report.height, hm.report.width)?;
            let side = json!({
                "split": hm.split,
                "image_id": hm.image_id,
                "model": hm.model,
                "measure": m,
                "min": lo,
                "max": hi,
            });
            fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&side)?)?;
        }
    }
    Ok(())
}

/// Dice of `sigmoid(μ) > 0.5` against the masks, pooled over `samples`.
pub fn dice(net: &SegNet, samples: &[SyntheticSample]) -> Result<f64> {
    let (mut inter, mut total) = (0.0, 0.0);
    for s in samples {
        let fwd = net.forward(&s.image)?;
        for (&m, &y) in fwd.mean_logits().data().iter().zip(&s.mask) {
            let p = if sigmoid(m) > 0.5 { 1.0 } else { 0.0 };
            inter += p * y;
            total += p + y;
        }
    }
    Ok(if total > 0.0 { 2.0 * inter / total } else { 1.0 })
}

/// Artifact locations under an output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("data.bin")
    }

    pub fn member(&self, kind: ModelKind, member: usize) -> PathBuf {
        self.root.join("models").join(format!("{}_{member}.bin", kind.name()))
    }

    pub fn posterior(&self, kind: ModelKind) -> PathBuf {
        self.root.join("models").join(format!("{}.laplace.bin", kind.name()))
    }

    pub fn prior_selection(&self) -> PathBuf {
        self.root.join("models").join("prior_selection.json")
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results.csv")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }

    pub fn ratios(&self) -> PathBuf {
        self.root.join("ratios.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn heatmaps(&self) -> PathBuf {
        self.root.join("heatmaps")
    }
}

pub fn stage_generate(cfg: &PipelineConfig, out: &Layout) -> Result<Dataset> {
    let data = generate(&cfg.data)?;
    io::save_dataset(&out.dataset(), &data, &cfg.data)?;
    Ok(data)
}

fn load_data(cfg: &PipelineConfig, out: &Layout) -> Result<Dataset> {
    let (data, stored) = io::load_dataset(&out.dataset())?;
    if stored != cfg.data {
        return Err(Error::Config("stored dataset was generated from a different data config".into()));
    }
    Ok(data)
}

pub fn stage_train(cfg: &PipelineConfig, out: &Layout) -> Result<Vec<TrainedModel>> {
    let data = load_data(cfg, out)?;
    let models = train_models(cfg, &data)?;
    save_models(out, &models)?;
    Ok(models)
}

fn save_models(out: &Layout, models: &[TrainedModel]) -> Result<()> {
    for m in models {
        for (i, net) in m.members.iter().enumerate() {
            io::save_segnet(&out.member(m.kind, i), net, &m.arch)?;
        }
    }
    Ok(())
}

fn load_models(cfg: &PipelineConfig, out: &Layout) -> Result<Vec<TrainedModel>> {
    cfg.eval
        .models
        .iter()
        .map(|&kind| {
            let arch = kind.arch(&cfg.arch);
            let members = (0..cfg.eval.ensemble_size)
                .map(|i| {
                    let path = out.member(kind, i);
                    let (net, stored) = io::load_segnet(&path)?;
                    if stored != arch {
                        return Err(Error::Format { path, reason: "architecture differs from config".into() });
                    }
                    Ok(net)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TrainedModel { kind, arch, final_losses: vec![f64::NAN; members.len()], members })
        })
        .collect()
}

pub fn stage_fit(cfg: &PipelineConfig, out: &Layout) -> Result<(Vec<LaplacePosterior>, Vec<PriorSelection>)> {
    let data = load_data(cfg, out)?;
    let models = load_models(cfg, out)?;
    let (posts, sel) = fit_posteriors(cfg, &data, &models)?;
    save_posteriors(out, &models, &posts, &sel)?;
    Ok((posts, sel))
}

fn save_posteriors(
    out: &Layout,
    models: &[TrainedModel],
    posts: &[LaplacePosterior],
    sel: &[PriorSelection],
) -> Result<()> {
    for (m, p) in models.iter().zip(posts) {
        io::save_posterior(&out.posterior(m.kind), p, &m.arch)?;
    }
    fs::write(out.prior_selection(), serde_json::to_string_pretty(sel)?)?;
    Ok(())
}

pub fn stage_evaluate(cfg: &PipelineConfig, out: &Layout) -> Result<Evaluation> {
    let data = load_data(cfg, out)?;
    let models = load_models(cfg, out)?;
    let posts = models.iter().map(|m| io::load_posterior(&out.posterior(m.kind))).collect::<Result<Vec<_>>>()?;
    let sets = evaluation_sets(cfg, &data)?;
    let eval = evaluate(cfg, &models, &posts, &sets)?;
    write_evaluation(out, &eval)?;
    Ok(eval)
}

fn write_evaluation(out: &Layout, eval: &Evaluation) -> Result<()> {
    fs::create_dir_all(&out.root)?;
    write_results_csv(&out.results(), &eval.records)?;
    write_heatmaps(&out.heatmaps(), &eval.heatmaps)
}

pub struct Reports {
    pub summary: Summary,
    pub ratios: BTreeMap<String, Option<RatioReport>>,
}

pub fn stage_report(out: &Layout) -> Result<Reports> {
    let records = read_results_csv(&out.results())?;
    write_reports(out, &records)
}

fn write_reports(out: &Layout, records: &[EvalRecord]) -> Result<Reports> {
    let summary = summarize(records)?;
    let ratios = ratio_reports(records)?;
    fs::write(out.summary(), serde_json::to_string_pretty(&summary)?)?;
    fs::write(out.ratios(), serde_json::to_string_pretty(&ratios)?)?;
    Ok(Reports { summary, ratios })
}

/// Everything produced by [`run_pipeline`].
pub struct PipelineOutcome {
    pub data: Dataset,
    pub models: Vec<TrainedModel>,
    pub posteriors: Vec<LaplacePosterior>,
    pub prior_selection: Vec<PriorSelection>,
    pub sets: Vec<EvalSet>,
    pub evaluation: Evaluation,
    pub reports: Reports,
    pub manifest: Value,
}

fn timed<T>(stage: &'static str, times: &mut BTreeMap<&'static str, f64>, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let out = f().map_err(|e| e.in_stage(stage));
    times.insert(stage, t.elapsed().as_secs_f64());
    out
}

fn manifest(cfg: &PipelineConfig, times: &BTreeMap<&'static str, f64>, extra: Value) -> Value {
    let (train, val, test) = cfg.data.split_sizes();
    json!({
        "code_version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "config_hash": cfg.hash(),
        "data_seed": cfg.data.seed,
        "train_seed": cfg.train.seed,
        "split_sizes": { "train": train, "val": val, "test": test },
        "stage_seconds": times,
        "conventions": {
            "entropy_units": "nats",
            "probability_clamp": crate::measures::PROB_EPS,
            "pixel_variance": "population (1/N) variance over weight samples of sigmoid(mean logits)",
            "epkl": "mean over ordered pairs of distinct weight samples; undefined without a variance head",
            "mutual_information": "floored at 0",
            "auroc": "per_set_auroc is ID against one OOD set; pooled_auroc is ID against all OOD sets",
            "laplace_scope": "shared and mean-head weights; variance head fixed at its trained value",
        },
        "deviations": [
            "image size and channel ladder scaled down to desk size",
            "motion artifacts replaced by blur and ghosting",
            "explicit isotropic prior precision added to the curvature",
            "prior precision chosen by validation predictive NLL over a grid unless tuning is disabled",
        ],
        "results": extra,
    })
}

/// Runs every stage and writes all outputs under `out`. On failure the
/// manifest records the failing stage and whatever outputs exist are kept.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let layout = Layout::new(out);
    fs::create_dir_all(out)?;
    let mut times = BTreeMap::new();
    let result = run_stages(cfg, &layout, &mut times);
    match result {
        Ok(mut outcome) => {
            let dice: BTreeMap<&str, f64> = outcome
                .models
                .iter()
                .map(|m| Ok((m.kind.name(), dice(m.map(), &outcome.data.test)?)))
                .collect::<Result<_>>()?;
            let losses: BTreeMap<&str, &[f64]> =
                outcome.models.iter().map(|m| (m.kind.name(), m.final_losses.as_slice())).collect();
            let total: f64 = times.values().sum();
            let taus: BTreeMap<&str, f64> = outcome
                .models
                .iter()
                .zip(&outcome.posteriors)
                .map(|(m, p)| (m.kind.name(), p.prior_precision()))
                .collect();
            let m = manifest(
                cfg,
                &times,
                json!({
                    "status": "ok",
                    "test_dice": dice,
                    "final_train_loss": losses,
                    "prior_precision": taus,
                    "prior_selection": outcome.prior_selection,
                    "total_seconds": total,
                }),
            );
            fs::write(layout.manifest(), serde_json::to_string_pretty(&m)?)?;
            outcome.manifest = m;
            Ok(outcome)
        }
        Err(e) => {
            let m = manifest(cfg, &times, json!({ "status": "failed", "error": e.to_string() }));
            fs::write(layout.manifest(), serde_json::to_string_pretty(&m)?)?;
            Err(e)
        }
    }
}

fn run_stages(cfg: &PipelineConfig, out: &Layout, times: &mut BTreeMap<&'static str, f64>) -> Result<PipelineOutcome> {
    let data = timed("generate", times, || stage_generate(cfg, out))?;
    let models = timed("train", times, || {
        let m = train_models(cfg, &data)?;
        save_models(out, &m)?;
        Ok(m)
    })?;
    let (posteriors, prior_selection) = timed("fit-laplace", times, || {
        let (p, sel) = fit_posteriors(cfg, &data, &models)?;
        save_posteriors(out, &models, &p, &sel)?;
        Ok((p, sel))
    })?;
    let (sets, evaluation) = timed("evaluate", times, || {
        let sets = evaluation_sets(cfg, &data)?;
        let eval = evaluate(cfg, &models, &posteriors, &sets)?;
        write_evaluation(out, &eval)?;
        Ok((sets, eval))
    })?;
    let reports = timed("report", times, || write_reports(out, &evaluation.records))?;
    Ok(PipelineOutcome { data, models, posteriors, prior_selection, sets, evaluation, reports, manifest: Value::Null })
}
