mod common;

use common::*;
use lsn_core::bench::io::{self, load_dataset, load_posterior, load_segnet, save_dataset, save_posterior, save_segnet};
use lsn_core::bench::pipeline::{
    read_results_csv, run_pipeline, summarize, write_results_csv, EvalRecord, Layout, ModelKind, PipelineConfig,
};
use lsn_core::bench::{
    auroc, auroc_sets, corrupt_image, epkl_ratio_report, generate, generate_dataset, CorruptionKind, CorruptionSpec,
    DataConfig,
};
use lsn_core::laplace::fit;
use lsn_core::measures::{Aggregation, Measure};
use lsn_core::net::{build_unet, ArchitectureConfig};
use lsn_core::{Error, Tensor};
use std::fs;

#[test]
fn dataset_is_deterministic_and_split() {
    let a = generate_dataset(200, 7).unwrap();
    let b = generate_dataset(200, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.train.len(), a.val.len(), a.test.len()), (140, 20, 40));
    let c = generate_dataset(200, 8).unwrap();
    assert_ne!(a.train[0].image, c.train[0].image);
    for s in a.train.iter().chain(&a.val).chain(&a.test) {
        let f = s.foreground_fraction();
        assert!((0.05..=0.6).contains(&f), "foreground fraction {f}");
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(s.mask.iter().all(|&m| m == 0.0 || m == 1.0));
        assert_eq!(s.provenance.seed, 7);
    }
    let mut ids: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).map(|s| s.provenance.index).collect();
    ids.sort_unstable();
    assert_eq!(ids, (0..200).collect::<Vec<_>>());
    assert!(matches!(generate_dataset(9, 0), Err(Error::Config(_))));
    let cfg = DataConfig { train_fraction: 0.95, val_fraction: 0.1, ..Default::default() };
    assert!(matches!(generate(&cfg), Err(Error::Config(_))));
}

fn gray(h: usize, w: usize, v: f64) -> Tensor {
    Tensor::filled(&[1, h, w], v)
}

#[test]
fn zero_severity_is_identity() {
    let x = generate_dataset(10, 1).unwrap().train[0].image.clone();
    for kind in [CorruptionKind::Noise, CorruptionKind::Blur, CorruptionKind::Spike, CorruptionKind::Ghosting] {
        let spec = CorruptionSpec::new(kind, 0.0).unwrap();
        assert_eq!(corrupt_image(&x, &spec, &mut rng(2)).unwrap(), x, "{kind:?}");
    }
}

#[test]
fn noise_has_requested_std() {
    let x = gray(64, 64, 0.5);
    let spec = CorruptionSpec::new(CorruptionKind::Noise, 0.1).unwrap();
    let y = corrupt_image(&x, &spec, &mut rng(3)).unwrap();
    let d: Vec<f64> = y.data().iter().map(|v| v - 0.5).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 0.01 && (sd - 0.1).abs() < 0.005, "mean {mean} sd {sd}");
}

#[test]
fn blur_preserves_constants_and_smooths_edges() {
    let x = gray(16, 16, 0.3);
    let spec = CorruptionSpec::new(CorruptionKind::Blur, 2.0).unwrap();
    let y = corrupt_image(&x, &spec, &mut rng(4)).unwrap();
    assert!(y.data().iter().all(|v| (v - 0.3).abs() < 1e-12));

    let mut step = vec![0.0; 256];
    for r in 0..16 {
        for c in 8..16 {
            step[r * 16 + c] = 1.0;
        }
    }
    let y = corrupt_image(&Tensor::new(vec![1, 16, 16], step).unwrap(), &spec, &mut rng(4)).unwrap();
    let row = &y.data()[8 * 16..9 * 16];
    assert!(row.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    assert!(row[7] > 0.0 && row[8] < 1.0);
}

#[test]
fn ghosting_copies_impulse_at_quarter_shift() {
    let mut v = vec![0.0; 64];
    v[8 + 3] = 1.0;
    let x = Tensor::new(vec![1, 8, 8], v).unwrap();
    let s = 0.6;
    let spec = CorruptionSpec::new(CorruptionKind::Ghosting, s).unwrap();
    let y = corrupt_image(&x, &spec, &mut rng(5)).unwrap();
    let nonzero: Vec<(usize, f64)> = y.data().iter().copied().enumerate().filter(|(_, v)| *v != 0.0).collect();
    assert_eq!(nonzero.len(), 2);
    let at = |i: usize| y.data()[i];
    assert!((at(8 + 3) - 1.0 / (1.0 + s)).abs() < 1e-12);
    let ghost: Vec<usize> = nonzero.iter().map(|p| p.0).filter(|&i| i != 11).collect();
    let (r, c) = (ghost[0] / 8, ghost[0] % 8);
    assert_eq!(c, 3);
    assert!(r == 3 || r == 7, "ghost row {r}");
    assert!((at(ghost[0]) - s / (1.0 + s)).abs() < 1e-12);
}

#[test]
fn spike_adds_bounded_periodic_pattern() {
    let x = gray(32, 32, 0.5);
    let spec = CorruptionSpec::new(CorruptionKind::Spike, 0.2).unwrap();
    let y = corrupt_image(&x, &spec, &mut rng(6)).unwrap();
    let d: Vec<f64> = y.data().iter().map(|v| v - 0.5).collect();
    assert!(d.iter().all(|v| v.abs() <= 0.2 + 1e-12));
    assert!(d.iter().any(|v| v.abs() > 0.1));
    let a = corrupt_image(&x, &spec, &mut rng(6)).unwrap();
    assert_eq!(a, y);
}

#[test]
fn corruption_specs_parse_and_validate() {
    let s: CorruptionSpec = "noise:0.3".parse().unwrap();
    assert_eq!(s, CorruptionSpec::new(CorruptionKind::Noise, 0.3).unwrap());
    assert_eq!(s.to_string(), "noise:0.3");
    assert!(matches!("pixelate:1".parse::<CorruptionSpec>(), Err(Error::Config(_))));
    assert!(matches!("pixelate".parse::<CorruptionKind>(), Err(Error::Config(_))));
    assert!(matches!(CorruptionSpec::new(CorruptionKind::Blur, -1.0), Err(Error::Config(_))));
}

#[test]
fn auroc_examples() {
    assert_eq!(auroc_sets(&[0.1, 0.2], &[0.3, 0.4]).unwrap(), 1.0);
    assert_eq!(auroc_sets(&[0.3, 0.4], &[0.1, 0.2]).unwrap(), 0.0);
    assert_eq!(auroc_sets(&[0.5; 3], &[0.5; 4]).unwrap(), 0.5);
    assert_eq!(auroc(&[0.8, 0.2, 0.6, 0.4], &[1, 0, 0, 1]).unwrap(), 0.75);
    assert_eq!(auroc(&[0.8, 0.2, 0.6, 0.4], &[1, 1, 0, 0]).unwrap(), 0.5);
    assert_eq!(auroc(&[1.0, 2.0, 2.0, 3.0], &[0, 0, 1, 1]).unwrap(), 0.875);
    assert!(matches!(auroc(&[1.0, 2.0], &[1, 1]), Err(Error::Undefined(_))));
    assert!(matches!(auroc(&[f64::NAN, 2.0], &[0, 1]), Err(Error::Numeric(_))));
}

#[test]
fn auroc_is_invariant_under_monotone_maps() {
    let mut r = rng(7);
    let scores: Vec<f64> = random_vec(60, &mut r);
    let labels: Vec<u8> = (0..60).map(|i| (i % 3 == 0) as u8).collect();
    let a = auroc(&scores, &labels).unwrap();
    let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 1.0).collect();
    assert_eq!(a, auroc(&mapped, &labels).unwrap());
    let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
    assert!((auroc(&flipped, &labels).unwrap() - (1.0 - a)).abs() < 1e-12);
}

#[test]
fn ratio_report_flags() {
    let rep = epkl_ratio_report(
        &[1.0, 3.0],
        &[("a".into(), vec![2.1]), ("b".into(), vec![2.2, 2.2]), ("c".into(), vec![2.0]), ("d".into(), vec![1.0])],
    )
    .unwrap();
    let ratios: Vec<f64> = rep.rows.iter().map(|r| r.ratio).collect();
    assert_eq!(ratios, vec![1.05, 1.1, 1.0, 0.5]);
    assert_eq!((rep.flagged, rep.strongly_flagged), (2, 1));
    assert!(rep.rows[1].strong_flag && !rep.rows[0].strong_flag && rep.rows[0].flag);
    assert!(matches!(epkl_ratio_report(&[], &[]), Err(Error::Config(_))));
}

#[test]
fn blobs_round_trip_and_reject_damage() {
    let dir = tempfile::tempdir().unwrap();
    let arch = ArchitectureConfig { height: 8, width: 8, channels: vec![2, 3], rank: 2, ..Default::default() };
    let net = build_unet(&arch, &mut rng(8)).unwrap();
    let p = dir.path().join("net.bin");
    save_segnet(&p, &net, &arch).unwrap();
    let (back, arch_back) = load_segnet(&p).unwrap();
    assert_eq!(arch_back, arch);
    assert_eq!(back.params(), net.params());

    let x = generate_dataset(10, 2).unwrap().train[0].image.clone();
    let small = ArchitectureConfig { height: 32, width: 32, channels: vec![2], rank: 1, ..Default::default() };
    let snet = build_unet(&small, &mut rng(9)).unwrap();
    let post = fit(&snet, &[x], 0.5).unwrap();
    let pp = dir.path().join("post.bin");
    save_posterior(&pp, &post, &small).unwrap();
    assert_eq!(load_posterior(&pp).unwrap(), post);

    let cfg = DataConfig { n_images: 12, ..Default::default() };
    let data = generate(&cfg).unwrap();
    let dp = dir.path().join("data.bin");
    save_dataset(&dp, &data, &cfg).unwrap();
    assert_eq!(load_dataset(&dp).unwrap(), (data, cfg));

    assert!(matches!(load_posterior(&p), Err(Error::Format { .. })));
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(load_segnet(&p), Err(Error::Format { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    fs::write(&p, &bad).unwrap();
    assert!(matches!(io::read_blob(&p, "segnet"), Err(Error::Format { .. })));
    let mut long = bytes;
    long.push(0);
    fs::write(&p, &long).unwrap();
    assert!(matches!(load_segnet(&p), Err(Error::Format { .. })));
}

#[test]
fn results_csv_round_trips_undefined_scores() {
    let dir = tempfile::tempdir().unwrap();
    let records = vec![
        EvalRecord {
            image_id: 3,
            split: "id".into(),
            model: "unet+laplace".into(),
            measure: Measure::Epkl,
            aggregation: Aggregation::Image,
            score: None,
        },
        EvalRecord {
            image_id: 3,
            split: "ood:noise:0.3".into(),
            model: "ssn+laplace".into(),
            measure: Measure::Pv,
            aggregation: Aggregation::Patch(10),
            score: Some(0.125),
        },
    ];
    let p = dir.path().join("r.csv");
    write_results_csv(&p, &records).unwrap();
    assert_eq!(read_results_csv(&p).unwrap(), records);
    let text = fs::read_to_string(&p).unwrap();
    assert!(text.contains("undefined"));
}

fn tiny_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::smoke();
    cfg.data.n_images = 20;
    cfg.train.epochs = 3;
    cfg.eval.ensemble_size = 2;
    cfg.eval.heatmaps = 1;
    cfg.laplace.posterior_samples = 4;
    cfg.laplace.logit_samples = 3;
    cfg.laplace.prior_grid = vec![1e-2, 1e2];
    cfg.laplace.tune_posterior_samples = 3;
    cfg.laplace.tune_logit_samples = 2;
    cfg
}

#[test]
fn smoke_pipeline_scores_every_combination() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let out = run_pipeline(&cfg, dir.path()).unwrap();
    let layout = Layout::new(dir.path());
    for p in [layout.results(), layout.summary(), layout.ratios(), layout.manifest(), layout.prior_selection()] {
        assert!(p.exists(), "{}", p.display());
    }
    assert_eq!(out.manifest["results"]["status"], "ok");
    assert_eq!(out.prior_selection.len(), 3);
    for (sel, post) in out.prior_selection.iter().zip(&out.posteriors) {
        assert!(cfg.laplace.prior_grid.contains(&sel.prior_precision));
        assert_eq!(post.prior_precision(), sel.prior_precision);
        assert_eq!(sel.validation_nll.len(), 2);
    }

    let records = read_results_csv(&layout.results()).unwrap();
    assert_eq!(records, out.evaluation.records);
    let sets = 1 + cfg.eval.corruptions.len();
    let per_image = 6 * (4 * 2 + 1);
    assert_eq!(records.len(), sets * out.data.test.len() * per_image);

    let summary = summarize(&records).unwrap();
    for model in ["unet", "ssn_diag", "ssn"] {
        for method in ["ensemble", "laplace"] {
            let combo = format!("{model}+{method}");
            for m in Measure::ALL {
                let aggs: Vec<String> =
                    if m == Measure::Epkl { vec!["image".into()] } else { vec!["sum".into(), "patch10".into()] };
                for a in aggs {
                    let e = &summary[&format!("{combo}/{m}/{a}")];
                    assert_eq!(e.per_set_auroc.len(), 4);
                    if model == "unet" && m == Measure::Epkl {
                        assert!(e.pooled_auroc.is_none());
                    } else {
                        let a = e.pooled_auroc.unwrap();
                        assert!((0.0..=1.0).contains(&a));
                    }
                }
            }
        }
    }
    assert!(out.reports.ratios["unet+laplace"].is_none());
    assert!(out.reports.ratios["ssn+laplace"].as_ref().unwrap().rows.len() == 4);
    assert!(fs::read_dir(layout.heatmaps()).unwrap().count() > 0);
}

#[test]
fn ensemble_members_collapse_and_differ() {
    let mut cfg = tiny_config();
    cfg.eval.models = vec![ModelKind::SsnDiag];
    let data = generate(&cfg.data).unwrap();
    cfg.eval.ensemble_size = 1;
    let one = lsn_core::bench::train_models(&cfg, &data).unwrap();
    assert_eq!(one[0].members.len(), 1);
    cfg.eval.ensemble_size = 3;
    let three = lsn_core::bench::train_models(&cfg, &data).unwrap();
    assert_eq!(three[0].members[0].params(), one[0].members[0].params());
    assert_ne!(three[0].members[1].params(), three[0].members[0].params());
}

#[test]
fn invalid_pipeline_configs_are_rejected() {
    let mut cfg = tiny_config();
    cfg.laplace.prior_grid.clear();
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = tiny_config();
    cfg.eval.patch = 64;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = tiny_config();
    cfg.data.val_fraction = 0.0;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    cfg.laplace.tune_prior_precision = false;
    assert!(cfg.validate().is_ok());
}
