mod common;

use common::*;
use lsn_core::curvature::{
    accumulate_dataset_curvature, bce_logit_hessian, db_diag, db_diag_observed, ggn_diag_exact, image_curvature,
    skip_step, CurvatureMessage, StepKind,
};
use lsn_core::net::{build_unet, ArchitectureConfig, Conv2d, Dense, Layer, Network};
use lsn_core::{Error, Tensor};

fn msg(v: Vec<f64>) -> CurvatureMessage {
    CurvatureMessage::new(Tensor::vector(v))
}

#[test]
fn single_dense_layer_curvature_is_h_times_x_squared() {
    let w = vec![0.3, -1.2, 0.5, 2.0, 0.1, -0.7];
    let net = Network::new(vec![Layer::Dense(Dense::with_weights(3, 2, w, vec![0.0, 0.0]).unwrap())]);
    let x = Tensor::vector(vec![1.5, -2.0, 0.5]);
    let h = vec![0.2, 0.7];
    let mut expected = Vec::new();
    for hj in &h {
        for xk in x.data() {
            expected.push(hj * xk * xk);
        }
    }
    expected.extend_from_slice(&h);
    let exact = ggn_diag_exact(&net, &x, &msg(h.clone())).unwrap();
    let fast = db_diag(&net, &x, &msg(h)).unwrap();
    assert!(max_rel_err(&exact.values, &expected) < 1e-15);
    assert!(max_rel_err(&fast.values, &expected) < 1e-15);
}

#[test]
fn zero_loss_hessian_gives_zero_curvature() {
    let mut r = rng(4);
    let net = nested_skip_conv_net(&mut r);
    let x = random_tensor(&[1, 4, 4], &mut r);
    let zero = CurvatureMessage::new(Tensor::zeros(&[1, 4, 4]));
    assert!(ggn_diag_exact(&net, &x, &zero).unwrap().values.iter().all(|&v| v == 0.0));
    assert!(db_diag(&net, &x, &zero).unwrap().values.iter().all(|&v| v == 0.0));
}

/// Full GGN matrix from a finite-difference Jacobian: independent of every
/// reverse-mode code path.
fn full_ggn_diag_fd(net: &Network, x: &Tensor, h: &[f64]) -> Vec<f64> {
    let p0 = net.params();
    let mut work = net.clone();
    let step = 1e-6;
    let cols: Vec<Vec<f64>> = (0..p0.len())
        .map(|j| {
            let mut p = p0.clone();
            p[j] += step;
            work.set_params(&p).unwrap();
            let up = work.predict(x).unwrap().into_data();
            p[j] -= 2.0 * step;
            work.set_params(&p).unwrap();
            let down = work.predict(x).unwrap().into_data();
            up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * step)).collect()
        })
        .collect();
    let n = p0.len();
    let mut ggn = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            ggn[a * n + b] = (0..h.len()).map(|o| cols[a][o] * h[o] * cols[b][o]).sum();
        }
    }
    (0..n).map(|i| ggn[i * n + i]).collect()
}

#[test]
fn exact_oracle_matches_full_matrix_oracle() {
    let mut r = rng(12);
    let net = nested_skip_conv_net(&mut r);
    assert!((150..=400).contains(&net.param_count()), "{} params", net.param_count());
    let x = random_tensor(&[1, 4, 4], &mut r);
    let h = positive_vec(16, &mut r);
    let exact = ggn_diag_exact(&net, &x, &msg(h.clone()).reshaped(&[1, 4, 4])).unwrap();
    let full = full_ggn_diag_fd(&net, &x, &h);
    let e = max_rel_err(&exact.values, &full);
    assert!(e < 1e-6, "max rel err {e}");
}

trait Reshaped {
    fn reshaped(self, shape: &[usize]) -> Self;
}

impl Reshaped for CurvatureMessage {
    fn reshaped(self, shape: &[usize]) -> Self {
        CurvatureMessage::new(self.diag.reshape(shape.to_vec()).unwrap())
    }
}

#[test]
fn oracle_refuses_oversized_networks() {
    let net = Network::new(vec![Layer::Dense(Dense::new(100, 60))]);
    let x = Tensor::zeros(&[100]);
    let err = ggn_diag_exact(&net, &x, &msg(vec![1.0; 60])).unwrap_err();
    assert!(matches!(err, Error::Config(_)));

    let net = Network::new(vec![Layer::Conv2d(Conv2d::new(1, 1, 3))]);
    let x = Tensor::zeros(&[1, 80, 80]);
    let h = CurvatureMessage::new(Tensor::filled(&[1, 80, 80], 0.1));
    assert!(matches!(ggn_diag_exact(&net, &x, &h), Err(Error::Config(_))));
    assert!(db_diag(&net, &x, &h).is_ok());
}

#[test]
fn db_is_exact_on_diagonal_jacobian_networks() {
    for seed in 0..10 {
        let mut r = rng(200 + seed);
        let net = exact_class_dense_net(5, &mut r);
        let x = random_tensor(&[5], &mut r);
        let out = net.output_shape(&[5]).unwrap();
        let h = CurvatureMessage::new(Tensor::new(out.clone(), positive_vec(out[0], &mut r)).unwrap());
        let exact = ggn_diag_exact(&net, &x, &h).unwrap();
        let fast = db_diag(&net, &x, &h).unwrap();
        assert!(max_rel_err(&fast.values, &exact.values) <= 1e-10);

        let net = exact_class_conv_net(2, &mut r);
        let x = random_tensor(&[2, 4, 4], &mut r);
        let out = net.output_shape(&[2, 4, 4]).unwrap();
        let n: usize = out.iter().product();
        let h = CurvatureMessage::new(Tensor::new(out, positive_vec(n, &mut r)).unwrap());
        let exact = ggn_diag_exact(&net, &x, &h).unwrap();
        let fast = db_diag(&net, &x, &h).unwrap();
        assert!(max_rel_err(&fast.values, &exact.values) <= 1e-10);
    }
}

#[test]
fn last_layer_block_is_exact_for_any_architecture() {
    let mut r = rng(31);
    let net = nested_skip_conv_net(&mut r);
    let x = random_tensor(&[1, 4, 4], &mut r);
    let h = CurvatureMessage::new(Tensor::new(vec![1, 4, 4], positive_vec(16, &mut r)).unwrap());
    let exact = ggn_diag_exact(&net, &x, &h).unwrap();
    let fast = db_diag(&net, &x, &h).unwrap();
    let last = net.param_ranges().last().unwrap().clone();
    assert!(max_rel_err(&fast.values[last.clone()], &exact.values[last]) < 1e-13);
}

#[test]
fn unet_db_is_nonnegative_and_close_to_exact_total() {
    let cfg = ArchitectureConfig { channels: vec![2, 4], rank: 1, ..Default::default() };
    let mut r = rng(5);
    let seg = build_unet(&cfg, &mut r).unwrap();
    let net = seg.mean_network();
    assert!(net.param_count() <= 5_000);
    let x = random_tensor(&[1, 32, 32], &mut r);
    let probs: Vec<f64> = net.predict(&x).unwrap().data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
    let h = bce_logit_hessian(&Tensor::new(vec![1, 32, 32], probs).unwrap());
    let exact = ggn_diag_exact(net, &x, &h).unwrap();
    let fast = db_diag(net, &x, &h).unwrap();
    assert!(fast.values.iter().all(|&v| v >= 0.0));
    let ratio = fast.total() / exact.total();
    assert!((0.1..=10.0).contains(&ratio), "total ratio {ratio}");
}

#[test]
fn skip_step_identity_branch_adds_messages() {
    let sub = Network::new(vec![]);
    let x = Tensor::vector(vec![0.1, 0.2, 0.3]);
    let out = skip_step(&msg(vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0]), &sub, &x).unwrap();
    assert_eq!(out.diag.data(), &[11.0, 22.0, 33.0]);
}

#[test]
fn skip_step_scalar_doubling() {
    let sub = Network::new(vec![Layer::Dense(Dense::with_weights(1, 1, vec![2.0], vec![0.0]).unwrap())]);
    let out = skip_step(&msg(vec![3.0, 5.0]), &sub, &Tensor::vector(vec![0.4])).unwrap();
    assert_eq!(out.diag.data(), &[17.0]);
}

#[test]
fn skip_step_partition_mismatch_is_structural() {
    let sub = Network::new(vec![Layer::Relu]);
    let err = skip_step(&msg(vec![1.0; 5]), &sub, &Tensor::vector(vec![0.4, 0.2])).unwrap_err();
    assert!(matches!(err, Error::Structure(_)));
}

#[test]
fn skip_step_matches_stacked_jacobian() {
    for seed in 0..8 {
        let mut r = rng(300 + seed);
        let sub = exact_class_dense_net(4, &mut r);
        let x = random_tensor(&[4], &mut r);
        let o = sub.output_shape(&[4]).unwrap()[0];
        let m = positive_vec(o + 4, &mut r);
        let mut stacked = input_jacobian(&sub, &x);
        for i in 0..4 {
            let mut row = vec![0.0; 4];
            row[i] = 1.0;
            stacked.push(row);
        }
        let brute = sandwich_diag(&stacked, &m);
        let got = skip_step(&msg(m), &sub, &x).unwrap();
        assert!(max_rel_err(got.diag.data(), &brute) <= 1e-10);
    }
}

#[test]
fn every_step_preserves_trace_and_stays_nonnegative() {
    let mut r = rng(41);
    let net = nested_skip_conv_net(&mut r);
    let x = random_tensor(&[1, 4, 4], &mut r);
    let h = CurvatureMessage::new(Tensor::new(vec![1, 4, 4], positive_vec(16, &mut r)).unwrap());
    let mut checked = 0;
    let (diag, _) = db_diag_observed(&net, &x, &h, &mut |step| {
        assert!(step.message_in.iter().all(|&v| v >= 0.0));
        let got: f64 = step.message_in.iter().sum();
        let want = match &step.kind {
            StepKind::Layer { layer, input } => {
                let holder = Network::new(vec![(*layer).clone()]);
                let rows = input_jacobian(&holder, input);
                rows.iter().zip(step.message_out).map(|(row, m)| m * dot(row, row)).sum::<f64>()
            }
            StepKind::SkipMerge { branch, identity } => branch.iter().sum::<f64>() + identity.iter().sum::<f64>(),
        };
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1e-300), "{:?}: {got} vs {want}", step.path);
        checked += 1;
    })
    .unwrap();
    assert!(checked >= 12);
    assert!(diag.values.iter().all(|&v| v >= 0.0));
}

#[test]
fn dataset_curvature_is_additive() {
    let cfg = ArchitectureConfig { height: 8, width: 8, channels: vec![2, 3], rank: 1, ..Default::default() };
    let mut r = rng(6);
    let seg = build_unet(&cfg, &mut r).unwrap();
    let images: Vec<Tensor> = (0..5).map(|_| random_tensor(&[1, 8, 8], &mut r)).collect();

    let one = image_curvature(&seg, &images[0]).unwrap();
    let twice = accumulate_dataset_curvature(&seg, &[images[0].clone(), images[0].clone()]).unwrap();
    let doubled: Vec<f64> = one.values.iter().map(|v| 2.0 * v).collect();
    assert!(max_rel_err(&twice.values, &doubled) < 1e-15);

    let dup = vec![images[1].clone(); 4];
    let four = accumulate_dataset_curvature(&seg, &dup).unwrap();
    let single = image_curvature(&seg, &images[1]).unwrap();
    let quad: Vec<f64> = single.values.iter().map(|v| 4.0 * v).collect();
    assert!(max_rel_err(&four.values, &quad) < 1e-14);

    let all = accumulate_dataset_curvature(&seg, &images).unwrap();
    let mut looped = vec![0.0; all.len()];
    for img in &images {
        let g = db_diag(
            seg.mean_network(),
            img,
            &bce_logit_hessian(
                &Tensor::new(
                    vec![1, 8, 8],
                    seg.mean_network().predict(img).unwrap().data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
                )
                .unwrap(),
            ),
        )
        .unwrap();
        looped.iter_mut().zip(&g.values).for_each(|(a, b)| *a += b);
    }
    assert!(max_rel_err(&all.values, &looped) < 1e-12);
    assert_eq!(all.len(), seg.shared_len() + seg.mean_head_len());

    assert!(matches!(accumulate_dataset_curvature(&seg, &[]), Err(Error::Config(_))));
}

#[test]
fn non_finite_loss_hessian_is_rejected() {
    let net = Network::new(vec![Layer::Dense(Dense::identity(2))]);
    let err = db_diag(&net, &Tensor::vector(vec![1.0, 1.0]), &msg(vec![f64::INFINITY, 1.0])).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)));
}
