#![allow(dead_code)]

use lsn_core::net::{Conv2d, Dense, Layer, Network};
use lsn_core::rng::{self, Rng};
use lsn_core::Tensor;
use rand::Rng as _;

pub fn rng(seed: u64) -> Rng {
    rng::seeded(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = dot(a, a).sqrt().max(dot(b, b).sqrt()).max(1e-300);
    diff / scale
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn conv(cin: usize, cout: usize) -> Layer {
    Layer::Conv2d(Conv2d::new(cin, cout, 3))
}

/// Conv net on `[1, 4, 4]` with two skip blocks, one nested in the other.
pub fn nested_skip_conv_net(rng: &mut Rng) -> Network {
    let innermost = Network::new(vec![Layer::AvgPool2, conv(3, 2), Layer::Sigmoid, Layer::Upsample2]);
    let middle = Network::new(vec![conv(2, 3), Layer::Relu, Layer::Skip(innermost), conv(5, 2), Layer::Sigmoid]);
    let mut net = Network::new(vec![conv(1, 2), Layer::Sigmoid, Layer::Skip(middle), conv(4, 1)]);
    net.init(rng);
    perturb_biases(&mut net, rng);
    net
}

/// Dense net on `[n]`: dense, skip(dense, relu, skip(dense)), dense.
pub fn nested_skip_dense_net(n: usize, rng: &mut Rng) -> Network {
    let inner = Network::new(vec![Layer::Dense(Dense::new(3, 2)), Layer::Sigmoid]);
    let sub = Network::new(vec![
        Layer::Dense(Dense::new(n, 3)),
        Layer::Relu,
        Layer::Skip(inner),
        Layer::Dense(Dense::new(5, 2)),
    ]);
    let mut net = Network::new(vec![
        Layer::Dense(Dense::new(n, n)),
        Layer::Sigmoid,
        Layer::Skip(sub),
        Layer::Dense(Dense::new(n + 2, 3)),
    ]);
    net.init(rng);
    perturb_biases(&mut net, rng);
    net
}

/// Nonzero biases so zero-init does not hide bias gradients.
pub fn perturb_biases(net: &mut Network, rng: &mut Rng) {
    let mut p = net.params();
    for v in p.iter_mut() {
        *v += rng.random_range(-0.1..0.1);
    }
    net.set_params(&p).unwrap();
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + h;
            let up = f(&work);
            work[i] = orig - h;
            let down = f(&work);
            work[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Chain of elementwise layers and skips over elementwise chains, nested up to
/// `depth`. Every input Jacobian in it is diagonal or a stack of diagonals.
pub fn elementwise_chain(rng: &mut Rng, len: usize, depth: usize) -> Vec<Layer> {
    (0..len)
        .map(|_| match rng.random_range(0..3) {
            0 => Layer::Relu,
            1 => Layer::Sigmoid,
            _ if depth > 0 => {
                let inner_len = rng.random_range(0..3);
                Layer::Skip(Network::new(elementwise_chain(rng, inner_len, depth - 1)))
            }
            _ => Layer::Sigmoid,
        })
        .collect()
}

/// One parametric layer followed by an elementwise chain that contains at
/// least one skip nested inside another skip. Vector input of length `n`.
pub fn exact_class_dense_net(n: usize, rng: &mut Rng) -> Network {
    let hidden = rng.random_range(2..6);
    let mut layers = vec![Layer::Dense(Dense::new(n, hidden))];
    let nested =
        Layer::Skip(Network::new(vec![Layer::Sigmoid, Layer::Skip(Network::new(elementwise_chain(rng, 2, 1)))]));
    let len = rng.random_range(0..3);
    layers.extend(elementwise_chain(rng, len, 2));
    layers.push(nested);
    let len = rng.random_range(0..3);
    layers.extend(elementwise_chain(rng, len, 2));
    let mut net = Network::new(layers);
    net.init(rng);
    perturb_biases(&mut net, rng);
    net
}

/// Conv counterpart of [`exact_class_dense_net`] on `[c, h, w]` input.
pub fn exact_class_conv_net(c: usize, rng: &mut Rng) -> Network {
    let mut layers = vec![Layer::Conv2d(Conv2d::new(c, 2, 3))];
    layers.push(Layer::Skip(Network::new(vec![Layer::Relu, Layer::Skip(Network::new(vec![Layer::Sigmoid]))])));
    let len = rng.random_range(1..4);
    layers.extend(elementwise_chain(rng, len, 2));
    let mut net = Network::new(layers);
    net.init(rng);
    perturb_biases(&mut net, rng);
    net
}

pub fn positive_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.01..1.0)).collect()
}

/// Rows of the input Jacobian of `net` at `x`, from one reverse pass per output.
pub fn input_jacobian(net: &Network, x: &Tensor) -> Vec<Vec<f64>> {
    let trace = net.forward(x).unwrap();
    let out = trace.output().clone();
    (0..out.len())
        .map(|o| {
            let mut e = Tensor::zeros(out.shape());
            e.data_mut()[o] = 1.0;
            net.backward(&trace, &e).unwrap().1.into_data()
        })
        .collect()
}

/// `diag(Jᵀ diag(m) J)` with `J` given by rows.
pub fn sandwich_diag(rows: &[Vec<f64>], m: &[f64]) -> Vec<f64> {
    let cols = rows.first().map_or(0, Vec::len);
    let mut full = vec![vec![0.0; cols]; cols];
    for (row, &mo) in rows.iter().zip(m) {
        for a in 0..cols {
            for b in 0..cols {
                full[a][b] += row[a] * mo * row[b];
            }
        }
    }
    (0..cols).map(|i| full[i][i]).collect()
}
