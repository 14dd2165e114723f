//! Raw loops for the parametric layers.
//!
//! Convolutions are stride 1 with zero "same" padding and an odd square
//! kernel. Weight layout is `[out, in, k, k]`, activations are `[C, H, W]`.

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Copies `[C, H, W]` into a zero-bordered `[C, H + 2p, W + 2p]` buffer.
fn pad_planes(x: &[f64], c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let wp = w + 2 * p;
    let plane = (h + 2 * p) * wp;
    let mut out = vec![0.0; c * plane];
    for ch in 0..c {
        for i in 0..h {
            let dst = ch * plane + (i + p) * wp + p;
            out[dst..dst + w].copy_from_slice(&x[(ch * h + i) * w..(ch * h + i + 1) * w]);
        }
    }
    out
}

/// `[C, H, W]` laid out with row stride `stride >= W`, zeros in the extra columns.
fn widen_rows(x: &[f64], c: usize, h: usize, w: usize, stride: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * stride];
    for (src, dst) in x.chunks_exact(w).zip(out.chunks_exact_mut(stride)) {
        dst[..w].copy_from_slice(src);
    }
    out
}

// Working layout: outputs keep row stride `w + 2p`, so every tap is one
// contiguous run over the padded input and the wrapped columns land in padding.

pub(crate) fn conv_forward(g: ConvGeom, weight: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    let p = g.k / 2;
    let wp = g.w + 2 * p;
    let plane = (g.h + 2 * p) * wp;
    let run = (g.h - 1) * wp + g.w;
    let xp = pad_planes(x, g.cin, g.h, g.w, p);
    let mut y = vec![0.0; g.cout * g.hw()];
    let mut acc = vec![0.0; run];
    for o in 0..g.cout {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..g.cin {
            let xc = &xp[c * plane..(c + 1) * plane];
            for u in 0..g.k {
                for v in 0..g.k {
                    let wt = weight[((o * g.cin + c) * g.k + u) * g.k + v];
                    let off = u * wp + v;
                    for (d, s) in acc.iter_mut().zip(&xc[off..off + run]) {
                        *d += wt * s;
                    }
                }
            }
        }
        for i in 0..g.h {
            let dst = &mut y[(o * g.h + i) * g.w..(o * g.h + i + 1) * g.w];
            for (d, s) in dst.iter_mut().zip(&acc[i * wp..i * wp + g.w]) {
                *d = bias[o] + s;
            }
        }
    }
    y
}

/// Transposed pass: returns `(d_weight, d_bias, d_input)`.
///
/// The curvature recursion reuses this with squared weights, squared inputs and
/// the diagonal message in place of `grad`, since every conv Jacobian entry is a
/// single weight or a single input value.
pub(crate) fn conv_backward(
    g: ConvGeom,
    weight: &[f64],
    x: &[f64],
    grad: &[f64],
    want_params: bool,
    want_input: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hw = g.hw();
    let p = g.k / 2;
    let wp = g.w + 2 * p;
    let plane = (g.h + 2 * p) * wp;
    let run = (g.h - 1) * wp + g.w;
    let gs = widen_rows(grad, g.cout, g.h, g.w, wp);
    let xp = if want_params { pad_planes(x, g.cin, g.h, g.w, p) } else { Vec::new() };
    let mut dxp = if want_input { vec![0.0; g.cin * plane] } else { Vec::new() };
    let mut dw = if want_params { vec![0.0; weight.len()] } else { Vec::new() };
    let mut db = if want_params { vec![0.0; g.cout] } else { Vec::new() };
    for o in 0..g.cout {
        if want_params {
            db[o] = grad[o * hw..(o + 1) * hw].iter().sum();
        }
        let go = &gs[o * g.h * wp..o * g.h * wp + run];
        for c in 0..g.cin {
            for u in 0..g.k {
                for v in 0..g.k {
                    let widx = ((o * g.cin + c) * g.k + u) * g.k + v;
                    let off = c * plane + u * wp + v;
                    if want_params {
                        dw[widx] = go.iter().zip(&xp[off..off + run]).map(|(a, b)| a * b).sum::<f64>();
                    }
                    if want_input {
                        let wt = weight[widx];
                        for (d, s) in dxp[off..off + run].iter_mut().zip(go) {
                            *d += wt * s;
                        }
                    }
                }
            }
        }
    }
    let mut dx = Vec::new();
    if want_input {
        dx = vec![0.0; g.cin * hw];
        for c in 0..g.cin {
            for i in 0..g.h {
                let src = c * plane + (i + p) * wp + p;
                dx[(c * g.h + i) * g.w..(c * g.h + i + 1) * g.w].copy_from_slice(&dxp[src..src + g.w]);
            }
        }
    }
    (dw, db, dx)
}

pub(crate) fn dense_forward(in_dim: usize, out_dim: usize, weight: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    (0..out_dim)
        .map(|j| {
            let row = &weight[j * in_dim..(j + 1) * in_dim];
            bias[j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

pub(crate) fn dense_backward(
    in_dim: usize,
    out_dim: usize,
    weight: &[f64],
    x: &[f64],
    grad: &[f64],
    want_params: bool,
    want_input: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dw = Vec::new();
    let mut db = Vec::new();
    if want_params {
        dw = vec![0.0; in_dim * out_dim];
        for j in 0..out_dim {
            for k in 0..in_dim {
                dw[j * in_dim + k] = grad[j] * x[k];
            }
        }
        db = grad.to_vec();
    }
    let mut dx = Vec::new();
    if want_input {
        dx = vec![0.0; in_dim];
        for j in 0..out_dim {
            let row = &weight[j * in_dim..(j + 1) * in_dim];
            for (d, w) in dx.iter_mut().zip(row) {
                *d += w * grad[j];
            }
        }
    }
    (dw, db, dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Direct quadruple loop with explicit bounds checks.
    fn naive_conv(g: ConvGeom, w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
        let pad = (g.k / 2) as isize;
        let mut y = vec![0.0; g.cout * g.h * g.w];
        for o in 0..g.cout {
            for i in 0..g.h {
                for j in 0..g.w {
                    let mut acc = b[o];
                    for c in 0..g.cin {
                        for u in 0..g.k {
                            for v in 0..g.k {
                                let p = i as isize + u as isize - pad;
                                let q = j as isize + v as isize - pad;
                                if p < 0 || q < 0 || p >= g.h as isize || q >= g.w as isize {
                                    continue;
                                }
                                acc += w[((o * g.cin + c) * g.k + u) * g.k + v]
                                    * x[(c * g.h + p as usize) * g.w + q as usize];
                            }
                        }
                    }
                    y[(o * g.h + i) * g.w + j] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_loop() {
        let g = ConvGeom { cin: 2, cout: 3, k: 3, h: 5, w: 4 };
        let w: Vec<f64> = (0..54).map(|i| ((i * 7 % 11) as f64 - 5.0) / 7.0).collect();
        let b = vec![0.1, -0.2, 0.3];
        let x: Vec<f64> = (0..40).map(|i| ((i * 5 % 13) as f64 - 6.0) / 9.0).collect();
        let fast = conv_forward(g, &w, &b, &x);
        let slow = naive_conv(g, &w, &b, &x);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        let g = ConvGeom { cin: 2, cout: 2, k: 3, h: 4, w: 6 };
        let w: Vec<f64> = (0..36).map(|i| ((i * 3 % 7) as f64 - 3.0) / 5.0).collect();
        let zero_b = vec![0.0; 2];
        let x: Vec<f64> = (0..48).map(|i| ((i * 5 % 13) as f64 - 6.0) / 9.0).collect();
        let r: Vec<f64> = (0..48).map(|i| ((i * 11 % 17) as f64 - 8.0) / 4.0).collect();
        // <r, conv(x)> == <conv^T r, x>
        let y = conv_forward(g, &w, &zero_b, &x);
        let lhs: f64 = y.iter().zip(&r).map(|(a, b)| a * b).sum();
        let (_, _, dx) = conv_backward(g, &w, &x, &r, false, true);
        let rhs: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }
}
