//! Dense building blocks with hand-written backward passes.
//!
//! Everything works on row-major `T × D` matrices in f64. Biases and norm
//! gains are stored as `1 × D` matrices. Backward functions accumulate into
//! the parameter gradients they are handed and return the input gradient.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

pub const LN_EPS: f64 = 1e-5;
pub const COS_EPS: f64 = 1e-8;

pub fn linear(x: ArrayView2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    x.dot(w) + b
}

pub fn linear_backward(
    x: ArrayView2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
    dw: &mut Array2<f64>,
    db: Option<&mut Array2<f64>>,
) -> Array2<f64> {
    *dw += &x.t().dot(dy);
    if let Some(db) = db {
        *db += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    dy.dot(&w.t())
}

pub struct LnCache {
    pub xhat: Array2<f64>,
    pub rstd: Array1<f64>,
}

pub fn layer_norm(x: ArrayView2<f64>, g: &Array2<f64>, b: &Array2<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

pub fn layer_norm_backward(
    cache: &LnCache,
    g: &Array2<f64>,
    dy: &Array2<f64>,
    dg: &mut Array2<f64>,
    db: &mut Array2<f64>,
) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * g;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_dh = dh.sum() / d;
        let mean_dhx = dh.dot(&xh) / d;
        let r = cache.rstd[i];
        for j in 0..dy.ncols() {
            dx[[i, j]] = r * (dh[j] - mean_dh - xh[j] * mean_dhx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh approximation of GELU.
pub fn gelu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
}

pub fn gelu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        let th = (GELU_C * (v + GELU_A * v * v * v)).tanh();
        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
        *d *= 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
    });
    dx
}

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut p = x.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    p
}

/// Multi-head self-attention over a fused `T × 3E` projection laid out as
/// `[Q | K | V]`. Returns the `T × E` context and per-head probabilities.
pub fn attention(qkv: &Array2<f64>, heads: usize) -> (Array2<f64>, Vec<Array2<f64>>) {
    let e = qkv.ncols() / 3;
    let dh = e / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Array2::zeros((qkv.nrows(), e));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = qkv.slice(s![.., e + h * dh..e + (h + 1) * dh]);
        let v = qkv.slice(s![.., 2 * e + h * dh..2 * e + (h + 1) * dh]);
        let p = softmax_rows(&(q.dot(&k.t()) * scale));
        ctx.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&p.dot(&v));
        probs.push(p);
    }
    (ctx, probs)
}

pub fn attention_backward(qkv: &Array2<f64>, probs: &[Array2<f64>], dctx: &Array2<f64>) -> Array2<f64> {
    let heads = probs.len();
    let e = qkv.ncols() / 3;
    let dh = e / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dqkv = Array2::zeros(qkv.raw_dim());
    for (h, p) in probs.iter().enumerate() {
        let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = qkv.slice(s![.., e + h * dh..e + (h + 1) * dh]);
        let v = qkv.slice(s![.., 2 * e + h * dh..2 * e + (h + 1) * dh]);
        let dc = dctx.slice(s![.., h * dh..(h + 1) * dh]);
        let dv = p.t().dot(&dc);
        let dp = dc.dot(&v.t());
        let mut ds = dp.clone();
        for i in 0..ds.nrows() {
            let inner = dp.row(i).dot(&p.row(i));
            for j in 0..ds.ncols() {
                ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - inner) * scale;
            }
        }
        dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&ds.dot(&k));
        dqkv.slice_mut(s![.., e + h * dh..e + (h + 1) * dh])
            .assign(&ds.t().dot(&q));
        dqkv.slice_mut(s![.., 2 * e + h * dh..2 * e + (h + 1) * dh])
            .assign(&dv);
    }
    dqkv
}

/// Columns for one channel group of a "same"-padded convolution: entry
/// `(t, ci*K + j)` holds `x[t + j - K/2, c0 + ci]`, zero outside the sequence.
fn same_cols(x: &Array2<f64>, c0: usize, cin: usize, kernel: usize) -> Array2<f64> {
    let t_len = x.nrows() as isize;
    let half = (kernel / 2) as isize;
    let mut cols = Array2::zeros((x.nrows(), cin * kernel));
    for t in 0..t_len {
        for j in 0..kernel {
            let src = t + j as isize - half;
            if src < 0 || src >= t_len {
                continue;
            }
            for ci in 0..cin {
                cols[[t as usize, ci * kernel + j]] = x[[src as usize, c0 + ci]];
            }
        }
    }
    cols
}

/// Grouped convolution along time that keeps the sequence length. The weight
/// is `E × (E/G · K)`: row `o` holds the taps of output channel `o` over the
/// input channels of its group.
pub fn grouped_conv(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>, kernel: usize, groups: usize) -> Array2<f64> {
    let e = x.ncols();
    let cg = e / groups;
    let mut y = Array2::zeros((x.nrows(), e));
    for g in 0..groups {
        let cols = same_cols(x, g * cg, cg, kernel);
        let wg = w.slice(s![g * cg..(g + 1) * cg, ..]);
        y.slice_mut(s![.., g * cg..(g + 1) * cg]).assign(&cols.dot(&wg.t()));
    }
    y + b
}

pub fn grouped_conv_backward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
    kernel: usize,
    groups: usize,
    dw: &mut Array2<f64>,
    db: &mut Array2<f64>,
) -> Array2<f64> {
    let e = x.ncols();
    let cg = e / groups;
    let t_len = x.nrows() as isize;
    let half = (kernel / 2) as isize;
    *db += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let mut dx = Array2::zeros(x.raw_dim());
    for g in 0..groups {
        let cols = same_cols(x, g * cg, cg, kernel);
        let dyg = dy.slice(s![.., g * cg..(g + 1) * cg]);
        let mut dwg = dw.slice_mut(s![g * cg..(g + 1) * cg, ..]);
        dwg += &dyg.t().dot(&cols);
        let dcols = dyg.dot(&w.slice(s![g * cg..(g + 1) * cg, ..]));
        for t in 0..t_len {
            for j in 0..kernel {
                let src = t + j as isize - half;
                if src < 0 || src >= t_len {
                    continue;
                }
                for ci in 0..cg {
                    dx[[src as usize, g * cg + ci]] += dcols[[t as usize, ci * kernel + j]];
                }
            }
        }
    }
    dx
}

/// Strided valid convolution. Input `L × Cin`, weight `(K·Cin) × Cout`
/// with row `j*Cin + c` for tap `j` of input channel `c`.
pub fn conv1d(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>, kernel: usize, stride: usize) -> Array2<f64> {
    strided_cols(x, kernel, stride).dot(w) + b
}

fn strided_cols(x: &Array2<f64>, kernel: usize, stride: usize) -> Array2<f64> {
    let cin = x.ncols();
    let out = (x.nrows() - kernel) / stride + 1;
    let mut cols = Array2::zeros((out, kernel * cin));
    for t in 0..out {
        for j in 0..kernel {
            cols.slice_mut(s![t, j * cin..(j + 1) * cin])
                .assign(&x.row(t * stride + j));
        }
    }
    cols
}

pub fn conv1d_backward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
    kernel: usize,
    stride: usize,
    dw: &mut Array2<f64>,
    db: &mut Array2<f64>,
) -> Array2<f64> {
    let cin = x.ncols();
    let cols = strided_cols(x, kernel, stride);
    *dw += &cols.t().dot(dy);
    *db += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dcols = dy.dot(&w.t());
    let mut dx = Array2::zeros(x.raw_dim());
    for t in 0..dy.nrows() {
        for j in 0..kernel {
            let mut row = dx.row_mut(t * stride + j);
            row += &dcols.slice(s![t, j * cin..(j + 1) * cin]);
        }
    }
    dx
}

/// Rows scaled by `1 / (|row| + eps)`, plus the raw norms.
pub fn normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms: Array1<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut out = x.clone();
    for (mut row, &n) in out.rows_mut().into_iter().zip(norms.iter()) {
        row.mapv_inplace(|v| v / (n + COS_EPS));
    }
    (out, norms)
}

pub fn normalize_rows_backward(x: &Array2<f64>, norms: &Array1<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(x.raw_dim());
    for i in 0..x.nrows() {
        let n = norms[i];
        let ne = n + COS_EPS;
        let xr = x.row(i);
        let dr = dy.row(i);
        let mut out = dx.row_mut(i);
        if n > 0.0 {
            let proj = xr.dot(&dr) / (n * ne * ne);
            for j in 0..xr.len() {
                out[j] = dr[j] / ne - xr[j] * proj;
            }
        } else {
            out.assign(&(&dr / ne));
        }
    }
    dx
}

/// `cos(a_t, e_c) / tau` for every frame and codeword.
pub fn cosine_logits(a: &Array2<f64>, e: &Array2<f64>, tau: f64) -> Array2<f64> {
    let (an, _) = normalize_rows(a);
    let (en, _) = normalize_rows(e);
    an.dot(&en.t()) / tau
}

pub fn log_softmax_row(x: ndarray::ArrayView1<f64>) -> Array1<f64> {
    let m = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.mapv(|v| v - lse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>) -> Array2<f64> {
        let h = 1e-5;
        let mut g = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    fn probe(rows: usize, cols: usize, seed: f64) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |(i, j)| ((i * 7 + j * 3) as f64 * 0.37 + seed).sin())
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = array![[1.0, 2.0, 3.0, 4.0]];
        let g = Array2::ones((1, 4));
        let b = Array2::zeros((1, 4));
        let (y, _) = layer_norm(x.view(), &g, &b);
        assert!(y.sum().abs() < 1e-12);
        let var = y.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((var - 1.25 / (1.25 + LN_EPS)).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_gradient() {
        let x = probe(3, 5, 0.1);
        let g = probe(1, 5, 0.7);
        let b = probe(1, 5, 1.3);
        let w = probe(3, 5, 2.1);
        let f = |x: &Array2<f64>| (layer_norm(x.view(), &g, &b).0 * &w).sum();
        let (_, cache) = layer_norm(x.view(), &g, &b);
        let mut dg = Array2::zeros((1, 5));
        let mut db = Array2::zeros((1, 5));
        let dx = layer_norm_backward(&cache, &g, &w, &mut dg, &mut db);
        close(&dx, &numeric_grad(f, &x), 1e-7);
        let fg = |g: &Array2<f64>| (layer_norm(x.view(), g, &b).0 * &w).sum();
        close(&dg, &numeric_grad(fg, &g), 1e-7);
    }

    #[test]
    fn gelu_values_and_gradient() {
        let x = array![[0.0, 1.0, -1.0, 3.0]];
        let y = gelu(&x);
        assert_eq!(y[[0, 0]], 0.0);
        assert!((y[[0, 1]] - 0.841_192).abs() < 1e-5);
        assert!((y[[0, 2]] + 0.158_808).abs() < 1e-5);
        let w = array![[0.3, -1.2, 0.8, 2.0]];
        let dx = gelu_backward(&x, &w);
        close(&dx, &numeric_grad(|x| (gelu(x) * &w).sum(), &x), 1e-8);
    }

    #[test]
    fn attention_gradient() {
        let qkv = probe(4, 12, 0.2);
        let w = probe(4, 4, 1.9);
        let (_, probs) = attention(&qkv, 2);
        for p in &probs {
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
        let dq = attention_backward(&qkv, &probs, &w);
        let f = |q: &Array2<f64>| (attention(q, 2).0 * &w).sum();
        close(&dq, &numeric_grad(f, &qkv), 1e-7);
    }

    #[test]
    fn grouped_conv_matches_direct_sum_and_gradient() {
        let x = probe(5, 4, 0.4);
        let w = probe(4, 2 * 3, 0.9);
        let b = probe(1, 4, 1.1);
        let y = grouped_conv(&x, &w, &b, 3, 2);
        // output channel 3 belongs to group 1 (inputs 2, 3); tap j reads t + j - 1
        let t = 0;
        let mut direct = b[[0, 3]];
        for ci in 0..2 {
            for j in 0..3 {
                let src = t as isize + j as isize - 1;
                if (0..5).contains(&src) {
                    direct += w[[3, ci * 3 + j]] * x[[src as usize, 2 + ci]];
                }
            }
        }
        assert!((y[[t, 3]] - direct).abs() < 1e-12);

        let dy = probe(5, 4, 2.5);
        let mut dw = Array2::zeros(w.raw_dim());
        let mut db = Array2::zeros(b.raw_dim());
        let dx = grouped_conv_backward(&x, &w, &dy, 3, 2, &mut dw, &mut db);
        close(&dx, &numeric_grad(|x| (grouped_conv(x, &w, &b, 3, 2) * &dy).sum(), &x), 1e-7);
        close(&dw, &numeric_grad(|w| (grouped_conv(&x, w, &b, 3, 2) * &dy).sum(), &w), 1e-7);
    }

    #[test]
    fn even_kernel_keeps_length() {
        let x = probe(7, 2, 0.0);
        let w = probe(2, 4, 0.5);
        let b = Array2::zeros((1, 2));
        assert_eq!(grouped_conv(&x, &w, &b, 4, 2).nrows(), 7);
    }

    #[test]
    fn strided_conv_gradient() {
        let x = probe(11, 2, 0.3);
        let w = probe(3 * 2, 4, 0.6);
        let b = probe(1, 4, 0.8);
        let y = conv1d(&x, &w, &b, 3, 2);
        assert_eq!(y.dim(), (5, 4));
        let expect = b[[0, 1]]
            + (0..3)
                .flat_map(|j| (0..2).map(move |c| (j, c)))
                .map(|(j, c)| w[[j * 2 + c, 1]] * x[[2 * 2 + j, c]])
                .sum::<f64>();
        assert!((y[[2, 1]] - expect).abs() < 1e-12);
        let dy = probe(5, 4, 1.7);
        let mut dw = Array2::zeros(w.raw_dim());
        let mut db = Array2::zeros(b.raw_dim());
        let dx = conv1d_backward(&x, &w, &dy, 3, 2, &mut dw, &mut db);
        close(&dx, &numeric_grad(|x| (conv1d(x, &w, &b, 3, 2) * &dy).sum(), &x), 1e-7);
        close(&dw, &numeric_grad(|w| (conv1d(&x, w, &b, 3, 2) * &dy).sum(), &w), 1e-7);
    }

    #[test]
    fn normalization_gradient() {
        let x = probe(3, 4, 0.9);
        let dy = probe(3, 4, 0.1);
        let (_, n) = normalize_rows(&x);
        let dx = normalize_rows_backward(&x, &n, &dy);
        close(&dx, &numeric_grad(|x| (normalize_rows(x).0 * &dy).sum(), &x), 1e-7);
    }

    #[test]
    fn zero_row_normalizes_to_zero() {
        let x = Array2::zeros((1, 3));
        let (y, n) = normalize_rows(&x);
        assert_eq!(n[0], 0.0);
        assert!(y.iter().all(|&v| v == 0.0));
        let dx = normalize_rows_backward(&x, &n, &Array2::ones((1, 3)));
        assert!(dx.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn log_softmax_normalizes() {
        let x = array![1000.0, 1001.0, 999.0];
        let l = log_softmax_row(x.view());
        let total: f64 = l.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
