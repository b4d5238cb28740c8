//! Row-major dense matrices and the handful of kernels the network needs.
//!
//! Everything in the model runs at `f64`. Products go through
//! `matrixmultiply::dgemm`; transposes are expressed with strides rather
//! than copies.

use serde::{Deserialize, Serialize};

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// The last `n` rows (the query-pruning selection).
    pub fn tail_rows(&self, n: usize) -> Mat {
        assert!(n <= self.rows);
        let start = (self.rows - n) * self.cols;
        Mat::from_vec(n, self.cols, self.data[start..].to_vec())
    }

    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut out = Mat::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    /// Columns `[start, start + width)` as a new matrix.
    pub fn col_slice(&self, start: usize, width: usize) -> Mat {
        let mut out = Mat::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut().take(m * n) {
            *v *= beta;
        }
        return;
    }
    // SAFETY: callers pass slices whose lengths cover the strided extents
    // checked by the asserts in the public wrappers below.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a · b`
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut c = Mat::zeros(a.rows, b.cols);
    matmul_acc(a, b, &mut c, 0.0);
    c
}

/// `c = a · b + beta · c`
pub fn matmul_acc(a: &Mat, b: &Mat, c: &mut Mat, beta: f64) {
    assert_eq!(a.cols, b.rows, "matmul inner dim");
    assert_eq!((c.rows, c.cols), (a.rows, b.cols), "matmul output");
    gemm(
        a.rows,
        a.cols,
        b.cols,
        1.0,
        &a.data,
        a.cols as isize,
        1,
        &b.data,
        b.cols as isize,
        1,
        beta,
        &mut c.data,
    );
}

/// `aᵀ · b`
pub fn matmul_tn(a: &Mat, b: &Mat) -> Mat {
    let mut c = Mat::zeros(a.cols, b.cols);
    matmul_tn_acc(a, b, &mut c, 0.0);
    c
}

/// `c = aᵀ · b + beta · c`
pub fn matmul_tn_acc(a: &Mat, b: &Mat, c: &mut Mat, beta: f64) {
    assert_eq!(a.rows, b.rows, "matmul_tn inner dim");
    assert_eq!((c.rows, c.cols), (a.cols, b.cols), "matmul_tn output");
    gemm(
        a.cols,
        a.rows,
        b.cols,
        1.0,
        &a.data,
        1,
        a.cols as isize,
        &b.data,
        b.cols as isize,
        1,
        beta,
        &mut c.data,
    );
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
    let mut c = Mat::zeros(a.rows, b.rows);
    matmul_nt_acc(a, b, &mut c, 0.0);
    c
}

/// `c = a · bᵀ + beta · c`
pub fn matmul_nt_acc(a: &Mat, b: &Mat, c: &mut Mat, beta: f64) {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dim");
    assert_eq!((c.rows, c.cols), (a.rows, b.rows), "matmul_nt output");
    gemm(
        a.rows,
        a.cols,
        b.rows,
        1.0,
        &a.data,
        a.cols as isize,
        1,
        &b.data,
        1,
        b.cols as isize,
        beta,
        &mut c.data,
    );
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

/// d/dx of `x · σ(x)`
#[inline]
pub fn swish_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cached per-row reciprocal RMS so the backward pass does not recompute it.
#[derive(Debug, Clone)]
pub struct RmsCache {
    pub inv_rms: Vec<f64>,
}

/// Row-wise RMS normalization with a learned gain, `y = x / rms(x) ⊙ g`.
/// A zero row maps to zero thanks to the ε guard.
pub fn rms_norm(x: &Mat, gain: &[f64]) -> (Mat, RmsCache) {
    assert_eq!(gain.len(), x.cols);
    let mut y = Mat::zeros(x.rows, x.cols);
    let mut inv_rms = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / x.cols as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        inv_rms.push(inv);
        for ((o, &v), &g) in y.row_mut(r).iter_mut().zip(row).zip(gain) {
            *o = v * inv * g;
        }
    }
    (y, RmsCache { inv_rms })
}

/// Backward of [`rms_norm`]. Adds into `d_gain` when given and returns `dx`.
pub fn rms_norm_backward(
    x: &Mat,
    gain: &[f64],
    cache: &RmsCache,
    dy: &Mat,
    d_gain: Option<&mut [f64]>,
) -> Mat {
    let n = x.cols as f64;
    let mut dx = Mat::zeros(x.rows, x.cols);
    let mut d_gain = d_gain;
    for r in 0..x.rows {
        let inv = cache.inv_rms[r];
        let xr = x.row(r);
        let dyr = dy.row(r);
        if let Some(dg) = d_gain.as_deref_mut() {
            for c in 0..x.cols {
                dg[c] += dyr[c] * xr[c] * inv;
            }
        }
        // dxhat = dy ⊙ g ; dx = inv · (dxhat − xhat · mean(dxhat ⊙ xhat))
        let mut proj = 0.0;
        for c in 0..x.cols {
            proj += dyr[c] * gain[c] * xr[c] * inv;
        }
        proj /= n;
        let dxr = dx.row_mut(r);
        for c in 0..x.cols {
            dxr[c] = inv * (dyr[c] * gain[c] - xr[c] * inv * proj);
        }
    }
    dx
}
