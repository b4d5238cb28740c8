//! Masked scaled-dot-product attention, dense and block-wise.
//!
//! The block-wise kernel walks `B × B` tiles of the score matrix, skips tiles
//! the mask hides entirely, and folds the remaining tiles into a running
//! (max, denominator, accumulator) triple per query row, so the result matches
//! the dense computation up to rounding.

use num_traits::Float;

use super::mask::Mask;

/// Row-major matrix over `f32` or `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Float> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BlockStats {
    pub total_blocks: usize,
    pub skipped_blocks: usize,
}

impl BlockStats {
    pub fn skipped_fraction(&self) -> f64 {
        if self.total_blocks == 0 {
            0.0
        } else {
            self.skipped_blocks as f64 / self.total_blocks as f64
        }
    }
}

fn check_shapes<T>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>, mask: &Mask) {
    assert_eq!(q.cols, k.cols, "q/k head dim");
    assert_eq!(k.rows, v.rows, "k/v length");
    assert_eq!((mask.rows, mask.cols), (q.rows, k.rows), "mask shape");
}

#[inline]
fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (x, y)| s + *x * *y)
}

/// Materializes the full score matrix, applies the mask and a row softmax.
/// Rows without visible keys produce zeros.
pub fn dense_masked_attention<T: Float>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    mask: &Mask,
    scale: T,
) -> Matrix<T> {
    check_shapes(q, k, v, mask);
    let mut out = Matrix::zeros(q.rows, v.cols);
    let mut scores = vec![T::neg_infinity(); k.rows];
    for i in 0..q.rows {
        let mut m = T::neg_infinity();
        for j in 0..k.rows {
            scores[j] = if mask.visible(i, j) {
                let s = dot(q.row(i), k.row(j)) * scale;
                m = m.max(s);
                s
            } else {
                T::neg_infinity()
            };
        }
        if m == T::neg_infinity() {
            continue;
        }
        let mut denom = T::zero();
        for s in scores.iter_mut() {
            *s = if *s == T::neg_infinity() {
                T::zero()
            } else {
                (*s - m).exp()
            };
            denom = denom + *s;
        }
        let orow = &mut out.data[i * v.cols..(i + 1) * v.cols];
        for (j, &p) in scores.iter().enumerate() {
            if p == T::zero() {
                continue;
            }
            let w = p / denom;
            for (o, &x) in orow.iter_mut().zip(v.row(j)) {
                *o = *o + w * x;
            }
        }
    }
    out
}

/// Tile-skipping streaming-softmax attention. Returns the output and how
/// many `block × block` tiles were skipped because the mask hides them.
pub fn blockwise_masked_attention<T: Float>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    mask: &Mask,
    scale: T,
    block: usize,
) -> (Matrix<T>, BlockStats) {
    assert!(block >= 1, "block size must be >= 1");
    check_shapes(q, k, v, mask);
    let (lq, lk, dv) = (q.rows, k.rows, v.cols);
    let mut out = Matrix::zeros(lq, dv);
    let mut stats = BlockStats::default();
    let mut run_max = vec![T::neg_infinity(); block];
    let mut run_den = vec![T::zero(); block];
    let mut acc = vec![T::zero(); block * dv];
    let mut tile = vec![T::neg_infinity(); block * block];

    for q0 in (0..lq).step_by(block) {
        let q1 = (q0 + block).min(lq);
        let nq = q1 - q0;
        run_max[..nq].fill(T::neg_infinity());
        run_den[..nq].fill(T::zero());
        acc[..nq * dv].fill(T::zero());

        for k0 in (0..lk).step_by(block) {
            let k1 = (k0 + block).min(lk);
            stats.total_blocks += 1;
            if !mask.tile_visible(q0, q1, k0, k1) {
                stats.skipped_blocks += 1;
                continue;
            }
            let nk = k1 - k0;
            for a in 0..nq {
                let i = q0 + a;
                let mut tile_max = T::neg_infinity();
                for b in 0..nk {
                    let j = k0 + b;
                    let s = if mask.visible(i, j) {
                        dot(q.row(i), k.row(j)) * scale
                    } else {
                        T::neg_infinity()
                    };
                    tile[a * block + b] = s;
                    tile_max = tile_max.max(s);
                }
                if tile_max == T::neg_infinity() {
                    continue;
                }
                let new_max = run_max[a].max(tile_max);
                let correction = if run_max[a] == T::neg_infinity() {
                    T::zero()
                } else {
                    (run_max[a] - new_max).exp()
                };
                let arow = &mut acc[a * dv..(a + 1) * dv];
                for x in arow.iter_mut() {
                    *x = *x * correction;
                }
                let mut den = run_den[a] * correction;
                for b in 0..nk {
                    let s = tile[a * block + b];
                    if s == T::neg_infinity() {
                        continue;
                    }
                    let p = (s - new_max).exp();
                    den = den + p;
                    for (x, &vv) in arow.iter_mut().zip(v.row(k0 + b)) {
                        *x = *x + p * vv;
                    }
                }
                run_den[a] = den;
                run_max[a] = new_max;
            }
        }
        for a in 0..nq {
            if run_den[a] == T::zero() {
                continue;
            }
            let inv = T::one() / run_den[a];
            let orow = &mut out.data[(q0 + a) * dv..(q0 + a + 1) * dv];
            for (o, &x) in orow.iter_mut().zip(&acc[a * dv..(a + 1) * dv]) {
                *o = x * inv;
            }
        }
    }
    (out, stats)
}
