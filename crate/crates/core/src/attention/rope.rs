use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Rotary position embedding over channel pairs `(2i, 2i+1)` of each head.
#[derive(Debug, Clone, PartialEq)]
pub struct Rope {
    head_dim: usize,
    inv_freq: Vec<f64>,
}

impl Rope {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim % 2 != 0 || head_dim == 0 {
            return Err(Error::Config(format!(
                "rotary embeddings need an even head dimension, got {head_dim}"
            )));
        }
        let inv_freq = (0..head_dim / 2)
            .map(|i| base.powf(-((2 * i) as f64) / head_dim as f64))
            .collect();
        Ok(Self { head_dim, inv_freq })
    }

    /// Rotates every head slice of `x` (`rows × n_heads·head_dim`) in place by
    /// its row's position. `inverse` applies the transpose rotation, which is
    /// the backward pass of the forward rotation.
    pub fn apply(&self, x: &mut Mat, positions: &[usize], inverse: bool) {
        assert_eq!(x.rows, positions.len());
        assert_eq!(x.cols % self.head_dim, 0);
        let sign = if inverse { -1.0 } else { 1.0 };
        let n_heads = x.cols / self.head_dim;
        for (r, &pos) in positions.iter().enumerate() {
            let row = x.row_mut(r);
            for (i, &f) in self.inv_freq.iter().enumerate() {
                let (s, c) = (sign * pos as f64 * f).sin_cos();
                for h in 0..n_heads {
                    let a = h * self.head_dim + 2 * i;
                    let (x0, x1) = (row[a], row[a + 1]);
                    row[a] = x0 * c - x1 * s;
                    row[a + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
}

/// Free-function form: rotated copy of `x`.
pub fn rope_rotate(x: &Mat, position_ids: &[usize], head_dim: usize, base: f64) -> Result<Mat> {
    let rope = Rope::new(head_dim, base)?;
    let mut out = x.clone();
    rope.apply(&mut out, position_ids, false);
    Ok(out)
}
