//! Structured attention masks: causal base, sliding local window for most of
//! the prefix, full causal attention for candidates and the last few prefix
//! tokens, a diagonal candidate block, and a rectangular offset when queries
//! have been pruned.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::Role;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub l_q: usize,
    pub l_kv: usize,
    /// Local window `W`; `None` is unbounded causal attention.
    pub window: Option<usize>,
    /// Prefix tokens nearest the candidates that keep full causal attention.
    pub full_attention_suffix: usize,
}

impl MaskSpec {
    pub fn causal(l: usize) -> Self {
        Self {
            l_q: l,
            l_kv: l,
            window: None,
            full_attention_suffix: 0,
        }
    }

    /// Query row `r` corresponds to key index `prune_offset + r`.
    pub fn prune_offset(&self) -> usize {
        self.l_kv - self.l_q
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_q > self.l_kv {
            return Err(Error::Config(format!(
                "mask has more queries ({}) than keys ({})",
                self.l_q, self.l_kv
            )));
        }
        if self.window == Some(0) {
            return Err(Error::Config("local window must be >= 1".into()));
        }
        Ok(())
    }
}

/// Boolean visibility matrix, `true` = key visible to query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    bits: Vec<bool>,
    /// Per row: (first, last) visible column.
    spans: Vec<(usize, usize)>,
}

impl Mask {
    /// Builds from raw bits. Fails if any row has no visible key.
    pub fn from_bits(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        assert_eq!(bits.len(), rows * cols);
        let mut spans = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &bits[r * cols..(r + 1) * cols];
            let first = row.iter().position(|&b| b).ok_or(Error::EmptyMaskRow { row: r })?;
            let last = row.iter().rposition(|&b| b).unwrap();
            spans.push((first, last));
        }
        Ok(Self {
            rows,
            cols,
            bits,
            spans,
        })
    }

    #[inline]
    pub fn visible(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.bits[r * self.cols..(r + 1) * self.cols]
    }

    pub fn visible_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Whether any entry in rows `[r0, r1)` × cols `[c0, c1)` is visible.
    pub fn tile_visible(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> bool {
        (r0..r1).any(|r| {
            let (first, last) = self.spans[r];
            if last < c0 || first >= c1 {
                return false;
            }
            self.row(r)[c0.max(first)..c1.min(last + 1)].iter().any(|&b| b)
        })
    }

    /// `{0, −∞}` additive form.
    pub fn render(&self) -> Vec<f64> {
        self.bits
            .iter()
            .map(|&b| if b { 0.0 } else { f64::NEG_INFINITY })
            .collect()
    }
}

/// Renders a [`MaskSpec`] against the key sequence's roles and original
/// position ids.
///
/// For query row `r` (key index `i = prune_offset + r`, position `p`):
/// * candidate keys are visible only to themselves;
/// * a candidate query sees every non-candidate key;
/// * a prefix query sees prefix keys `j ≤ i`; if a window `W` is set and `p`
///   lies before the last `F` prefix positions, only keys with
///   `p − pos(j) < W`.
pub fn build_mask(spec: &MaskSpec, roles: &[Role], position_ids: &[usize]) -> Result<Mask> {
    spec.validate()?;
    let off = spec.prune_offset();
    let queries: Vec<usize> = (off..spec.l_kv).collect();
    build_mask_for_queries(spec, roles, position_ids, &queries)
}

/// Like [`build_mask`] but with an explicit list of key indices acting as
/// queries (used when pruning retains special tokens in addition to the
/// suffix). `spec.l_q` is ignored in favour of `queries.len()`.
pub fn build_mask_for_queries(
    spec: &MaskSpec,
    roles: &[Role],
    position_ids: &[usize],
    queries: &[usize],
) -> Result<Mask> {
    if spec.window == Some(0) {
        return Err(Error::Config("local window must be >= 1".into()));
    }
    if roles.len() != spec.l_kv || position_ids.len() != spec.l_kv {
        return Err(Error::Shape(format!(
            "mask over {} keys given {} roles and {} positions",
            spec.l_kv,
            roles.len(),
            position_ids.len()
        )));
    }
    if queries.iter().any(|&q| q >= spec.l_kv) {
        return Err(Error::Shape("query index beyond key sequence".into()));
    }
    // Original prefix length = the shared candidate position, or one past
    // the last position when there are no candidates.
    let prefix_end = roles
        .iter()
        .position(|r| *r == Role::Cand)
        .map(|i| position_ids[i])
        .unwrap_or_else(|| position_ids.last().map_or(0, |p| p + 1));
    let local_limit = prefix_end.saturating_sub(spec.full_attention_suffix);

    let l_kv = spec.l_kv;
    let mut bits = vec![false; queries.len() * l_kv];
    for (r, &qi) in queries.iter().enumerate() {
        let row = &mut bits[r * l_kv..(r + 1) * l_kv];
        if roles[qi] == Role::Cand {
            for (j, b) in row.iter_mut().enumerate() {
                *b = roles[j] != Role::Cand || j == qi;
            }
            continue;
        }
        let p = position_ids[qi];
        let window = spec.window.filter(|_| p < local_limit);
        for (j, b) in row.iter_mut().enumerate().take(qi + 1) {
            if roles[j] == Role::Cand {
                continue;
            }
            *b = window.is_none_or(|w| p - position_ids[j] < w);
        }
    }
    Mask::from_bits(queries.len(), l_kv, bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prefix_roles(n: usize) -> (Vec<Role>, Vec<usize>) {
        (vec![Role::Hist; n], (0..n).collect())
    }

    #[test]
    fn reduces_to_causal() {
        let (roles, pos) = prefix_roles(6);
        let m = build_mask(&MaskSpec::causal(6), &roles, &pos).unwrap();
        for r in 0..6 {
            for c in 0..6 {
                assert_eq!(m.visible(r, c), c <= r);
            }
        }
    }

    #[test]
    fn candidate_diagonal_by_hand() {
        // 3 prefix tokens, 2 candidates sharing position 3
        let roles = vec![Role::Hist, Role::Hist, Role::Hist, Role::Cand, Role::Cand];
        let pos = vec![0, 1, 2, 3, 3];
        let m = build_mask(&MaskSpec::causal(5), &roles, &pos).unwrap();
        let expected = [
            [1, 0, 0, 0, 0],
            [1, 1, 0, 0, 0],
            [1, 1, 1, 0, 0],
            [1, 1, 1, 1, 0],
            [1, 1, 1, 0, 1],
        ];
        for r in 0..5 {
            for c in 0..5 {
                assert_eq!(m.visible(r, c), expected[r][c] == 1, "({r},{c})");
            }
        }
        assert_eq!(m.row(3).iter().filter(|&&b| b).count(), 4);
        assert_eq!(m.row(4).iter().filter(|&&b| b).count(), 4);
    }

    #[test]
    fn local_window_and_full_suffix() {
        // 10 prefix tokens + 1 candidate; W = 3, F = 2
        let mut roles = vec![Role::Hist; 10];
        roles.push(Role::Cand);
        let mut pos: Vec<usize> = (0..10).collect();
        pos.push(10);
        let spec = MaskSpec {
            l_q: 11,
            l_kv: 11,
            window: Some(3),
            full_attention_suffix: 2,
        };
        let m = build_mask(&spec, &roles, &pos).unwrap();
        // position 5 is local: keys 3, 4, 5
        assert_eq!(
            m.row(5).iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j).collect::<Vec<_>>(),
            vec![3, 4, 5]
        );
        // position 8 is within the last F=2 prefix positions → full causal
        assert_eq!(m.row(8).iter().filter(|&&b| b).count(), 9);
        // candidate sees whole prefix + itself
        assert_eq!(m.row(10).iter().filter(|&&b| b).count(), 11);
    }

    #[test]
    fn pruned_rectangle_uses_original_rows() {
        let mut roles = vec![Role::Hist; 6];
        roles.extend([Role::Cand, Role::Cand]);
        let mut pos: Vec<usize> = (0..6).collect();
        pos.extend([6, 6]);
        let spec = MaskSpec {
            l_q: 4,
            l_kv: 8,
            window: None,
            full_attention_suffix: 0,
        };
        let m = build_mask(&spec, &roles, &pos).unwrap();
        assert_eq!((m.rows, m.cols), (4, 8));
        // row 0 ↔ key 4
        assert_eq!(m.row(0), &[true, true, true, true, true, false, false, false]);
        assert_eq!(m.row(3), &[true, true, true, true, true, true, false, true]);
    }

    #[test]
    fn empty_row_rejected() {
        let bits = vec![true, false, false, false];
        assert!(matches!(Mask::from_bits(2, 2, bits), Err(Error::EmptyMaskRow { row: 1 })));
    }

    #[test]
    fn zero_window_rejected() {
        let (roles, pos) = prefix_roles(3);
        let spec = MaskSpec {
            window: Some(0),
            ..MaskSpec::causal(3)
        };
        assert!(build_mask(&spec, &roles, &pos).is_err());
    }

    #[test]
    fn tile_visibility() {
        let (roles, pos) = prefix_roles(8);
        let m = build_mask(&MaskSpec::causal(8), &roles, &pos).unwrap();
        assert!(!m.tile_visible(0, 4, 4, 8));
        assert!(m.tile_visible(4, 8, 0, 4));
        assert!(m.tile_visible(4, 8, 4, 8));
    }
}
