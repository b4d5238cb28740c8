//! One multi-head attention layer with query pruning, QKNorm, rotary
//! positions, the structured mask and an output gate:
//!
//! ```text
//! Q_i = RMSNorm(P(X, L_out) W^Q_i)     K_i = RMSNorm(X W^K_i)     V_i = X W^V_i
//! G_i = σ(P(X, L_out) W^G_i)
//! Head_i = G_i ⊙ softmax((rope(Q_i) rope(K_i)ᵀ + M) / √d_k) V_i
//! out = [Head_1; …; Head_h] W^O
//! ```
//!
//! `X` here is the already pre-normalized layer input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mask::Mask;
use super::rope::Rope;
use crate::error::{Error, Result};
use crate::tokenizer::Role;
use crate::params::{accumulate, Grads, ParamId, ParamStore};
use crate::tensor::{matmul, matmul_nt, matmul_tn, sigmoid, Mat, RMS_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayerParams {
    pub n_heads: usize,
    pub head_dim: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub wg: Option<ParamId>,
    /// Per-head QKNorm gains laid out as `1 × (n_heads · head_dim)`.
    pub q_gain: Option<ParamId>,
    pub k_gain: Option<ParamId>,
}

impl AttentionLayerParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        gate: bool,
        qknorm: bool,
        std: f64,
        out_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let hd = d_model;
        Self {
            n_heads,
            head_dim: d_model / n_heads,
            wq: store.normal(format!("{prefix}.wq"), d_model, hd, std, rng),
            wk: store.normal(format!("{prefix}.wk"), d_model, hd, std, rng),
            wv: store.normal(format!("{prefix}.wv"), d_model, hd, std, rng),
            wo: store.normal(format!("{prefix}.wo"), hd, d_model, out_std, rng),
            wg: gate.then(|| store.normal(format!("{prefix}.wg"), d_model, hd, std, rng)),
            q_gain: qknorm.then(|| store.ones(format!("{prefix}.q_gain"), hd)),
            k_gain: qknorm.then(|| store.ones(format!("{prefix}.k_gain"), hd)),
        }
    }

    pub fn width(&self) -> usize {
        self.n_heads * self.head_dim
    }
}

/// The last `n` rows of `x` (query pruning).
pub fn prune_queries(x: &Mat, n: usize) -> Result<Mat> {
    if n == 0 || n > x.rows {
        return Err(Error::Shape(format!(
            "cannot keep {n} of {} rows",
            x.rows
        )));
    }
    Ok(x.tail_rows(n))
}

/// Rows of the current sequence that act as queries when `keep` non-candidate
/// rows survive: the last `keep + N` rows, plus (with `keep_specials`) any
/// BOS/SEP rows that the suffix rule would drop.
pub fn plan_query_rows(roles: &[Role], keep: usize, keep_specials: bool) -> Vec<usize> {
    let n_cand = roles.iter().filter(|r| **r == Role::Cand).count();
    let n_prefix = roles.len() - n_cand;
    let start = n_prefix - keep.min(n_prefix);
    let mut rows: Vec<usize> = if keep_specials {
        (0..start)
            .filter(|&i| matches!(roles[i], Role::Bos | Role::Sep))
            .collect()
    } else {
        Vec::new()
    };
    rows.extend(start..roles.len());
    rows
}

/// Per-layer count of non-candidate rows that survive as queries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub keep: Vec<usize>,
}

impl PruneSchedule {
    /// No pruning: every layer keeps the full prefix.
    pub fn full(prefix_len: usize, depth: usize) -> Self {
        Self {
            keep: vec![prefix_len; depth],
        }
    }

    /// Geometric interpolation from the full prefix at the first layer down
    /// to `min(final_keep, prefix_len)` at the last.
    pub fn geometric(prefix_len: usize, depth: usize, final_keep: usize) -> Self {
        let last = final_keep.min(prefix_len);
        if depth == 0 {
            return Self { keep: Vec::new() };
        }
        if depth == 1 || prefix_len == 0 {
            return Self { keep: vec![last; depth] };
        }
        let ratio = last as f64 / prefix_len as f64;
        let mut keep = Vec::with_capacity(depth);
        let mut prev = prefix_len;
        for l in 0..depth {
            let t = l as f64 / (depth - 1) as f64;
            let k = ((prefix_len as f64) * ratio.powf(t)).round() as usize;
            let k = k.clamp(last, prev);
            keep.push(k);
            prev = k;
        }
        *keep.last_mut().unwrap() = last;
        Self { keep }
    }

    pub fn validate(&self) -> Result<()> {
        if self.keep.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Config("prune schedule must be non-increasing".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    input: Mat,
    query_rows: Vec<usize>,
    q_in: Mat,
    q_proj: Mat,
    q_inv_rms: Vec<f64>,
    q_rot: Mat,
    k_proj: Mat,
    k_inv_rms: Vec<f64>,
    k_rot: Mat,
    v: Mat,
    /// Row-softmax probabilities per head, `L_out × L_in`.
    pub probs: Vec<Mat>,
    /// Scaled pre-mask logits per head, `L_out × L_in`.
    pub logits: Vec<Mat>,
    attn: Mat,
    gate: Option<Mat>,
    merged: Mat,
}

fn head_rms_norm(x: &Mat, gain: &[f64], n_heads: usize) -> (Mat, Vec<f64>) {
    let hd = x.cols / n_heads;
    let mut y = Mat::zeros(x.rows, x.cols);
    let mut inv = Vec::with_capacity(x.rows * n_heads);
    for r in 0..x.rows {
        let xr = x.row(r);
        let yr = y.row_mut(r);
        for h in 0..n_heads {
            let s = &xr[h * hd..(h + 1) * hd];
            let ms = s.iter().map(|v| v * v).sum::<f64>() / hd as f64;
            let iv = 1.0 / (ms + RMS_EPS).sqrt();
            inv.push(iv);
            for c in 0..hd {
                yr[h * hd + c] = s[c] * iv * gain[h * hd + c];
            }
        }
    }
    (y, inv)
}

fn head_rms_norm_backward(
    x: &Mat,
    gain: &[f64],
    inv: &[f64],
    n_heads: usize,
    dy: &Mat,
    mut d_gain: Option<&mut [f64]>,
) -> Mat {
    let hd = x.cols / n_heads;
    let mut dx = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let xr = x.row(r);
        let dyr = dy.row(r);
        let dxr = dx.row_mut(r);
        for h in 0..n_heads {
            let iv = inv[r * n_heads + h];
            let base = h * hd;
            if let Some(dg) = d_gain.as_deref_mut() {
                for c in 0..hd {
                    dg[base + c] += dyr[base + c] * xr[base + c] * iv;
                }
            }
            let mut proj = 0.0;
            for c in 0..hd {
                proj += dyr[base + c] * gain[base + c] * xr[base + c] * iv;
            }
            proj /= hd as f64;
            for c in 0..hd {
                dxr[base + c] = iv * (dyr[base + c] * gain[base + c] - xr[base + c] * iv * proj);
            }
        }
    }
    dx
}

/// Everything positional a layer needs about its key sequence.
pub struct LayerInputs<'a> {
    pub positions: &'a [usize],
    /// Key indices acting as queries, in order (normally the suffix).
    pub query_rows: &'a [usize],
    pub mask: &'a Mask,
}

pub fn attention_layer_forward(
    store: &ParamStore,
    p: &AttentionLayerParams,
    rope: &Rope,
    x: &Mat,
    inputs: &LayerInputs<'_>,
    layer_idx: usize,
) -> Result<(Mat, AttentionCache)> {
    let (h, hd) = (p.n_heads, p.head_dim);
    let l_in = x.rows;
    let l_out = inputs.query_rows.len();
    if inputs.positions.len() != l_in || inputs.mask.rows != l_out || inputs.mask.cols != l_in {
        return Err(Error::Shape(format!(
            "layer {layer_idx}: input {l_in} rows, {l_out} queries, mask {}×{}",
            inputs.mask.rows, inputs.mask.cols
        )));
    }
    let q_in = x.select_rows(inputs.query_rows);
    let q_pos: Vec<usize> = inputs.query_rows.iter().map(|&r| inputs.positions[r]).collect();

    let q_proj = matmul(&q_in, store.get(p.wq));
    let k_proj = matmul(x, store.get(p.wk));
    let v = matmul(x, store.get(p.wv));

    let (mut q_rot, q_inv_rms) = match p.q_gain {
        Some(g) => head_rms_norm(&q_proj, &store.get(g).data, h),
        None => (q_proj.clone(), Vec::new()),
    };
    let (mut k_rot, k_inv_rms) = match p.k_gain {
        Some(g) => head_rms_norm(&k_proj, &store.get(g).data, h),
        None => (k_proj.clone(), Vec::new()),
    };
    rope.apply(&mut q_rot, &q_pos, false);
    rope.apply(&mut k_rot, inputs.positions, false);

    let scale = 1.0 / (hd as f64).sqrt();
    let mut attn = Mat::zeros(l_out, h * hd);
    let mut probs = Vec::with_capacity(h);
    let mut logits = Vec::with_capacity(h);
    for head in 0..h {
        let qh = q_rot.col_slice(head * hd, hd);
        let kh = k_rot.col_slice(head * hd, hd);
        let vh = v.col_slice(head * hd, hd);
        let mut s = matmul_nt(&qh, &kh);
        s.scale(scale);
        let mut pm = Mat::zeros(l_out, l_in);
        for r in 0..l_out {
            let mrow = inputs.mask.row(r);
            let srow = s.row(r);
            let mut mx = f64::NEG_INFINITY;
            for (j, &vis) in mrow.iter().enumerate() {
                if vis {
                    mx = mx.max(srow[j]);
                }
            }
            let prow = pm.row_mut(r);
            let mut den = 0.0;
            for (j, &vis) in mrow.iter().enumerate() {
                if vis {
                    let e = (srow[j] - mx).exp();
                    prow[j] = e;
                    den += e;
                }
            }
            for v in prow.iter_mut() {
                *v /= den;
            }
        }
        let ah = matmul(&pm, &vh);
        for r in 0..l_out {
            attn.row_mut(r)[head * hd..(head + 1) * hd].copy_from_slice(ah.row(r));
        }
        if !ah.is_finite() {
            return Err(Error::NonFinite(format!("attention layer {layer_idx} head {head}")));
        }
        probs.push(pm);
        logits.push(s);
    }

    let gate = p.wg.map(|wg| {
        let mut g = matmul(&q_in, store.get(wg));
        g.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        g
    });
    let merged = match &gate {
        Some(g) => {
            let mut m = attn.clone();
            for (a, gv) in m.data.iter_mut().zip(&g.data) {
                *a *= gv;
            }
            m
        }
        None => attn.clone(),
    };
    let out = matmul(&merged, store.get(p.wo));
    if !out.is_finite() {
        return Err(Error::NonFinite(format!("attention layer {layer_idx} output projection")));
    }
    Ok((
        out,
        AttentionCache {
            input: x.clone(),
            query_rows: inputs.query_rows.to_vec(),
            q_in,
            q_proj,
            q_inv_rms,
            q_rot,
            k_proj,
            k_inv_rms,
            k_rot,
            v,
            probs,
            logits,
            attn,
            gate,
            merged,
        },
    ))
}

/// Accumulates parameter gradients and returns `∂loss/∂x` for the layer input.
pub fn attention_layer_backward(
    store: &ParamStore,
    p: &AttentionLayerParams,
    rope: &Rope,
    positions: &[usize],
    cache: &AttentionCache,
    d_out: &Mat,
    grads: &mut Grads,
) -> Mat {
    let (h, hd) = (p.n_heads, p.head_dim);
    let l_in = cache.input.rows;
    let l_out = cache.query_rows.len();
    let scale = 1.0 / (hd as f64).sqrt();

    accumulate(grads, p.wo, &matmul_tn(&cache.merged, d_out));
    let d_merged = matmul_nt(d_out, store.get(p.wo));

    let mut d_q_in = Mat::zeros(l_out, cache.q_in.cols);
    let d_attn = match (&cache.gate, p.wg) {
        (Some(g), Some(wg)) => {
            let mut d_attn = d_merged.clone();
            let mut d_gz = Mat::zeros(l_out, h * hd);
            for i in 0..d_attn.data.len() {
                let gv = g.data[i];
                d_attn.data[i] = d_merged.data[i] * gv;
                d_gz.data[i] = d_merged.data[i] * cache.attn.data[i] * gv * (1.0 - gv);
            }
            accumulate(grads, wg, &matmul_tn(&cache.q_in, &d_gz));
            d_q_in.add_assign(&matmul_nt(&d_gz, store.get(wg)));
            d_attn
        }
        _ => d_merged,
    };

    let mut d_q_rot = Mat::zeros(l_out, h * hd);
    let mut d_k_rot = Mat::zeros(l_in, h * hd);
    let mut d_v = Mat::zeros(l_in, h * hd);
    for head in 0..h {
        let pm = &cache.probs[head];
        let da = d_attn.col_slice(head * hd, hd);
        let vh = cache.v.col_slice(head * hd, hd);
        let qh = cache.q_rot.col_slice(head * hd, hd);
        let kh = cache.k_rot.col_slice(head * hd, hd);
        let dp = matmul_nt(&da, &vh);
        let dvh = matmul_tn(pm, &da);
        let mut ds = Mat::zeros(l_out, l_in);
        for r in 0..l_out {
            let prow = pm.row(r);
            let dprow = dp.row(r);
            let inner = crate::tensor::dot(prow, dprow);
            for (j, o) in ds.row_mut(r).iter_mut().enumerate() {
                *o = prow[j] * (dprow[j] - inner) * scale;
            }
        }
        let dq = matmul(&ds, &kh);
        let dk = matmul_tn(&ds, &qh);
        for r in 0..l_out {
            d_q_rot.row_mut(r)[head * hd..(head + 1) * hd].copy_from_slice(dq.row(r));
        }
        for r in 0..l_in {
            d_k_rot.row_mut(r)[head * hd..(head + 1) * hd].copy_from_slice(dk.row(r));
            d_v.row_mut(r)[head * hd..(head + 1) * hd].copy_from_slice(dvh.row(r));
        }
    }

    let q_pos: Vec<usize> = cache.query_rows.iter().map(|&r| positions[r]).collect();
    rope.apply(&mut d_q_rot, &q_pos, true);
    rope.apply(&mut d_k_rot, positions, true);
    let d_q_proj = match p.q_gain {
        Some(g) => head_rms_norm_backward(
            &cache.q_proj,
            &store.get(g).data,
            &cache.q_inv_rms,
            h,
            &d_q_rot,
            grads.slot(g),
        ),
        None => d_q_rot,
    };
    let d_k_proj = match p.k_gain {
        Some(g) => head_rms_norm_backward(
            &cache.k_proj,
            &store.get(g).data,
            &cache.k_inv_rms,
            h,
            &d_k_rot,
            grads.slot(g),
        ),
        None => d_k_rot,
    };

    accumulate(grads, p.wq, &matmul_tn(&cache.q_in, &d_q_proj));
    d_q_in.add_assign(&matmul_nt(&d_q_proj, store.get(p.wq)));
    accumulate(grads, p.wk, &matmul_tn(&cache.input, &d_k_proj));
    accumulate(grads, p.wv, &matmul_tn(&cache.input, &d_v));
    let mut dx = matmul_nt(&d_k_proj, store.get(p.wk));
    dx.add_assign(&matmul_nt(&d_v, store.get(p.wv)));
    for (r, &qi) in cache.query_rows.iter().enumerate() {
        for (a, b) in dx.row_mut(qi).iter_mut().zip(d_q_in.row(r)) {
            *a += b;
        }
    }
    dx
}
