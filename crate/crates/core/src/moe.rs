//! Feed-forward sublayers: dense SwishGLU, Switch-style top-k MoE with an
//! auxiliary balance loss, and DeepSeek-style MoE with shared experts and
//! bias-based balancing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::{MoeConfig, MoeStyle};
use crate::params::{accumulate, Grads, ParamId, ParamKind, ParamStore};
use crate::tensor::{matmul, matmul_nt, matmul_tn, sigmoid, swish, swish_grad, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertParams {
    pub gate: ParamId,
    pub up: ParamId,
    pub down: ParamId,
}

impl ExpertParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, m: usize, std: f64, out_std: f64, rng: &mut impl Rng) -> Self {
        Self {
            gate: store.normal(format!("{prefix}.gate"), d, m, std, rng),
            up: store.normal(format!("{prefix}.up"), d, m, std, rng),
            down: store.normal(format!("{prefix}.down"), m, d, out_std, rng),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SwishGluCache {
    x: Mat,
    g: Mat,
    u: Mat,
    h: Mat,
}

/// `down(swish(x·gate) ⊙ x·up)` row-wise.
pub fn swishglu_ffn(store: &ParamStore, e: &ExpertParams, x: &Mat) -> (Mat, SwishGluCache) {
    let g = matmul(x, store.get(e.gate));
    let u = matmul(x, store.get(e.up));
    let mut h = Mat::zeros(g.rows, g.cols);
    for i in 0..h.data.len() {
        h.data[i] = swish(g.data[i]) * u.data[i];
    }
    let y = matmul(&h, store.get(e.down));
    (
        y,
        SwishGluCache {
            x: x.clone(),
            g,
            u,
            h,
        },
    )
}

pub fn swishglu_backward(store: &ParamStore, e: &ExpertParams, cache: &SwishGluCache, dy: &Mat, grads: &mut Grads) -> Mat {
    accumulate(grads, e.down, &matmul_tn(&cache.h, dy));
    let dh = matmul_nt(dy, store.get(e.down));
    let mut dg = Mat::zeros(dh.rows, dh.cols);
    let mut du = Mat::zeros(dh.rows, dh.cols);
    for i in 0..dh.data.len() {
        let g = cache.g.data[i];
        dg.data[i] = dh.data[i] * cache.u.data[i] * swish_grad(g);
        du.data[i] = dh.data[i] * swish(g);
    }
    accumulate(grads, e.gate, &matmul_tn(&cache.x, &dg));
    accumulate(grads, e.up, &matmul_tn(&cache.x, &du));
    let mut dx = matmul_nt(&dg, store.get(e.gate));
    dx.add_assign(&matmul_nt(&du, store.get(e.up)));
    dx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeParams {
    pub config: MoeConfig,
    /// `d × E` routing weights.
    pub router: ParamId,
    /// `1 × E` selection biases (DeepSeek only, not trained by gradient).
    pub bias: Option<ParamId>,
    pub experts: Vec<ExpertParams>,
    pub shared: Vec<ExpertParams>,
}

impl MoeParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: &MoeConfig,
        d: usize,
        m: usize,
        std: f64,
        out_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let e = config.total_experts;
        let router = store.normal(format!("{prefix}.router"), d, e, std, rng);
        let bias = (config.style == MoeStyle::DeepSeek)
            .then(|| store.push(format!("{prefix}.router_bias"), Mat::zeros(1, e), ParamKind::Buffer));
        let experts = (0..e)
            .map(|i| ExpertParams::new(store, &format!("{prefix}.expert{i}"), d, m, std, out_std, rng))
            .collect();
        let shared = (0..config.effective_shared())
            .map(|i| ExpertParams::new(store, &format!("{prefix}.shared{i}"), d, m, std, out_std, rng))
            .collect();
        Self {
            config: config.clone(),
            router,
            bias,
            experts,
            shared,
        }
    }
}

/// Indices of the `k` largest values, ties to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Gate scores from router logits: softmax (Switch) or element-wise sigmoid
/// (DeepSeek).
pub fn gate_scores(logits: &[f64], style: MoeStyle) -> Vec<f64> {
    match style {
        MoeStyle::Switch => softmax(logits),
        MoeStyle::DeepSeek => logits.iter().map(|&z| sigmoid(z)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub experts: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Combine weights for a fixed selection. Switch uses the softmax
/// probabilities directly; DeepSeek normalizes raw scores over the selection.
/// Biases never enter here.
pub fn combine_weights(scores: &[f64], selected: &[usize], style: MoeStyle) -> Vec<f64> {
    match style {
        MoeStyle::Switch => selected.iter().map(|&e| scores[e]).collect(),
        MoeStyle::DeepSeek => {
            let s: f64 = selected.iter().map(|&e| scores[e]).sum();
            selected.iter().map(|&e| scores[e] / s).collect()
        }
    }
}

/// Picks `k` experts for one token. DeepSeek selects by `score + bias`.
pub fn route_topk(logits: &[f64], bias: Option<&[f64]>, k: usize, style: MoeStyle) -> Route {
    let scores = gate_scores(logits, style);
    let experts = match (style, bias) {
        (MoeStyle::DeepSeek, Some(b)) => {
            let biased: Vec<f64> = scores.iter().zip(b).map(|(s, b)| s + b).collect();
            top_k(&biased, k)
        }
        _ => top_k(&scores, k),
    };
    let weights = combine_weights(&scores, &experts, style);
    Route { experts, weights }
}

#[derive(Debug, Clone)]
pub struct MoeCache {
    x: Mat,
    scores: Vec<Vec<f64>>,
    pub routes: Vec<Route>,
    /// Per routed expert: token rows, cache and raw outputs.
    routed: Vec<Option<(Vec<usize>, SwishGluCache, Mat)>>,
    shared: Vec<SwishGluCache>,
    /// Tokens per expert in this call.
    pub load: Vec<usize>,
    pub aux_loss: f64,
}

/// Routes every token, applies the selected experts (plus shared experts) and
/// sums them with the combine weights. `fixed` overrides the selection.
pub fn moe_forward(
    store: &ParamStore,
    p: &MoeParams,
    x: &Mat,
    fixed: Option<&[Vec<usize>]>,
) -> Result<(Mat, MoeCache)> {
    let cfg = &p.config;
    let e_total = cfg.total_experts;
    let logits = matmul(x, store.get(p.router));
    let bias = p.bias.map(|b| store.get(b).data.clone());
    let mut routes = Vec::with_capacity(x.rows);
    let mut scores = Vec::with_capacity(x.rows);
    for t in 0..x.rows {
        let z = logits.row(t);
        let route = match fixed {
            Some(f) => {
                let s = gate_scores(z, cfg.style);
                Route {
                    weights: combine_weights(&s, &f[t], cfg.style),
                    experts: f[t].clone(),
                }
            }
            None => route_topk(z, bias.as_deref(), cfg.active_experts, cfg.style),
        };
        scores.push(gate_scores(z, cfg.style));
        routes.push(route);
    }
    let mut load = vec![0usize; e_total];
    let mut members: Vec<Vec<(usize, f64)>> = vec![Vec::new(); e_total];
    for (t, r) in routes.iter().enumerate() {
        for (&e, &w) in r.experts.iter().zip(&r.weights) {
            load[e] += 1;
            members[e].push((t, w));
        }
    }
    let mut y = Mat::zeros(x.rows, x.cols);
    let mut routed = Vec::with_capacity(e_total);
    for (e, mem) in members.iter().enumerate() {
        if mem.is_empty() {
            routed.push(None);
            continue;
        }
        let rows: Vec<usize> = mem.iter().map(|m| m.0).collect();
        let xe = x.select_rows(&rows);
        let (ye, c) = swishglu_ffn(store, &p.experts[e], &xe);
        for (i, &(t, w)) in mem.iter().enumerate() {
            for (a, b) in y.row_mut(t).iter_mut().zip(ye.row(i)) {
                *a += w * b;
            }
        }
        if !ye.is_finite() {
            return Err(Error::NonFinite(format!("expert {e}, token {}", rows[0])));
        }
        routed.push(Some((rows, c, ye)));
    }
    let mut shared = Vec::with_capacity(p.shared.len());
    for (i, sp) in p.shared.iter().enumerate() {
        let (ys, c) = swishglu_ffn(store, sp, x);
        if !ys.is_finite() {
            return Err(Error::NonFinite(format!("shared expert {i}")));
        }
        y.add_assign(&ys);
        shared.push(c);
    }
    let aux_loss = match cfg.style {
        MoeStyle::Switch if cfg.aux_loss_coef > 0.0 && x.rows > 0 => {
            let (f, pm) = load_and_prob(&load, &scores, cfg.active_experts);
            cfg.aux_loss_coef * e_total as f64 * f.iter().zip(&pm).map(|(a, b)| a * b).sum::<f64>()
        }
        _ => 0.0,
    };
    Ok((
        y,
        MoeCache {
            x: x.clone(),
            scores,
            routes,
            routed,
            shared,
            load,
            aux_loss,
        },
    ))
}

/// Fraction of routed slots per expert and mean gate probability per expert.
fn load_and_prob(load: &[usize], scores: &[Vec<f64>], k: usize) -> (Vec<f64>, Vec<f64>) {
    let t = scores.len() as f64;
    let f = load.iter().map(|&l| l as f64 / (t * k as f64)).collect();
    let mut pm = vec![0.0; load.len()];
    for s in scores {
        for (a, b) in pm.iter_mut().zip(s) {
            *a += b / t;
        }
    }
    (f, pm)
}

/// Switch auxiliary loss `α · E · Σ_e f_e · P_e` from a load histogram and
/// mean router probabilities. Uniform load and probabilities give exactly `α`.
pub fn switch_aux_loss(load_fraction: &[f64], mean_prob: &[f64], coef: f64) -> f64 {
    coef * load_fraction.len() as f64 * load_fraction.iter().zip(mean_prob).map(|(a, b)| a * b).sum::<f64>()
}

/// Backward for the main output plus `aux_scale ×` the auxiliary loss.
pub fn moe_backward(store: &ParamStore, p: &MoeParams, cache: &MoeCache, dy: &Mat, aux_scale: f64, grads: &mut Grads) -> Mat {
    let cfg = &p.config;
    let e_total = cfg.total_experts;
    let x = &cache.x;
    let mut dx = Mat::zeros(x.rows, x.cols);
    // d(loss)/d(combine weight) per (token, slot)
    let mut dw: Vec<Vec<f64>> = cache.routes.iter().map(|r| vec![0.0; r.experts.len()]).collect();
    for (e, slot) in cache.routed.iter().enumerate() {
        let Some((rows, c, ye)) = slot else { continue };
        let mut dye = Mat::zeros(rows.len(), x.cols);
        for (i, &t) in rows.iter().enumerate() {
            let r = &cache.routes[t];
            let s = r.experts.iter().position(|&v| v == e).unwrap();
            let w = r.weights[s];
            dw[t][s] = crate::tensor::dot(dy.row(t), ye.row(i));
            for (a, b) in dye.row_mut(i).iter_mut().zip(dy.row(t)) {
                *a = w * b;
            }
        }
        let dxe = swishglu_backward(store, &p.experts[e], c, &dye, grads);
        for (i, &t) in rows.iter().enumerate() {
            for (a, b) in dx.row_mut(t).iter_mut().zip(dxe.row(i)) {
                *a += b;
            }
        }
    }
    for (sp, c) in p.shared.iter().zip(&cache.shared) {
        dx.add_assign(&swishglu_backward(store, sp, c, dy, grads));
    }

    let mut dlogits = Mat::zeros(x.rows, e_total);
    let aux = if cfg.style == MoeStyle::Switch && cfg.aux_loss_coef > 0.0 && aux_scale != 0.0 {
        let (f, _) = load_and_prob(&cache.load, &cache.scores, cfg.active_experts);
        Some(f)
    } else {
        None
    };
    let t_count = x.rows as f64;
    for t in 0..x.rows {
        let s = &cache.scores[t];
        let r = &cache.routes[t];
        // gradient w.r.t. the gate scores
        let mut ds = vec![0.0; e_total];
        match cfg.style {
            MoeStyle::Switch => {
                for (slot, &e) in r.experts.iter().enumerate() {
                    ds[e] += dw[t][slot];
                }
            }
            MoeStyle::DeepSeek => {
                let sum: f64 = r.experts.iter().map(|&e| s[e]).sum();
                let inner: f64 = r.weights.iter().zip(&dw[t]).map(|(w, d)| w * d).sum();
                for (slot, &e) in r.experts.iter().enumerate() {
                    ds[e] += (dw[t][slot] - inner) / sum;
                }
            }
        }
        if let Some(f) = &aux {
            for e in 0..e_total {
                ds[e] += aux_scale * cfg.aux_loss_coef * e_total as f64 * f[e] / t_count;
            }
        }
        let dz = dlogits.row_mut(t);
        match cfg.style {
            MoeStyle::Switch => {
                let inner: f64 = s.iter().zip(&ds).map(|(a, b)| a * b).sum();
                for e in 0..e_total {
                    dz[e] = s[e] * (ds[e] - inner);
                }
            }
            MoeStyle::DeepSeek => {
                for e in 0..e_total {
                    dz[e] = ds[e] * s[e] * (1.0 - s[e]);
                }
            }
        }
    }
    accumulate(grads, p.router, &matmul_tn(x, &dlogits));
    dx.add_assign(&matmul_nt(&dlogits, store.get(p.router)));
    dx
}

/// Load feedback after a step. DeepSeek: `b_e += γ · sign(mean − load_e)`.
/// Switch: returns the auxiliary loss with load fractions standing in for
/// router probabilities (the balanced value is `α`); DeepSeek returns 0.
pub fn update_balance(store: &mut ParamStore, p: &MoeParams, load: &[usize]) -> f64 {
    let cfg = &p.config;
    match (cfg.style, p.bias) {
        (MoeStyle::DeepSeek, Some(b)) => {
            let mean = load.iter().sum::<usize>() as f64 / load.len() as f64;
            for (v, &l) in store.get_mut(b).data.iter_mut().zip(load) {
                let diff = mean - l as f64;
                if diff != 0.0 {
                    *v += cfg.bias_step * diff.signum();
                }
            }
            0.0
        }
        _ => {
            let total = load.iter().sum::<usize>().max(1) as f64;
            let f: Vec<f64> = load.iter().map(|&l| l as f64 / total).collect();
            switch_aux_loss(&f, &f, cfg.aux_loss_coef)
        }
    }
}

/// `max(load) / mean(load)`; 1 for perfectly balanced routing.
pub fn load_max_over_mean(load: &[usize]) -> f64 {
    let total: usize = load.iter().sum();
    if total == 0 {
        return 1.0;
    }
    let mean = total as f64 / load.len() as f64;
    *load.iter().max().unwrap() as f64 / mean
}
