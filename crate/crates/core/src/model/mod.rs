//! Full networks: tokenizer, a pre-norm stack of attention + FFN blocks with
//! query pruning, a final RMSNorm and either the multi-objective ranking head
//! or the tied next-item pre-training head.

pub mod checkpoint;
pub mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::flops::prune_schedule;
use crate::attention::{
    attention_layer_backward, attention_layer_forward, build_mask_for_queries, plan_query_rows,
    AttentionCache, AttentionLayerParams, LayerInputs, MaskSpec, Rope,
};
use crate::data::{ItemEvent, RequestSample};
use crate::error::{Error, Result};
use crate::moe::{
    moe_backward, moe_forward, swishglu_backward, swishglu_ffn, ExpertParams, MoeCache, MoeParams,
    SwishGluCache,
};
use crate::params::{accumulate, Grads, ParamId, ParamStore};
use crate::tensor::{matmul, matmul_nt, matmul_tn, rms_norm, rms_norm_backward, sigmoid, softplus, Mat, RmsCache};
use crate::tokenizer::{Role, TokenCache, TokenSequence, Tokenizer, TokenizerConfig};

pub use config::{ModelConfig, MoeConfig, MoeStyle, PruneConfig, Scale, Toggles};

pub const OBJECTIVES: [&str; 3] = ["click", "cart", "purchase"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    Rank,
    Pretrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FfnParams {
    Dense(ExpertParams),
    Moe(MoeParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub attn_norm: ParamId,
    pub attn: AttentionLayerParams,
    pub ffn_norm: ParamId,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Per block, per token: selected routed experts. Used to freeze routing.
pub type RoutingPlan = Vec<Vec<Vec<usize>>>;

#[derive(Debug, Clone)]
pub struct SortModel {
    pub config: ModelConfig,
    pub mode: ModelMode,
    pub tokenizer: Tokenizer,
    pub store: ParamStore,
    pub blocks: Vec<BlockParams>,
    pub final_norm: ParamId,
    pub head: Option<HeadParams>,
    /// `d × item_dim` projection for tied next-item logits.
    pub pretrain_proj: Option<ParamId>,
    rope: Rope,
}

#[derive(Debug, Clone)]
enum FfnCache {
    Dense(SwishGluCache),
    Moe(MoeCache),
}

#[derive(Debug, Clone)]
pub struct BlockTrace {
    x_in: Mat,
    rms1: RmsCache,
    /// Key-side roles and original positions seen by this block.
    pub roles: Vec<Role>,
    pub positions: Vec<usize>,
    /// Rows of the block input that act as queries.
    pub query_rows: Vec<usize>,
    pub attn: AttentionCache,
    x_mid: Mat,
    rms2: RmsCache,
    ffn: FfnCache,
}

impl BlockTrace {
    pub fn expert_load(&self) -> Option<&[usize]> {
        match &self.ffn {
            FfnCache::Moe(c) => Some(&c.load),
            FfnCache::Dense(_) => None,
        }
    }

    pub fn aux_loss(&self) -> f64 {
        match &self.ffn {
            FfnCache::Moe(c) => c.aux_loss,
            FfnCache::Dense(_) => 0.0,
        }
    }

    pub fn routes(&self) -> Option<Vec<Vec<usize>>> {
        match &self.ffn {
            FfnCache::Moe(c) => Some(c.routes.iter().map(|r| r.experts.clone()).collect()),
            FfnCache::Dense(_) => None,
        }
    }
}

/// Everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    tok: TokenCache,
    pub blocks: Vec<BlockTrace>,
    x_final: Mat,
    rms_final: RmsCache,
    /// Roles of the rows leaving the last block.
    pub out_roles: Vec<Role>,
    /// Output of the final RMSNorm.
    pub hidden: Mat,
}

impl ForwardTrace {
    pub fn routing_plan(&self) -> RoutingPlan {
        self.blocks.iter().map(|b| b.routes().unwrap_or_default()).collect()
    }

    pub fn aux_loss(&self) -> f64 {
        self.blocks.iter().map(BlockTrace::aux_loss).sum()
    }
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    input: Mat,
    z1: Mat,
    r: Mat,
}

/// Per-candidate outputs, `N × 3` in objective order.
#[derive(Debug, Clone, PartialEq)]
pub struct RankOutput {
    pub logits: Mat,
    pub probs: Mat,
}

impl SortModel {
    pub fn new(config: ModelConfig, tok_config: TokenizerConfig, mode: ModelMode, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let tokenizer = Tokenizer::new(tok_config, d, config.toggles.special_tokens, &mut store, &mut rng)?;
        let std = config.init_std;
        let out_std = std / (2.0 * config.depth.max(1) as f64).sqrt();
        let t = config.toggles;
        let mut blocks = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let p = format!("block{l}");
            let attn_norm = store.ones(format!("{p}.attn_norm"), d);
            let attn = AttentionLayerParams::new(
                &mut store,
                &format!("{p}.attn"),
                d,
                config.n_heads,
                t.attention_gate,
                t.qknorm,
                std,
                out_std,
                &mut rng,
            );
            let ffn_norm = store.ones(format!("{p}.ffn_norm"), d);
            let m = config.expert_intermediate();
            let ffn = if t.moe {
                FfnParams::Moe(MoeParams::new(&mut store, &format!("{p}.moe"), &config.moe, d, m, std, out_std, &mut rng))
            } else {
                FfnParams::Dense(ExpertParams::new(&mut store, &format!("{p}.ffn"), d, m, std, out_std, &mut rng))
            };
            blocks.push(BlockParams {
                attn_norm,
                attn,
                ffn_norm,
                ffn,
            });
        }
        let final_norm = store.ones("final_norm", d);
        let (head, pretrain_proj) = match mode {
            ModelMode::Rank => {
                let dh = config.head_hidden;
                let head = HeadParams {
                    w1: store.normal("head.w1", d, dh, (1.0 / d as f64).sqrt(), &mut rng),
                    b1: store.zeros("head.b1", 1, dh),
                    w2: store.normal("head.w2", dh, 3, std, &mut rng),
                    b2: store.zeros("head.b2", 1, 3),
                };
                (Some(head), None)
            }
            ModelMode::Pretrain => {
                let item_dim = tokenizer.config.item_dim;
                let w = store.normal("pretrain.proj", d, item_dim, (1.0 / d as f64).sqrt(), &mut rng);
                (None, Some(w))
            }
        };
        let rope = Rope::new(config.head_dim(), config.rope_base)?;
        Ok(Self {
            config,
            mode,
            tokenizer,
            store,
            blocks,
            final_norm,
            head,
            pretrain_proj,
            rope,
        })
    }

    /// Trainable + frozen parameters inside the transformer blocks.
    pub fn block_param_count(&self) -> usize {
        self.store.count_where(|n| n.starts_with("block"))
    }

    pub fn param_count(&self) -> usize {
        self.store.count_where(|_| true)
    }

    /// Runs the block stack over a token sequence.
    pub fn forward_sequence(&self, seq: &TokenSequence, tok: TokenCache, routing: Option<&RoutingPlan>) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let prefix_len = seq.prefix_len();
        let schedule = prune_schedule(cfg, prefix_len);
        let mut x = seq.tokens.clone();
        let mut roles = seq.roles.clone();
        let mut pos = seq.position_ids.clone();
        let mut traces = Vec::with_capacity(self.blocks.len());
        for (l, b) in self.blocks.iter().enumerate() {
            let rows = plan_query_rows(&roles, schedule.keep[l], cfg.prune.keep_specials);
            let (h, rms1) = rms_norm(&x, &self.store.get(b.attn_norm).data);
            let spec = MaskSpec {
                l_q: rows.len(),
                l_kv: roles.len(),
                window: cfg.local_window(),
                full_attention_suffix: cfg.full_attention_suffix,
            };
            let mask = build_mask_for_queries(&spec, &roles, &pos, &rows)?;
            let inputs = LayerInputs {
                positions: &pos,
                query_rows: &rows,
                mask: &mask,
            };
            let (a, attn) = attention_layer_forward(&self.store, &b.attn, &self.rope, &h, &inputs, l)?;
            let mut x_mid = x.select_rows(&rows);
            x_mid.add_assign(&a);
            let (h2, rms2) = rms_norm(&x_mid, &self.store.get(b.ffn_norm).data);
            let (f, ffn) = match &b.ffn {
                FfnParams::Dense(e) => {
                    let (y, c) = swishglu_ffn(&self.store, e, &h2);
                    (y, FfnCache::Dense(c))
                }
                FfnParams::Moe(mp) => {
                    let fixed = routing.map(|r| r[l].as_slice());
                    let (y, c) = moe_forward(&self.store, mp, &h2, fixed)
                        .map_err(|e| Error::NonFinite(format!("block {l}: {e}")))?;
                    (y, FfnCache::Moe(c))
                }
            };
            let mut x_out = x_mid.clone();
            x_out.add_assign(&f);
            if !x_out.is_finite() {
                return Err(Error::NonFinite(format!("block {l} output")));
            }
            let new_roles = rows.iter().map(|&i| roles[i]).collect();
            let new_pos = rows.iter().map(|&i| pos[i]).collect();
            traces.push(BlockTrace {
                x_in: x,
                rms1,
                roles: std::mem::replace(&mut roles, new_roles),
                positions: std::mem::replace(&mut pos, new_pos),
                query_rows: rows,
                attn,
                x_mid,
                rms2,
                ffn,
            });
            x = x_out;
        }
        let (hidden, rms_final) = rms_norm(&x, &self.store.get(self.final_norm).data);
        Ok(ForwardTrace {
            tok,
            blocks: traces,
            x_final: x,
            rms_final,
            out_roles: roles,
            hidden,
        })
    }

    /// Pushes `d_hidden` (gradient w.r.t. the final normalized rows) through the
    /// stack and the tokenizer. `aux_scale` weights the MoE auxiliary losses.
    pub fn backward_sequence(&self, trace: &ForwardTrace, d_hidden: &Mat, aux_scale: f64, grads: &mut Grads) {
        let gain = &self.store.get(self.final_norm).data;
        let mut dx = rms_norm_backward(&trace.x_final, gain, &trace.rms_final, d_hidden, grads.slot(self.final_norm));
        for (b, t) in self.blocks.iter().zip(&trace.blocks).rev() {
            let dh2 = match (&b.ffn, &t.ffn) {
                (FfnParams::Dense(e), FfnCache::Dense(c)) => swishglu_backward(&self.store, e, c, &dx, grads),
                (FfnParams::Moe(mp), FfnCache::Moe(c)) => moe_backward(&self.store, mp, c, &dx, aux_scale, grads),
                _ => unreachable!("ffn cache kind matches params"),
            };
            let g2 = &self.store.get(b.ffn_norm).data;
            let mut d_mid = rms_norm_backward(&t.x_mid, g2, &t.rms2, &dh2, grads.slot(b.ffn_norm));
            d_mid.add_assign(&dx);
            let dh = attention_layer_backward(&self.store, &b.attn, &self.rope, &t.positions, &t.attn, &d_mid, grads);
            let g1 = &self.store.get(b.attn_norm).data;
            let mut d_in = rms_norm_backward(&t.x_in, g1, &t.rms1, &dh, grads.slot(b.attn_norm));
            for (r, &qi) in t.query_rows.iter().enumerate() {
                for (a, v) in d_in.row_mut(qi).iter_mut().zip(d_mid.row(r)) {
                    *a += v;
                }
            }
            dx = d_in;
        }
        self.tokenizer.backward(&self.store, &trace.tok, &dx, grads);
    }

    fn head_params(&self) -> Result<&HeadParams> {
        self.head
            .as_ref()
            .ok_or_else(|| Error::Config("model has no ranking head".into()))
    }

    pub fn head_forward(&self, hidden_cand: &Mat) -> Result<(Mat, HeadCache)> {
        let h = self.head_params()?;
        let mut z1 = matmul(hidden_cand, self.store.get(h.w1));
        add_bias(&mut z1, &self.store.get(h.b1).data);
        let mut r = z1.clone();
        r.data.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut logits = matmul(&r, self.store.get(h.w2));
        add_bias(&mut logits, &self.store.get(h.b2).data);
        Ok((
            logits,
            HeadCache {
                input: hidden_cand.clone(),
                z1,
                r,
            },
        ))
    }

    fn head_backward(&self, cache: &HeadCache, d_logits: &Mat, grads: &mut Grads) -> Mat {
        let h = self.head.as_ref().expect("ranking head");
        accumulate(grads, h.w2, &matmul_tn(&cache.r, d_logits));
        bias_grad(grads, h.b2, d_logits);
        let mut dz1 = matmul_nt(d_logits, self.store.get(h.w2));
        for (g, z) in dz1.data.iter_mut().zip(&cache.z1.data) {
            if *z <= 0.0 {
                *g = 0.0;
            }
        }
        accumulate(grads, h.w1, &matmul_tn(&cache.input, &dz1));
        bias_grad(grads, h.b1, &dz1);
        matmul_nt(&dz1, self.store.get(h.w1))
    }

    /// Request-centric forward: one pass scores every candidate.
    pub fn rank_forward(&self, sample: &RequestSample, routing: Option<&RoutingPlan>) -> Result<(RankOutput, ForwardTrace, HeadCache)> {
        let (seq, tok) = self.tokenizer.tokenize_sample(&self.store, sample)?;
        let trace = self.forward_sequence(&seq, tok, routing)?;
        let cand_rows: Vec<usize> = (0..trace.out_roles.len())
            .filter(|&i| trace.out_roles[i] == Role::Cand)
            .collect();
        let hc = trace.hidden.select_rows(&cand_rows);
        let (logits, hcache) = self.head_forward(&hc)?;
        let mut probs = logits.clone();
        probs.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        Ok((RankOutput { logits, probs }, trace, hcache))
    }

    pub fn predict(&self, sample: &RequestSample) -> Result<Mat> {
        Ok(self.rank_forward(sample, None)?.0.probs)
    }

    /// Loss and gradients for one request. Returns the weighted BCE plus any
    /// MoE auxiliary loss, and the trace (for load statistics).
    pub fn rank_loss_and_grad(
        &self,
        sample: &RequestSample,
        routing: Option<&RoutingPlan>,
        grads: &mut Grads,
        grad_scale: f64,
    ) -> Result<(f64, RankOutput, ForwardTrace)> {
        let (out, trace, hcache) = self.rank_forward(sample, routing)?;
        let labels = label_matrix(sample);
        let (loss, mut dlogits) = bce_with_logits(&out.logits, &labels, &self.config.objective_weights);
        dlogits.scale(grad_scale);
        let d_hc = self.head_backward(&hcache, &dlogits, grads);
        let mut d_hidden = Mat::zeros(trace.hidden.rows, trace.hidden.cols);
        let mut k = 0;
        for (i, role) in trace.out_roles.iter().enumerate() {
            if *role == Role::Cand {
                d_hidden.row_mut(i).copy_from_slice(d_hc.row(k));
                k += 1;
            }
        }
        self.backward_sequence(&trace, &d_hidden, grad_scale, grads);
        let total = loss + trace.aux_loss();
        Ok((total, out, trace))
    }

    /// Next-item logits `(h · W_p) · E_itemᵀ` for every position of a click
    /// sequence.
    pub fn pretrain_forward(&self, events: &[ItemEvent]) -> Result<(Mat, ForwardTrace)> {
        let proj = self
            .pretrain_proj
            .ok_or_else(|| Error::Config("model has no pre-training head".into()))?;
        let (seq, tok) = self.tokenizer.tokenize_click_sequence(&self.store, events)?;
        let trace = self.forward_sequence(&seq, tok, None)?;
        let q = matmul(&trace.hidden, self.store.get(proj));
        let logits = matmul_nt(&q, self.store.get(self.tokenizer.tables.item));
        Ok((logits, trace))
    }

    /// Mean next-item cross-entropy over a click sequence and its gradients.
    /// `None` when the sequence is too short to have a target.
    pub fn pretrain_loss_and_grad(&self, events: &[ItemEvent], grads: &mut Grads, grad_scale: f64) -> Result<Option<f64>> {
        if events.len() < 2 {
            return Ok(None);
        }
        let proj = self.pretrain_proj.expect("pretrain head");
        let (logits, trace) = self.pretrain_forward(events)?;
        let offset = trace.out_roles.len() - events.len();
        // row r predicts the event at sequence row r + 1
        let targets: Vec<(usize, usize)> = (0..logits.rows - 1)
            .filter(|&r| r + 1 >= offset)
            .map(|r| (r, events[r + 1 - offset].item_id as usize))
            .collect();
        let n = targets.len() as f64;
        let mut dlogits = Mat::zeros(logits.rows, logits.cols);
        let mut loss = 0.0;
        for &(r, y) in &targets {
            let row = logits.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += (lse - row[y]) / n;
            let d = dlogits.row_mut(r);
            for (j, v) in row.iter().enumerate() {
                d[j] = (v - lse).exp() / n * grad_scale;
            }
            d[y] -= grad_scale / n;
        }
        let item = self.tokenizer.tables.item;
        let q = matmul(&trace.hidden, self.store.get(proj));
        accumulate(grads, item, &matmul_tn(&dlogits, &q));
        let dq = matmul(&dlogits, self.store.get(item));
        accumulate(grads, proj, &matmul_tn(&trace.hidden, &dq));
        let d_hidden = matmul_nt(&dq, self.store.get(proj));
        self.backward_sequence(&trace, &d_hidden, grad_scale, grads);
        Ok(Some(loss))
    }
}

fn add_bias(m: &mut Mat, b: &[f64]) {
    for r in 0..m.rows {
        for (v, bb) in m.row_mut(r).iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn bias_grad(grads: &mut Grads, id: ParamId, d: &Mat) {
    if let Some(g) = grads.slot(id) {
        for r in 0..d.rows {
            for (a, v) in g.iter_mut().zip(d.row(r)) {
                *a += v;
            }
        }
    }
}

/// `N × 3` label matrix (click, cart, purchase).
pub fn label_matrix(sample: &RequestSample) -> Mat {
    Mat::from_rows(
        &sample
            .candidates
            .iter()
            .map(|c| c.labels.as_array().iter().map(|&v| v as f64).collect())
            .collect::<Vec<_>>(),
    )
}

/// `Σ_o w_o · mean_c BCE(σ(z), y)` computed as `softplus(z) − y·z`, and its
/// gradient w.r.t. the logits.
pub fn bce_with_logits(logits: &Mat, labels: &Mat, weights: &[f64; 3]) -> (f64, Mat) {
    let n = logits.rows as f64;
    let mut loss = 0.0;
    let mut d = Mat::zeros(logits.rows, logits.cols);
    for r in 0..logits.rows {
        for o in 0..3 {
            let z = logits.get(r, o);
            let y = labels.get(r, o);
            loss += weights[o] * (softplus(z) - y * z) / n;
            d.set(r, o, weights[o] * (sigmoid(z) - y) / n);
        }
    }
    (loss, d)
}

pub const PROB_EPS: f64 = 1e-7;

/// Probability form of the ranking loss with ε-clamped logs.
pub fn total_loss(probs: &Mat, labels: &Mat, weights: &[f64; 3]) -> f64 {
    let n = probs.rows as f64;
    let mut loss = 0.0;
    for r in 0..probs.rows {
        for o in 0..3 {
            let p = probs.get(r, o).clamp(PROB_EPS, 1.0 - PROB_EPS);
            let y = labels.get(r, o);
            loss -= weights[o] * (y * p.ln() + (1.0 - y) * (1.0 - p).ln()) / n;
        }
    }
    loss
}

/// Copies the item table of a pre-trained model into a ranking model and
/// optionally freezes it. Dense parameters are left as initialized.
pub fn transfer_sparse(pretrained: &SortModel, ranking: &mut SortModel, freeze: bool) -> Result<()> {
    let src = pretrained.store.get(pretrained.tokenizer.tables.item);
    let dst_id = ranking.tokenizer.tables.item;
    let dst = ranking.store.get(dst_id);
    if (src.rows, src.cols) != (dst.rows, dst.cols) {
        return Err(Error::VocabMismatch(format!(
            "pre-trained item table is {}×{}, ranking model expects {}×{}",
            src.rows, src.cols, dst.rows, dst.cols
        )));
    }
    let src = src.clone();
    *ranking.store.get_mut(dst_id) = src;
    ranking.tokenizer.set_item_frozen(&mut ranking.store, freeze);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ActionType, Candidate, Labels};

    pub(crate) fn tiny_tok() -> TokenizerConfig {
        TokenizerConfig {
            n_items: 12,
            n_categories: 3,
            n_scenes: 2,
            profile_vocab: vec![3],
            item_dim: 4,
            category_dim: 2,
            action_dim: 2,
            scene_dim: 2,
            time_dim: 2,
            profile_dim: 2,
            ..TokenizerConfig::default()
        }
    }

    fn tiny_sample() -> RequestSample {
        let ev = |i: u32, t: i64| ItemEvent {
            item_id: i,
            category: i % 3,
            action: ActionType::Click,
            timestamp: t,
            scene_id: 0,
        };
        let cand = |i: u32, click: u8| Candidate {
            item_id: i,
            category: i % 3,
            side_features: Vec::new(),
            labels: Labels {
                click,
                cart: 0,
                purchase: 0,
            },
        };
        RequestSample {
            request_id: 1,
            user_id: 0,
            timestamp: 100,
            user_profile: vec![1],
            profile_features: Vec::new(),
            history: vec![ev(3, 10), ev(5, 20), ev(7, 50)],
            candidates: vec![cand(1, 1), cand(2, 0), cand(9, 0)],
        }
    }

    #[test]
    fn zero_params_give_half() {
        let mut m = SortModel::new(ModelConfig::preset(Scale::Tiny), tiny_tok(), ModelMode::Rank, 1).unwrap();
        for e in m.store.entries_mut() {
            e.value.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let p = m.predict(&tiny_sample()).unwrap();
        assert!(p.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn loss_hand_cases() {
        let half = Mat::from_vec(1, 3, vec![0.5; 3]);
        let y = Mat::from_vec(1, 3, vec![1.0, 0.0, 0.0]);
        let l = total_loss(&half, &y, &[1.0, 0.0, 0.0]);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let p = Mat::from_vec(1, 3, vec![0.9, 0.5, 0.5]);
        assert!((total_loss(&p, &y, &[1.0, 0.0, 0.0]) - 0.10536).abs() < 1e-5);
        let (lz, _) = bce_with_logits(&Mat::zeros(1, 3), &y, &[1.0, 1.0, 1.0]);
        assert!((lz - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn candidate_permutation_permutes_outputs() {
        let m = SortModel::new(ModelConfig::preset(Scale::Tiny), tiny_tok(), ModelMode::Rank, 3).unwrap();
        let s = tiny_sample();
        let mut r = s.clone();
        r.candidates.reverse();
        let a = m.predict(&s).unwrap();
        let b = m.predict(&r).unwrap();
        for i in 0..3 {
            assert_eq!(a.row(i), b.row(2 - i));
        }
    }

    #[test]
    fn tied_pretrain_logits() {
        let cfg = ModelConfig::preset(Scale::Tiny).with_toggles(Toggles::NONE);
        let m = SortModel::new(cfg, tiny_tok(), ModelMode::Pretrain, 2).unwrap();
        let ev = tiny_sample().history;
        let (logits, trace) = m.pretrain_forward(&ev).unwrap();
        let q = matmul(&trace.hidden, m.store.get(m.pretrain_proj.unwrap()));
        let item = m.store.get(m.tokenizer.tables.item);
        for v in 0..12 {
            let expect = crate::tensor::dot(q.row(1), item.row(v));
            assert!((logits.get(1, v) - expect).abs() < 1e-12);
        }
        assert_eq!(logits.cols, 12);
    }

    #[test]
    fn transfer_rejects_vocab_mismatch() {
        let cfg = ModelConfig::preset(Scale::Tiny);
        let pre = SortModel::new(cfg.with_toggles(Toggles::NONE), tiny_tok(), ModelMode::Pretrain, 1).unwrap();
        let mut other = tiny_tok();
        other.n_items = 13;
        let mut rank = SortModel::new(cfg.clone(), other, ModelMode::Rank, 1).unwrap();
        assert!(matches!(transfer_sparse(&pre, &mut rank, true), Err(Error::VocabMismatch(_))));
        let mut rank = SortModel::new(cfg, tiny_tok(), ModelMode::Rank, 1).unwrap();
        transfer_sparse(&pre, &mut rank, true).unwrap();
        assert_eq!(
            rank.store.get(rank.tokenizer.tables.item),
            pre.store.get(pre.tokenizer.tables.item)
        );
        assert!(!rank.store.receives_grad(rank.tokenizer.tables.item));
    }
}
