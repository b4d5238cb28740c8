//! Analytic forward FLOPs for one sample (multiply-add = 2 FLOPs).

use serde::{Deserialize, Serialize};

use super::layer::{plan_query_rows, PruneSchedule};
use super::mask::{build_mask_for_queries, MaskSpec};
use crate::model::config::ModelConfig;
use crate::tokenizer::Role;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqComposition {
    /// Non-candidate tokens (BOS, history, SEPs, profile).
    pub prefix_len: usize,
    pub n_candidates: usize,
    /// Width of the concatenated embedding row entering the token projection.
    pub token_input_width: usize,
}

impl SeqComposition {
    pub fn new(prefix_len: usize, n_candidates: usize) -> Self {
        Self {
            prefix_len,
            n_candidates,
            token_input_width: 36,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub embedding: f64,
    pub projections: f64,
    pub attention: f64,
    pub ffn: f64,
    pub head: f64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> f64 {
        self.embedding + self.projections + self.attention + self.ffn + self.head
    }

    /// Everything inside the transformer blocks.
    pub fn blocks(&self) -> f64 {
        self.projections + self.attention + self.ffn
    }
}

pub fn prune_schedule(config: &ModelConfig, prefix_len: usize) -> PruneSchedule {
    if config.toggles.query_pruning {
        PruneSchedule::geometric(prefix_len, config.depth, config.prune.final_keep)
    } else {
        PruneSchedule::full(prefix_len, config.depth)
    }
}

/// FFN FLOPs per token for the configured variant (activated experts only).
pub fn ffn_flops_per_token(config: &ModelConfig) -> f64 {
    let d = config.d_model as f64;
    let m = config.expert_intermediate() as f64;
    let swishglu = 6.0 * d * m + 3.0 * m;
    if config.toggles.moe {
        let router = 2.0 * d * config.moe.total_experts as f64;
        router + config.moe.activated() as f64 * (swishglu + 2.0 * d)
    } else {
        swishglu
    }
}

/// Per-sample forward FLOPs. Attention score and value products count only
/// the entries the mask leaves visible.
pub fn flops_estimate(config: &ModelConfig, comp: SeqComposition) -> FlopsBreakdown {
    let d = config.d_model as f64;
    let n = comp.n_candidates;
    let l0 = comp.prefix_len + n;
    let mut out = FlopsBreakdown {
        embedding: 2.0 * l0 as f64 * comp.token_input_width as f64 * d,
        ..Default::default()
    };
    let dh = config.head_hidden as f64;
    out.head = n as f64 * (2.0 * d * dh + 2.0 * dh * 3.0);

    let mut roles = vec![Role::Hist; comp.prefix_len];
    roles.extend(std::iter::repeat(Role::Cand).take(n));
    let mut pos: Vec<usize> = (0..comp.prefix_len).collect();
    pos.extend(std::iter::repeat(comp.prefix_len).take(n));

    let schedule = prune_schedule(config, comp.prefix_len);
    for &keep in &schedule.keep {
        let l_in = roles.len() as f64;
        let rows = plan_query_rows(&roles, keep, config.prune.keep_specials);
        let l_out = rows.len() as f64;
        let n_qproj = if config.toggles.attention_gate { 3.0 } else { 2.0 };
        out.projections += 2.0 * d * d * (n_qproj * l_out + 2.0 * l_in);
        let spec = MaskSpec {
            l_q: rows.len(),
            l_kv: roles.len(),
            window: config.local_window(),
            full_attention_suffix: config.full_attention_suffix,
        };
        let visible = build_mask_for_queries(&spec, &roles, &pos, &rows)
            .map(|m| m.visible_count())
            .unwrap_or(0) as f64;
        out.attention += 4.0 * d * visible;
        out.ffn += l_out * ffn_flops_per_token(config);
        roles = rows.iter().map(|&i| roles[i]).collect();
        pos = rows.iter().map(|&i| pos[i]).collect();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{Scale, Toggles};

    #[test]
    fn zero_layers_is_embedding_plus_head() {
        let c = ModelConfig {
            depth: 0,
            ..ModelConfig::preset(Scale::Small)
        };
        let f = flops_estimate(&c, SeqComposition::new(50, 10));
        assert_eq!(f.blocks(), 0.0);
        assert!(f.embedding > 0.0 && f.head > 0.0);
    }

    #[test]
    fn width_doubling_quadruples_dense_layers() {
        let base = ModelConfig::preset(Scale::Small).baseline();
        let wide = ModelConfig {
            d_model: 512,
            n_heads: 8,
            intermediate: 1280,
            ..base.clone()
        };
        let comp = SeqComposition::new(100, 10);
        let a = flops_estimate(&base, comp);
        let b = flops_estimate(&wide, comp);
        let dense = |f: &FlopsBreakdown| f.projections + f.ffn;
        let r = dense(&b) / dense(&a);
        assert!((r - 4.0).abs() < 0.2, "{r}");
    }

    #[test]
    fn pruning_roughly_halves_cost() {
        let c = ModelConfig::preset(Scale::Base);
        let unpruned = c.with_toggles(Toggles {
            query_pruning: false,
            ..Toggles::ALL
        });
        let comp = SeqComposition::new(1024, 10);
        let ratio = flops_estimate(&c, comp).total() / flops_estimate(&unpruned, comp).total();
        assert!((0.45..=0.60).contains(&ratio), "{ratio}");
    }
}
