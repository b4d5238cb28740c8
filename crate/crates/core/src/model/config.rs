use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Tiny,
    Small,
    Base,
    Large,
    Custom,
}

/// Independent architecture switches. All off is the baseline Transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub special_tokens: bool,
    pub local_attention: bool,
    pub query_pruning: bool,
    pub attention_gate: bool,
    pub qknorm: bool,
    pub moe: bool,
}

impl Toggles {
    pub const ALL: Toggles = Toggles {
        special_tokens: true,
        local_attention: true,
        query_pruning: true,
        attention_gate: true,
        qknorm: true,
        moe: true,
    };
    pub const NONE: Toggles = Toggles {
        special_tokens: false,
        local_attention: false,
        query_pruning: false,
        attention_gate: false,
        qknorm: false,
        moe: false,
    };

    /// Short ablation label, e.g. `ST+QP`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.special_tokens, "ST"),
            (self.local_attention, "LA"),
            (self.query_pruning, "QP"),
            (self.attention_gate, "AG"),
            (self.qknorm, "QKN"),
            (self.moe, "MoE"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }
}

impl Default for Toggles {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoeStyle {
    /// Softmax router, top-k, auxiliary load-balance loss.
    Switch,
    /// Shared experts plus sigmoid-scored routed experts balanced by selection biases.
    DeepSeek,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoeConfig {
    pub style: MoeStyle,
    pub total_experts: usize,
    pub active_experts: usize,
    /// Always-on experts; only used by [`MoeStyle::DeepSeek`].
    pub shared_experts: usize,
    pub aux_loss_coef: f64,
    pub bias_step: f64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self::deepseek_ratio(8)
    }
}

impl MoeConfig {
    /// DeepSeek-style preset with one shared expert, one routed expert per
    /// token and sparsity ratio `1/denominator`.
    pub fn deepseek_ratio(denominator: usize) -> Self {
        Self {
            style: MoeStyle::DeepSeek,
            total_experts: denominator,
            active_experts: 1,
            shared_experts: 1,
            aux_loss_coef: 0.0,
            bias_step: 1e-3,
        }
    }

    pub fn switch_ratio(denominator: usize) -> Self {
        Self {
            style: MoeStyle::Switch,
            total_experts: denominator,
            active_experts: 1,
            shared_experts: 0,
            aux_loss_coef: 0.01,
            bias_step: 0.0,
        }
    }

    pub fn sparsity_ratio(&self) -> f64 {
        self.active_experts as f64 / self.total_experts as f64
    }

    pub fn effective_shared(&self) -> usize {
        match self.style {
            MoeStyle::Switch => 0,
            MoeStyle::DeepSeek => self.shared_experts,
        }
    }

    /// Number of experts a token passes through.
    pub fn activated(&self) -> usize {
        self.active_experts + self.effective_shared()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    /// Non-candidate tokens kept by the last layer (capped by the prefix length).
    pub final_keep: usize,
    /// Keep BOS/SEP rows regardless of the suffix rule. Off by default.
    pub keep_specials: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            final_keep: 128,
            keep_specials: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub scale: Scale,
    pub depth: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Dense FFN width; with MoE, the activated width `(k + s) · m`.
    pub intermediate: usize,
    pub head_hidden: usize,
    pub toggles: Toggles,
    pub window: usize,
    pub full_attention_suffix: usize,
    pub prune: PruneConfig,
    pub moe: MoeConfig,
    pub rope_base: f64,
    pub init_std: f64,
    /// Loss weights for (click, cart, purchase).
    pub objective_weights: [f64; 3],
    /// Compute precision; desk-scale training runs everything in one precision.
    pub precision: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset(Scale::Small)
    }
}

impl ModelConfig {
    /// SORT presets. Depth/width/intermediate follow the published model
    /// table; head count fixes `d_k = 64`.
    pub fn preset(scale: Scale) -> Self {
        let (depth, d_model, intermediate) = match scale {
            Scale::Tiny => (2, 32, 64),
            Scale::Small | Scale::Custom => (4, 256, 640),
            Scale::Base => (6, 512, 1280),
            Scale::Large => (12, 1024, 2560),
        };
        let n_heads = if scale == Scale::Tiny { 2 } else { d_model / 64 };
        Self {
            scale,
            depth,
            d_model,
            n_heads,
            intermediate,
            head_hidden: d_model,
            toggles: Toggles::ALL,
            window: 256,
            full_attention_suffix: 128,
            prune: PruneConfig::default(),
            moe: MoeConfig::default(),
            rope_base: 10_000.0,
            init_std: 0.02,
            objective_weights: [1.0, 0.5, 0.5],
            precision: "f64".into(),
        }
    }

    /// The same shape with every SORT-specific mechanism switched off.
    pub fn baseline(&self) -> Self {
        Self {
            toggles: Toggles::NONE,
            ..self.clone()
        }
    }

    pub fn with_toggles(&self, toggles: Toggles) -> Self {
        Self {
            toggles,
            ..self.clone()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Intermediate size of a single expert.
    pub fn expert_intermediate(&self) -> usize {
        if self.toggles.moe {
            self.intermediate / self.moe.activated()
        } else {
            self.intermediate
        }
    }

    pub fn local_window(&self) -> Option<usize> {
        self.toggles.local_attention.then_some(self.window)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.into()));
        if self.d_model == 0 || self.n_heads == 0 || self.intermediate == 0 || self.head_hidden == 0 {
            return err("d_model, n_heads, intermediate and head_hidden must be >= 1");
        }
        if self.d_model % self.n_heads != 0 {
            return err("d_model must be divisible by n_heads");
        }
        if self.head_dim() % 2 != 0 {
            return err("head dimension must be even for rotary embeddings");
        }
        if self.toggles.local_attention && self.window == 0 {
            return err("local attention window must be >= 1");
        }
        if self.toggles.query_pruning && self.prune.final_keep == 0 {
            return err("prune.final_keep must be >= 1");
        }
        if self.toggles.moe {
            let m = &self.moe;
            if m.active_experts == 0 || m.active_experts > m.total_experts {
                return err("moe requires 1 <= active_experts <= total_experts");
            }
            if self.intermediate % m.activated() != 0 {
                return err("intermediate must be divisible by activated experts (k + shared)");
            }
        }
        if !(self.rope_base > 1.0) {
            return err("rope_base must be > 1");
        }
        if self.objective_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return err("objective weights must be finite and >= 0");
        }
        if self.precision != "f64" {
            return err("only f64 precision is supported");
        }
        Ok(())
    }
}
