//! Request sample → token sequence.
//!
//! Each history event and each candidate becomes one token: field embeddings
//! are looked up, concatenated (candidates append their side features),
//! linearly projected to the model width and RMS-normalized. Every profile
//! field becomes its own token. With special tokens enabled the layout is
//! `[BOS; history; SEP; profile; SEP; candidates]`.
//!
//! Candidates share one position id, one past the last prefix position, so
//! that scoring a candidate does not depend on its slot in the request.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ActionType, ItemEvent, RequestSample};
use crate::error::{Error, Result};
use crate::params::{accumulate, Grads, ParamId, ParamKind, ParamStore};
use crate::tensor::{matmul, matmul_nt, matmul_tn, rms_norm, rms_norm_backward, Mat, RmsCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Bos,
    Hist,
    Sep,
    Prof,
    Cand,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SideTarget {
    Candidate,
    Profile,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideFeatureGroup {
    pub name: String,
    pub target: SideTarget,
    pub width: usize,
}

/// Field vocabularies, per-field embedding widths and timestamp buckets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub n_items: usize,
    pub n_categories: usize,
    pub n_scenes: usize,
    pub profile_vocab: Vec<usize>,
    pub item_dim: usize,
    pub category_dim: usize,
    pub action_dim: usize,
    pub scene_dim: usize,
    pub time_dim: usize,
    pub profile_dim: usize,
    /// Ascending recency edges in seconds; bucket = number of edges ≤ recency.
    pub time_bucket_edges: Vec<i64>,
    pub side_groups: Vec<SideFeatureGroup>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            n_items: 5_000,
            n_categories: 50,
            n_scenes: 4,
            profile_vocab: vec![8, 16],
            item_dim: 16,
            category_dim: 8,
            action_dim: 4,
            scene_dim: 4,
            time_dim: 4,
            profile_dim: 8,
            time_bucket_edges: default_time_edges(),
            side_groups: Vec::new(),
        }
    }
}

/// Log-scale recency edges: 1 minute doubling up to roughly a year.
pub fn default_time_edges() -> Vec<i64> {
    (0..19).map(|k| 60i64 << k).collect()
}

impl TokenizerConfig {
    pub fn for_data(cfg: &crate::data::SynthConfig) -> Self {
        Self {
            n_items: cfg.n_items,
            n_categories: cfg.n_categories,
            n_scenes: cfg.n_scenes,
            profile_vocab: cfg.profile_vocab.clone(),
            ..Self::default()
        }
    }

    pub fn n_time_buckets(&self) -> usize {
        self.time_bucket_edges.len() + 1
    }

    pub fn time_bucket(&self, recency: i64) -> usize {
        self.time_bucket_edges.partition_point(|&e| e <= recency)
    }

    pub fn side_width(&self, target: SideTarget) -> usize {
        self.side_groups
            .iter()
            .filter(|g| g.target == target)
            .map(|g| g.width)
            .sum()
    }

    /// Concatenated input width of a history token.
    pub fn history_width(&self) -> usize {
        self.item_dim + self.category_dim + self.action_dim + self.scene_dim + self.time_dim
    }

    pub fn candidate_width(&self) -> usize {
        self.item_dim + self.category_dim + self.side_width(SideTarget::Candidate)
    }

    pub fn profile_width(&self) -> usize {
        self.profile_dim + self.side_width(SideTarget::Profile)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 || self.n_categories == 0 || self.n_scenes == 0 {
            return Err(Error::Config("tokenizer vocabularies must be non-empty".into()));
        }
        if self.item_dim == 0 {
            return Err(Error::Config("item_dim must be >= 1".into()));
        }
        if self.time_bucket_edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("time bucket edges must be strictly increasing".into()));
        }
        if self.profile_vocab.iter().any(|&v| v == 0) {
            return Err(Error::Config("profile vocab sizes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Projection `x W + b` followed by RMSNorm with gain `g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjNorm {
    pub weight: ParamId,
    pub bias: ParamId,
    pub gain: ParamId,
}

impl ProjNorm {
    fn new(store: &mut ParamStore, name: &str, in_w: usize, d: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (in_w.max(1) as f64).sqrt();
        Self {
            weight: store.normal(format!("{name}.weight"), in_w, d, std, rng),
            bias: store.zeros(format!("{name}.bias"), 1, d),
            gain: store.ones(format!("{name}.gain"), d),
        }
    }

    fn forward(&self, store: &ParamStore, input: &Mat) -> (Mat, ProjCache) {
        let w = store.get(self.weight);
        let b = store.get(self.bias);
        let mut z = matmul(input, w);
        for r in 0..z.rows {
            for (v, bb) in z.row_mut(r).iter_mut().zip(&b.data) {
                *v += bb;
            }
        }
        let (y, rms) = rms_norm(&z, &store.get(self.gain).data);
        (
            y,
            ProjCache {
                input: input.clone(),
                pre_norm: z,
                rms,
            },
        )
    }

    /// Accumulates parameter grads and returns the gradient w.r.t. the input.
    fn backward(&self, store: &ParamStore, cache: &ProjCache, dy: &Mat, grads: &mut Grads) -> Mat {
        let gain = &store.get(self.gain).data;
        let dz = rms_norm_backward(&cache.pre_norm, gain, &cache.rms, dy, grads.slot(self.gain));
        accumulate(grads, self.weight, &matmul_tn(&cache.input, &dz));
        if let Some(db) = grads.slot(self.bias) {
            for r in 0..dz.rows {
                for (a, v) in db.iter_mut().zip(dz.row(r)) {
                    *a += v;
                }
            }
        }
        matmul_nt(&dz, store.get(self.weight))
    }
}

#[derive(Debug, Clone)]
struct ProjCache {
    input: Mat,
    pre_norm: Mat,
    rms: RmsCache,
}

/// Ids of every embedding table and projection owned by the tokenizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTables {
    pub item: ParamId,
    pub category: ParamId,
    pub action: ParamId,
    pub scene: ParamId,
    pub time: ParamId,
    pub profile: Vec<ParamId>,
    /// Rows: BOS, SEP after history, SEP after profile.
    pub special: Option<ParamId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    pub d_model: usize,
    pub tables: EmbeddingTables,
    pub history_proj: ProjNorm,
    pub candidate_proj: ProjNorm,
    pub profile_proj: Vec<ProjNorm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Mat,
    pub position_ids: Vec<usize>,
    pub roles: Vec<Role>,
    pub candidate_index: Vec<Option<usize>>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn n_candidates(&self) -> usize {
        self.roles.iter().filter(|r| **r == Role::Cand).count()
    }

    pub fn prefix_len(&self) -> usize {
        self.len() - self.n_candidates()
    }

    /// Checks the structural invariants of a sequence built with special tokens.
    pub fn check_invariants(&self, special_tokens: bool) -> std::result::Result<(), String> {
        let n = self.len();
        if self.position_ids.len() != n || self.candidate_index.len() != n || self.tokens.rows != n {
            return Err("length mismatch".into());
        }
        let first_cand = self.prefix_len();
        if self.roles[first_cand..].iter().any(|r| *r != Role::Cand)
            || self.roles[..first_cand].contains(&Role::Cand)
        {
            return Err("candidates are not a contiguous suffix".into());
        }
        for (i, &p) in self.position_ids[..first_cand].iter().enumerate() {
            if p != i {
                return Err(format!("prefix position {i} has id {p}"));
            }
        }
        if self.position_ids[first_cand..].iter().any(|&p| p != first_cand) {
            return Err("candidate position ids differ".into());
        }
        if special_tokens {
            if self.roles.first() != Some(&Role::Bos)
                || self.roles.iter().filter(|r| **r == Role::Bos).count() != 1
            {
                return Err("exactly one BOS at index 0 required".into());
            }
            if self.roles.iter().filter(|r| **r == Role::Sep).count() != 2 {
                return Err("exactly two SEP tokens required".into());
            }
        }
        Ok(())
    }
}

/// Everything needed to push token gradients back into tables and projections.
#[derive(Debug, Clone)]
pub struct TokenCache {
    history: Option<(ProjCache, Vec<HistoryIds>)>,
    candidates: (ProjCache, Vec<(usize, usize)>),
    profile: Vec<(ProjCache, usize)>,
    /// Sequence row of each token group.
    hist_rows: Vec<usize>,
    prof_rows: Vec<usize>,
    cand_rows: Vec<usize>,
    special_rows: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy)]
struct HistoryIds {
    item: usize,
    category: usize,
    action: usize,
    scene: usize,
    time: usize,
}

fn check_vocab(what: &str, id: usize, size: usize) -> Result<()> {
    if id >= size {
        return Err(Error::OutOfVocab {
            what: what.into(),
            id,
            size,
        });
    }
    Ok(())
}

fn scatter_row(grads: &mut Grads, table: ParamId, row: usize, width: usize, src: &[f64]) {
    if let Some(g) = grads.slot(table) {
        for (a, b) in g[row * width..(row + 1) * width].iter_mut().zip(src) {
            *a += b;
        }
    }
}

impl Tokenizer {
    pub fn new(
        config: TokenizerConfig,
        d_model: usize,
        special_tokens: bool,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let emb_std = 1.0 / (config.item_dim as f64).sqrt();
        let table = |store: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut _| {
            store.normal(format!("embed.{name}"), rows, dim, emb_std, rng)
        };
        let tables = EmbeddingTables {
            item: table(store, "item", config.n_items, config.item_dim, rng),
            category: table(store, "category", config.n_categories, config.category_dim, rng),
            action: table(store, "action", ActionType::COUNT, config.action_dim, rng),
            scene: table(store, "scene", config.n_scenes, config.scene_dim, rng),
            time: table(store, "time", config.n_time_buckets(), config.time_dim, rng),
            profile: config
                .profile_vocab
                .iter()
                .enumerate()
                .map(|(f, &v)| table(store, &format!("profile{f}"), v, config.profile_dim, rng))
                .collect(),
            special: special_tokens.then(|| store.normal("embed.special", 3, d_model, 1.0, rng)),
        };
        let history_proj = ProjNorm::new(store, "tok.history", config.history_width(), d_model, rng);
        let candidate_proj =
            ProjNorm::new(store, "tok.candidate", config.candidate_width(), d_model, rng);
        let profile_proj = (0..config.profile_vocab.len())
            .map(|f| ProjNorm::new(store, &format!("tok.profile{f}"), config.profile_width(), d_model, rng))
            .collect();
        Ok(Self {
            config,
            d_model,
            tables,
            history_proj,
            candidate_proj,
            profile_proj,
        })
    }

    pub fn special_tokens(&self) -> bool {
        self.tables.special.is_some()
    }

    /// Marks the item table frozen (no gradient, no optimizer state) or trainable.
    pub fn set_item_frozen(&self, store: &mut ParamStore, frozen: bool) {
        let kind = if frozen {
            ParamKind::Frozen
        } else {
            ParamKind::Trainable
        };
        store.set_kind(self.tables.item, kind);
    }

    fn history_ids(&self, ev: &ItemEvent, request_ts: i64) -> Result<HistoryIds> {
        let c = &self.config;
        check_vocab("item", ev.item_id as usize, c.n_items)?;
        check_vocab("category", ev.category as usize, c.n_categories)?;
        check_vocab("scene", ev.scene_id as usize, c.n_scenes)?;
        Ok(HistoryIds {
            item: ev.item_id as usize,
            category: ev.category as usize,
            action: ev.action.index(),
            scene: ev.scene_id as usize,
            time: c.time_bucket((request_ts - ev.timestamp).max(0)),
        })
    }

    fn history_concat(&self, store: &ParamStore, ids: &[HistoryIds]) -> Mat {
        let c = &self.config;
        let t = &self.tables;
        let mut m = Mat::zeros(ids.len(), c.history_width());
        for (r, h) in ids.iter().enumerate() {
            let row = m.row_mut(r);
            let mut off = 0;
            for (table, idx, dim) in [
                (t.item, h.item, c.item_dim),
                (t.category, h.category, c.category_dim),
                (t.action, h.action, c.action_dim),
                (t.scene, h.scene, c.scene_dim),
                (t.time, h.time, c.time_dim),
            ] {
                row[off..off + dim].copy_from_slice(store.get(table).row(idx));
                off += dim;
            }
        }
        m
    }

    /// Concatenated candidate input rows: `[item ; category ; side features]`.
    fn candidate_concat(&self, store: &ParamStore, sample: &RequestSample) -> Result<(Mat, Vec<(usize, usize)>)> {
        let c = &self.config;
        let side_w = c.side_width(SideTarget::Candidate);
        let mut m = Mat::zeros(sample.candidates.len(), c.candidate_width());
        let mut ids = Vec::with_capacity(sample.candidates.len());
        for (r, cand) in sample.candidates.iter().enumerate() {
            check_vocab("item", cand.item_id as usize, c.n_items)?;
            check_vocab("category", cand.category as usize, c.n_categories)?;
            if cand.side_features.len() != side_w {
                return Err(Error::Shape(format!(
                    "candidate {r} has {} side features, expected {side_w}",
                    cand.side_features.len()
                )));
            }
            let row = m.row_mut(r);
            row[..c.item_dim].copy_from_slice(store.get(self.tables.item).row(cand.item_id as usize));
            row[c.item_dim..c.item_dim + c.category_dim]
                .copy_from_slice(store.get(self.tables.category).row(cand.category as usize));
            row[c.item_dim + c.category_dim..].copy_from_slice(&cand.side_features);
            ids.push((cand.item_id as usize, cand.category as usize));
        }
        Ok((m, ids))
    }

    /// Single-item tokenization (one candidate): the `d`-vector fed to the stack.
    pub fn tokenize_candidate(&self, store: &ParamStore, sample: &RequestSample, j: usize) -> Result<Vec<f64>> {
        let one = RequestSample {
            candidates: vec![sample
                .candidates
                .get(j)
                .cloned()
                .ok_or(Error::NoCandidates)?],
            ..sample.clone()
        };
        let (m, _) = self.candidate_concat(store, &one)?;
        let (y, _) = self.candidate_proj.forward(store, &m);
        Ok(y.data)
    }

    pub fn tokenize_sample(&self, store: &ParamStore, sample: &RequestSample) -> Result<(TokenSequence, TokenCache)> {
        if sample.candidates.is_empty() {
            return Err(Error::NoCandidates);
        }
        let c = &self.config;
        if sample.user_profile.len() != c.profile_vocab.len() {
            return Err(Error::Shape(format!(
                "profile has {} fields, expected {}",
                sample.user_profile.len(),
                c.profile_vocab.len()
            )));
        }
        let prof_side = c.side_width(SideTarget::Profile);
        if sample.profile_features.len() != prof_side {
            return Err(Error::Shape(format!(
                "profile has {} side features, expected {prof_side}",
                sample.profile_features.len()
            )));
        }
        let d = self.d_model;
        let n_hist = sample.history.len();
        let n_prof = sample.user_profile.len();
        let n_cand = sample.candidates.len();
        let st = self.special_tokens();
        let len = n_hist + n_prof + n_cand + if st { 3 } else { 0 };

        let mut tokens = Mat::zeros(len, d);
        let mut roles = Vec::with_capacity(len);
        let mut special_rows = Vec::new();
        let mut hist_rows = Vec::with_capacity(n_hist);
        let mut prof_rows = Vec::with_capacity(n_prof);
        let mut cand_rows = Vec::with_capacity(n_cand);

        let push_special = |tokens: &mut Mat, roles: &mut Vec<Role>, special_rows: &mut Vec<(usize, usize)>, which: usize| {
            let row = roles.len();
            let table = store.get(self.tables.special.expect("special table"));
            tokens.row_mut(row).copy_from_slice(table.row(which));
            roles.push(if which == 0 { Role::Bos } else { Role::Sep });
            special_rows.push((row, which));
        };

        if st {
            push_special(&mut tokens, &mut roles, &mut special_rows, 0);
        }
        let history = if n_hist > 0 {
            let ids = sample
                .history
                .iter()
                .map(|e| self.history_ids(e, sample.timestamp))
                .collect::<Result<Vec<_>>>()?;
            let concat = self.history_concat(store, &ids);
            let (y, cache) = self.history_proj.forward(store, &concat);
            for r in 0..n_hist {
                let row = roles.len();
                tokens.row_mut(row).copy_from_slice(y.row(r));
                roles.push(Role::Hist);
                hist_rows.push(row);
            }
            Some((cache, ids))
        } else {
            None
        };
        if st {
            push_special(&mut tokens, &mut roles, &mut special_rows, 1);
        }
        let mut profile = Vec::with_capacity(n_prof);
        for (f, &v) in sample.user_profile.iter().enumerate() {
            check_vocab(&format!("profile field {f}"), v as usize, c.profile_vocab[f])?;
            let mut input = Mat::zeros(1, c.profile_width());
            input.row_mut(0)[..c.profile_dim]
                .copy_from_slice(store.get(self.tables.profile[f]).row(v as usize));
            input.row_mut(0)[c.profile_dim..].copy_from_slice(&sample.profile_features);
            let (y, cache) = self.profile_proj[f].forward(store, &input);
            let row = roles.len();
            tokens.row_mut(row).copy_from_slice(y.row(0));
            roles.push(Role::Prof);
            prof_rows.push(row);
            profile.push((cache, v as usize));
        }
        if st {
            push_special(&mut tokens, &mut roles, &mut special_rows, 2);
        }
        let (cand_in, cand_ids) = self.candidate_concat(store, sample)?;
        let (cand_y, cand_cache) = self.candidate_proj.forward(store, &cand_in);
        for r in 0..n_cand {
            let row = roles.len();
            tokens.row_mut(row).copy_from_slice(cand_y.row(r));
            roles.push(Role::Cand);
            cand_rows.push(row);
        }

        let prefix = len - n_cand;
        let position_ids = (0..len).map(|i| i.min(prefix)).collect();
        let candidate_index = (0..len)
            .map(|i| (i >= prefix).then(|| i - prefix))
            .collect();
        Ok((
            TokenSequence {
                tokens,
                position_ids,
                roles,
                candidate_index,
            },
            TokenCache {
                history,
                candidates: (cand_cache, cand_ids),
                profile,
                hist_rows,
                prof_rows,
                cand_rows,
                special_rows,
            },
        ))
    }

    /// Routes `d_tokens` (gradient of the loss w.r.t. the token matrix) into
    /// projection parameters and embedding rows. Frozen tables are skipped.
    pub fn backward(&self, store: &ParamStore, cache: &TokenCache, d_tokens: &Mat, grads: &mut Grads) {
        let c = &self.config;
        if let Some(special) = self.tables.special {
            for &(row, which) in &cache.special_rows {
                scatter_row(grads, special, which, self.d_model, d_tokens.row(row));
            }
        }
        if let Some((pc, ids)) = &cache.history {
            let dy = d_tokens.select_rows(&cache.hist_rows);
            let din = self.history_proj.backward(store, pc, &dy, grads);
            self.scatter_history(grads, ids, &din);
        }
        for (f, ((pc, v), &row)) in cache.profile.iter().zip(&cache.prof_rows).enumerate() {
            let dy = d_tokens.select_rows(&[row]);
            let din = self.profile_proj[f].backward(store, pc, &dy, grads);
            scatter_row(grads, self.tables.profile[f], *v, c.profile_dim, &din.row(0)[..c.profile_dim]);
        }
        let (pc, ids) = &cache.candidates;
        let dy = d_tokens.select_rows(&cache.cand_rows);
        let din = self.candidate_proj.backward(store, pc, &dy, grads);
        for (r, &(item, cat)) in ids.iter().enumerate() {
            let row = din.row(r);
            scatter_row(grads, self.tables.item, item, c.item_dim, &row[..c.item_dim]);
            scatter_row(
                grads,
                self.tables.category,
                cat,
                c.category_dim,
                &row[c.item_dim..c.item_dim + c.category_dim],
            );
        }
    }

    fn scatter_history(&self, grads: &mut Grads, ids: &[HistoryIds], din: &Mat) {
        let c = &self.config;
        let t = &self.tables;
        for (r, h) in ids.iter().enumerate() {
            let row = din.row(r);
            let mut off = 0;
            for (table, idx, dim) in [
                (t.item, h.item, c.item_dim),
                (t.category, h.category, c.category_dim),
                (t.action, h.action, c.action_dim),
                (t.scene, h.scene, c.scene_dim),
                (t.time, h.time, c.time_dim),
            ] {
                scatter_row(grads, table, idx, dim, &row[off..off + dim]);
                off += dim;
            }
        }
    }

    /// Tokens for a pure click sequence (pre-training): optional BOS, then one
    /// token per event, positions `0..n`. Recency is measured from one second
    /// after the last event.
    pub fn tokenize_click_sequence(
        &self,
        store: &ParamStore,
        events: &[ItemEvent],
    ) -> Result<(TokenSequence, TokenCache)> {
        let reference = events.last().map_or(0, |e| e.timestamp + 1);
        let ids = events
            .iter()
            .map(|e| self.history_ids(e, reference))
            .collect::<Result<Vec<_>>>()?;
        let st = self.special_tokens();
        let len = events.len() + st as usize;
        let mut tokens = Mat::zeros(len, self.d_model);
        let mut roles = Vec::with_capacity(len);
        let mut special_rows = Vec::new();
        if st {
            let table = store.get(self.tables.special.unwrap());
            tokens.row_mut(0).copy_from_slice(table.row(0));
            roles.push(Role::Bos);
            special_rows.push((0, 0));
        }
        let concat = self.history_concat(store, &ids);
        let (y, cache) = self.history_proj.forward(store, &concat);
        let mut hist_rows = Vec::with_capacity(events.len());
        for r in 0..events.len() {
            let row = roles.len();
            tokens.row_mut(row).copy_from_slice(y.row(r));
            roles.push(Role::Hist);
            hist_rows.push(row);
        }
        let empty_cand = ProjCache {
            input: Mat::zeros(0, self.config.candidate_width()),
            pre_norm: Mat::zeros(0, self.d_model),
            rms: RmsCache { inv_rms: Vec::new() },
        };
        Ok((
            TokenSequence {
                tokens,
                position_ids: (0..len).collect(),
                roles,
                candidate_index: vec![None; len],
            },
            TokenCache {
                history: Some((cache, ids)),
                candidates: (empty_cand, Vec::new()),
                profile: Vec::new(),
                hist_rows,
                prof_rows: Vec::new(),
                cand_rows: Vec::new(),
                special_rows,
            },
        ))
    }
}

/// Appends per-group side-feature vectors to a sample. `values[g]` holds one
/// vector per candidate for candidate groups and exactly one vector for
/// profile groups. Groups absent from `groups` add no width at all.
pub fn attach_side_features(
    sample: &RequestSample,
    groups: &[SideFeatureGroup],
    values: &[Vec<Vec<f64>>],
) -> Result<RequestSample> {
    if groups.len() != values.len() {
        return Err(Error::Shape(format!(
            "{} groups but {} value sets",
            groups.len(),
            values.len()
        )));
    }
    let mut out = sample.clone();
    for (g, vals) in groups.iter().zip(values) {
        let expected_rows = match g.target {
            SideTarget::Candidate => sample.candidates.len(),
            SideTarget::Profile => 1,
        };
        if vals.len() != expected_rows {
            return Err(Error::Shape(format!(
                "group `{}` needs {expected_rows} vectors, got {}",
                g.name,
                vals.len()
            )));
        }
        if let Some(bad) = vals.iter().find(|v| v.len() != g.width) {
            return Err(Error::Shape(format!(
                "group `{}` declares width {} but got a vector of length {}",
                g.name,
                g.width,
                bad.len()
            )));
        }
        match g.target {
            SideTarget::Candidate => {
                for (c, v) in out.candidates.iter_mut().zip(vals) {
                    c.side_features.extend_from_slice(v);
                }
            }
            SideTarget::Profile => out.profile_features.extend_from_slice(&vals[0]),
        }
    }
    Ok(out)
}
