//! Optimizer, metrics, the ranking and pre-training loops and the
//! experiment-grid driver.

pub mod grid;
pub mod metrics;
pub mod optim;

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::flops::{flops_estimate, SeqComposition};
use crate::data::{ActionType, ItemEvent, RequestSample};
use crate::error::{Error, Result};
use crate::model::{bce_with_logits, label_matrix, FfnParams, SortModel, OBJECTIVES};
use crate::moe::{load_max_over_mean, update_balance};

pub use grid::{merge_toml, resolve_model, resolve_section, run_experiment_grid, write_grid_csv, GridRow, GridSpec};
pub use metrics::{compute_auc, compute_gauc};
pub use optim::{adamw_step, AdamW, OptimState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Requests per optimizer step.
    pub batch_size: usize,
    pub optimizer: AdamW,
    pub seed: u64,
    /// Emit a train-loss row every this many steps.
    pub log_every: usize,
    /// Also evaluate every this many steps (0 = end of each epoch only).
    pub eval_every: usize,
    /// Cap on steps per run (0 = unlimited).
    pub max_steps: usize,
    /// Number of train requests scored for the train-side AUC (0 = none).
    pub train_eval_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 256,
            optimizer: AdamW::default(),
            seed: 0,
            log_every: 50,
            eval_every: 0,
            max_steps: 0,
            train_eval_size: 0,
        }
    }
}

/// One line of the metrics timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub split: String,
    pub objective: String,
    pub auc: Option<f64>,
    pub loss: f64,
    pub flops: f64,
    pub load_max_over_mean: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,split,objective,auc,loss,flops,load_max_over_mean";

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

pub fn write_metrics_csv(rows: &[MetricRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{:.6},{:.0},{}",
            r.step,
            r.split,
            r.objective,
            opt(r.auc),
            r.loss,
            r.flops,
            opt(r.load_max_over_mean)
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Global AUC per objective; `None` when a class is missing.
    pub auc: [Option<f64>; 3],
    pub loss: f64,
    pub n_impressions: usize,
}

impl EvalMetrics {
    pub fn click_auc(&self) -> f64 {
        self.auc[0].unwrap_or(f64::NAN)
    }
}

/// Scores every candidate and computes per-objective global AUC and mean loss.
pub fn evaluate(model: &SortModel, samples: &[RequestSample]) -> Result<EvalMetrics> {
    let mut scores: [Vec<f64>; 3] = Default::default();
    let mut labels: [Vec<bool>; 3] = Default::default();
    let mut loss = 0.0;
    for s in samples {
        let (out, _, _) = model.rank_forward(s, None)?;
        let y = label_matrix(s);
        loss += bce_with_logits(&out.logits, &y, &model.config.objective_weights).0;
        for r in 0..out.probs.rows {
            for o in 0..3 {
                scores[o].push(out.logits.get(r, o));
                labels[o].push(y.get(r, o) > 0.5);
            }
        }
    }
    Ok(EvalMetrics {
        auc: [0, 1, 2].map(|o| compute_auc(&scores[o], &labels[o])),
        loss: loss / samples.len().max(1) as f64,
        n_impressions: scores[0].len(),
    })
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub timeline: Vec<MetricRow>,
    /// Eval metrics after each epoch.
    pub epoch_eval: Vec<EvalMetrics>,
    /// Train-subset metrics after each epoch (when `train_eval_size > 0`).
    pub epoch_train: Vec<EvalMetrics>,
    /// `(step, max/mean expert load)` per step, averaged over MoE blocks.
    pub load_trajectory: Vec<(usize, f64)>,
    pub steps: usize,
    pub wall_seconds: f64,
}

pub fn composition(sample: &RequestSample, special_tokens: bool) -> SeqComposition {
    let prefix = sample.history.len() + sample.user_profile.len() + if special_tokens { 3 } else { 0 };
    SeqComposition::new(prefix, sample.candidates.len())
}

fn moe_blocks(model: &SortModel) -> usize {
    model.blocks.iter().filter(|b| matches!(b.ffn, FfnParams::Moe(_))).count()
}

fn eval_rows(step: usize, split: &str, m: &EvalMetrics, flops: f64) -> Vec<MetricRow> {
    (0..3)
        .map(|o| MetricRow {
            step,
            split: split.into(),
            objective: OBJECTIVES[o].into(),
            auc: m.auc[o],
            loss: m.loss,
            flops,
            load_max_over_mean: None,
        })
        .collect()
}

/// Mini-batch AdamW over request-centric samples. On a non-finite loss or
/// gradient the parameters are restored to the last good step and
/// [`Error::Diverged`] is returned.
pub fn train_rank(
    model: &mut SortModel,
    train: &[RequestSample],
    eval: &[RequestSample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let start = Instant::now();
    let mut report = TrainReport::default();
    let mut state = OptimState::new(&model.store);
    let st = model.config.toggles.special_tokens;
    let mean_flops = |batch: &[&RequestSample]| {
        let n = batch.len().max(1) as f64;
        let prefix = batch.iter().map(|s| composition(s, st).prefix_len).sum::<usize>() as f64 / n;
        let cands = batch.iter().map(|s| s.candidates.len()).sum::<usize>() as f64 / n;
        flops_estimate(
            &model.config,
            SeqComposition::new(prefix.round() as usize, cands.round().max(1.0) as usize),
        )
        .total()
    };
    let train_probe: Vec<RequestSample> = train.iter().take(cfg.train_eval_size).cloned().collect();
    let mut step = 0;
    let n_moe = moe_blocks(model);
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64)));
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'epochs;
            }
            let batch: Vec<&RequestSample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut grads = model.store.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            let mut loads: Vec<Vec<usize>> = Vec::new();
            for s in &batch {
                let (l, _, trace) = model.rank_loss_and_grad(s, None, &mut grads, scale)?;
                loss += l * scale;
                let mut k = 0;
                for b in &trace.blocks {
                    if let Some(ld) = b.expert_load() {
                        if loads.len() <= k {
                            loads.push(vec![0; ld.len()]);
                        }
                        loads[k].iter_mut().zip(ld).for_each(|(a, b)| *a += b);
                        k += 1;
                    }
                }
            }
            step += 1;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            let snapshot = model.store.clone();
            if let Err(e) = adamw_step(&mut model.store, &grads, &mut state, &cfg.optimizer) {
                model.store = snapshot;
                return match e {
                    Error::NonFinite(_) => Err(Error::Diverged { step, loss: f64::NAN }),
                    other => Err(other),
                };
            }
            if !model.store.entries().iter().all(|e| e.value.is_finite()) {
                model.store = snapshot;
                return Err(Error::Diverged { step, loss });
            }
            let mut ratio = None;
            if n_moe > 0 {
                let moe_params: Vec<_> = model
                    .blocks
                    .iter()
                    .filter_map(|b| match &b.ffn {
                        FfnParams::Moe(p) => Some(p.clone()),
                        FfnParams::Dense(_) => None,
                    })
                    .collect();
                for (p, ld) in moe_params.iter().zip(&loads) {
                    update_balance(&mut model.store, p, ld);
                }
                let r = loads.iter().map(|l| load_max_over_mean(l)).sum::<f64>() / loads.len() as f64;
                report.load_trajectory.push((step, r));
                ratio = Some(r);
            }
            if cfg.log_every > 0 && step % cfg.log_every == 0 {
                report.timeline.push(MetricRow {
                    step,
                    split: "train".into(),
                    objective: "total".into(),
                    auc: None,
                    loss,
                    flops: mean_flops(&batch),
                    load_max_over_mean: ratio,
                });
            }
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 && !eval.is_empty() {
                let m = evaluate(model, eval)?;
                let f = mean_flops(&eval.iter().collect::<Vec<_>>());
                report.timeline.extend(eval_rows(step, "eval", &m, f));
            }
        }
        if !eval.is_empty() {
            let m = evaluate(model, eval)?;
            let f = mean_flops(&eval.iter().collect::<Vec<_>>());
            report.timeline.extend(eval_rows(step, "eval", &m, f));
            report.epoch_eval.push(m);
        }
        if !train_probe.is_empty() {
            let m = evaluate(model, &train_probe)?;
            report.timeline.extend(eval_rows(step, "train", &m, 0.0));
            report.epoch_train.push(m);
        }
    }
    report.steps = step;
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Item train CTR with additive smoothing toward the global CTR.
#[derive(Debug, Clone)]
pub struct PopularityBaseline {
    ctr: HashMap<u32, f64>,
    prior: f64,
}

impl PopularityBaseline {
    pub fn fit(train: &[RequestSample]) -> Self {
        let mut counts: HashMap<u32, (f64, f64)> = HashMap::new();
        let (mut clicks, mut imps) = (0.0, 0.0);
        for s in train {
            for c in &s.candidates {
                let e = counts.entry(c.item_id).or_default();
                e.0 += c.labels.click as f64;
                e.1 += 1.0;
                clicks += c.labels.click as f64;
                imps += 1.0;
            }
        }
        let prior = if imps > 0.0 { clicks / imps } else { 0.0 };
        let alpha = 10.0;
        let ctr = counts
            .into_iter()
            .map(|(k, (c, n))| (k, (c + alpha * prior) / (n + alpha)))
            .collect();
        Self { ctr, prior }
    }

    pub fn score(&self, item: u32) -> f64 {
        self.ctr.get(&item).copied().unwrap_or(self.prior)
    }

    pub fn click_auc(&self, eval: &[RequestSample]) -> Option<f64> {
        let (s, l): (Vec<f64>, Vec<bool>) = eval
            .iter()
            .flat_map(|r| r.candidates.iter())
            .map(|c| (self.score(c.item_id), c.labels.click == 1))
            .unzip();
        compute_auc(&s, &l)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamW,
    pub seed: u64,
    /// Longest click sequence fed to the model.
    pub max_len: usize,
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 64,
            optimizer: AdamW::default(),
            seed: 0,
            max_len: 64,
            log_every: 50,
        }
    }
}

/// One click sequence per user: the history of their latest request plus the
/// candidates they clicked there, in time order.
pub fn click_sequences(samples: &[RequestSample], max_len: usize) -> Vec<Vec<ItemEvent>> {
    let mut latest: HashMap<u32, &RequestSample> = HashMap::new();
    for s in samples {
        let e = latest.entry(s.user_id).or_insert(s);
        if s.timestamp > e.timestamp {
            *e = s;
        }
    }
    let mut users: Vec<_> = latest.keys().copied().collect();
    users.sort_unstable();
    users
        .into_iter()
        .map(|u| {
            let s = latest[&u];
            let mut seq = s.history.clone();
            for c in s.candidates.iter().filter(|c| c.labels.click == 1) {
                seq.push(ItemEvent {
                    item_id: c.item_id,
                    category: c.category,
                    action: ActionType::Click,
                    timestamp: s.timestamp,
                    scene_id: seq.last().map_or(0, |e| e.scene_id),
                });
            }
            let skip = seq.len().saturating_sub(max_len);
            seq.split_off(skip)
        })
        .filter(|s| s.len() >= 2)
        .collect()
}

/// Causal next-item pre-training. Returns the loss timeline.
pub fn pretrain(model: &mut SortModel, sequences: &[Vec<ItemEvent>], cfg: &PretrainConfig) -> Result<Vec<MetricRow>> {
    let mut state = OptimState::new(&model.store);
    let mut rows = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64)));
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut grads = model.store.zero_grads();
            let scale = 1.0 / chunk.len() as f64;
            let mut loss = 0.0;
            for &i in chunk {
                let seq = &sequences[i];
                let seq = &seq[seq.len().saturating_sub(cfg.max_len)..];
                if let Some(l) = model.pretrain_loss_and_grad(seq, &mut grads, scale)? {
                    loss += l * scale;
                }
            }
            step += 1;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            adamw_step(&mut model.store, &grads, &mut state, &cfg.optimizer)?;
            if cfg.log_every > 0 && step % cfg.log_every == 0 {
                rows.push(MetricRow {
                    step,
                    split: "pretrain".into(),
                    objective: "next_item".into(),
                    auc: None,
                    loss,
                    flops: 0.0,
                    load_max_over_mean: None,
                });
            }
        }
    }
    Ok(rows)
}

/// Held-out next-click tasks: context = request history, target = each item
/// clicked in that request.
pub fn next_item_tasks(samples: &[RequestSample], max_len: usize) -> Vec<(Vec<ItemEvent>, u32)> {
    samples
        .iter()
        .filter(|s| s.history.len() >= 2)
        .flat_map(|s| {
            let ctx = s.history[s.history.len().saturating_sub(max_len)..].to_vec();
            s.candidates
                .iter()
                .filter(|c| c.labels.click == 1)
                .map(move |c| (ctx.clone(), c.item_id))
        })
        .collect()
}

/// Fraction of tasks whose target is among the model's top-`k` next items.
pub fn next_item_recall(model: &SortModel, tasks: &[(Vec<ItemEvent>, u32)], k: usize) -> Result<f64> {
    let mut hits = 0usize;
    for (ctx, target) in tasks {
        let (logits, _) = model.pretrain_forward(ctx)?;
        let last = logits.row(logits.rows - 1);
        let t = last[*target as usize];
        let better = last.iter().filter(|&&v| v > t).count();
        if better < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / tasks.len().max(1) as f64)
}

/// Same metric for a fixed top-`k` list of the most-clicked train items.
pub fn popularity_recall(train: &[RequestSample], tasks: &[(Vec<ItemEvent>, u32)], k: usize) -> f64 {
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for s in train {
        for e in &s.history {
            *counts.entry(e.item_id).or_default() += 1;
        }
        for c in s.candidates.iter().filter(|c| c.labels.click == 1) {
            *counts.entry(c.item_id).or_default() += 1;
        }
    }
    let mut items: Vec<(u32, usize)> = counts.into_iter().collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let top: Vec<u32> = items.into_iter().take(k).map(|x| x.0).collect();
    let hits = tasks.iter().filter(|(_, t)| top.contains(t)).count();
    hits as f64 / tasks.len().max(1) as f64
}
