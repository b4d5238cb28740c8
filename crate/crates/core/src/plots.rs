//! Attention diagnostics: head-averaged logit heatmaps and logit-vs-distance
//! curves, written as CSV with a plain SVG rendering alongside.

use std::fmt::Write as _;
use std::io::Write;

use crate::data::RequestSample;
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, SortModel};
use crate::tokenizer::Role;

fn trace(model: &SortModel, sample: &RequestSample) -> Result<ForwardTrace> {
    let (seq, cache) = model.tokenizer.tokenize_sample(&model.store, sample)?;
    model.forward_sequence(&seq, cache, None)
}

fn check_layer(model: &SortModel, layer: usize) -> Result<()> {
    if layer >= model.blocks.len() {
        return Err(Error::Config(format!(
            "layer {layer} out of range (model has {} layers)",
            model.blocks.len()
        )));
    }
    Ok(())
}

/// Head-averaged pre-softmax logits of one layer. Masked entries are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub layer: usize,
    pub key_roles: Vec<Role>,
    pub query_rows: Vec<usize>,
    /// `query_rows.len() × key_roles.len()`, row-major.
    pub logits: Vec<Option<f64>>,
}

impl Heatmap {
    pub fn n_keys(&self) -> usize {
        self.key_roles.len()
    }

    pub fn get(&self, q: usize, k: usize) -> Option<f64> {
        self.logits[q * self.n_keys() + k]
    }

    /// Mean visible logit of every key column.
    pub fn column_means(&self) -> Vec<Option<f64>> {
        (0..self.n_keys())
            .map(|k| {
                let v: Vec<f64> = (0..self.query_rows.len()).filter_map(|q| self.get(q, k)).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect()
    }

    /// BOS column mean logit above the median of the other columns' means.
    /// `None` without a BOS token.
    pub fn bos_dominates(&self) -> Option<bool> {
        let bos = self.key_roles.iter().position(|&r| r == Role::Bos)?;
        let means = self.column_means();
        let bos_mean = means[bos]?;
        let mut rest: Vec<f64> = means
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != bos)
            .filter_map(|(_, m)| *m)
            .collect();
        if rest.is_empty() {
            return Some(true);
        }
        rest.sort_by(f64::total_cmp);
        let n = rest.len();
        let median = if n % 2 == 1 {
            rest[n / 2]
        } else {
            0.5 * (rest[n / 2 - 1] + rest[n / 2])
        };
        Some(bos_mean > median)
    }
}

pub fn attention_heatmap(model: &SortModel, sample: &RequestSample, layer: usize) -> Result<Heatmap> {
    check_layer(model, layer)?;
    let t = trace(model, sample)?;
    let b = &t.blocks[layer];
    let h = b.attn.logits.len() as f64;
    let (lq, lk) = (b.query_rows.len(), b.roles.len());
    let mut logits = vec![None; lq * lk];
    for q in 0..lq {
        for k in 0..lk {
            // a key is visible iff it received probability mass
            if b.attn.probs[0].get(q, k) > 0.0 {
                logits[q * lk + k] = Some(b.attn.logits.iter().map(|m| m.get(q, k)).sum::<f64>() / h);
            }
        }
    }
    Ok(Heatmap {
        layer,
        key_roles: b.roles.clone(),
        query_rows: b.query_rows.clone(),
        logits,
    })
}

fn role_name(r: Role) -> &'static str {
    match r {
        Role::Bos => "bos",
        Role::Hist => "hist",
        Role::Sep => "sep",
        Role::Prof => "profile",
        Role::Cand => "cand",
    }
}

/// Columns: layer, query, key, key_role, logit. Masked entries are omitted.
pub fn write_heatmap_csv(h: &Heatmap, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "layer,query,key,key_role,logit")?;
    for q in 0..h.query_rows.len() {
        for k in 0..h.n_keys() {
            if let Some(v) = h.get(q, k) {
                writeln!(out, "{},{},{},{},{:.9}", h.layer, h.query_rows[q], k, role_name(h.key_roles[k]), v)?;
            }
        }
    }
    Ok(())
}

pub fn heatmap_svg(h: &Heatmap) -> String {
    let cell = 6.0;
    let (nq, nk) = (h.query_rows.len(), h.n_keys());
    let (w, ht) = (nk as f64 * cell + 40.0, nq as f64 * cell + 40.0);
    let vals: Vec<f64> = h.logits.iter().flatten().copied().collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{ht}"><text x="4" y="14" font-size="11">layer {} (head-averaged logits)</text>"#,
        h.layer
    );
    for q in 0..nq {
        for k in 0..nk {
            let Some(v) = h.get(q, k) else { continue };
            let t = (v - lo) / span;
            let c = (255.0 * (1.0 - t)) as u8;
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{cell}" height="{cell}" fill="rgb(255,{c},{c})"/>"#,
                20.0 + k as f64 * cell,
                20.0 + q as f64 * cell
            );
        }
    }
    if let Some(bos) = h.key_roles.iter().position(|&r| r == Role::Bos) {
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="20" width="{cell}" height="{:.1}" fill="none" stroke="blue"/><text x="{:.1}" y="{:.1}" font-size="9" fill="blue">BOS</text>"#,
            20.0 + bos as f64 * cell,
            nq as f64 * cell,
            20.0 + bos as f64 * cell,
            ht - 6.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Per-layer logits averaged over heads and query rows at each distance
/// `|pos_q − pos_k|`, divided by the curve's largest magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitCurve {
    pub layer: usize,
    /// `(distance, normalized_logit)`, ascending distance.
    pub points: Vec<(usize, f64)>,
}

impl LogitCurve {
    /// `Σ |a_{i+1} − a_i|` over adjacent distances.
    pub fn total_variation(&self) -> f64 {
        total_variation(&self.points.iter().map(|p| p.1).collect::<Vec<_>>())
    }
}

pub fn total_variation(values: &[f64]) -> f64 {
    values.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}

pub fn qk_logit_curves(model: &SortModel, sample: &RequestSample) -> Result<Vec<LogitCurve>> {
    let t = trace(model, sample)?;
    Ok(t.blocks
        .iter()
        .enumerate()
        .map(|(layer, b)| {
            let max_d = b.positions.iter().max().copied().unwrap_or(0);
            let mut sum = vec![0.0; max_d + 1];
            let mut cnt = vec![0usize; max_d + 1];
            let h = b.attn.logits.len() as f64;
            for (q, &qr) in b.query_rows.iter().enumerate() {
                for k in 0..b.roles.len() {
                    if b.attn.probs[0].get(q, k) > 0.0 {
                        let d = b.positions[qr].abs_diff(b.positions[k]);
                        sum[d] += b.attn.logits.iter().map(|m| m.get(q, k)).sum::<f64>() / h;
                        cnt[d] += 1;
                    }
                }
            }
            let raw: Vec<(usize, f64)> = (0..=max_d)
                .filter(|&d| cnt[d] > 0)
                .map(|d| (d, sum[d] / cnt[d] as f64))
                .collect();
            let scale = raw.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
            let points = raw
                .into_iter()
                .map(|(d, v)| (d, if scale > 0.0 { v / scale } else { 0.0 }))
                .collect();
            LogitCurve { layer, points }
        })
        .collect())
}

pub fn write_curve_csv(curves: &[LogitCurve], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "layer,distance,normalized_logit")?;
    for c in curves {
        for (d, v) in &c.points {
            writeln!(out, "{},{},{:.9}", c.layer, d, v)?;
        }
    }
    Ok(())
}

pub fn curves_svg(curves: &[LogitCurve]) -> String {
    let (w, h, pad) = (480.0, 240.0, 30.0);
    let max_d = curves
        .iter()
        .flat_map(|c| c.points.last().map(|p| p.0))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="gray"/>"#,
        h / 2.0,
        w - pad,
        h / 2.0
    );
    for (i, c) in curves.iter().enumerate() {
        let pts: Vec<String> = c
            .points
            .iter()
            .map(|&(d, v)| {
                format!(
                    "{:.1},{:.1}",
                    pad + d as f64 / max_d * (w - 2.0 * pad),
                    h / 2.0 - v * (h / 2.0 - pad)
                )
            })
            .collect();
        let col = colors[i % colors.len()];
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{col}" points="{}"/><text x="{:.1}" y="{:.1}" font-size="10" fill="{col}">layer {}</text>"#,
            pts.join(" "),
            w - 70.0,
            14.0 + 12.0 * i as f64,
            c.layer
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_world, simulate_requests, SynthConfig};
    use crate::model::{ModelConfig, ModelMode, Scale};
    use crate::tokenizer::TokenizerConfig;

    fn setup() -> (SortModel, RequestSample) {
        let cfg = SynthConfig {
            n_users: 20,
            n_items: 30,
            n_categories: 3,
            n_requests: 30,
            history_max: 12,
            warmup_clicks_max: 8,
            profile_vocab: vec![3],
            ..SynthConfig::default()
        };
        let w = generate_world(&cfg).unwrap();
        let s = simulate_requests(&w, &cfg).unwrap().last().unwrap();
        let m = SortModel::new(
            ModelConfig::preset(Scale::Tiny),
            TokenizerConfig::for_data(&cfg),
            ModelMode::Rank,
            0,
        )
        .unwrap();
        (m, s)
    }

    #[test]
    fn layer_out_of_range() {
        let (m, s) = setup();
        assert!(matches!(attention_heatmap(&m, &s, 2), Err(Error::Config(_))));
    }

    #[test]
    fn heatmap_is_deterministic_and_annotated() {
        let (m, s) = setup();
        let a = attention_heatmap(&m, &s, 0).unwrap();
        let b = attention_heatmap(&m, &s, 0).unwrap();
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        write_heatmap_csv(&a, &mut ca).unwrap();
        write_heatmap_csv(&b, &mut cb).unwrap();
        assert_eq!(ca, cb);
        let text = String::from_utf8(ca).unwrap();
        assert!(text.lines().nth(1).unwrap().contains(",bos,"));
        assert!(heatmap_svg(&a).contains("BOS"));
    }

    #[test]
    fn curve_schema_and_normalization() {
        let (m, s) = setup();
        let curves = qk_logit_curves(&m, &s).unwrap();
        assert_eq!(curves.len(), 2);
        let mut buf = Vec::new();
        write_curve_csv(&curves, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "layer,distance,normalized_logit");
        for c in &curves {
            let m = c.points.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
            assert!((m - 1.0).abs() < 1e-12);
        }
        assert!(curves_svg(&curves).starts_with("<svg"));
    }

    #[test]
    fn total_variation_hand_case() {
        assert_eq!(total_variation(&[1.0, 1.0, 1.0]), 0.0);
        assert_eq!(total_variation(&[0.0, 1.0, -1.0]), 3.0);
    }
}
