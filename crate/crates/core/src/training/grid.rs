//! Experiment grids: a versioned TOML file naming a base model, data and
//! training config plus a list of cells that override any of them.
//!
//! ```toml
//! version = 1
//! [data]
//! n_requests = 2000
//! [train]
//! batch_size = 64
//! [model]
//! scale = "tiny"
//!
//! [[cells]]
//! name = "baseline"
//! baseline = true
//! model = { toggles = { special_tokens = false, moe = false } }
//!
//! [[cells]]
//! name = "window-64"
//! model = { window = 64 }
//! ```

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{composition, evaluate, train_rank, TrainConfig};
use crate::attention::flops::{flops_estimate, SeqComposition};
use crate::data::{default_boundary, generate_world, simulate_requests, split_train_eval, RequestSample, SynthConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelMode, Scale, SortModel, OBJECTIVES};
use crate::tokenizer::TokenizerConfig;

pub const GRID_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub name: String,
    #[serde(default)]
    pub baseline: bool,
    #[serde(default = "empty_table")]
    pub model: toml::Value,
    #[serde(default = "empty_table")]
    pub data: toml::Value,
    #[serde(default = "empty_table")]
    pub train: toml::Value,
}

fn empty_table() -> toml::Value {
    toml::Value::Table(Default::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub version: u32,
    #[serde(default = "empty_table")]
    pub data: toml::Value,
    #[serde(default = "empty_table")]
    pub train: toml::Value,
    #[serde(default = "empty_table")]
    pub model: toml::Value,
    pub cells: Vec<CellSpec>,
}

/// A fully resolved cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedCell {
    pub name: String,
    pub baseline: bool,
    pub model: ModelConfig,
    pub data: SynthConfig,
    pub train: TrainConfig,
}

/// Recursive table merge; non-table values in `over` replace those in `base`.
pub fn merge_toml(base: &mut toml::Value, over: &toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Serializes `start`, merges every layer onto it and deserializes the
/// result, rejecting unknown keys with their path.
pub fn resolve_section<T: Serialize + for<'de> Deserialize<'de>>(start: T, layers: &[&toml::Value], what: &str) -> Result<T> {
    let mut v = toml::Value::try_from(start).map_err(|e| Error::Config(format!("{what}: {e}")))?;
    for l in layers {
        merge_toml(&mut v, l);
    }
    let s = toml::to_string(&v).map_err(|e| Error::Config(format!("{what}: {e}")))?;
    let de = toml::Deserializer::new(&s);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Config(format!("{what}: {e}")))
}

/// Model config from layered overrides; the last `scale` key picks the
/// preset the overrides apply to.
pub fn resolve_model(layers: &[&toml::Value], what: &str) -> Result<ModelConfig> {
    let start = model_start(layers)?;
    let m: ModelConfig = resolve_section(start, layers, what)?;
    m.validate()?;
    Ok(m)
}

fn model_start(layers: &[&toml::Value]) -> Result<ModelConfig> {
    let mut scale = Scale::Small;
    for l in layers {
        if let Some(s) = l.get("scale") {
            scale = s
                .clone()
                .try_into()
                .map_err(|e| Error::Config(format!("model.scale: {e}")))?;
        }
    }
    Ok(ModelConfig::preset(scale))
}

impl GridSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: GridSpec = toml::from_str(text).map_err(|e| Error::Config(format!("grid spec: {e}")))?;
        if spec.version != GRID_VERSION {
            return Err(Error::Config(format!(
                "grid spec version {} unsupported (expected {GRID_VERSION})",
                spec.version
            )));
        }
        if spec.cells.is_empty() {
            return Err(Error::Config("grid spec has no cells".into()));
        }
        Ok(spec)
    }

    pub fn resolve_cell(&self, c: &CellSpec) -> Result<ResolvedCell> {
        Ok(ResolvedCell {
            name: c.name.clone(),
            baseline: c.baseline,
            model: resolve_model(&[&self.model, &c.model], &format!("cell {} model", c.name))?,
            data: resolve_section(SynthConfig::default(), &[&self.data, &c.data], &format!("cell {} data", c.name))?,
            train: resolve_section(TrainConfig::default(), &[&self.train, &c.train], &format!("cell {} train", c.name))?,
        })
    }

    pub fn resolve(&self) -> Result<Vec<ResolvedCell>> {
        self.cells.iter().map(|c| self.resolve_cell(c)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub cell: String,
    /// "ok" or the failure message.
    pub status: String,
    pub auc: [Option<f64>; 3],
    /// Absolute AUC difference to the baseline cell.
    pub imp: [Option<f64>; 3],
    pub block_params: usize,
    pub flops: f64,
    pub wall_seconds: f64,
}

impl GridRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

type Split = (Vec<RequestSample>, Vec<RequestSample>);

fn build_data(cfg: &SynthConfig) -> Result<Split> {
    let world = generate_world(cfg)?;
    let samples: Vec<RequestSample> = simulate_requests(&world, cfg)?.collect();
    split_train_eval(samples, default_boundary(cfg))
}

fn mean_comp(samples: &[RequestSample], st: bool) -> SeqComposition {
    let n = samples.len().max(1) as f64;
    let p = samples.iter().map(|s| composition(s, st).prefix_len).sum::<usize>() as f64 / n;
    let c = samples.iter().map(|s| s.candidates.len()).sum::<usize>() as f64 / n;
    SeqComposition::new(p.round() as usize, c.round().max(1.0) as usize)
}

fn run_cell(cell: &ResolvedCell, data: &Split) -> Result<GridRow> {
    let start = Instant::now();
    let (train, eval) = data;
    let mut model = SortModel::new(
        cell.model.clone(),
        TokenizerConfig::for_data(&cell.data),
        ModelMode::Rank,
        cell.train.seed,
    )?;
    train_rank(&mut model, train, &[], &cell.train)?;
    let m = evaluate(&model, eval)?;
    Ok(GridRow {
        cell: cell.name.clone(),
        status: "ok".into(),
        auc: m.auc,
        imp: [None; 3],
        block_params: model.block_param_count(),
        flops: flops_estimate(&cell.model, mean_comp(eval, cell.model.toggles.special_tokens)).total(),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Trains and evaluates every cell. A failing cell yields a row with its
/// error in `status`; the remaining cells still run. `progress` is called
/// after each cell.
pub fn run_experiment_grid(spec: &GridSpec, mut progress: impl FnMut(&GridRow)) -> Result<Vec<GridRow>> {
    let mut cache: HashMap<String, Result<Split>> = HashMap::new();
    let mut rows = Vec::with_capacity(spec.cells.len());
    for c in &spec.cells {
        let row = match spec.resolve_cell(c) {
            Err(e) => failed(&c.name, format!("config: {e}")),
            Ok(cell) => {
                let key = serde_json::to_string(&cell.data)?;
                let data = cache.entry(key).or_insert_with(|| build_data(&cell.data));
                match data.as_ref().map_err(|e| e.to_string()) {
                    Ok(d) => run_cell(&cell, d).unwrap_or_else(|e| failed(&c.name, e.to_string())),
                    Err(e) => failed(&c.name, format!("data: {e}")),
                }
            }
        };
        progress(&row);
        rows.push(row);
    }
    let base = spec.cells.iter().position(|c| c.baseline).unwrap_or(0);
    let base_auc = rows[base].auc;
    for r in &mut rows {
        for o in 0..3 {
            r.imp[o] = r.auc[o].zip(base_auc[o]).map(|(a, b)| a - b);
        }
    }
    Ok(rows)
}

fn failed(name: &str, msg: String) -> GridRow {
    GridRow {
        cell: name.to_string(),
        status: format!("failed: {}", msg.replace([',', '\n'], ";")),
        auc: [None; 3],
        imp: [None; 3],
        block_params: 0,
        flops: 0.0,
        wall_seconds: 0.0,
    }
}

pub fn grid_header() -> String {
    let mut h = vec!["cell".to_string(), "status".to_string()];
    for o in OBJECTIVES {
        h.push(format!("{o}_auc"));
        h.push(format!("{o}_imp"));
    }
    h.extend(["params".into(), "flops".into(), "wall_seconds".into()]);
    h.join(",")
}

pub fn write_grid_csv(rows: &[GridRow], mut out: impl Write) -> std::io::Result<()> {
    let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    writeln!(out, "{}", grid_header())?;
    for r in rows {
        let mut cols = vec![r.cell.clone(), r.status.clone()];
        for o in 0..3 {
            cols.push(f(r.auc[o]));
            cols.push(f(r.imp[o]));
        }
        cols.push(r.block_params.to_string());
        cols.push(format!("{:.0}", r.flops));
        cols.push(format!("{:.3}", r.wall_seconds));
        writeln!(out, "{}", cols.join(","))?;
    }
    Ok(())
}
