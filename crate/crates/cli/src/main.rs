//! `sort` command suite.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime failure,
//! 3 `eval --check` failure.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use sort_core::attention::{blockwise_masked_attention, build_mask, dense_masked_attention, MaskSpec, Matrix};
use sort_core::data::{default_boundary, generate_world, read_dataset, simulate_requests, split_train_eval, write_dataset};
use sort_core::model::checkpoint::{load_checkpoint, save_checkpoint};
use sort_core::model::{transfer_sparse, ModelMode, SortModel};
use sort_core::plots;
use sort_core::tokenizer::Role;
use sort_core::training::{
    click_sequences, evaluate, next_item_recall, next_item_tasks, popularity_recall, pretrain, run_experiment_grid,
    train_rank, write_grid_csv, write_metrics_csv, GridSpec, PopularityBaseline,
};
use sort_core::Error;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "sort", version, about = "Request-centric ranking transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// TOML run config (sections: data, model, tokenizer, train, pretrain).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.batch_size=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for model init and shuffling (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic request log and split it into train/eval files.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Next-item pre-training on click sequences from the train split.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Directory holding train.jsonl / eval.jsonl.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a ranking model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Pre-trained checkpoint whose item table initializes the model.
        #[arg(long)]
        init_from: Option<PathBuf>,
        /// Freeze the transferred item table.
        #[arg(long, requires = "init_from")]
        freeze: bool,
    },
    /// Evaluate a ranking checkpoint on the eval split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Exit 3 unless click-AUC beats the popularity baseline by `--margin`.
        #[arg(long)]
        check: bool,
        #[arg(long, default_value_t = 0.05)]
        margin: f64,
    },
    /// Run an experiment grid spec and write a results table.
    Grid {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Dense vs block-wise masked attention timing and agreement.
    BenchAttn {
        #[arg(long, short)]
        out: PathBuf,
        /// Comma-separated `L:W` shapes; W = 0 means full causal.
        #[arg(long, default_value = "256:64,1024:256,4096:256")]
        shapes: String,
        #[arg(long, default_value_t = 64)]
        block: usize,
        #[arg(long, default_value_t = 64)]
        head_dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Emit attention heatmap or logit-curve CSV + SVG from a checkpoint.
    Plot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotKind,
        /// Layer for the heatmap.
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Index of the eval request to visualize (default: longest history).
        #[arg(long)]
        sample: Option<usize>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum PlotKind {
    Heatmap,
    Curve,
}

enum Failure {
    Config(String),
    Runtime(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Check(m)) => {
            eprintln!("check failed: {m}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::GenData { common } => gen_data(&common),
        Command::Pretrain { common, data } => run_pretrain(&common, &data),
        Command::Train {
            common,
            data,
            init_from,
            freeze,
        } => run_train(&common, &data, init_from.as_deref(), freeze),
        Command::Eval {
            checkpoint,
            data,
            out,
            check,
            margin,
        } => run_eval(&checkpoint, &data, &out, check, margin),
        Command::Grid { spec, out } => run_grid(&spec, &out),
        Command::BenchAttn {
            out,
            shapes,
            block,
            head_dim,
            seed,
        } => bench_attn(&out, &shapes, block, head_dim, seed),
        Command::Plot {
            checkpoint,
            data,
            out,
            kind,
            layer,
            sample,
        } => run_plot(&checkpoint, &data, &out, kind, layer, sample),
    }
}

fn load(common: &Common) -> Result<RunConfig, Failure> {
    let text = match &common.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut cfg = RunConfig::parse(&text, &common.set).map_err(Failure::Config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.sync_seed();
    fs::create_dir_all(&common.out)?;
    Ok(cfg)
}

fn write_manifest(out: &Path, command: &str, config: serde_json::Value, seed: u64, extra: serde_json::Value) -> Outcome {
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config_hash": config::hash(&config),
        "config": config,
        "details": extra,
    });
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn read_split(dir: &Path) -> Result<(Vec<sort_core::data::RequestSample>, Vec<sort_core::data::RequestSample>), Failure> {
    Ok((read_dataset(&dir.join("train.jsonl"))?, read_dataset(&dir.join("eval.jsonl"))?))
}

fn gen_data(common: &Common) -> Outcome {
    let cfg = load(common)?;
    let world = generate_world(&cfg.data)?;
    let samples = simulate_requests(&world, &cfg.data)?.collect();
    let (train, eval) = split_train_eval(samples, default_boundary(&cfg.data))?;
    let n_train = write_dataset(&train, &common.out.join("train.jsonl"))?;
    let n_eval = write_dataset(&eval, &common.out.join("eval.jsonl"))?;
    println!("wrote {n_train} train and {n_eval} eval requests to {}", common.out.display());
    write_manifest(
        &common.out,
        "gen-data",
        cfg.to_json(),
        cfg.seed,
        json!({"train_requests": n_train, "eval_requests": n_eval}),
    )
}

fn run_pretrain(common: &Common, data: &Path) -> Outcome {
    let cfg = load(common)?;
    let (train, eval) = read_split(data)?;
    let mut model = SortModel::new(cfg.pretrain_model(), cfg.tokenizer.clone(), ModelMode::Pretrain, cfg.seed)?;
    let seqs = click_sequences(&train, cfg.pretrain.max_len);
    let rows = pretrain(&mut model, &seqs, &cfg.pretrain)?;
    let tasks = next_item_tasks(&eval, cfg.pretrain.max_len);
    let recall = next_item_recall(&model, &tasks, 10)?;
    let pop = popularity_recall(&train, &tasks, 10);
    save_checkpoint(&model, &common.out.join("pretrain.ckpt"))?;
    write_metrics_csv(&rows, fs::File::create(common.out.join("metrics.csv"))?)?;
    println!("next-item recall@10 {recall:.4} (popularity {pop:.4}) over {} tasks", tasks.len());
    write_manifest(
        &common.out,
        "pretrain",
        cfg.to_json(),
        cfg.seed,
        json!({"data": data, "sequences": seqs.len(), "recall_at_10": recall, "popularity_recall_at_10": pop}),
    )
}

fn run_train(common: &Common, data: &Path, init_from: Option<&Path>, freeze: bool) -> Outcome {
    let cfg = load(common)?;
    let (train, eval) = read_split(data)?;
    let mut model = SortModel::new(cfg.model.clone(), cfg.tokenizer.clone(), ModelMode::Rank, cfg.seed)?;
    if let Some(p) = init_from {
        let pre = load_checkpoint(p)?;
        transfer_sparse(&pre, &mut model, freeze)?;
    }
    let start = Instant::now();
    let report = match train_rank(&mut model, &train, &eval, &cfg.train) {
        Err(e @ Error::Diverged { .. }) => {
            save_checkpoint(&model, &common.out.join("last_good.ckpt"))?;
            return Err(Failure::Runtime(format!("{e}; last good parameters saved to last_good.ckpt")));
        }
        other => other?,
    };
    save_checkpoint(&model, &common.out.join("model.ckpt"))?;
    write_metrics_csv(&report.timeline, fs::File::create(common.out.join("metrics.csv"))?)?;
    let pop = PopularityBaseline::fit(&train).click_auc(&eval);
    let last = report.epoch_eval.last();
    println!(
        "trained {} steps in {:.1}s; eval click-AUC {} (popularity {})",
        report.steps,
        start.elapsed().as_secs_f64(),
        fmt_opt(last.and_then(|m| m.auc[0])),
        fmt_opt(pop)
    );
    write_manifest(
        &common.out,
        "train",
        cfg.to_json(),
        cfg.seed,
        json!({
            "data": data,
            "init_from": init_from,
            "freeze": freeze,
            "steps": report.steps,
            "eval": last,
            "popularity_click_auc": pop,
            "params": model.param_count(),
            "block_params": model.block_param_count(),
        }),
    )
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("undefined".into(), |x| format!("{x:.4}"))
}

fn run_eval(ckpt: &Path, data: &Path, out: &Path, check: bool, margin: f64) -> Outcome {
    fs::create_dir_all(out)?;
    let model = load_checkpoint(ckpt)?;
    if model.mode != ModelMode::Rank {
        return Err(Failure::Config("eval needs a ranking checkpoint".into()));
    }
    let (train, eval) = read_split(data)?;
    let m = evaluate(&model, &eval)?;
    let pop = PopularityBaseline::fit(&train).click_auc(&eval);
    for (o, name) in sort_core::model::OBJECTIVES.iter().enumerate() {
        println!("{name}_auc {}", fmt_opt(m.auc[o]));
    }
    println!("popularity_click_auc {}", fmt_opt(pop));
    let config = json!({"checkpoint": ckpt, "data": data, "model_config": model.config});
    write_manifest(out, "eval", config, 0, json!({"metrics": m, "popularity_click_auc": pop}))?;
    if check {
        match (m.auc[0], pop) {
            (Some(a), Some(p)) if a >= p + margin => {}
            (a, p) => {
                return Err(Failure::Check(format!(
                    "click-AUC {} vs popularity {} + {margin}",
                    fmt_opt(a),
                    fmt_opt(p)
                )))
            }
        }
    }
    Ok(())
}

fn run_grid(spec_path: &Path, out: &Path) -> Outcome {
    let text = fs::read_to_string(spec_path).map_err(|e| Failure::Config(format!("{}: {e}", spec_path.display())))?;
    let spec = GridSpec::parse(&text)?;
    fs::create_dir_all(out)?;
    let rows = run_experiment_grid(&spec, |r| eprintln!("cell {}: {}", r.cell, r.status))?;
    write_grid_csv(&rows, fs::File::create(out.join("results.csv"))?)?;
    let failed = rows.iter().filter(|r| !r.ok()).count();
    println!("{} cells, {failed} failed; results in {}", rows.len(), out.join("results.csv").display());
    let config = serde_json::to_value(&spec).map_err(|e| Failure::Runtime(e.to_string()))?;
    write_manifest(out, "grid", config, 0, json!({"spec": spec_path, "cells": rows.len(), "failed": failed}))
}

fn parse_shapes(s: &str) -> Result<Vec<(usize, usize)>, Failure> {
    s.split(',')
        .map(|p| {
            let (l, w) = p
                .trim()
                .split_once(':')
                .ok_or_else(|| Failure::Config(format!("shape `{p}` is not L:W")))?;
            let parse = |x: &str| {
                x.trim()
                    .parse::<usize>()
                    .map_err(|e| Failure::Config(format!("shape `{p}`: {e}")))
            };
            let (l, w) = (parse(l)?, parse(w)?);
            if l == 0 {
                return Err(Failure::Config(format!("shape `{p}`: L must be >= 1")));
            }
            Ok((l, w))
        })
        .collect()
}

fn bench_attn(out: &Path, shapes: &str, block: usize, head_dim: usize, seed: u64) -> Outcome {
    use rand::{Rng, SeedableRng};
    if block == 0 || head_dim == 0 {
        return Err(Failure::Config("block and head_dim must be >= 1".into()));
    }
    let shapes = parse_shapes(shapes)?;
    fs::create_dir_all(out)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut csv = String::from("l,window,block,dense_ms,blockwise_ms,skipped_fraction,max_abs_diff\n");
    for (l, w) in shapes {
        let spec = MaskSpec {
            l_q: l,
            l_kv: l,
            window: (w > 0).then_some(w),
            full_attention_suffix: 0,
        };
        let mask = build_mask(&spec, &vec![Role::Hist; l], &(0..l).collect::<Vec<_>>())?;
        let mut rand_mat = || Matrix::from_vec(l, head_dim, (0..l * head_dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let (q, k, v) = (rand_mat(), rand_mat(), rand_mat());
        let scale = 1.0 / (head_dim as f64).sqrt();
        let t = Instant::now();
        let dense = dense_masked_attention(&q, &k, &v, &mask, scale);
        let dense_ms = t.elapsed().as_secs_f64() * 1e3;
        let t = Instant::now();
        let (bw, stats) = blockwise_masked_attention(&q, &k, &v, &mask, scale, block);
        let bw_ms = t.elapsed().as_secs_f64() * 1e3;
        let line = format!(
            "{l},{w},{block},{dense_ms:.3},{bw_ms:.3},{:.6},{:.3e}\n",
            stats.skipped_fraction(),
            dense.max_abs_diff(&bw)
        );
        print!("{line}");
        csv.push_str(&line);
    }
    fs::write(out.join("bench_attn.csv"), csv)?;
    write_manifest(
        out,
        "bench-attn",
        json!({"block": block, "head_dim": head_dim}),
        seed,
        json!({}),
    )
}

fn run_plot(ckpt: &Path, data: &Path, out: &Path, kind: PlotKind, layer: usize, sample: Option<usize>) -> Outcome {
    fs::create_dir_all(out)?;
    let model = load_checkpoint(ckpt)?;
    if model.mode != ModelMode::Rank {
        return Err(Failure::Config("plots need a ranking checkpoint".into()));
    }
    let eval = read_dataset(&data.join("eval.jsonl"))?;
    let idx = match sample {
        Some(i) if i < eval.len() => i,
        Some(i) => return Err(Failure::Config(format!("sample {i} out of range ({} eval requests)", eval.len()))),
        None => (0..eval.len())
            .max_by_key(|&i| (eval[i].history.len(), std::cmp::Reverse(i)))
            .ok_or_else(|| Failure::Runtime("eval split is empty".into()))?,
    };
    let s = &eval[idx];
    let name = match kind {
        PlotKind::Heatmap => {
            let h = plots::attention_heatmap(&model, s, layer)?;
            let stem = format!("heatmap_layer{layer}");
            plots::write_heatmap_csv(&h, fs::File::create(out.join(format!("{stem}.csv")))?)?;
            fs::write(out.join(format!("{stem}.svg")), plots::heatmap_svg(&h))?;
            println!("bos column dominant: {:?}", h.bos_dominates());
            stem
        }
        PlotKind::Curve => {
            let c = plots::qk_logit_curves(&model, s)?;
            plots::write_curve_csv(&c, fs::File::create(out.join("qk_curve.csv"))?)?;
            fs::write(out.join("qk_curve.svg"), plots::curves_svg(&c))?;
            for x in &c {
                println!("layer {} total variation {:.4}", x.layer, x.total_variation());
            }
            "qk_curve".to_string()
        }
    };
    let config = json!({"checkpoint": ckpt, "data": data, "kind": format!("{kind:?}"), "layer": layer, "sample": idx});
    write_manifest(out, "plot", config, 0, json!({"output": name}))
}
