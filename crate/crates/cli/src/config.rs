//! Run configuration: one TOML file, `--set` overrides on top.

use serde::Serialize;
use sha2::{Digest, Sha256};

use sort_core::data::SynthConfig;
use sort_core::model::{ModelConfig, Toggles};
use sort_core::tokenizer::TokenizerConfig;
use sort_core::training::{merge_toml, resolve_model, resolve_section, PretrainConfig, TrainConfig};

const SECTIONS: [&str; 5] = ["data", "model", "tokenizer", "train", "pretrain"];

#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub tokenizer: TokenizerConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
}

/// `a.b.c=v` → `{a = {b = {c = v}}}`. The value is read as TOML and falls
/// back to a bare string.
fn override_table(spec: &str) -> Result<toml::Value, String> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| format!("override `{spec}` is not KEY=VALUE"))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut v = value;
    for part in key.trim().rsplit('.') {
        if part.is_empty() {
            return Err(format!("override `{spec}` has an empty key segment"));
        }
        let mut t = toml::Table::new();
        t.insert(part.to_string(), v);
        v = toml::Value::Table(t);
    }
    Ok(v)
}

impl RunConfig {
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, String> {
        let mut root = toml::Value::Table(toml::from_str(text).map_err(|e| format!("config: {e}"))?);
        for o in overrides {
            merge_toml(&mut root, &override_table(o)?);
        }
        let table = root.as_table().expect("table");
        for k in table.keys() {
            if k != "seed" && !SECTIONS.contains(&k.as_str()) {
                return Err(format!("unknown config section `{k}`"));
            }
        }
        let empty = toml::Value::Table(Default::default());
        let sec = |name: &str| table.get(name).unwrap_or(&empty);
        let seed = match table.get("seed") {
            None => 0,
            Some(v) => v
                .as_integer()
                .filter(|&s| s >= 0)
                .ok_or("seed must be a non-negative integer")? as u64,
        };
        let err = |e: sort_core::Error| e.to_string();
        let data: SynthConfig = resolve_section(SynthConfig::default(), &[sec("data")], "data").map_err(err)?;
        data.validate().map_err(err)?;
        let tokenizer: TokenizerConfig =
            resolve_section(TokenizerConfig::for_data(&data), &[sec("tokenizer")], "tokenizer").map_err(err)?;
        tokenizer.validate().map_err(err)?;
        Ok(Self {
            seed,
            model: resolve_model(&[sec("model")], "model").map_err(err)?,
            train: resolve_section(TrainConfig::default(), &[sec("train")], "train").map_err(err)?,
            pretrain: resolve_section(PretrainConfig::default(), &[sec("pretrain")], "pretrain").map_err(err)?,
            data,
            tokenizer,
        })
    }

    /// The run-level seed drives model init and every shuffle.
    pub fn sync_seed(&mut self) {
        self.train.seed = self.seed;
        self.pretrain.seed = self.seed;
    }

    /// Pre-training runs the same blocks as a plain causal model.
    pub fn pretrain_model(&self) -> ModelConfig {
        self.model.with_toggles(Toggles {
            special_tokens: false,
            local_attention: false,
            query_pruning: false,
            ..self.model.toggles
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// SHA-256 of the compact JSON rendering (object keys are sorted).
pub fn hash(v: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}
