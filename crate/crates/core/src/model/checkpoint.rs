//! Binary checkpoint container.
//!
//! ```text
//! magic   8 bytes  "SORTCKPT"
//! version u32 LE   (currently 1)
//! hlen    u64 LE   header length in bytes
//! header  hlen     UTF-8 JSON: {model_config, tokenizer_config, mode, entries}
//! data             every entry's values as f64 LE, row-major, in header order
//! ```
//!
//! `entries` lists `{name, rows, cols, kind}` with kind ∈ {trainable, frozen,
//! buffer}, so freeze flags survive a round trip.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelMode, SortModel};
use crate::error::{Error, Result};
use crate::params::ParamKind;
use crate::tokenizer::TokenizerConfig;

pub const MAGIC: &[u8; 8] = b"SORTCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    rows: usize,
    cols: usize,
    kind: ParamKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    tokenizer_config: TokenizerConfig,
    mode: ModelMode,
    entries: Vec<EntryMeta>,
}

pub fn save_checkpoint(model: &SortModel, path: &Path) -> Result<()> {
    let header = Header {
        model_config: model.config.clone(),
        tokenizer_config: model.tokenizer.config.clone(),
        mode: model.mode,
        entries: model
            .store
            .entries()
            .iter()
            .map(|e| EntryMeta {
                name: e.name.clone(),
                rows: e.value.rows,
                cols: e.value.cols,
                kind: e.kind,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for e in model.store.entries() {
        for v in &e.value.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<SortModel> {
    let fmt = |m: String| Error::Format {
        path: path.to_path_buf(),
        message: m,
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(fmt("not a checkpoint (bad magic)".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(fmt(format!("unsupported checkpoint version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let hlen = u64::from_le_bytes(b8) as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf)?;
    let header: Header = serde_json::from_slice(&hbuf)?;
    let mut model = SortModel::new(header.model_config, header.tokenizer_config, header.mode, 0)?;
    if model.store.len() != header.entries.len() {
        return Err(fmt(format!(
            "header lists {} tensors, architecture has {}",
            header.entries.len(),
            model.store.len()
        )));
    }
    for (e, meta) in model.store.entries_mut().iter_mut().zip(&header.entries) {
        if e.name != meta.name || e.value.rows != meta.rows || e.value.cols != meta.cols {
            return Err(fmt(format!(
                "tensor {} ({}×{}) does not match architecture tensor {} ({}×{})",
                meta.name, meta.rows, meta.cols, e.name, e.value.rows, e.value.cols
            )));
        }
        for v in e.value.data.iter_mut() {
            r.read_exact(&mut b8)?;
            *v = f64::from_le_bytes(b8);
        }
        e.kind = meta.kind;
    }
    Ok(model)
}
