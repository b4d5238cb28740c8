//! Newline-delimited JSON request logs.
//!
//! Line 1 is a header `{"schema":"sort-request-log","version":1}`; every
//! following line is one [`RequestSample`]. Records are validated on ingest
//! and errors carry the 1-based line number and the offending field path.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RequestSample;
use crate::error::{Error, Result};

pub const SCHEMA_NAME: &str = "sort-request-log";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
    version: u32,
}

/// Streaming writer; the header is emitted on construction.
pub struct DatasetWriter<W: Write> {
    out: W,
    count: usize,
}

impl DatasetWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        Self::new(BufWriter::new(File::create(path)?))
    }
}

impl<W: Write> DatasetWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        serde_json::to_writer(
            &mut out,
            &Header {
                schema: SCHEMA_NAME.into(),
                version: SCHEMA_VERSION,
            },
        )?;
        out.write_all(b"\n")?;
        Ok(Self { out, count: 0 })
    }

    pub fn write(&mut self, sample: &RequestSample) -> Result<()> {
        serde_json::to_writer(&mut self.out, sample)?;
        self.out.write_all(b"\n")?;
        self.count += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<usize> {
        self.out.flush()?;
        Ok(self.count)
    }
}

pub fn write_dataset<'a>(
    samples: impl IntoIterator<Item = &'a RequestSample>,
    path: &Path,
) -> Result<usize> {
    let mut w = DatasetWriter::create(path)?;
    for s in samples {
        w.write(s)?;
    }
    w.finish()
}

fn record_error(path: &Path, line: usize, field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Record {
        path: PathBuf::from(path),
        line,
        field: field.into(),
        message: message.into(),
    }
}

pub fn read_dataset(path: &Path) -> Result<Vec<RequestSample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines.next().transpose()?.ok_or_else(|| Error::Format {
        path: path.into(),
        message: "missing header line".into(),
    })?;
    let header: Header = serde_json::from_str(&header_line).map_err(|e| Error::Format {
        path: path.into(),
        message: format!("bad header: {e}"),
    })?;
    if header.schema != SCHEMA_NAME || header.version != SCHEMA_VERSION {
        return Err(Error::Format {
            path: path.into(),
            message: format!(
                "unsupported schema {}/v{} (expected {SCHEMA_NAME}/v{SCHEMA_VERSION})",
                header.schema, header.version
            ),
        });
    }

    let mut out = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let de = &mut serde_json::Deserializer::from_str(&line);
        let sample: RequestSample = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            record_error(path, line_no, field, e.inner().to_string())
        })?;
        sample
            .validate()
            .map_err(|(field, msg)| record_error(path, line_no, field, msg))?;
        out.push(sample);
    }
    Ok(out)
}
