use super::{RequestSample, SynthConfig};
use crate::error::{Error, Result};

/// Splits on request time: train holds requests strictly before `boundary`,
/// eval holds the rest. The boundary may sit anywhere in
/// `[min_ts, max_ts + 1]`, so "before all data" and "after all data" are
/// expressible; anything further out is rejected as a likely mistake.
pub fn split_train_eval(
    samples: Vec<RequestSample>,
    boundary: i64,
) -> Result<(Vec<RequestSample>, Vec<RequestSample>)> {
    if samples.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let min = samples.iter().map(|s| s.timestamp).min().unwrap();
    let max = samples.iter().map(|s| s.timestamp).max().unwrap();
    if boundary < min || boundary > max + 1 {
        return Err(Error::SplitBoundary { boundary, min, max });
    }
    Ok(samples.into_iter().partition(|s| s.timestamp < boundary))
}

/// Start of the final simulated day; reserves that day for evaluation.
pub fn default_boundary(cfg: &SynthConfig) -> i64 {
    cfg.last_day_start()
}
