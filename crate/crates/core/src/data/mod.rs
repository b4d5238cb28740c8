//! Request-centric samples: one record per page request holding the shared
//! user prefix (history and profile) together with every candidate shown.

mod io;
mod split;
mod synth;

pub use io::{read_dataset, write_dataset, DatasetWriter, SCHEMA_NAME, SCHEMA_VERSION};
pub use split::{default_boundary, split_train_eval};
pub use synth::{generate_world, simulate_requests, RequestStream, SynthConfig, World};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionType {
    Click,
    Cart,
    Purchase,
}

impl ActionType {
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemEvent {
    pub item_id: u32,
    /// Static item metadata: the catalog category of `item_id`.
    pub category: u32,
    pub action: ActionType,
    pub timestamp: i64,
    pub scene_id: u8,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    pub click: u8,
    pub cart: u8,
    pub purchase: u8,
}

impl Labels {
    pub fn as_array(&self) -> [u8; 3] {
        [self.click, self.cart, self.purchase]
    }

    /// `(field, problem)` of the first violated constraint, if any.
    pub fn violation(&self) -> Option<(&'static str, &'static str)> {
        for (name, v) in [
            ("click", self.click),
            ("cart", self.cart),
            ("purchase", self.purchase),
        ] {
            if v > 1 {
                return Some((name, "label must be 0 or 1"));
            }
        }
        if self.purchase == 1 && self.click == 0 {
            return Some(("purchase", "purchase=1 requires click=1"));
        }
        if self.cart == 1 && self.click == 0 {
            return Some(("cart", "cart=1 requires click=1"));
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub item_id: u32,
    pub category: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub side_features: Vec<f64>,
    pub labels: Labels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSample {
    pub request_id: u64,
    pub user_id: u32,
    pub timestamp: i64,
    pub user_profile: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub profile_features: Vec<f64>,
    pub history: Vec<ItemEvent>,
    pub candidates: Vec<Candidate>,
}

impl RequestSample {
    /// Checks the per-record invariants enforced on ingest. Returns the
    /// offending field path and a message.
    pub fn validate(&self) -> Result<(), (String, String)> {
        if self.candidates.is_empty() {
            return Err(("candidates".into(), "at least one candidate required".into()));
        }
        let mut prev = i64::MIN;
        for (i, ev) in self.history.iter().enumerate() {
            if ev.timestamp < prev {
                return Err((
                    format!("history[{i}].timestamp"),
                    "history timestamps must be non-decreasing".into(),
                ));
            }
            if ev.timestamp >= self.timestamp {
                return Err((
                    format!("history[{i}].timestamp"),
                    "history must strictly precede the request".into(),
                ));
            }
            prev = ev.timestamp;
        }
        for (j, c) in self.candidates.iter().enumerate() {
            if let Some((field, msg)) = c.labels.violation() {
                return Err((format!("candidates[{j}].labels.{field}"), msg.into()));
            }
        }
        Ok(())
    }

    /// One impression-centric sample per candidate, sharing this prefix.
    pub fn impressions(&self) -> Vec<RequestSample> {
        self.candidates
            .iter()
            .map(|c| RequestSample {
                candidates: vec![c.clone()],
                ..self.clone()
            })
            .collect()
    }
}
