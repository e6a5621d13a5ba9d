//! Raw interaction logs to fixed-length encoded examples.

mod encode;
mod io;
mod spec;
pub mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use encode::{decode_example, encode_example, position_feature, EncodedExample};
pub use io::{load_examples, load_unlabeled, parse_example_line, write_examples};
pub use spec::{
    build_feature_spec, FeatureColumn, FeatureSpec, VocabConfig, Vocabulary, DEFAULT_POSITION_EDGES,
    OOV_ID, PAD_ID,
};

/// Column name under which the target item id participates in crosses.
pub const ITEM_COLUMN: &str = "item_id";
/// Column name under which the target category participates in crosses.
pub const CATEGORY_COLUMN: &str = "category_id";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub item: String,
    pub cat: String,
    /// seconds since the epoch
    pub ts: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetItem {
    pub item: String,
    pub cat: String,
}

/// One labeled impression: the user's chronological click history, the
/// candidate item and when it was shown.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    #[serde(rename = "seq")]
    pub sequence: Vec<InteractionEvent>,
    pub target: TargetItem,
    #[serde(rename = "rt")]
    pub recommend_time: i64,
    #[serde(rename = "feat")]
    pub other_features: BTreeMap<String, String>,
    pub label: u8,
}

impl Example {
    /// Checks the chronology and label invariants, naming the offending field.
    pub fn validate(&self) -> Result<(), String> {
        if self.label > 1 {
            return Err(format!("field `label`: expected 0 or 1, got {}", self.label));
        }
        let mut prev = None;
        for (i, ev) in self.sequence.iter().enumerate() {
            if ev.ts < 0 {
                return Err(format!("field `seq[{i}].ts`: negative timestamp {}", ev.ts));
            }
            if prev.is_some_and(|p| ev.ts < p) {
                return Err(format!("field `seq[{i}].ts`: timestamps must be non-decreasing"));
            }
            prev = Some(ev.ts);
        }
        if let Some(last) = prev {
            if self.recommend_time < last {
                return Err(format!(
                    "field `rt`: recommend time {} precedes last event at {last}",
                    self.recommend_time
                ));
            }
        }
        Ok(())
    }

    /// Token of a categorical column as seen by the feature spec: the target
    /// item/category for the reserved names, otherwise an other-feature value.
    pub fn column_value(&self, column: &str) -> Option<&str> {
        match column {
            ITEM_COLUMN => Some(&self.target.item),
            CATEGORY_COLUMN => Some(&self.target.cat),
            other => self.other_features.get(other).map(String::as_str),
        }
    }
}

/// Splits at `boundary`: recommend time strictly before it goes to train,
/// the rest to test.
pub fn temporal_split(examples: Vec<Example>, boundary: i64) -> (Vec<Example>, Vec<Example>) {
    let (train, test): (Vec<_>, Vec<_>) = examples
        .into_iter()
        .partition(|e| e.recommend_time < boundary);
    if train.is_empty() || test.is_empty() {
        log::warn!(
            "temporal split at {boundary} leaves one side empty ({} train / {} test)",
            train.len(),
            test.len()
        );
    }
    (train, test)
}
