use std::collections::BTreeMap;

use super::spec::{FeatureSpec, OOV_ID, PAD_ID};
use super::{Example, InteractionEvent, TargetItem};
use crate::error::{Error, Result};

/// Fixed-length model input. The last slot always holds the target item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub item_ids: Vec<usize>,
    pub category_ids: Vec<usize>,
    pub position_buckets: Vec<usize>,
    pub attention_mask: Vec<bool>,
    /// One id per `FeatureSpec::other` column, in that order.
    pub other_feature_ids: Vec<usize>,
    pub label: u8,
}

impl EncodedExample {
    pub fn seq_len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn target_slot(&self) -> usize {
        self.item_ids.len() - 1
    }

    /// Number of real history events (target excluded).
    pub fn history_len(&self) -> usize {
        self.attention_mask[..self.target_slot()]
            .iter()
            .filter(|&&m| m)
            .count()
    }
}

/// Time-delta bucket of an event seen at `event_time` for a recommendation
/// made at `recommend_time`: `0` for a zero delta, otherwise one plus the
/// index of the first edge exceeding the delta (`edges.len() + 1` past the
/// last edge).
pub fn position_feature(event_time: i64, recommend_time: i64, edges: &[i64]) -> Result<usize> {
    let delta = recommend_time - event_time;
    if delta < 0 {
        return Err(Error::Chronology {
            event_time,
            recommend_time,
        });
    }
    if delta == 0 {
        return Ok(0);
    }
    Ok(1 + edges.partition_point(|&e| e <= delta))
}

/// Encodes the most recent `seq_len - 1` events, left-padded, followed by
/// the target at delta 0.
pub fn encode_example(e: &Example, spec: &FeatureSpec, seq_len: usize) -> Result<EncodedExample> {
    if seq_len < 2 {
        return Err(Error::Config(format!("sequence length {seq_len} must be at least 2")));
    }
    let keep = (seq_len - 1).min(e.sequence.len());
    let recent = &e.sequence[e.sequence.len() - keep..];
    let pad = seq_len - 1 - keep;

    let mut out = EncodedExample {
        item_ids: vec![PAD_ID; seq_len],
        category_ids: vec![PAD_ID; seq_len],
        position_buckets: vec![0; seq_len],
        attention_mask: vec![false; seq_len],
        other_feature_ids: spec.other.iter().map(|c| c.encode(e)).collect(),
        label: e.label,
    };
    for (slot, ev) in (pad..).zip(recent) {
        out.item_ids[slot] = spec.item.vocab.id(&ev.item);
        out.category_ids[slot] = spec.category.vocab.id(&ev.cat);
        out.position_buckets[slot] = position_feature(ev.ts, e.recommend_time, &spec.position_edges)?;
        out.attention_mask[slot] = true;
    }
    let t = seq_len - 1;
    out.item_ids[t] = spec.item.vocab.id(&e.target.item);
    out.category_ids[t] = spec.category.vocab.id(&e.target.cat);
    out.attention_mask[t] = true;
    Ok(out)
}

/// A representative delta for a position bucket: the smallest delta that
/// lands in it.
fn bucket_delta(bucket: usize, edges: &[i64]) -> i64 {
    match bucket {
        0 => 0,
        1 => 1,
        b => edges[(b - 2).min(edges.len() - 1)],
    }
}

/// Maps an encoded example back to tokens. Encoding the result reproduces
/// the input ids exactly. Timestamps are reconstructed from bucket
/// boundaries relative to a recommend time of `recommend_time`.
pub fn decode_example(enc: &EncodedExample, spec: &FeatureSpec, recommend_time: i64) -> Example {
    let tok = |v: &super::Vocabulary, id: usize| {
        v.token(id)
            .or_else(|| v.token(OOV_ID))
            .unwrap_or_default()
            .to_string()
    };
    let t = enc.target_slot();
    let sequence = (0..t)
        .filter(|&s| enc.attention_mask[s])
        .map(|s| InteractionEvent {
            item: tok(&spec.item.vocab, enc.item_ids[s]),
            cat: tok(&spec.category.vocab, enc.category_ids[s]),
            ts: recommend_time - bucket_delta(enc.position_buckets[s], &spec.position_edges),
        })
        .collect();

    let mut other_features = BTreeMap::new();
    for (col, &id) in spec.other.iter().zip(&enc.other_feature_ids) {
        if col.cross.is_none() {
            other_features.insert(col.name.clone(), tok(&col.vocab, id));
        }
    }
    Example {
        sequence,
        target: TargetItem {
            item: tok(&spec.item.vocab, enc.item_ids[t]),
            cat: tok(&spec.category.vocab, enc.category_ids[t]),
        },
        recommend_time,
        other_features,
        label: enc.label,
    }
}
