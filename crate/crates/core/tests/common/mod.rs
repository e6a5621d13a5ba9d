#![allow(dead_code)]

pub mod grad;

use bst::features::EncodedExample;
use bst::model::{BstConfig, InputSchema, ModelKind, ModelParams, Readout};
use bst::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config() -> BstConfig {
    BstConfig {
        sequence_length: 5,
        num_heads: 2,
        dropout_rate: 0.0,
        item_dim: 4,
        category_dim: 2,
        position_dim: 2,
        other_dim: 2,
        mlp_widths: vec![6, 4],
        ..BstConfig::default()
    }
}

pub fn tiny_schema() -> InputSchema {
    InputSchema {
        item_vocab: 12,
        category_vocab: 5,
        position_vocab: 10,
        other: vec![("user_group".into(), 4, 2), ("hour".into(), 6, 2)],
    }
}

pub fn readouts() -> [Readout; 2] {
    [Readout::FlattenAll, Readout::TargetOnly]
}

/// Left-padded examples with random history lengths (including empty).
pub fn random_examples(n: usize, seed: u64, schema: &InputSchema, seq_len: usize) -> Vec<EncodedExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let hist = rng.gen_range(0..seq_len);
            let pad = seq_len - 1 - hist;
            let mut e = EncodedExample {
                item_ids: vec![0; seq_len],
                category_ids: vec![0; seq_len],
                position_buckets: vec![0; seq_len],
                attention_mask: vec![false; seq_len],
                other_feature_ids: schema.other.iter().map(|o| rng.gen_range(1..o.1)).collect(),
                label: rng.gen_range(0..2),
            };
            for s in pad..seq_len {
                e.item_ids[s] = rng.gen_range(1..schema.item_vocab);
                e.category_ids[s] = rng.gen_range(1..schema.category_vocab);
                e.attention_mask[s] = true;
                if s + 1 < seq_len {
                    e.position_buckets[s] = rng.gen_range(1..schema.position_vocab);
                }
            }
            e
        })
        .collect()
}

/// Initialized parameters in f64 with embeddings redrawn at unit scale, so
/// finite differences see well-conditioned inputs.
pub fn f64_params(kind: ModelKind, config: &BstConfig, schema: &InputSchema, seed: u64) -> ModelParams<f64> {
    let mut p = ModelParams::init(kind, config, schema, seed).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let names: Vec<String> = p.names().cloned().collect();
    for name in names {
        let t = p.get_mut(&name).unwrap();
        if name.starts_with("emb.") || !name.ends_with("weight") && t.rank() == 1 {
            let padded = ModelParams::<f64>::has_padding_row(&name);
            let width = t.last_dim();
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = if padded && i < width && name.starts_with("emb.") { 0.0 } else { rng.gen_range(-1.0..1.0) };
            }
        }
    }
    p
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}
