use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BstConfig, ModelKind, Readout};
use crate::error::{Error, Result};
use crate::features::FeatureSpec;
use crate::rng::stream;
use crate::tensor::{Float, Tensor};

/// Table sizes and widths of the embedded input columns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSchema {
    pub item_vocab: usize,
    pub category_vocab: usize,
    pub position_vocab: usize,
    /// (column name, vocabulary size, embedding width)
    pub other: Vec<(String, usize, usize)>,
}

impl InputSchema {
    pub fn from_spec(spec: &FeatureSpec) -> Self {
        InputSchema {
            item_vocab: spec.item.vocab.len(),
            category_vocab: spec.category.vocab.len(),
            position_vocab: spec.position_vocab_size(),
            other: spec
                .other
                .iter()
                .map(|c| (c.name.clone(), c.vocab.len(), c.dim))
                .collect(),
        }
    }

    pub fn other_width(&self) -> usize {
        self.other.iter().map(|o| o.2).sum()
    }
}

pub(crate) fn other_table(column: &str) -> String {
    format!("emb.other.{column}")
}

pub(crate) fn block_param(block: usize, part: &str) -> String {
    format!("block{block}.{part}")
}

/// Every learnable tensor of one model, keyed by a stable name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Float = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> Default for ModelParams<T> {
    fn default() -> Self {
        ModelParams {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Float> ModelParams<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Float>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Whether row 0 of `name` is a frozen padding row.
    pub fn has_padding_row(name: &str) -> bool {
        name == "emb.item" || name == "emb.category" || name.starts_with("emb.other.")
    }

    /// Expected (name, shape) list for a model; the order is the sorted
    /// name order used everywhere else.
    pub fn layout(kind: ModelKind, config: &BstConfig, schema: &InputSchema) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("emb.item".into(), vec![schema.item_vocab, config.item_dim]),
            ("emb.category".into(), vec![schema.category_vocab, config.category_dim]),
        ];
        for (name, vocab, dim) in &schema.other {
            out.push((other_table(name), vec![*vocab, *dim]));
        }
        let target_width = config.item_dim + config.category_dim;
        let seq_width = match kind {
            ModelKind::Wdl => target_width,
            ModelKind::WdlSeq => 2 * target_width,
            ModelKind::Bst => {
                out.push(("emb.position".into(), vec![schema.position_vocab, config.position_dim]));
                let d = config.slot_dim();
                let f = config.ffn_dim();
                for b in 0..config.num_blocks {
                    for p in ["attn.query", "attn.key", "attn.value", "attn.output"] {
                        out.push((block_param(b, p), vec![d, d]));
                    }
                    out.push((block_param(b, "ffn.w1"), vec![d, f]));
                    out.push((block_param(b, "ffn.b1"), vec![f]));
                    out.push((block_param(b, "ffn.w2"), vec![f, d]));
                    out.push((block_param(b, "ffn.b2"), vec![d]));
                    for n in ["norm1", "norm2"] {
                        out.push((block_param(b, &format!("{n}.gain")), vec![d]));
                        out.push((block_param(b, &format!("{n}.bias")), vec![d]));
                    }
                }
                match config.readout {
                    Readout::FlattenAll => config.sequence_length * d,
                    Readout::TargetOnly => d,
                }
            }
        };
        let mut fan_in = schema.other_width() + seq_width;
        for (i, &w) in config.mlp_widths.iter().enumerate() {
            out.push((format!("mlp.{i}.weight"), vec![fan_in, w]));
            out.push((format!("mlp.{i}.bias"), vec![w]));
            fan_in = w;
        }
        out.push(("out.weight".into(), vec![fan_in, 1]));
        out.push(("out.bias".into(), vec![1]));
        out.sort();
        out
    }

    /// Checks names and shapes against the layout for `kind`.
    pub fn check_layout(&self, kind: ModelKind, config: &BstConfig, schema: &InputSchema) -> Result<()> {
        let layout = Self::layout(kind, config, schema);
        if layout.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "{kind} model expects {} tensors, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in layout {
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

impl ModelParams<f32> {
    /// Glorot-uniform weights, zero biases, unit layer-norm gains and
    /// N(0, 0.01) embeddings with zeroed padding rows.
    pub fn init(kind: ModelKind, config: &BstConfig, schema: &InputSchema, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, "init", 0);
        let normal = Normal::new(0.0f32, 0.01).expect("valid std");
        let mut tensors = BTreeMap::new();
        for (name, shape) in Self::layout(kind, config, schema) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = if name.starts_with("emb.") {
                let mut d: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng)).collect();
                if Self::has_padding_row(&name) {
                    d[..shape[1]].fill(0.0);
                }
                d
            } else if name.ends_with(".gain") {
                vec![1.0; n]
            } else if shape.len() == 2 {
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt() as f32;
                (0..n).map(|_| rng.gen_range(-limit..=limit)).collect()
            } else {
                vec![0.0; n]
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(ModelParams { tensors })
    }
}
