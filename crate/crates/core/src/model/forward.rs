use std::collections::BTreeMap;

use rand::RngCore;

use super::params::{block_param, other_table};
use super::{BstConfig, InputSchema, ModelKind, ModelParams, Readout};
use crate::error::{Error, Result};
use crate::features::EncodedExample;
use crate::tensor::{Float, Mode, Tape, Var};

/// Column-major view of a batch of encoded examples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub seq_len: usize,
    /// `size × seq_len`, row-major.
    pub item_ids: Vec<usize>,
    pub category_ids: Vec<usize>,
    pub position_buckets: Vec<usize>,
    pub mask: Vec<bool>,
    /// One id vector of length `size` per other-feature column.
    pub other_ids: Vec<Vec<usize>>,
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn new<'a>(examples: impl IntoIterator<Item = &'a EncodedExample>) -> Result<Self> {
        let mut it = examples.into_iter().peekable();
        let first = it
            .peek()
            .ok_or_else(|| Error::EmptyDataset("empty batch".into()))?;
        let (seq_len, columns) = (first.seq_len(), first.other_feature_ids.len());
        let mut b = Batch {
            size: 0,
            seq_len,
            item_ids: Vec::new(),
            category_ids: Vec::new(),
            position_buckets: Vec::new(),
            mask: Vec::new(),
            other_ids: vec![Vec::new(); columns],
            labels: Vec::new(),
        };
        for e in it {
            if e.seq_len() != seq_len || e.other_feature_ids.len() != columns {
                return Err(Error::shape(
                    "batch",
                    format!(
                        "inconsistent example: length {} with {} columns, expected {seq_len} with {columns}",
                        e.seq_len(),
                        e.other_feature_ids.len()
                    ),
                ));
            }
            b.item_ids.extend_from_slice(&e.item_ids);
            b.category_ids.extend_from_slice(&e.category_ids);
            b.position_buckets.extend_from_slice(&e.position_buckets);
            b.mask.extend_from_slice(&e.attention_mask);
            for (col, &id) in b.other_ids.iter_mut().zip(&e.other_feature_ids) {
                col.push(id);
            }
            b.labels.push(e.label);
            b.size += 1;
        }
        Ok(b)
    }

    pub fn labels_as<T: Float>(&self) -> Vec<T> {
        self.labels.iter().map(|&l| T::of(f64::from(l))).collect()
    }

    /// Flat index of every example's target slot.
    pub fn target_slots(&self) -> Vec<usize> {
        (0..self.size).map(|b| b * self.seq_len + self.seq_len - 1).collect()
    }

    /// Real history ids of `ids` (target and padding excluded), per example.
    fn history_bags(&self, ids: &[usize]) -> Vec<Vec<usize>> {
        (0..self.size)
            .map(|b| {
                let base = b * self.seq_len;
                (base..base + self.seq_len - 1)
                    .filter(|&s| self.mask[s])
                    .map(|s| ids[s])
                    .collect()
            })
            .collect()
    }
}

/// Parameter handles on a tape.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
    /// Other-feature tables in batch column order.
    other: Vec<(String, Var)>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }
}

/// Registers every parameter as a borrowed gradient leaf.
pub fn bind<'p, T: Float>(
    tape: &mut Tape<'p, T>,
    params: &'p ModelParams<T>,
    schema: &InputSchema,
) -> Result<ParamVars> {
    let vars: BTreeMap<String, Var> = params
        .iter()
        .map(|(name, t)| (name.clone(), tape.param(name, t)))
        .collect();
    let other = schema
        .other
        .iter()
        .map(|(col, _, _)| {
            let name = other_table(col);
            vars.get(&name)
                .map(|&v| (col.clone(), v))
                .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
        })
        .collect::<Result<_>>()?;
    Ok(ParamVars { vars, other })
}

/// Per-block parameter handles.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub output: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub norm1_gain: Var,
    pub norm1_bias: Var,
    pub norm2_gain: Var,
    pub norm2_bias: Var,
}

impl BlockVars {
    pub fn resolve(vars: &ParamVars, block: usize) -> Result<Self> {
        let g = |p: &str| vars.get(&block_param(block, p));
        Ok(BlockVars {
            query: g("attn.query")?,
            key: g("attn.key")?,
            value: g("attn.value")?,
            output: g("attn.output")?,
            w1: g("ffn.w1")?,
            b1: g("ffn.b1")?,
            w2: g("ffn.w2")?,
            b2: g("ffn.b2")?,
            norm1_gain: g("norm1.gain")?,
            norm1_bias: g("norm1.bias")?,
            norm2_gain: g("norm2.gain")?,
            norm2_bias: g("norm2.bias")?,
        })
    }
}

/// Item ⊕ category ⊕ position embedding of every slot: `[B, L, d_V]`.
pub fn embed_sequence<T: Float>(
    tape: &mut Tape<'_, T>,
    vars: &ParamVars,
    batch: &Batch,
    config: &BstConfig,
) -> Result<Var> {
    let item = tape.gather_rows(vars.get("emb.item")?, &batch.item_ids, "item_id")?;
    let cat = tape.gather_rows(vars.get("emb.category")?, &batch.category_ids, "category_id")?;
    let pos = tape.gather_rows(vars.get("emb.position")?, &batch.position_buckets, "position")?;
    let slots = tape.concat(&[item, cat, pos])?;
    tape.reshape(slots, &[batch.size, batch.seq_len, config.slot_dim()])
}

pub struct Attention {
    /// `[B, L, d_V]`
    pub output: Var,
    /// `[B·h, L, L]`, rows over keys
    pub weights: Var,
}

/// Full-width projections split into `h` heads of width `d_V / h`, scaled
/// dot-product attention per head over unmasked keys, heads concatenated
/// and projected back.
pub fn multi_head_attention<T: Float>(
    tape: &mut Tape<'_, T>,
    x: Var,
    key_mask: &[bool],
    block: &BlockVars,
    config: &BstConfig,
) -> Result<Attention> {
    let shape = tape.shape(x).to_vec();
    let (b, l, d) = match shape.as_slice() {
        &[b, l, d] => (b, l, d),
        other => return Err(Error::shape("multi_head_attention", format!("input {other:?} is not [B, L, d]"))),
    };
    let h = config.num_heads;
    if d % h != 0 {
        return Err(Error::shape("multi_head_attention", format!("width {d} not divisible by {h} heads")));
    }
    if key_mask.len() != b * l {
        return Err(Error::shape("multi_head_attention", format!("{} mask entries for B·L = {}", key_mask.len(), b * l)));
    }
    let dh = d / h;
    let rows = tape.reshape(x, &[b * l, d])?;

    let heads = |w: Var, tape: &mut Tape<'_, T>| -> Result<Var> {
        let p = tape.matmul(rows, w)?;
        let p = tape.reshape(p, &[b, l, h, dh])?;
        let p = tape.transpose(p, 1, 2)?;
        tape.reshape(p, &[b * h, l, dh])
    };
    let q = heads(block.query, tape)?;
    let k = heads(block.key, tape)?;
    let v = heads(block.value, tape)?;

    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, T::one() / T::of(dh as f64).sqrt());
    let mut mask = Vec::with_capacity(b * h * l * l);
    for bi in 0..b {
        let keys = &key_mask[bi * l..(bi + 1) * l];
        for _ in 0..h * l {
            mask.extend_from_slice(keys);
        }
    }
    let weights = tape.masked_softmax(scores, &mask)?;
    let ctx = tape.batch_matmul(weights, v, false)?;
    let ctx = tape.reshape(ctx, &[b, h, l, dh])?;
    let ctx = tape.transpose(ctx, 1, 2)?;
    let ctx = tape.reshape(ctx, &[b * l, d])?;
    let out = tape.matmul(ctx, block.output)?;
    let output = tape.reshape(out, &[b, l, d])?;
    Ok(Attention { output, weights })
}

/// `S' = LayerNorm(E + Dropout(MH(E)))`,
/// `F = LayerNorm(S' + Dropout(LeakyReLU(S'W1 + b1)W2 + b2))`.
pub fn transformer_block<T: Float>(
    tape: &mut Tape<'_, T>,
    x: Var,
    key_mask: &[bool],
    block: &BlockVars,
    config: &BstConfig,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let d = *shape.last().unwrap_or(&0);
    let n = tape.value(x).len() / d.max(1);

    let attn = multi_head_attention(tape, x, key_mask, block, config)?.output;
    let attn = tape.dropout(attn, config.dropout_rate, mode, rng)?;
    let s = tape.add(x, attn)?;
    let s = tape.reshape(s, &[n, d])?;
    let s = tape.layer_norm(s, block.norm1_gain, block.norm1_bias)?;

    let f = tape.matmul(s, block.w1)?;
    let f = tape.add_bias(f, block.b1)?;
    let f = tape.leaky_relu(f, config.leaky_slope)?;
    let f = tape.matmul(f, block.w2)?;
    let f = tape.add_bias(f, block.b2)?;
    let f = tape.dropout(f, config.dropout_rate, mode, rng)?;
    let f = tape.add(s, f)?;
    let f = tape.layer_norm(f, block.norm2_gain, block.norm2_bias)?;
    tape.reshape(f, &shape)
}

/// Applies `config.num_blocks` blocks, each with its own parameters.
pub fn stack_blocks<T: Float>(
    tape: &mut Tape<'_, T>,
    x: Var,
    key_mask: &[bool],
    vars: &ParamVars,
    config: &BstConfig,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    if config.num_blocks == 0 {
        return Err(Error::Config("num_blocks must be at least 1".into()));
    }
    let mut f = x;
    for j in 0..config.num_blocks {
        let block = BlockVars::resolve(vars, j)?;
        f = transformer_block(tape, f, key_mask, &block, config, mode, rng)?;
    }
    Ok(f)
}

fn other_embeddings<T: Float>(tape: &mut Tape<'_, T>, vars: &ParamVars, batch: &Batch) -> Result<Vec<Var>> {
    if vars.other.len() != batch.other_ids.len() {
        return Err(Error::shape(
            "other features",
            format!("{} columns in batch, {} tables", batch.other_ids.len(), vars.other.len()),
        ));
    }
    vars.other
        .iter()
        .zip(&batch.other_ids)
        .map(|((col, table), ids)| tape.gather_rows(*table, ids, col))
        .collect()
}

fn target_embeddings<T: Float>(tape: &mut Tape<'_, T>, vars: &ParamVars, batch: &Batch) -> Result<[Var; 2]> {
    let slots = batch.target_slots();
    let items: Vec<usize> = slots.iter().map(|&s| batch.item_ids[s]).collect();
    let cats: Vec<usize> = slots.iter().map(|&s| batch.category_ids[s]).collect();
    Ok([
        tape.gather_rows(vars.get("emb.item")?, &items, "item_id")?,
        tape.gather_rows(vars.get("emb.category")?, &cats, "category_id")?,
    ])
}

/// LeakyReLU MLP followed by a scalar affine output and the clamped sigmoid.
fn mlp_head<T: Float>(tape: &mut Tape<'_, T>, input: Var, vars: &ParamVars, config: &BstConfig) -> Result<Var> {
    let mut h = input;
    for i in 0..config.mlp_widths.len() {
        h = tape.matmul(h, vars.get(&format!("mlp.{i}.weight"))?)?;
        h = tape.add_bias(h, vars.get(&format!("mlp.{i}.bias"))?)?;
        h = tape.leaky_relu(h, config.leaky_slope)?;
    }
    let logit = tape.matmul(h, vars.get("out.weight")?)?;
    let logit = tape.add_bias(logit, vars.get("out.bias")?)?;
    let n = tape.value(logit).len();
    let logit = tape.reshape(logit, &[n])?;
    Ok(tape.sigmoid(logit))
}

/// Click probabilities `[B]` from the transformer over the behavior sequence.
pub fn forward_bst<T: Float>(
    tape: &mut Tape<'_, T>,
    vars: &ParamVars,
    batch: &Batch,
    config: &BstConfig,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    if batch.seq_len != config.sequence_length {
        return Err(Error::shape(
            "forward_bst",
            format!("batch length {} but model length {}", batch.seq_len, config.sequence_length),
        ));
    }
    let e = embed_sequence(tape, vars, batch, config)?;
    let f = stack_blocks(tape, e, &batch.mask, vars, config, mode, rng)?;
    let d = config.slot_dim();
    let rows = tape.reshape(f, &[batch.size * batch.seq_len, d])?;
    let readout = match config.readout {
        Readout::FlattenAll => {
            let kept = tape.mask_rows(rows, &batch.mask)?;
            tape.reshape(kept, &[batch.size, batch.seq_len * d])?
        }
        Readout::TargetOnly => tape.gather_rows(rows, &batch.target_slots(), "target slot")?,
    };
    let mut parts = other_embeddings(tape, vars, batch)?;
    parts.push(readout);
    let input = tape.concat(&parts)?;
    mlp_head(tape, input, vars, config)
}

/// Target item and other features only.
pub fn forward_wdl<T: Float>(
    tape: &mut Tape<'_, T>,
    vars: &ParamVars,
    batch: &Batch,
    config: &BstConfig,
    _mode: Mode,
    _rng: &mut dyn RngCore,
) -> Result<Var> {
    let mut parts = other_embeddings(tape, vars, batch)?;
    parts.extend(target_embeddings(tape, vars, batch)?);
    let input = tape.concat(&parts)?;
    mlp_head(tape, input, vars, config)
}

/// WDL plus the mean item and category embedding of the real history
/// events; an empty history contributes zeros.
pub fn forward_wdl_seq<T: Float>(
    tape: &mut Tape<'_, T>,
    vars: &ParamVars,
    batch: &Batch,
    config: &BstConfig,
    _mode: Mode,
    _rng: &mut dyn RngCore,
) -> Result<Var> {
    let mut parts = other_embeddings(tape, vars, batch)?;
    parts.extend(target_embeddings(tape, vars, batch)?);
    let item_bags = batch.history_bags(&batch.item_ids);
    let cat_bags = batch.history_bags(&batch.category_ids);
    parts.push(tape.bag_mean(vars.get("emb.item")?, &item_bags, "item_id")?);
    parts.push(tape.bag_mean(vars.get("emb.category")?, &cat_bags, "category_id")?);
    let input = tape.concat(&parts)?;
    mlp_head(tape, input, vars, config)
}

pub fn forward<T: Float>(
    kind: ModelKind,
    tape: &mut Tape<'_, T>,
    vars: &ParamVars,
    batch: &Batch,
    config: &BstConfig,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    match kind {
        ModelKind::Bst => forward_bst(tape, vars, batch, config, mode, rng),
        ModelKind::Wdl => forward_wdl(tape, vars, batch, config, mode, rng),
        ModelKind::WdlSeq => forward_wdl_seq(tape, vars, batch, config, mode, rng),
    }
}

/// Eval-mode probabilities without keeping the tape.
pub(crate) fn predict<T: Float>(
    kind: ModelKind,
    params: &ModelParams<T>,
    schema: &InputSchema,
    config: &BstConfig,
    batch: &Batch,
) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params, schema)?;
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let p = forward(kind, &mut tape, &vars, batch, config, Mode::Eval, &mut rng)?;
    Ok(tape.value(p).data().to_vec())
}
