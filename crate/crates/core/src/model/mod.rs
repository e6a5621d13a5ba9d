//! The behavior-sequence transformer and its two baselines.

mod forward;
mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSpec;

pub(crate) use forward::predict;
pub use forward::{
    bind, embed_sequence, forward, forward_bst, forward_wdl, forward_wdl_seq, multi_head_attention,
    stack_blocks, transformer_block, Attention, Batch, BlockVars, ParamVars,
};
pub use params::{InputSchema, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Transformer over the behavior sequence plus the target item.
    Bst,
    /// Target item and other features only; no sequence.
    Wdl,
    /// WDL plus the mean embedding of the history items.
    WdlSeq,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Wdl, ModelKind::WdlSeq, ModelKind::Bst];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Bst => "bst",
            ModelKind::Wdl => "wdl",
            ModelKind::WdlSeq => "wdl_seq",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bst" => Ok(ModelKind::Bst),
            "wdl" => Ok(ModelKind::Wdl),
            "wdl_seq" | "wdl+seq" => Ok(ModelKind::WdlSeq),
            other => Err(Error::Config(format!(
                "unknown model `{other}` (expected bst, wdl or wdl_seq)"
            ))),
        }
    }
}

/// Which transformer outputs feed the MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// All `L` output rows concatenated, padded rows zeroed.
    FlattenAll,
    /// Only the target slot's output row.
    TargetOnly,
}

impl FromStr for Readout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flatten_all" => Ok(Readout::FlattenAll),
            "target_only" => Ok(Readout::TargetOnly),
            other => Err(Error::Config(format!(
                "unknown readout `{other}` (expected flatten_all or target_only)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BstConfig {
    pub sequence_length: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub dropout_rate: f64,
    pub item_dim: usize,
    pub category_dim: usize,
    pub position_dim: usize,
    pub other_dim: usize,
    pub mlp_widths: Vec<usize>,
    pub leaky_slope: f64,
    pub readout: Readout,
}

impl Default for BstConfig {
    fn default() -> Self {
        BstConfig {
            sequence_length: 20,
            num_heads: 8,
            num_blocks: 1,
            dropout_rate: 0.2,
            item_dim: 16,
            category_dim: 8,
            position_dim: 8,
            other_dim: 8,
            mlp_widths: vec![1024, 512, 256],
            leaky_slope: 0.01,
            readout: Readout::FlattenAll,
        }
    }
}

impl BstConfig {
    /// Width of one sequence slot: item ⊕ category ⊕ position.
    pub fn slot_dim(&self) -> usize {
        self.item_dim + self.category_dim + self.position_dim
    }

    pub fn head_dim(&self) -> usize {
        self.slot_dim() / self.num_heads
    }

    /// Hidden width of the point-wise feed-forward network.
    pub fn ffn_dim(&self) -> usize {
        4 * self.slot_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.sequence_length < 2 {
            return bad(format!("sequence_length {} must be at least 2", self.sequence_length));
        }
        if self.num_heads == 0 || self.slot_dim() % self.num_heads != 0 {
            return bad(format!(
                "slot width {} (item+category+position) must be divisible by num_heads {}",
                self.slot_dim(),
                self.num_heads
            ));
        }
        if self.num_blocks == 0 {
            return bad("num_blocks must be at least 1".into());
        }
        if self.mlp_widths.is_empty() || self.mlp_widths.contains(&0) {
            return bad(format!("mlp_widths {:?} must be non-empty and positive", self.mlp_widths));
        }
        if [self.item_dim, self.category_dim, self.position_dim, self.other_dim].contains(&0) {
            return bad("embedding dims must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky_slope {} outside (0, 1)", self.leaky_slope));
        }
        Ok(())
    }

    /// Checks that the feature spec was built with this config's widths.
    pub fn check_spec(&self, spec: &FeatureSpec) -> Result<()> {
        let pairs = [
            ("item", self.item_dim, spec.item.dim),
            ("category", self.category_dim, spec.category.dim),
            ("position", self.position_dim, spec.position_dim),
        ];
        for (name, want, got) in pairs {
            if want != got {
                return Err(Error::Config(format!(
                    "{name} embedding width {want} in model config but {got} in feature spec"
                )));
            }
        }
        Ok(())
    }
}

/// A model kind with its configuration, input schema and weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub config: BstConfig,
    pub schema: InputSchema,
    pub params: ModelParams,
}

impl Model {
    pub fn new(kind: ModelKind, config: BstConfig, schema: InputSchema, seed: u64) -> Result<Self> {
        let params = ModelParams::init(kind, &config, &schema, seed)?;
        Ok(Model {
            kind,
            config,
            schema,
            params,
        })
    }

    pub fn from_params(
        kind: ModelKind,
        config: BstConfig,
        schema: InputSchema,
        params: ModelParams,
    ) -> Result<Self> {
        config.validate()?;
        params.check_layout(kind, &config, &schema)?;
        Ok(Model {
            kind,
            config,
            schema,
            params,
        })
    }

    /// Eval-mode click probabilities for one batch.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<f32>> {
        predict(self.kind, &self.params, &self.schema, &self.config, batch)
    }

    /// Scores `examples` in chunks of `batch_size`, preserving order.
    pub fn predict_all(&self, examples: &[crate::features::EncodedExample], batch_size: usize) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(batch_size.max(1)) {
            out.extend(self.predict(&Batch::new(chunk)?)?);
        }
        Ok(out)
    }
}
