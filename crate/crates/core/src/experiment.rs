//! The model comparison: generate or load data, train every model on the
//! same split and seed, evaluate, and check the expected AUC ordering.

use log::info;

use crate::error::Result;
use crate::eval::{evaluate, EvalOptions, Metrics};
use crate::features::synth::{synth_generate, SynthParams};
use crate::features::{build_feature_spec, encode_example, temporal_split, EncodedExample, Example, FeatureSpec, VocabConfig};
use crate::model::{BstConfig, InputSchema, Model, ModelKind};
use crate::trainer::{train, LossLog, TrainConfig};

/// Encoded train/test split with the spec built from the training side.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: FeatureSpec,
    pub train: Vec<EncodedExample>,
    pub test: Vec<EncodedExample>,
}

/// Vocabulary settings whose embedding widths follow `config`.
pub fn vocab_config_for(config: &BstConfig, base: &VocabConfig) -> VocabConfig {
    VocabConfig {
        item_dim: config.item_dim,
        category_dim: config.category_dim,
        position_dim: config.position_dim,
        other_dim: config.other_dim,
        ..base.clone()
    }
}

pub fn encode_all(examples: &[Example], spec: &FeatureSpec, seq_len: usize) -> Result<Vec<EncodedExample>> {
    examples.iter().map(|e| encode_example(e, spec, seq_len)).collect()
}

impl Dataset {
    pub fn from_split(train: &[Example], test: &[Example], vocab: &VocabConfig, seq_len: usize) -> Result<Self> {
        let spec = build_feature_spec(train, vocab)?;
        Ok(Dataset {
            train: encode_all(train, &spec, seq_len)?,
            test: encode_all(test, &spec, seq_len)?,
            spec,
        })
    }

    /// Synthetic data for `seed`, split at the start of day `split_day`.
    pub fn synthetic(
        params: &SynthParams,
        split_day: usize,
        seed: u64,
        vocab: &VocabConfig,
        seq_len: usize,
    ) -> Result<Self> {
        let (train, test) = temporal_split(synth_generate(params, seed)?, params.day_start(split_day));
        Self::from_split(&train, &test, vocab, seq_len)
    }
}

/// Row label in reports: `WDL`, `WDL(+Seq)` or `BST(b=n)`.
pub fn model_tag(kind: ModelKind, blocks: usize) -> String {
    match kind {
        ModelKind::Wdl => "WDL".into(),
        ModelKind::WdlSeq => "WDL(+Seq)".into(),
        ModelKind::Bst => format!("BST(b={blocks})"),
    }
}

/// One trained and evaluated model.
#[derive(Clone, Debug)]
pub struct Run {
    pub kind: ModelKind,
    pub model: Model,
    pub losses: LossLog,
    pub metrics: Metrics,
}

/// Trains and evaluates one model kind with `config` on `data`.
pub fn train_and_evaluate(
    data: &Dataset,
    kind: ModelKind,
    config: &BstConfig,
    train_config: &TrainConfig,
    eval: &EvalOptions,
    echo: &str,
) -> Result<Run> {
    let model = Model::new(kind, config.clone(), InputSchema::from_spec(&data.spec), train_config.seed)?;
    let tc = TrainConfig {
        model: kind,
        ..train_config.clone()
    };
    let started = std::time::Instant::now();
    let (model, losses) = train(&data.train, model, tc)?;
    let tag = model_tag(kind, config.num_blocks);
    info!("{tag}: trained {} steps in {:.1}s", losses.0.len(), started.elapsed().as_secs_f64());
    let metrics = evaluate(&model, &data.test, eval, &tag, echo)?;
    info!("{tag}: auc {:.4} logloss {:.4}", metrics.auc, metrics.logloss);
    Ok(Run {
        kind,
        model,
        losses,
        metrics,
    })
}

/// WDL, WDL(+Seq) and BST with `config.num_blocks`, plus BST at every
/// extra block count in `extra_blocks`.
pub fn compare_models(
    data: &Dataset,
    config: &BstConfig,
    train_config: &TrainConfig,
    eval: &EvalOptions,
    extra_blocks: &[usize],
    echo: &str,
) -> Result<Vec<Run>> {
    let mut runs = Vec::new();
    for kind in ModelKind::ALL {
        runs.push(train_and_evaluate(data, kind, config, train_config, eval, echo)?);
    }
    for &b in extra_blocks {
        let cfg = BstConfig {
            num_blocks: b,
            ..config.clone()
        };
        runs.push(train_and_evaluate(data, ModelKind::Bst, &cfg, train_config, eval, echo)?);
    }
    Ok(runs)
}

/// Required AUC gaps: BST over WDL(+Seq), and WDL(+Seq) over WDL.
pub const BST_OVER_POOLING: f64 = 0.01;
pub const POOLING_OVER_WDL: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ordering {
    pub wdl: f64,
    pub wdl_seq: f64,
    pub bst: f64,
}

impl Ordering {
    /// AUCs of the first run of each kind.
    pub fn from_runs(runs: &[Run]) -> Option<Self> {
        let auc = |k: ModelKind| runs.iter().find(|r| r.kind == k).map(|r| r.metrics.auc);
        Some(Ordering {
            wdl: auc(ModelKind::Wdl)?,
            wdl_seq: auc(ModelKind::WdlSeq)?,
            bst: auc(ModelKind::Bst)?,
        })
    }

    pub fn bst_margin(&self) -> f64 {
        self.bst - self.wdl_seq
    }

    pub fn pooling_margin(&self) -> f64 {
        self.wdl_seq - self.wdl
    }

    pub fn holds(&self) -> bool {
        self.bst_margin() >= BST_OVER_POOLING && self.pooling_margin() >= POOLING_OVER_WDL
    }

    pub fn describe(&self) -> String {
        format!(
            "BST - WDL(+Seq) = {:+.4} (need >= {BST_OVER_POOLING}), WDL(+Seq) - WDL = {:+.4} (need >= {POOLING_OVER_WDL})",
            self.bst_margin(),
            self.pooling_margin()
        )
    }
}
