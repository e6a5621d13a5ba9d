//! On-disk training state: a header line, a TOML manifest, then raw
//! little-endian f32 blobs for every parameter and accumulator.
//!
//! ```text
//! bst-checkpoint <version> <manifest bytes>\n
//! <manifest>
//! <blob>
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OptimizerState, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::model::{BstConfig, InputSchema, Model, ModelKind, ModelParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "bst-checkpoint";
const PARAM_PREFIX: &str = "param/";
const ACC_PREFIX: &str = "adagrad/";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    kind: ModelKind,
    step: u64,
    /// Free-form effective run configuration, kept verbatim.
    echo: String,
    blob_bytes: usize,
    model_config: BstConfig,
    train_config: TrainConfig,
    schema: InputSchema,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob section.
    offset: usize,
    /// Number of f32 values.
    len: usize,
}

/// Everything needed to resume training bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train_config: TrainConfig,
    pub optimizer: OptimizerState,
    pub echo: String,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, echo: impl Into<String>) -> Self {
        Checkpoint {
            model: trainer.model.clone(),
            train_config: trainer.config.clone(),
            optimizer: trainer.optimizer.clone(),
            echo: echo.into(),
        }
    }

    pub fn into_trainer(self) -> Trainer {
        Trainer {
            model: self.model,
            config: self.train_config,
            optimizer: self.optimizer,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut blob = Vec::new();
        let accs = self.optimizer.accumulators.iter();
        let all = self
            .model
            .params
            .iter()
            .map(|(n, t)| (format!("{PARAM_PREFIX}{n}"), t))
            .chain(accs.map(|(n, t)| (format!("{ACC_PREFIX}{n}"), t)));
        for (name, t) in all {
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset: blob.len(),
                len: t.len(),
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            kind: self.model.kind,
            step: self.optimizer.step,
            echo: self.echo.clone(),
            blob_bytes: blob.len(),
            model_config: self.model.config.clone(),
            train_config: self.train_config.clone(),
            schema: self.model.schema.clone(),
            tensors,
        };
        let text = toml::to_string(&manifest)
            .map_err(|e| Error::Config(format!("cannot serialize checkpoint manifest: {e}")))?;
        let mut out = format!("{MAGIC} {CHECKPOINT_VERSION} {}\n", text.len()).into_bytes();
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::CheckpointInconsistent(m);
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not text".into()))?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.len() != 3 || fields[0] != MAGIC {
            return Err(bad(format!("not a checkpoint header: {header:?}")));
        }
        let found: u32 = fields[1]
            .parse()
            .map_err(|_| bad(format!("bad version field {:?}", fields[1])))?;
        if found != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        let manifest_len: usize = fields[2]
            .parse()
            .map_err(|_| bad(format!("bad manifest length {:?}", fields[2])))?;
        let rest = &bytes[nl + 1..];
        if rest.len() < manifest_len {
            return Err(bad("manifest truncated".into()));
        }
        let (text, blob) = rest.split_at(manifest_len);
        let text = std::str::from_utf8(text).map_err(|_| bad("manifest is not UTF-8".into()))?;
        let m: Manifest = toml::from_str(text).map_err(|e| bad(format!("manifest: {e}")))?;
        if m.format_version != found {
            return Err(bad(format!(
                "header version {found} but manifest version {}",
                m.format_version
            )));
        }
        if blob.len() != m.blob_bytes {
            return Err(bad(format!(
                "blob has {} bytes, manifest declares {}",
                blob.len(),
                m.blob_bytes
            )));
        }

        let mut params = ModelParams::default();
        let mut accumulators = BTreeMap::new();
        for e in &m.tensors {
            let end = e.len.checked_mul(4).and_then(|n| n.checked_add(e.offset));
            let range = match end {
                Some(end) if end <= blob.len() => e.offset..end,
                _ => return Err(bad(format!("`{}` extends past the blob", e.name))),
            };
            if e.shape.iter().product::<usize>() != e.len {
                return Err(bad(format!("`{}`: shape {:?} holds {} values, not {}", e.name, e.shape, e.shape.iter().product::<usize>(), e.len)));
            }
            let data: Vec<f32> = blob[range]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data)?;
            if let Some(n) = e.name.strip_prefix(PARAM_PREFIX) {
                params.insert(n, t);
            } else if let Some(n) = e.name.strip_prefix(ACC_PREFIX) {
                accumulators.insert(n.to_string(), t);
            } else {
                return Err(bad(format!("unknown tensor `{}`", e.name)));
            }
        }
        let model = Model::from_params(m.kind, m.model_config, m.schema, params)?;
        if accumulators.len() != model.params.len() {
            return Err(bad(format!(
                "{} accumulators for {} parameters",
                accumulators.len(),
                model.params.len()
            )));
        }
        for (name, w) in model.params.iter() {
            let acc = accumulators
                .get(name)
                .ok_or_else(|| bad(format!("no accumulator for `{name}`")))?;
            if acc.shape() != w.shape() {
                return Err(Error::ShapeMismatch {
                    name: format!("{ACC_PREFIX}{name}"),
                    expected: w.shape().to_vec(),
                    found: acc.shape().to_vec(),
                });
            }
        }
        m.train_config.validate()?;
        Ok(Checkpoint {
            model,
            train_config: m.train_config,
            optimizer: OptimizerState {
                accumulators,
                step: m.step,
            },
            echo: m.echo,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
