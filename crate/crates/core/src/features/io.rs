use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use super::{Example, InteractionEvent, TargetItem};
use crate::error::{Error, Result};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExample {
    seq: Vec<InteractionEvent>,
    target: TargetItem,
    rt: i64,
    #[serde(default)]
    feat: BTreeMap<String, String>,
    label: Option<u8>,
}

/// Parses one dataset line. With `require_label` unset a missing label
/// defaults to 0 (scoring input).
pub fn parse_example_line(line: &str, require_label: bool) -> Result<Example, String> {
    let raw: RawExample = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let label = match raw.label {
        Some(l) => l,
        None if require_label => return Err("missing field `label`".into()),
        None => 0,
    };
    let e = Example {
        sequence: raw.seq,
        target: raw.target,
        recommend_time: raw.rt,
        other_features: raw.feat,
        label,
    };
    e.validate()?;
    Ok(e)
}

fn load(path: &Path, require_label: bool) -> Result<Vec<Example>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let e = parse_example_line(&line, require_label).map_err(|msg| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        })?;
        out.push(e);
    }
    Ok(out)
}

/// Reads a labeled line-delimited dataset.
pub fn load_examples(path: &Path) -> Result<Vec<Example>> {
    load(path, true)
}

/// Reads scoring input where labels may be absent.
pub fn load_unlabeled(path: &Path) -> Result<Vec<Example>> {
    load(path, false)
}

pub fn write_examples<'a>(examples: impl IntoIterator<Item = &'a Example>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in examples {
        serde_json::to_writer(&mut w, e).expect("example serializes");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
