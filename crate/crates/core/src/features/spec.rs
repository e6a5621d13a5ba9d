use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use super::{Example, CATEGORY_COLUMN, ITEM_COLUMN};
use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const OOV_ID: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const OOV_TOKEN: &str = "<oov>";
const CROSS_SEP: char = '\u{1f}';
const FORMAT_HEADER: &str = "bst-feature-spec";
const FORMAT_VERSION: u32 = 1;

/// Finite bucket edges in seconds; an implicit overflow bucket follows the
/// last one.
pub const DEFAULT_POSITION_EDGES: [i64; 8] =
    [60, 600, 3600, 21_600, 86_400, 259_200, 604_800, 2_592_000];

/// Token ↔ dense id map with `0 = <pad>` and `1 = <oov>` reserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<String>())
    }
}

impl Vocabulary {
    /// Assigns ids 2.. to `tokens` in order, skipping duplicates.
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut v = Vocabulary {
            tokens: vec![PAD_TOKEN.to_string(), OOV_TOKEN.to_string()],
            index: HashMap::new(),
        };
        for t in tokens {
            let t = t.into();
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    /// Builds from token counts: tokens seen fewer than `min_count` times are
    /// left out, ids are assigned by descending count then token, and at
    /// most `max_size` ids (reserved ones included) are handed out.
    pub fn from_counts(counts: &HashMap<String, usize>, min_count: usize, max_size: Option<usize>) -> Self {
        let mut kept: Vec<(&String, usize)> = counts
            .iter()
            .filter(|(_, &c)| c >= min_count)
            .map(|(t, &c)| (t, c))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        if let Some(cap) = max_size {
            kept.truncate(cap.saturating_sub(2));
        }
        Self::from_tokens(kept.into_iter().map(|(t, _)| t.clone()))
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(OOV_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// An embedded categorical column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureColumn {
    pub name: String,
    pub dim: usize,
    pub vocab: Vocabulary,
    /// Source columns when this is a cross of two categorical columns.
    pub cross: Option<(String, String)>,
}

impl FeatureColumn {
    /// Token this column reads from `e`, or `None` when a source is absent.
    pub fn token_of(&self, e: &Example) -> Option<String> {
        match &self.cross {
            Some((a, b)) => Some(cross_token(e.column_value(a)?, e.column_value(b)?)),
            None => e.column_value(&self.name).map(str::to_string),
        }
    }

    pub fn encode(&self, e: &Example) -> usize {
        self.token_of(e).map_or(OOV_ID, |t| self.vocab.id(&t))
    }
}

fn cross_token(a: &str, b: &str) -> String {
    format!("{a}{CROSS_SEP}{b}")
}

#[derive(Clone, Debug)]
pub struct VocabConfig {
    /// Tokens seen fewer times than this map to `<oov>`.
    pub min_count: usize,
    pub max_size: Option<usize>,
    pub crosses: Vec<(String, String)>,
    pub position_edges: Vec<i64>,
    pub item_dim: usize,
    pub category_dim: usize,
    pub position_dim: usize,
    pub other_dim: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            min_count: 1,
            max_size: None,
            crosses: Vec::new(),
            position_edges: DEFAULT_POSITION_EDGES.to_vec(),
            item_dim: 16,
            category_dim: 8,
            position_dim: 8,
            other_dim: 8,
        }
    }
}

/// Vocabularies and embedding widths for every input column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureSpec {
    pub item: FeatureColumn,
    pub category: FeatureColumn,
    /// Sorted finite edges; buckets are `0` (delta 0), `1..=edges.len()`,
    /// and the overflow bucket `edges.len() + 1`.
    pub position_edges: Vec<i64>,
    pub position_dim: usize,
    /// Other-feature columns in sorted name order, then declared crosses.
    pub other: Vec<FeatureColumn>,
}

impl FeatureSpec {
    pub fn position_vocab_size(&self) -> usize {
        self.position_edges.len() + 2
    }

    /// Width of one embedded sequence slot (item ⊕ category ⊕ position).
    pub fn slot_dim(&self) -> usize {
        self.item.dim + self.category.dim + self.position_dim
    }

    pub fn other_dim_total(&self) -> usize {
        self.other.iter().map(|c| c.dim).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let edges: Vec<String> = self.position_edges.iter().map(i64::to_string).collect();
        let _ = writeln!(out, "{FORMAT_HEADER}\t{FORMAT_VERSION}");
        let _ = writeln!(out, "position\t{}\t{}", self.position_dim, edges.join(","));
        for col in [&self.item, &self.category].into_iter().chain(&self.other) {
            let name = json(&col.name);
            match &col.cross {
                Some((a, b)) => {
                    let _ = writeln!(
                        out,
                        "cross\t{name}\t{}\t{}\t{}\t{}",
                        json(a),
                        json(b),
                        col.dim,
                        col.vocab.len()
                    );
                }
                None => {
                    let _ = writeln!(out, "column\t{name}\t{}\t{}", col.dim, col.vocab.len());
                }
            }
            for (id, tok) in col.vocab.tokens.iter().enumerate().skip(2) {
                let _ = writeln!(out, "{id}\t{}", json(tok));
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: source.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).peekable();

        let (n, header) = lines.next().ok_or_else(|| err(1, "empty feature spec".into()))?;
        let version = header
            .strip_prefix(FORMAT_HEADER)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| err(n, format!("expected `{FORMAT_HEADER} <version>` header")))?;
        if version != FORMAT_VERSION {
            return Err(err(n, format!("unsupported feature spec version {version}")));
        }

        let (n, pos) = lines.next().ok_or_else(|| err(2, "missing position line".into()))?;
        let fields: Vec<&str> = pos.split('\t').collect();
        if fields.len() != 3 || fields[0] != "position" {
            return Err(err(n, "expected `position<TAB>dim<TAB>edges`".into()));
        }
        let position_dim = parse_usize(fields[1]).map_err(|m| err(n, m))?;
        let position_edges = if fields[2].is_empty() {
            Vec::new()
        } else {
            fields[2]
                .split(',')
                .map(|s| s.parse::<i64>().map_err(|e| err(n, format!("bad edge `{s}`: {e}"))))
                .collect::<Result<Vec<_>>>()?
        };
        check_edges(&position_edges).map_err(|m| err(n, m))?;

        let mut columns = Vec::new();
        let mut ended = false;
        while let Some((n, line)) = lines.next() {
            if line == "end" {
                ended = true;
                break;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let (name, cross, dim, size) = match fields.as_slice() {
                ["column", name, dim, size] => (unjson(name), None, dim, size),
                ["cross", name, a, b, dim, size] => {
                    let a = unjson(a).map_err(|m| err(n, m))?;
                    let b = unjson(b).map_err(|m| err(n, m))?;
                    (unjson(name), Some((a, b)), dim, size)
                }
                _ => return Err(err(n, format!("expected a column header, found `{line}`"))),
            };
            let name = name.map_err(|m| err(n, m))?;
            let dim = parse_usize(dim).map_err(|m| err(n, m))?;
            let size = parse_usize(size).map_err(|m| err(n, m))?;
            if size < 2 {
                return Err(err(n, format!("column `{name}` size {size} below reserved ids")));
            }
            let mut tokens = Vec::with_capacity(size - 2);
            for expected in 2..size {
                let (m, tl) = lines
                    .next()
                    .ok_or_else(|| err(n, format!("column `{name}` truncated")))?;
                let (id, tok) = tl
                    .split_once('\t')
                    .ok_or_else(|| err(m, "expected `id<TAB>token`".into()))?;
                if parse_usize(id).map_err(|e| err(m, e))? != expected {
                    return Err(err(m, format!("ids must be dense; expected {expected}")));
                }
                tokens.push(unjson(tok).map_err(|e| err(m, e))?);
            }
            let vocab = Vocabulary::from_tokens(tokens);
            if vocab.len() != size {
                return Err(err(n, format!("column `{name}` has duplicate tokens")));
            }
            columns.push(FeatureColumn {
                name,
                dim,
                vocab,
                cross,
            });
        }
        if !ended {
            return Err(err(text.lines().count(), "missing `end` line".into()));
        }
        if columns.len() < 2 || columns[0].name != ITEM_COLUMN || columns[1].name != CATEGORY_COLUMN {
            return Err(err(
                3,
                format!("first columns must be `{ITEM_COLUMN}` and `{CATEGORY_COLUMN}`"),
            ));
        }
        let other = columns.split_off(2);
        let category = columns.pop().expect("two columns");
        let item = columns.pop().expect("one column");
        Ok(FeatureSpec {
            item,
            category,
            position_edges,
            position_dim,
            other,
        })
    }
}

fn json(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

fn unjson(s: &str) -> Result<String, String> {
    serde_json::from_str(s).map_err(|e| format!("bad quoted string `{s}`: {e}"))
}

fn parse_usize(s: &str) -> Result<usize, String> {
    s.parse().map_err(|e| format!("bad integer `{s}`: {e}"))
}

fn check_edges(edges: &[i64]) -> Result<(), String> {
    if edges.iter().any(|&e| e <= 0) || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(format!("position edges must be positive and strictly increasing: {edges:?}"));
    }
    Ok(())
}

/// Builds vocabularies from the (training) examples.
pub fn build_feature_spec<'a>(
    examples: impl IntoIterator<Item = &'a Example>,
    config: &VocabConfig,
) -> Result<FeatureSpec> {
    check_edges(&config.position_edges).map_err(Error::Config)?;
    let mut items: HashMap<String, usize> = HashMap::new();
    let mut cats: HashMap<String, usize> = HashMap::new();
    let mut other: BTreeMap<String, HashMap<String, usize>> = BTreeMap::new();
    let mut crosses: Vec<HashMap<String, usize>> = vec![HashMap::new(); config.crosses.len()];
    let mut seen = 0usize;

    for e in examples {
        seen += 1;
        for ev in &e.sequence {
            *items.entry(ev.item.clone()).or_default() += 1;
            *cats.entry(ev.cat.clone()).or_default() += 1;
        }
        *items.entry(e.target.item.clone()).or_default() += 1;
        *cats.entry(e.target.cat.clone()).or_default() += 1;
        for (k, v) in &e.other_features {
            *other.entry(k.clone()).or_default().entry(v.clone()).or_default() += 1;
        }
        for ((a, b), counts) in config.crosses.iter().zip(crosses.iter_mut()) {
            if let (Some(x), Some(y)) = (e.column_value(a), e.column_value(b)) {
                *counts.entry(cross_token(x, y)).or_default() += 1;
            }
        }
    }
    if seen == 0 {
        return Err(Error::EmptyDataset("cannot build vocabularies".into()));
    }

    let vocab = |counts: &HashMap<String, usize>| {
        Vocabulary::from_counts(counts, config.min_count, config.max_size)
    };
    let mut columns: Vec<FeatureColumn> = other
        .iter()
        .map(|(name, counts)| FeatureColumn {
            name: name.clone(),
            dim: config.other_dim,
            vocab: vocab(counts),
            cross: None,
        })
        .collect();
    for ((a, b), counts) in config.crosses.iter().zip(&crosses) {
        columns.push(FeatureColumn {
            name: format!("{a}×{b}"),
            dim: config.other_dim,
            vocab: vocab(counts),
            cross: Some((a.clone(), b.clone())),
        });
    }
    Ok(FeatureSpec {
        item: FeatureColumn {
            name: ITEM_COLUMN.into(),
            dim: config.item_dim,
            vocab: vocab(&items),
            cross: None,
        },
        category: FeatureColumn {
            name: CATEGORY_COLUMN.into(),
            dim: config.category_dim,
            vocab: vocab(&cats),
            cross: None,
        },
        position_edges: config.position_edges.clone(),
        position_dim: config.position_dim,
        other: columns,
    })
}
