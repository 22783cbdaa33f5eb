//! Labelled query datasets in JSONL form.
//!
//! One object per line: `{"text": ..., "label": ..., "split": "train"|"test"}`,
//! `split` optional. Foreign label vocabularies are folded onto the binary
//! taxonomy through a [`LabelMapping`]. Rows without a split are divided
//! 80/20 by a seeded shuffle.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::types::Label;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    pub label: Label,
}

impl Example {
    pub fn new(text: impl Into<String>, label: Label) -> Self {
        Example {
            text: text.into(),
            label,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Label token → binary label. Tokens are matched after trimming and
/// lowercasing; non-string JSON values are matched by their JSON text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelMapping(BTreeMap<String, Label>);

impl Default for LabelMapping {
    fn default() -> Self {
        let mut m = BTreeMap::new();
        m.insert("safe".into(), Label::Safe);
        m.insert("unsafe".into(), Label::Unsafe);
        LabelMapping(m)
    }
}

impl LabelMapping {
    pub fn empty() -> Self {
        LabelMapping(BTreeMap::new())
    }

    pub fn with(mut self, token: &str, label: Label) -> Self {
        self.0.insert(normalize_token(token), label);
        self
    }

    pub fn extend<I: IntoIterator<Item = (String, Label)>>(&mut self, pairs: I) {
        for (k, v) in pairs {
            self.0.insert(normalize_token(&k), v);
        }
    }

    pub fn lookup(&self, token: &str) -> Option<Label> {
        self.0.get(&normalize_token(token)).copied()
    }
}

fn normalize_token(t: &str) -> String {
    t.trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetOptions {
    pub text_field: String,
    pub label_field: String,
    pub split_field: String,
    pub mapping: LabelMapping,
    pub split_seed: u64,
    pub train_fraction: f64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            text_field: "text".into(),
            label_field: "label".into(),
            split_field: "split".into(),
            mapping: LabelMapping::default(),
            split_seed: 42,
            train_fraction: 0.8,
        }
    }
}

pub fn load_dataset(path: impl AsRef<Path>, opts: &DatasetOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(BufReader::new(file), opts).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Parses JSONL from any reader. Line numbers in errors are 1-based; blank
/// lines are skipped.
pub fn parse_dataset<R: BufRead>(reader: R, opts: &DatasetOptions) -> Result<Dataset> {
    let mut ds = Dataset::default();
    let mut unsplit = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io("<dataset>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::DatasetLine {
            line: lineno,
            reason,
        };
        let v: Value = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let obj = v.as_object().ok_or_else(|| bad("expected a JSON object".into()))?;
        let text = obj
            .get(&opts.text_field)
            .and_then(Value::as_str)
            .ok_or_else(|| bad(format!("missing string field {:?}", opts.text_field)))?;
        if text.trim().is_empty() {
            return Err(bad("empty text".into()));
        }
        let raw = obj
            .get(&opts.label_field)
            .ok_or_else(|| bad(format!("missing field {:?}", opts.label_field)))?;
        let token = match raw {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        let label = opts.mapping.lookup(&token).ok_or(Error::UnknownLabel {
            line: lineno,
            token: token.clone(),
        })?;
        let ex = Example::new(text, label);
        match obj.get(&opts.split_field) {
            None | Some(Value::Null) => unsplit.push(ex),
            Some(s) => match s.as_str().map(normalize_token).as_deref() {
                Some("train") => ds.train.push(ex),
                Some("test") => ds.test.push(ex),
                _ => return Err(bad(format!("invalid split {s}"))),
            },
        }
    }
    if !unsplit.is_empty() {
        let (train, test) = split_examples(unsplit, opts.train_fraction, opts.split_seed);
        ds.train.extend(train);
        ds.test.extend(test);
    }
    Ok(ds)
}

/// Seeded shuffle, then the first `round(fraction·n)` rows train.
pub fn split_examples(mut rows: Vec<Example>, fraction: f64, seed: u64) -> (Vec<Example>, Vec<Example>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rows.shuffle(&mut rng);
    let n_train = ((rows.len() as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
    let test = rows.split_off(n_train.min(rows.len()));
    (rows, test)
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    use std::io::Write;
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for (split, rows) in [("train", &ds.train), ("test", &ds.test)] {
        for ex in rows.iter() {
            let line = serde_json::json!({"text": ex.text, "label": ex.label, "split": split});
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
