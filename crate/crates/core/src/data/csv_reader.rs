use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ColumnRole, Dataset, DatasetSchema};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default)]
pub struct ReadOptions {
    /// Skip malformed rows instead of failing; the count is reported in
    /// [`RawRecords::skipped`].
    pub skip_malformed: bool,
}

/// Click-log rows as strings, in file order.
#[derive(Clone, Debug, Default)]
pub struct RawRecords {
    pub static_names: Vec<String>,
    pub items: Vec<String>,
    pub groups: Vec<String>,
    /// Row-major `[len, static_names.len()]`.
    pub statics: Vec<String>,
    pub labels: Vec<u8>,
    pub skipped: usize,
}

impl RawRecords {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Reads a comma-separated click log whose header names every schema
/// column. Extra file columns are ignored.
pub fn read_avazu_csv(path: &Path, schema: &DatasetSchema, opts: ReadOptions) -> Result<RawRecords> {
    schema.validate()?;
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| perr(0, e.to_string()))?;
    let header = rdr.headers().map_err(|e| perr(1, e.to_string()))?.clone();
    let width = header.len();
    let find = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| perr(1, format!("missing column '{name}'")))
    };
    let mut label_col = 0;
    let mut item_col = 0;
    let mut group_col = 0;
    let mut static_cols = Vec::new();
    for c in &schema.columns {
        let idx = find(&c.name)?;
        match c.role {
            ColumnRole::Label => label_col = idx,
            ColumnRole::Item => item_col = idx,
            ColumnRole::GroupKey => group_col = idx,
            ColumnRole::Static => static_cols.push(idx),
            ColumnRole::Ignore => {}
        }
    }
    let mut out = RawRecords {
        static_names: schema.static_names(),
        ..Default::default()
    };
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            perr(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let problem = if rec.len() != width {
            Some(format!("expected {width} fields, found {}", rec.len()))
        } else {
            match rec[label_col].trim() {
                "0" | "1" => None,
                other => Some(format!("label must be 0 or 1, found '{other}'")),
            }
        };
        if let Some(msg) = problem {
            if opts.skip_malformed {
                out.skipped += 1;
                continue;
            }
            return Err(perr(line, msg));
        }
        out.labels.push((rec[label_col].trim() == "1") as u8);
        out.items.push(rec[item_col].trim().to_string());
        out.groups.push(rec[group_col].trim().to_string());
        for &c in &static_cols {
            out.statics.push(rec[c].trim().to_string());
        }
    }
    Ok(out)
}

/// Per-feature value vocabularies. Index 0 of every static feature is the
/// out-of-vocabulary slot.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub static_names: Vec<String>,
    pub static_values: Vec<Vec<String>>,
    #[serde(skip)]
    lookup: Vec<HashMap<String, u32>>,
}

impl Vocabulary {
    /// Builds static-feature vocabularies from `rows` only (normally the
    /// training partition). Values are numbered in first-seen order.
    pub fn fit(raw: &RawRecords, rows: impl IntoIterator<Item = usize>) -> Self {
        let k = raw.static_names.len();
        let mut vocab = Self {
            static_names: raw.static_names.clone(),
            static_values: vec![Vec::new(); k],
            lookup: vec![HashMap::new(); k],
        };
        for r in rows {
            for f in 0..k {
                let v = &raw.statics[r * k + f];
                if !vocab.lookup[f].contains_key(v) {
                    let id = vocab.static_values[f].len() as u32 + 1;
                    vocab.lookup[f].insert(v.clone(), id);
                    vocab.static_values[f].push(v.clone());
                }
            }
        }
        vocab
    }

    fn rebuild_lookup(&mut self) {
        self.lookup = self
            .static_values
            .iter()
            .map(|vals| {
                vals.iter()
                    .enumerate()
                    .map(|(i, v)| (v.clone(), i as u32 + 1))
                    .collect()
            })
            .collect();
    }

    pub fn cards(&self) -> Vec<usize> {
        self.static_values.iter().map(|v| v.len() + 1).collect()
    }

    /// Index of `value` for feature `f`, or 0 when unseen.
    pub fn index(&mut self, f: usize, value: &str) -> u32 {
        if self.lookup.len() != self.static_values.len() {
            self.rebuild_lookup();
        }
        self.lookup[f].get(value).copied().unwrap_or(0)
    }

    /// Encodes `rows`. Items and group keys are numbered over the whole
    /// file: they are identities, not learned features.
    pub fn encode(&mut self, raw: &RawRecords, rows: impl IntoIterator<Item = usize>) -> Dataset {
        let rows: Vec<usize> = rows.into_iter().collect();
        let k = raw.static_names.len();
        let mut item_index: HashMap<&str, u32> = HashMap::new();
        let mut item_keys = Vec::new();
        for it in &raw.items {
            if !item_index.contains_key(it.as_str()) {
                item_index.insert(it, item_keys.len() as u32);
                item_keys.push(it.clone());
            }
        }
        let mut group_index: HashMap<&str, u64> = HashMap::new();
        for g in &raw.groups {
            let next = group_index.len() as u64;
            group_index.entry(g).or_insert(next);
        }
        let mut ds = Dataset {
            static_names: raw.static_names.clone(),
            static_cards: self.cards(),
            item_keys,
            items: Vec::with_capacity(rows.len()),
            statics: Vec::with_capacity(rows.len() * k),
            groups: Vec::with_capacity(rows.len()),
            labels: Vec::with_capacity(rows.len()),
            chronological: true,
        };
        ds.chronological = rows.windows(2).all(|w| w[0] < w[1]);
        for r in rows {
            ds.items.push(item_index[raw.items[r].as_str()]);
            ds.groups.push(group_index[raw.groups[r].as_str()]);
            ds.labels.push(raw.labels[r]);
            for f in 0..k {
                let v = self.index(f, &raw.statics[r * k + f]);
                ds.statics.push(v);
            }
        }
        ds
    }

    /// Reads, splits off the last `val_fraction` of rows, fits the
    /// vocabulary on the head and encodes both parts.
    pub fn load_split(
        path: &Path,
        schema: &DatasetSchema,
        val_fraction: f64,
        opts: ReadOptions,
    ) -> Result<(Dataset, Dataset, Vocabulary)> {
        let raw = read_avazu_csv(path, schema, opts)?;
        let n_val = ((raw.len() as f64) * val_fraction).round() as usize;
        let cut = raw.len() - n_val.min(raw.len());
        let mut vocab = Vocabulary::fit(&raw, 0..cut);
        let train = vocab.encode(&raw, 0..cut);
        let val = vocab.encode(&raw, cut..raw.len());
        Ok((train, val, vocab))
    }

    /// Like [`Vocabulary::load_split`] but holds out a seeded random
    /// `val_fraction` of rows.
    pub fn load_random_split(
        path: &Path,
        schema: &DatasetSchema,
        val_fraction: f64,
        seed: u64,
        opts: ReadOptions,
    ) -> Result<(Dataset, Dataset, Vocabulary)> {
        let raw = read_avazu_csv(path, schema, opts)?;
        let mut idx: Vec<usize> = (0..raw.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = ((raw.len() as f64) * val_fraction).round() as usize;
        let (val, train) = idx.split_at(n_val.min(raw.len()));
        let (mut train, mut val) = (train.to_vec(), val.to_vec());
        train.sort_unstable();
        val.sort_unstable();
        let mut vocab = Vocabulary::fit(&raw, train.iter().copied());
        let train = vocab.encode(&raw, train);
        let val = vocab.encode(&raw, val);
        Ok((train, val, vocab))
    }
}
