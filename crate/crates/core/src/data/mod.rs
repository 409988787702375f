//! Dataset types, readers for CSV click logs and embedding tables, the
//! synthetic click-log generator, and deterministic batching.

mod batch;
mod csv_reader;
mod embeddings;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{batch_iter, BatchIter};
pub use csv_reader::{read_avazu_csv, RawRecords, ReadOptions, Vocabulary};
pub use embeddings::{read_embeddings, write_embeddings, EmbeddingTable};
pub use synthetic::{gen_synthetic, write_synthetic_csv, SyntheticData, SyntheticSpec};

/// What a CSV column is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    /// High-cardinality item identifier; tokenized into semantic IDs.
    Item,
    /// Low-cardinality categorical feature.
    Static,
    /// User or session key used for grouped AUC.
    GroupKey,
    Label,
    Ignore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub role: ColumnRole,
    /// Expected number of distinct values, if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cardinality: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub columns: Vec<ColumnSpec>,
}

impl DatasetSchema {
    pub fn new(columns: Vec<(&str, ColumnRole)>) -> Result<Self> {
        let schema = Self {
            columns: columns
                .into_iter()
                .map(|(name, role)| ColumnSpec {
                    name: name.to_string(),
                    role,
                    cardinality: None,
                })
                .collect(),
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let count = |role| self.columns.iter().filter(|c| c.role == role).count();
        if count(ColumnRole::Label) != 1 {
            return Err(Error::Config("schema needs exactly one label column".into()));
        }
        if count(ColumnRole::Item) != 1 {
            return Err(Error::Config("schema needs exactly one item column".into()));
        }
        if count(ColumnRole::GroupKey) != 1 {
            return Err(Error::Config("schema needs exactly one group-key column".into()));
        }
        let mut names: Vec<&str> = self.columns.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate column name in schema".into()));
        }
        Ok(())
    }

    pub fn static_names(&self) -> Vec<String> {
        self.columns
            .iter()
            .filter(|c| c.role == ColumnRole::Static)
            .map(|c| c.name.clone())
            .collect()
    }

    /// Public Avazu click-log layout: `site_id` is the item, `device_ip`
    /// stands in for the user, and the row id is ignored.
    pub fn avazu() -> Self {
        let names = [
            "id",
            "click",
            "hour",
            "C1",
            "banner_pos",
            "site_id",
            "site_domain",
            "site_category",
            "app_id",
            "app_domain",
            "app_category",
            "device_id",
            "device_ip",
            "device_model",
            "device_type",
            "device_conn_type",
            "C14",
            "C15",
            "C16",
            "C17",
            "C18",
            "C19",
            "C20",
            "C21",
        ];
        let columns = names
            .iter()
            .map(|&n| {
                let role = match n {
                    "id" => ColumnRole::Ignore,
                    "click" => ColumnRole::Label,
                    "site_id" => ColumnRole::Item,
                    "device_ip" => ColumnRole::GroupKey,
                    _ => ColumnRole::Static,
                };
                (n, role)
            })
            .collect();
        Self::new(columns).expect("valid preset")
    }

    /// Layout written by [`write_synthetic_csv`].
    pub fn synthetic(n_static: usize) -> Self {
        let mut columns = vec![
            ColumnSpec {
                name: "click".into(),
                role: ColumnRole::Label,
                cardinality: Some(2),
            },
            ColumnSpec {
                name: "user_id".into(),
                role: ColumnRole::GroupKey,
                cardinality: None,
            },
            ColumnSpec {
                name: "item_id".into(),
                role: ColumnRole::Item,
                cardinality: None,
            },
        ];
        for f in 0..n_static {
            columns.push(ColumnSpec {
                name: format!("f{f}"),
                role: ColumnRole::Static,
                cardinality: None,
            });
        }
        Self { columns }
    }
}

/// Encoded click log. Static feature values are vocabulary indices with 0
/// reserved for out-of-vocabulary values; items index into `item_keys`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub static_names: Vec<String>,
    /// Vocabulary size of each static feature, OOV slot included.
    pub static_cards: Vec<usize>,
    pub item_keys: Vec<String>,
    pub items: Vec<u32>,
    /// Row-major `[len, static_names.len()]`.
    pub statics: Vec<u32>,
    pub groups: Vec<u64>,
    pub labels: Vec<u8>,
    /// Rows are in time order.
    pub chronological: bool,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_static(&self) -> usize {
        self.static_names.len()
    }

    pub fn static_row(&self, i: usize) -> &[u32] {
        let k = self.n_static();
        &self.statics[i * k..(i + 1) * k]
    }

    pub fn ctr(&self) -> f64 {
        self.labels.iter().map(|&l| l as f64).sum::<f64>() / self.len().max(1) as f64
    }

    /// Rows at `indices`, in that order; vocabularies are shared.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let k = self.n_static();
        let mut statics = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            statics.extend_from_slice(self.static_row(i));
        }
        Dataset {
            static_names: self.static_names.clone(),
            static_cards: self.static_cards.clone(),
            item_keys: self.item_keys.clone(),
            items: indices.iter().map(|&i| self.items[i]).collect(),
            statics,
            groups: indices.iter().map(|&i| self.groups[i]).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            chronological: self.chronological && indices.windows(2).all(|w| w[0] < w[1]),
        }
    }

    /// Holds out the last `fraction` of rows (time order preserved).
    pub fn split_chronological(&self, fraction: f64) -> (Dataset, Dataset) {
        let n_val = ((self.len() as f64) * fraction).round() as usize;
        let cut = self.len() - n_val.min(self.len());
        let train: Vec<usize> = (0..cut).collect();
        let val: Vec<usize> = (cut..self.len()).collect();
        (self.subset(&train), self.subset(&val))
    }

    /// Seeded random hold-out of `fraction` of rows.
    pub fn split_random(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let n_val = ((self.len() as f64) * fraction).round() as usize;
        let (val, train) = idx.split_at(n_val.min(self.len()));
        let (mut train, mut val) = (train.to_vec(), val.to_vec());
        train.sort_unstable();
        val.sort_unstable();
        (self.subset(&train), self.subset(&val))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.items.len() != n || self.groups.len() != n || self.statics.len() != n * self.n_static() {
            return Err(Error::Config("dataset columns have different lengths".into()));
        }
        if self.labels.iter().any(|&l| l > 1) {
            return Err(Error::Config("labels must be 0 or 1".into()));
        }
        if self.items.iter().any(|&i| i as usize >= self.item_keys.len()) {
            return Err(Error::Config("item index outside the item vocabulary".into()));
        }
        for (r, row) in self.statics.chunks(self.n_static().max(1)).enumerate() {
            for (f, &v) in row.iter().enumerate() {
                if v as usize >= self.static_cards[f] {
                    return Err(Error::Config(format!(
                        "row {r}: feature {} value {v} outside vocabulary",
                        self.static_names[f]
                    )));
                }
            }
        }
        Ok(())
    }
}
