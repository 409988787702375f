//! Logistic regression on one-hot item and static-feature indicators.

use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{summarize, EvalRecord, EvalSummary};
use crate::tensor::sigmoid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticConfig {
    /// Adagrad step size.
    pub lr: f64,
    pub l2: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            l2: 1e-6,
            epochs: 5,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticModel {
    pub bias: f64,
    pub item_w: Vec<f64>,
    pub static_w: Vec<Vec<f64>>,
}

impl LogisticModel {
    fn logit(&self, ds: &Dataset, r: usize) -> f64 {
        let mut z = self.bias + self.item_w.get(ds.items[r] as usize).copied().unwrap_or(0.0);
        for (f, &v) in ds.static_row(r).iter().enumerate() {
            z += self.static_w[f].get(v as usize).copied().unwrap_or(0.0);
        }
        z
    }

    pub fn predict(&self, ds: &Dataset) -> Vec<f64> {
        (0..ds.len()).map(|r| sigmoid(self.logit(ds, r))).collect()
    }

    pub fn evaluate(&self, ds: &Dataset) -> EvalSummary {
        let records: Vec<EvalRecord> = self
            .predict(ds)
            .into_iter()
            .enumerate()
            .map(|(i, s)| EvalRecord::new(ds.labels[i], s, ds.groups[i]))
            .collect();
        summarize(&records)
    }
}

/// Per-example Adagrad on the log loss. Returns the model and the
/// validation metrics after every epoch.
pub fn fit_logistic(
    train: &Dataset,
    val: &Dataset,
    n_items: usize,
    cfg: &LogisticConfig,
) -> Result<(LogisticModel, Vec<EvalSummary>)> {
    if train.is_empty() || !(cfg.lr > 0.0) {
        return Err(Error::Config("logistic baseline needs data and a positive step size".into()));
    }
    let mut m = LogisticModel {
        bias: 0.0,
        item_w: vec![0.0; n_items],
        static_w: train.static_cards.iter().map(|&c| vec![0.0; c]).collect(),
    };
    let mut acc_bias = 1e-8;
    let mut acc_item = vec![1e-8; n_items];
    let mut acc_static: Vec<Vec<f64>> = train.static_cards.iter().map(|&c| vec![1e-8; c]).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        for rows in batch_iter(train.len(), 1024, Some(cfg.seed), epoch) {
            for r in rows {
                let g = sigmoid(m.logit(train, r)) - f64::from(train.labels[r]);
                acc_bias += g * g;
                m.bias -= cfg.lr * g / acc_bias.sqrt();
                let it = train.items[r] as usize;
                let gi = g + cfg.l2 * m.item_w[it];
                acc_item[it] += gi * gi;
                m.item_w[it] -= cfg.lr * gi / acc_item[it].sqrt();
                for (f, &v) in train.static_row(r).iter().enumerate() {
                    let v = v as usize;
                    let gs = g + cfg.l2 * m.static_w[f][v];
                    acc_static[f][v] += gs * gs;
                    m.static_w[f][v] -= cfg.lr * gs / acc_static[f][v].sqrt();
                }
            }
        }
        history.push(m.evaluate(val));
    }
    Ok((m, history))
}
