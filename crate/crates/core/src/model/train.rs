use log::info;
use serde::{Deserialize, Serialize};

use super::{training_flops_per_batch, Batch, ItemLookup, StoreModel};
use crate::data::{batch_iter, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{summarize, EvalRecord, EvalSummary};
use crate::rotation::{diversity_grad, diversity_penalty, rotation_step};
use crate::tensor::{sigmoid, Graph, OptimizerState};

/// Largest tolerated `|R^T R - I|_F` after a rotation update.
pub const ORTHOGONALITY_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub val_gauc: f64,
    pub val_logloss: f64,
    pub flops_per_batch: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    /// Stop after this many optimizer steps, mid-epoch if needed.
    pub max_steps: Option<usize>,
    /// Batch size used for validation scoring.
    pub eval_batch: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            max_steps: None,
            eval_batch: 4096,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct FitReport {
    pub epochs: Vec<EpochRecord>,
    /// Training loss of every step, in order.
    pub step_losses: Vec<f64>,
    pub steps: usize,
    /// Largest `|R_i^T R_i - I|_F` seen after any step.
    pub max_orthogonality_error: f64,
    /// Largest `| |C R_i| - |C| |` seen on any training instance.
    pub max_norm_error: f64,
    pub final_diversity: f64,
}

/// Click probabilities for every row of `ds`.
pub fn predict(model: &StoreModel, ds: &Dataset, lookup: &ItemLookup, batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(ds.len());
    for rows in batch_iter(ds.len(), batch_size.max(1), None, 0) {
        let batch = Batch::from_rows(ds, &rows, lookup, model.cfg.h)?;
        let mut g = Graph::new();
        let b = model.bind(&mut g)?;
        let f = model.forward(&mut g, &b, &batch, None)?;
        out.extend(g.value(f.logits).data().iter().map(|&z| sigmoid(z)));
    }
    Ok(out)
}

pub fn evaluate(model: &StoreModel, ds: &Dataset, lookup: &ItemLookup, batch_size: usize) -> Result<EvalSummary> {
    let scores = predict(model, ds, lookup, batch_size)?;
    let records: Vec<EvalRecord> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| EvalRecord::new(ds.labels[i], s, ds.groups[i]))
        .collect();
    Ok(summarize(&records))
}

/// Trains for `model.cfg.epochs` epochs, evaluating on `val` after each.
///
/// Every batch takes one Adam step on the network parameters. Every
/// `rotation_every` batches the rotation matrices take one projected
/// gradient step on the task loss plus the diversity term, using gradients
/// from the same forward pass.
pub fn fit(
    model: &mut StoreModel,
    train: &Dataset,
    val: &Dataset,
    lookup: &ItemLookup,
    opts: &TrainOptions,
) -> Result<FitReport> {
    let cfg = model.cfg.clone();
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let flops_per_batch = training_flops_per_batch(model.forward_madds()?, cfg.batch_size);
    let mut opt = OptimizerState::adam(cfg.lr);
    let mut report = FitReport::default();
    'epochs: for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for rows in batch_iter(train.len(), cfg.batch_size, Some(cfg.seed), epoch) {
            if opts.max_steps.is_some_and(|m| report.steps >= m) {
                break 'epochs;
            }
            let batch = Batch::from_rows(train, &rows, lookup, cfg.h)?;
            let mut g = Graph::new();
            let b = model.bind(&mut g)?;
            let f = model.forward(&mut g, &b, &batch, None)?;
            let loss = g.bce_with_logits(f.logits, &batch.labels)?;
            let lv = g.scalar_value(loss);
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {}, step {}", epoch + 1, report.steps)));
            }

            let c = g.value(f.block);
            for o in &f.rotated {
                let o = g.value(*o);
                for r in 0..batch.n {
                    let nc = c.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let no = o.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    report.max_norm_error = report.max_norm_error.max((nc - no).abs());
                }
            }

            let rotate_now = cfg.rotation && cfg.rotation_lr > 0.0 && report.steps % cfg.rotation_every == 0;
            let mut wrt = b.params.vars().to_vec();
            if rotate_now {
                wrt.extend_from_slice(&b.rotations);
            }
            let mut grads = g.grad(loss, &wrt)?;
            let rot_grads = grads.split_off(b.params.vars().len());
            model.store.apply(&mut opt, &grads)?;
            if rotate_now {
                let div = diversity_grad(&model.rotations);
                let total: Vec<_> = rot_grads
                    .into_iter()
                    .zip(div)
                    .map(|(mut t, d)| {
                        t.data_mut().iter_mut().zip(d.data()).for_each(|(a, b)| *a += b);
                        t
                    })
                    .collect();
                rotation_step(&mut model.rotations, &total, cfg.rotation_lr)?;
                let err = model.rotations.max_orthogonality_error()?;
                report.max_orthogonality_error = report.max_orthogonality_error.max(err);
                if err >= ORTHOGONALITY_TOL {
                    return Err(Error::Constraint(format!(
                        "|R^T R - I| = {err:e} at step {}",
                        report.steps
                    )));
                }
            }
            report.steps += 1;
            report.step_losses.push(lv);
            loss_sum += lv * batch.n as f64;
            seen += batch.n;
        }
        let summary = evaluate(model, val, lookup, opts.eval_batch)?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / seen.max(1) as f64,
            val_auc: summary.auc,
            val_gauc: summary.gauc,
            val_logloss: summary.logloss,
            flops_per_batch,
        };
        info!(
            "epoch {} train_loss {:.5} val_auc {:.5} val_gauc {:.5} val_logloss {:.5}",
            rec.epoch, rec.train_loss, rec.val_auc, rec.val_gauc, rec.val_logloss
        );
        report.epochs.push(rec);
    }
    report.final_diversity = diversity_penalty(&model.rotations);
    Ok(report)
}
