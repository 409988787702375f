//! Multi-expert parallel quantization of pretrained item embeddings into
//! semantic-ID tuples.
//!
//! Each of `K` experts maps an embedding to a latent that is snapped to its
//! own codebook of `V` codewords. The decoder reconstructs the embedding
//! from the sum of the quantized latents using the straight-through form
//! `z + sg(s - z)`, so the reconstruction loss trains the experts and the
//! decoder but never the codewords. Codewords learn from the usual VQ terms
//! `|sg(z) - s|^2 + beta |z - sg(s)|^2`, and an orthogonality penalty keeps
//! the experts' flattened weight matrices apart.

mod rq;
mod sid_table;

use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, EmbeddingTable};
use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, Mlp, ParamId, ParamStore};
use crate::tensor::{Graph, OptimizerState, Tensor, Var};

pub use rq::{train_rq_baseline, RqConfig, RqModel};
pub use sid_table::{read_sid_table, write_sid_table, SidTable};

/// Magic first line of a serialized [`OpmqModel`].
pub const OPMQ_MAGIC: &str = "OPMQ1";

/// Which expert weights enter the orthogonality penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrthScope {
    /// The hidden-layer weight matrix of each expert.
    #[default]
    Hidden,
    /// Hidden and output weight matrices, flattened and concatenated.
    AllLayers,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpmqConfig {
    /// Number of experts, i.e. codes per item.
    pub k: usize,
    /// Codewords per codebook.
    pub v: usize,
    /// Latent width; defaults to the embedding width.
    pub d_z: Option<usize>,
    /// Expert hidden width; defaults to the embedding width.
    pub hidden: Option<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Commitment weight.
    pub beta: f64,
    pub vq_weight: f64,
    /// Weight of the expert orthogonality penalty. Reconstruction is
    /// insensitive to it up to 1.0 on clustered tables, while smaller
    /// weights let the penalty drift up during training.
    pub w_orth: f64,
    pub orth_scope: OrthScope,
    /// Optimizer steps between dead-codeword checks.
    pub reinit_every: usize,
    pub seed: u64,
}

impl Default for OpmqConfig {
    fn default() -> Self {
        Self {
            k: 3,
            v: 16,
            d_z: None,
            hidden: None,
            activation: Activation::Tanh,
            epochs: 150,
            batch_size: 64,
            lr: 3e-3,
            beta: 0.25,
            vq_weight: 1.0,
            w_orth: 1.0,
            orth_scope: OrthScope::Hidden,
            reinit_every: 500,
            seed: 1,
        }
    }
}

impl OpmqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.v == 0 || self.batch_size == 0 {
            return Err(Error::Config("k, v and batch_size must be >= 1".into()));
        }
        if self.v > u16::MAX as usize {
            return Err(Error::Config(format!("codebook size {} too large", self.v)));
        }
        if !(self.lr > 0.0) || self.beta < 0.0 || self.w_orth < 0.0 || self.vq_weight < 0.0 {
            return Err(Error::Config("learning rate must be positive, loss weights non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpmqModel {
    pub d_p: usize,
    pub d_z: usize,
    pub orth_scope: OrthScope,
    pub store: ParamStore,
    pub experts: Vec<Mlp>,
    pub codebooks: Vec<ParamId>,
    pub decoder: Mlp,
}

impl OpmqModel {
    /// Randomly initialized model; codebooks start at zero until
    /// [`OpmqModel::seed_codebooks`] is called.
    pub fn new(d_p: usize, cfg: &OpmqConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d_z = cfg.d_z.unwrap_or(d_p);
        let hidden = cfg.hidden.unwrap_or(d_p);
        let mut store = ParamStore::new();
        let experts = (0..cfg.k)
            .map(|i| Mlp::new(&mut store, &format!("expert{i}"), (d_p, hidden, d_z), cfg.activation, rng))
            .collect();
        let codebooks = (0..cfg.k)
            .map(|i| store.add(format!("codebook{i}"), Tensor::zeros(&[cfg.v, d_z])))
            .collect();
        let decoder = Mlp::new(&mut store, "decoder", (d_z, hidden, d_p), cfg.activation, rng);
        Ok(Self {
            d_p,
            d_z,
            orth_scope: cfg.orth_scope,
            store,
            experts,
            codebooks,
            decoder,
        })
    }

    pub fn k(&self) -> usize {
        self.experts.len()
    }

    pub fn v(&self) -> usize {
        self.codebook(0).shape()[0]
    }

    pub fn codebook(&self, i: usize) -> &Tensor {
        self.store.get(self.codebooks[i])
    }

    /// Expert weight matrices that the orthogonality penalty acts on.
    fn orth_params(&self, i: usize) -> Vec<ParamId> {
        let e = &self.experts[i];
        match self.orth_scope {
            OrthScope::Hidden => vec![e.hidden.weight],
            OrthScope::AllLayers => vec![e.hidden.weight, e.out.weight],
        }
    }

    /// Initializes every codebook with the latents of `V` randomly chosen
    /// items (drawn with replacement when there are fewer items than `V`).
    pub fn seed_codebooks(&mut self, table: &EmbeddingTable, rng: &mut impl Rng) -> Result<()> {
        let all = table_tensor(table)?;
        let v = self.v();
        for i in 0..self.k() {
            let z = self.experts[i].eval(&self.store, &all)?;
            let rows: Vec<usize> = if table.len() >= v {
                sample(rng, table.len(), v).into_vec()
            } else {
                (0..v).map(|_| rng.random_range(0..table.len())).collect()
            };
            let cb = self.store.get_mut(self.codebooks[i]);
            for (j, &r) in rows.iter().enumerate() {
                cb.data_mut()[j * self.d_z..(j + 1) * self.d_z].copy_from_slice(z.row(r));
            }
        }
        Ok(())
    }

    /// Graph forward on a batch of embeddings `[n, d_p]`.
    pub fn losses(&self, g: &mut Graph, p: &Bound, batch: &Tensor, beta: f64) -> Result<OpmqLosses> {
        if batch.shape().len() != 2 || batch.last_dim() != self.d_p {
            return Err(Error::shape(
                "opmq forward",
                format!("batch {:?}, embedding dim {}", batch.shape(), self.d_p),
            ));
        }
        let n = batch.shape()[0] as f64;
        let e = g.constant(batch.clone())?;
        let mut latents = Vec::with_capacity(self.k());
        let mut assignments = Vec::with_capacity(self.k());
        let mut quantized = Vec::with_capacity(self.k());
        let mut vq_terms = Vec::with_capacity(self.k());
        for (i, expert) in self.experts.iter().enumerate() {
            let z = expert.forward(g, p, e)?;
            let codes = assign_rows(g.value(z), self.codebook(i))?;
            let s = g.gather_rows(p.var(self.codebooks[i]), &codes)?;
            // straight-through: value s, gradient of z
            let s_minus_z = g.sub(s, z)?;
            let st = g.stop_gradient(s_minus_z)?;
            quantized.push(g.add(z, st)?);
            // codebook and commitment terms
            let z_sg = g.stop_gradient(z)?;
            let s_sg = g.stop_gradient(s)?;
            let cb_diff = g.sub(z_sg, s)?;
            let cb_sq = g.mul(cb_diff, cb_diff)?;
            let cb = g.sum(cb_sq)?;
            let cm_diff = g.sub(z, s_sg)?;
            let cm_sq = g.mul(cm_diff, cm_diff)?;
            let cm = g.sum(cm_sq)?;
            let cm = g.scale(cm, beta)?;
            let term = g.add(cb, cm)?;
            vq_terms.push(g.scale(term, 1.0 / n)?);
            latents.push(z);
            assignments.push(codes);
        }
        let mut sum = quantized[0];
        for &q in &quantized[1..] {
            sum = g.add(sum, q)?;
        }
        let recon_out = self.decoder.forward(g, p, sum)?;
        let diff = g.sub(e, recon_out)?;
        let sq = g.mul(diff, diff)?;
        let total = g.sum(sq)?;
        let recon = g.scale(total, 1.0 / n)?;
        let mut vq = vq_terms[0];
        for &t in &vq_terms[1..] {
            vq = g.add(vq, t)?;
        }
        let orth = self.orth_penalty_graph(g, p)?;
        Ok(OpmqLosses {
            recon,
            vq,
            orth,
            latents,
            assignments,
        })
    }

    /// `|V V^T - I|_F^2` on the graph, `V` holding the L2-normalized
    /// flattened expert weights as rows.
    pub fn orth_penalty_graph(&self, g: &mut Graph, p: &Bound) -> Result<Var> {
        let mut rows = Vec::with_capacity(self.k());
        for i in 0..self.k() {
            let mut parts = Vec::new();
            for id in self.orth_params(i) {
                let len = self.store.get(id).len();
                parts.push(g.reshape(p.var(id), &[1, len])?);
            }
            let flat = if parts.len() == 1 {
                parts[0]
            } else {
                g.concat_last(&parts)?
            };
            let sq = g.mul(flat, flat)?;
            let ss = g.sum(sq)?;
            if g.scalar_value(ss) == 0.0 {
                return Err(Error::ZeroNormWeights(i));
            }
            let norm = g.sqrt(ss)?;
            let inv = g.recip(norm)?;
            rows.push(g.scale_by(flat, inv)?);
        }
        let v = g.concat_rows(&rows)?;
        let vt = g.transpose(v)?;
        let gram = g.matmul(v, vt)?;
        let eye = g.constant(Tensor::eye(self.k()))?;
        let d = g.sub(gram, eye)?;
        let d2 = g.mul(d, d)?;
        g.sum(d2)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        writeln!(f, "{OPMQ_MAGIC}")?;
        serde_json::to_writer(&mut f, self)?;
        writeln!(f)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let body = text
            .strip_prefix(OPMQ_MAGIC)
            .and_then(|rest| rest.strip_prefix('\n'))
            .ok_or_else(|| Error::Artifact(format!("{} does not start with {OPMQ_MAGIC}", path.display())))?;
        let model: Self = serde_json::from_str(body)?;
        if model.experts.len() != model.codebooks.len() || model.experts.is_empty() {
            return Err(Error::Artifact("expert and codebook counts differ".into()));
        }
        Ok(model)
    }
}

/// Graph nodes produced by [`OpmqModel::losses`].
#[derive(Clone, Debug)]
pub struct OpmqLosses {
    /// Mean over the batch of `|e - decoder(sum of quantized latents)|^2`.
    pub recon: Var,
    /// Codebook plus commitment terms, summed over experts, batch mean.
    pub vq: Var,
    pub orth: Var,
    pub latents: Vec<Var>,
    /// Per expert, the chosen codeword of every batch row.
    pub assignments: Vec<Vec<usize>>,
}

fn table_tensor(table: &EmbeddingTable) -> Result<Tensor> {
    if table.is_empty() {
        return Err(Error::Config("embedding table is empty".into()));
    }
    Tensor::matrix(table.len(), table.dim(), table.values().to_vec())
}

fn rows_tensor(table: &EmbeddingTable, rows: &[usize]) -> Tensor {
    let d = table.dim();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(table.vector(r));
    }
    Tensor::from_parts(vec![rows.len(), d], data)
}

/// Index and row of the codeword closest to `z` in squared Euclidean
/// distance; ties go to the lowest index.
pub fn nearest_codeword<'a>(z: &[f64], codebook: &'a Tensor) -> Result<(usize, &'a [f64])> {
    if codebook.shape().len() != 2 || codebook.shape()[0] == 0 {
        return Err(Error::EmptyCodebook);
    }
    if codebook.last_dim() != z.len() {
        return Err(Error::shape(
            "nearest_codeword",
            format!("latent dim {} vs codeword dim {}", z.len(), codebook.last_dim()),
        ));
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for j in 0..codebook.shape()[0] {
        let d: f64 = codebook.row(j).iter().zip(z).map(|(s, x)| (x - s) * (x - s)).sum();
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    Ok((best, codebook.row(best)))
}

fn assign_rows(z: &Tensor, codebook: &Tensor) -> Result<Vec<usize>> {
    (0..z.rows())
        .map(|r| nearest_codeword(z.row(r), codebook).map(|(c, _)| c))
        .collect()
}

/// The `K` expert latents of one embedding.
pub fn encode_experts(e_p: &[f64], model: &OpmqModel) -> Result<Vec<Vec<f64>>> {
    if e_p.len() != model.d_p {
        return Err(Error::shape(
            "encode_experts",
            format!("embedding dim {} vs model {}", e_p.len(), model.d_p),
        ));
    }
    let x = Tensor::vector(e_p.to_vec()).reshaped(&[1, model.d_p])?;
    model
        .experts
        .iter()
        .map(|e| Ok(e.eval(&model.store, &x)?.into_data()))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpmqOutput {
    pub sids: Vec<usize>,
    pub reconstruction: Vec<f64>,
    pub loss_recon: f64,
}

/// Quantizes one embedding and reconstructs it from the chosen codewords.
pub fn opmq_forward(e_p: &[f64], model: &OpmqModel) -> Result<OpmqOutput> {
    let latents = encode_experts(e_p, model)?;
    let mut sum = vec![0.0; model.d_z];
    let mut sids = Vec::with_capacity(model.k());
    for (i, z) in latents.iter().enumerate() {
        let (c, s) = nearest_codeword(z, model.codebook(i))?;
        sids.push(c);
        for (acc, v) in sum.iter_mut().zip(s) {
            *acc += v;
        }
    }
    let x = Tensor::vector(sum).reshaped(&[1, model.d_z])?;
    let reconstruction = model.decoder.eval(&model.store, &x)?.into_data();
    let loss_recon = e_p
        .iter()
        .zip(&reconstruction)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(OpmqOutput {
        sids,
        reconstruction,
        loss_recon,
    })
}

/// `|V V^T - I|_F^2` over the normalized, flattened expert weights.
pub fn orth_penalty(model: &OpmqModel) -> Result<f64> {
    let rows: Vec<Vec<f64>> = (0..model.k())
        .map(|i| {
            let flat: Vec<f64> = model
                .orth_params(i)
                .into_iter()
                .flat_map(|id| model.store.get(id).data().to_vec())
                .collect();
            let norm = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroNormWeights(i));
            }
            Ok(flat.into_iter().map(|v| v / norm).collect())
        })
        .collect::<Result<_>>()?;
    let k = rows.len();
    let mut pen = 0.0;
    for a in 0..k {
        for b in 0..k {
            let dot: f64 = rows[a].iter().zip(&rows[b]).map(|(x, y)| x * y).sum();
            let target = if a == b { 1.0 } else { 0.0 };
            pen += (dot - target) * (dot - target);
        }
    }
    Ok(pen)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpmqEpoch {
    pub epoch: usize,
    pub loss_recon: f64,
    pub loss_vq: f64,
    pub orth_penalty: f64,
    pub total: f64,
    pub reseeded_codewords: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpmqTrainLog {
    pub initial_orth_penalty: f64,
    /// Mean reconstruction loss of predicting every item by the table mean.
    pub mean_baseline_loss: f64,
    /// Reconstruction loss of the final model over the whole table.
    pub final_loss_recon: f64,
    pub final_orth_penalty: f64,
    pub epochs: Vec<OpmqEpoch>,
    /// Codes of every table row from the final training forward pass,
    /// `[item][expert]`.
    pub final_assignments: Vec<Vec<usize>>,
}

/// Mean squared distance of every row to the table mean.
pub fn mean_baseline_loss(table: &EmbeddingTable) -> f64 {
    let d = table.dim();
    let n = table.len().max(1) as f64;
    let mut mean = vec![0.0; d];
    for r in 0..table.len() {
        for (m, v) in mean.iter_mut().zip(table.vector(r)) {
            *m += v / n;
        }
    }
    (0..table.len())
        .map(|r| {
            table
                .vector(r)
                .iter()
                .zip(&mean)
                .map(|(v, m)| (v - m) * (v - m))
                .sum::<f64>()
        })
        .sum::<f64>()
        / n
}

/// Trains the tokenizer on a table of pretrained embeddings.
pub fn train_opmq(table: &EmbeddingTable, cfg: &OpmqConfig) -> Result<(OpmqModel, OpmqTrainLog)> {
    cfg.validate()?;
    if table.is_empty() {
        return Err(Error::Config("embedding table is empty".into()));
    }
    if table.len() < cfg.v {
        warn!(
            "only {} embeddings for codebooks of size {}; some codewords will duplicate",
            table.len(),
            cfg.v
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = OpmqModel::new(table.dim(), cfg, &mut rng)?;
    model.seed_codebooks(table, &mut rng)?;
    let initial_orth_penalty = orth_penalty(&model)?;
    let mut opt = OptimizerState::adam(cfg.lr);
    let mut usage = vec![vec![0usize; cfg.v]; cfg.k];
    let mut step = 0usize;
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let (mut s_recon, mut s_vq, mut s_orth, mut s_total) = (0.0, 0.0, 0.0, 0.0);
        let mut reseeded = 0;
        for rows in batch_iter(table.len(), cfg.batch_size, Some(cfg.seed), epoch) {
            let batch = rows_tensor(table, &rows);
            let mut g = Graph::new();
            let p = model.store.bind(&mut g)?;
            let l = model.losses(&mut g, &p, &batch, cfg.beta)?;
            let vq = g.scale(l.vq, cfg.vq_weight)?;
            let orth = g.scale(l.orth, cfg.w_orth)?;
            let t = g.add(l.recon, vq)?;
            let total = g.add(t, orth)?;
            let loss = g.scalar_value(total);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("tokenizer loss at epoch {epoch}, step {step}")));
            }
            let grads = g.grad(total, p.vars())?;
            model.store.apply(&mut opt, &grads)?;
            step += 1;

            let w = rows.len() as f64;
            s_recon += g.scalar_value(l.recon) * w;
            s_vq += g.scalar_value(l.vq) * w;
            s_orth += g.scalar_value(l.orth) * w;
            s_total += loss * w;
            for (i, codes) in l.assignments.iter().enumerate() {
                for &c in codes {
                    usage[i][c] += 1;
                }
            }
            if cfg.reinit_every > 0 && step.is_multiple_of(cfg.reinit_every) {
                for i in 0..cfg.k {
                    let z = g.value(l.latents[i]).clone();
                    let cb_id = model.codebooks[i];
                    for c in 0..cfg.v {
                        if usage[i][c] == 0 {
                            let r = rng.random_range(0..z.rows());
                            let d_z = model.d_z;
                            model.store.get_mut(cb_id).data_mut()[c * d_z..(c + 1) * d_z]
                                .copy_from_slice(z.row(r));
                            reseeded += 1;
                        }
                    }
                    usage[i].iter_mut().for_each(|u| *u = 0);
                }
            }
        }
        let n = table.len() as f64;
        epochs.push(OpmqEpoch {
            epoch: epoch + 1,
            loss_recon: s_recon / n,
            loss_vq: s_vq / n,
            orth_penalty: s_orth / n,
            total: s_total / n,
            reseeded_codewords: reseeded,
        });
    }

    let all = table_tensor(table)?;
    let mut g = Graph::new();
    let p = model.store.bind(&mut g)?;
    let l = model.losses(&mut g, &p, &all, cfg.beta)?;
    let final_assignments = (0..table.len())
        .map(|r| l.assignments.iter().map(|a| a[r]).collect())
        .collect();
    let final_loss_recon = catalog_recon_loss(table, &model)?;
    let log = OpmqTrainLog {
        initial_orth_penalty,
        mean_baseline_loss: mean_baseline_loss(table),
        final_loss_recon,
        final_orth_penalty: orth_penalty(&model)?,
        epochs,
        final_assignments,
    };
    Ok((model, log))
}

/// Mean reconstruction loss over the whole table.
pub fn catalog_recon_loss(table: &EmbeddingTable, model: &OpmqModel) -> Result<f64> {
    let mut total = 0.0;
    for r in 0..table.len() {
        total += opmq_forward(table.vector(r), model)?.loss_recon;
    }
    Ok(total / table.len().max(1) as f64)
}

/// Codes of every item in the table.
pub fn tokenize_catalog(table: &EmbeddingTable, model: &OpmqModel) -> Result<SidTable> {
    if table.dim() != model.d_p {
        return Err(Error::shape(
            "tokenize_catalog",
            format!("table dim {} vs model {}", table.dim(), model.d_p),
        ));
    }
    let mut sids = SidTable::new(model.k(), model.v());
    if table.is_empty() {
        return Ok(sids);
    }
    let all = table_tensor(table)?;
    let per_expert: Vec<Vec<usize>> = (0..model.k())
        .map(|i| assign_rows(&model.experts[i].eval(&model.store, &all)?, model.codebook(i)))
        .collect::<Result<_>>()?;
    for (r, id) in table.ids().iter().enumerate() {
        let codes: Vec<usize> = per_expert.iter().map(|c| c[r]).collect();
        sids.insert(id.clone(), &codes)?;
    }
    Ok(sids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_codeword_cases() {
        let cb = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(nearest_codeword(&[0.9, 0.1], &cb).unwrap().0, 0);
        assert_eq!(nearest_codeword(&[0.5, 0.5], &cb).unwrap().0, 0);
        let (c, s) = nearest_codeword(&[0.2, 0.7], &cb).unwrap();
        assert_eq!((c, s), (1, &[0.0, 1.0][..]));
        assert!(nearest_codeword(&[0.1], &cb).is_err());
    }

    #[test]
    fn empty_codebook() {
        let cb = Tensor::from_parts(vec![0, 2], vec![]);
        assert!(matches!(nearest_codeword(&[0.0, 0.0], &cb), Err(Error::EmptyCodebook)));
    }

    fn tiny_model(k: usize, activation: Activation) -> OpmqModel {
        let cfg = OpmqConfig {
            k,
            v: 4,
            activation,
            ..Default::default()
        };
        OpmqModel::new(2, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn identity_expert() {
        let mut m = tiny_model(1, Activation::Identity);
        let e = m.experts[0];
        *m.store.get_mut(e.hidden.weight) = Tensor::eye(2);
        *m.store.get_mut(e.out.weight) = Tensor::eye(2);
        let z = encode_experts(&[1.0, 2.0], &m).unwrap();
        assert_eq!(z, vec![vec![1.0, 2.0]]);
    }

    #[test]
    fn latent_shapes() {
        let m = tiny_model(3, Activation::Tanh);
        let z = encode_experts(&[0.3, -0.4], &m).unwrap();
        assert_eq!(z.len(), 3);
        assert!(z.iter().all(|v| v.len() == 2));
        assert!(encode_experts(&[1.0], &m).is_err());
    }

    #[test]
    fn orth_penalty_known_values() {
        let m = tiny_model(1, Activation::Tanh);
        assert!(orth_penalty(&m).unwrap().abs() < 1e-12);

        let mut m = tiny_model(2, Activation::Tanh);
        let w = m.store.get(m.experts[0].hidden.weight).clone();
        *m.store.get_mut(m.experts[1].hidden.weight) = w;
        assert!((orth_penalty(&m).unwrap() - 2.0).abs() < 1e-12);

        let a = m.experts[0].hidden.weight;
        let b = m.experts[1].hidden.weight;
        *m.store.get_mut(a) = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        *m.store.get_mut(b) = Tensor::matrix(2, 2, vec![0.0, 3.0, 0.0, 0.0]).unwrap();
        assert_eq!(orth_penalty(&m).unwrap(), 0.0);

        *m.store.get_mut(b) = Tensor::zeros(&[2, 2]);
        assert!(matches!(orth_penalty(&m), Err(Error::ZeroNormWeights(1))));
    }

    #[test]
    fn exact_reconstruction_has_zero_loss() {
        // identity expert, codeword equal to the latent, identity decoder
        let mut m = tiny_model(1, Activation::Identity);
        let e = m.experts[0];
        *m.store.get_mut(e.hidden.weight) = Tensor::eye(2);
        *m.store.get_mut(e.out.weight) = Tensor::eye(2);
        let d = m.decoder;
        *m.store.get_mut(d.hidden.weight) = Tensor::eye(2);
        *m.store.get_mut(d.out.weight) = Tensor::eye(2);
        let cb = m.codebooks[0];
        *m.store.get_mut(cb) = Tensor::matrix(4, 2, vec![0.0, 0.0, 1.0, 2.0, 5.0, 5.0, -1.0, 0.0]).unwrap();
        let out = opmq_forward(&[1.0, 2.0], &m).unwrap();
        assert_eq!(out.sids, vec![1]);
        assert_eq!(out.loss_recon, 0.0);
    }

    #[test]
    fn artifact_round_trip() {
        let m = tiny_model(2, Activation::Tanh);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.opmq");
        m.write(&p).unwrap();
        assert!(fs::read_to_string(&p).unwrap().starts_with("OPMQ1\n"));
        assert_eq!(OpmqModel::read(&p).unwrap(), m);
        fs::write(&p, "OPMQ0\n{}").unwrap();
        assert!(matches!(OpmqModel::read(&p), Err(Error::Artifact(_))));
    }
}
