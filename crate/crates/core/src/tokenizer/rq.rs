//! Residual quantization baseline: `K` k-means codebooks fit one after the
//! other, each on what the earlier stages left unexplained.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{nearest_codeword, SidTable};
use crate::data::EmbeddingTable;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RqConfig {
    pub k: usize,
    pub v: usize,
    /// Lloyd iterations per stage.
    pub iterations: usize,
    pub seed: u64,
}

impl Default for RqConfig {
    fn default() -> Self {
        Self {
            k: 3,
            v: 16,
            iterations: 25,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RqModel {
    pub codebooks: Vec<Tensor>,
    /// Sum of squared residual norms over the table; entry 0 is before any
    /// stage, entry `i` after stage `i`.
    pub residual_sse: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by Lloyd iterations. Ends with an update
/// step, so every occupied centroid is the mean of its members.
fn kmeans(points: &[f64], d: usize, v: usize, iterations: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n = points.len() / d;
    let row = |i: usize| &points[i * d..(i + 1) * d];
    let mut centers: Vec<f64> = Vec::with_capacity(v * d);
    centers.extend_from_slice(row(rng.random_range(0..n)));
    let mut best: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centers[0..d])).collect();
    for _ in 1..v {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in best.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = row(pick).to_vec();
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(sq_dist(row(i), &c));
        }
        centers.extend_from_slice(&c);
    }
    let mut cb = Tensor::matrix(v, d, centers)?;
    for _ in 0..iterations {
        let mut sums = vec![0.0; v * d];
        let mut counts = vec![0usize; v];
        for i in 0..n {
            let (c, _) = nearest_codeword(row(i), &cb)?;
            counts[c] += 1;
            for (s, x) in sums[c * d..(c + 1) * d].iter_mut().zip(row(i)) {
                *s += x;
            }
        }
        let data = cb.data_mut();
        for c in 0..v {
            if counts[c] > 0 {
                for j in 0..d {
                    data[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
    }
    Ok(cb)
}

/// Fits the residual quantizer and returns the codes of every item.
pub fn train_rq_baseline(table: &EmbeddingTable, cfg: &RqConfig) -> Result<(SidTable, RqModel)> {
    if cfg.k == 0 || cfg.v == 0 {
        return Err(Error::Config("k and v must be >= 1".into()));
    }
    if table.is_empty() {
        return Err(Error::Config("embedding table is empty".into()));
    }
    let d = table.dim();
    let n = table.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut residual = table.values().to_vec();
    let mut codes = vec![Vec::with_capacity(cfg.k); n];
    let mut codebooks = Vec::with_capacity(cfg.k);
    let mut residual_sse = vec![residual.iter().map(|x| x * x).sum()];
    for _ in 0..cfg.k {
        let cb = kmeans(&residual, d, cfg.v, cfg.iterations, &mut rng)?;
        let mut sse = 0.0;
        for (i, item_codes) in codes.iter_mut().enumerate() {
            let r = &mut residual[i * d..(i + 1) * d];
            let (c, s) = nearest_codeword(r, &cb)?;
            item_codes.push(c);
            for (x, y) in r.iter_mut().zip(s) {
                *x -= y;
            }
            sse += r.iter().map(|x| x * x).sum::<f64>();
        }
        residual_sse.push(sse);
        codebooks.push(cb);
    }
    let mut sids = SidTable::new(cfg.k, cfg.v);
    for (id, c) in table.ids().iter().zip(&codes) {
        sids.insert(id.clone(), c)?;
    }
    Ok((sids, RqModel { codebooks, residual_sse }))
}
