//! Shared forward/backward kernels for multi-head attention with optional
//! block routing. Tensors are flat `[batch, seq, d_model]` buffers; head `h`
//! owns columns `h * d_head .. (h + 1) * d_head`.

use std::ops::Range;

use super::RoutingPlan;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct Dims {
    pub batch: usize,
    pub seq: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_head: usize,
}

impl Dims {
    pub fn new(batch: usize, seq: usize, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::shape(
                "attention",
                format!("d_model {d_model} not divisible by {heads} heads"),
            ));
        }
        if seq == 0 {
            return Err(Error::shape("attention", "empty sequence"));
        }
        Ok(Self {
            batch,
            seq,
            d_model,
            heads,
            d_head: d_model / heads,
        })
    }

    fn scale(&self) -> f64 {
        1.0 / (self.d_head as f64).sqrt()
    }

    #[inline]
    fn at(&self, b: usize, i: usize, h: usize) -> usize {
        (b * self.seq + i) * self.d_model + h * self.d_head
    }
}

fn key_ranges(plan: Option<&RoutingPlan>, slot: usize, query: usize, seq: usize, buf: &mut Vec<Range<usize>>) {
    buf.clear();
    match plan {
        None => buf.push(0..seq),
        Some(p) => buf.extend(p.blocks(slot, query).iter().map(|&b| p.block_range(b))),
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns the attention output and, when `keep_probs`, the dense
/// `[batch * heads, seq, seq]` probability buffer (zeros off the routed
/// keys).
pub fn forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dims: Dims,
    plan: Option<&RoutingPlan>,
    keep_probs: bool,
) -> (Vec<f64>, Vec<f64>) {
    let Dims {
        batch,
        seq,
        heads,
        d_head,
        ..
    } = dims;
    let scale = dims.scale();
    let mut out = vec![0.0; q.len()];
    let mut probs = if keep_probs {
        vec![0.0; batch * heads * seq * seq]
    } else {
        Vec::new()
    };
    let mut scores = vec![0.0; seq];
    let mut ranges = Vec::new();
    for b in 0..batch {
        for h in 0..heads {
            let slot = b * heads + h;
            for i in 0..seq {
                let qi = &q[dims.at(b, i, h)..dims.at(b, i, h) + d_head];
                key_ranges(plan, slot, i, seq, &mut ranges);
                let mut max = f64::NEG_INFINITY;
                for r in &ranges {
                    for j in r.clone() {
                        let s = scale * dot(qi, &k[dims.at(b, j, h)..dims.at(b, j, h) + d_head]);
                        scores[j] = s;
                        max = max.max(s);
                    }
                }
                let mut z = 0.0;
                for r in &ranges {
                    for j in r.clone() {
                        scores[j] = (scores[j] - max).exp();
                        z += scores[j];
                    }
                }
                let o = dims.at(b, i, h);
                for r in &ranges {
                    for j in r.clone() {
                        let p = scores[j] / z;
                        if keep_probs {
                            probs[(slot * seq + i) * seq + j] = p;
                        }
                        let vj = &v[dims.at(b, j, h)..dims.at(b, j, h) + d_head];
                        for (ov, vv) in out[o..o + d_head].iter_mut().zip(vj) {
                            *ov += p * vv;
                        }
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Gradients of the attention output with respect to q, k and v, with the
/// routing plan held fixed.
pub fn backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    gout: &[f64],
    dims: Dims,
    plan: Option<&RoutingPlan>,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let Dims {
        batch,
        seq,
        heads,
        d_head,
        ..
    } = dims;
    let scale = dims.scale();
    let mut gq = vec![0.0; q.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gv = vec![0.0; v.len()];
    let mut dp = vec![0.0; seq];
    let mut ranges = Vec::new();
    for b in 0..batch {
        for h in 0..heads {
            let slot = b * heads + h;
            for i in 0..seq {
                let oi = dims.at(b, i, h);
                let go = &gout[oi..oi + d_head];
                let prow = &probs[(slot * seq + i) * seq..(slot * seq + i + 1) * seq];
                key_ranges(plan, slot, i, seq, &mut ranges);
                let mut weighted = 0.0;
                for r in &ranges {
                    for j in r.clone() {
                        let vj = dims.at(b, j, h);
                        dp[j] = dot(go, &v[vj..vj + d_head]);
                        weighted += prow[j] * dp[j];
                        for (g, gov) in gv[vj..vj + d_head].iter_mut().zip(go) {
                            *g += prow[j] * gov;
                        }
                    }
                }
                for r in &ranges {
                    for j in r.clone() {
                        let ds = prow[j] * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = dims.at(b, j, h);
                        for c in 0..d_head {
                            gq[oi + c] += ds * k[kj + c];
                            gk[kj + c] += ds * q[oi + c];
                        }
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}
