//! Dense and block-sparse (mixture-of-block) self-attention.
//!
//! Keys and values are cut into contiguous blocks of `block_size` tokens.
//! A query scores each block by the dot product with that block's mean key
//! and attends only to the keys of its top `k_blocks` blocks. When the
//! sequence length is not a multiple of the block size the last block is
//! simply shorter, which is the same as padding with masked tokens that
//! never enter a gate, a softmax, or an output.
//!
//! Scores are scaled by `1/sqrt(d_head)`. Attention is non-causal: every
//! token is a feature of the same instance.

pub mod kernel;

use std::ops::Range;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of blocks needed to cover `seq` tokens.
pub fn num_blocks(seq: usize, block_size: usize) -> usize {
    seq.div_ceil(block_size)
}

/// `max(1, ceil(rho * seq / block_size))`, capped at the block count.
pub fn k_blocks_for(seq: usize, block_size: usize, sparsity: f64) -> usize {
    let raw = (sparsity * seq as f64 / block_size as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(num_blocks(seq, block_size))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteConfig {
    pub block_size: usize,
    pub k_blocks: usize,
    /// Always keep the block that contains the query.
    pub force_own_block: bool,
}

/// Selected blocks (and the gate scores that chose them) for every query of
/// every (batch element, head) slot.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingPlan {
    seq_len: usize,
    block_size: usize,
    n_blocks: usize,
    k_blocks: usize,
    slots: usize,
    selected: Vec<usize>,
    gates: Vec<f64>,
}

impl RoutingPlan {
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn k_blocks(&self) -> usize {
        self.k_blocks
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    /// Ascending block indices chosen for `query` in `slot`.
    pub fn blocks(&self, slot: usize, query: usize) -> &[usize] {
        let o = (slot * self.seq_len + query) * self.k_blocks;
        &self.selected[o..o + self.k_blocks]
    }

    pub fn gates(&self, slot: usize, query: usize) -> &[f64] {
        let o = (slot * self.seq_len + query) * self.n_blocks;
        &self.gates[o..o + self.n_blocks]
    }

    pub fn block_range(&self, block: usize) -> Range<usize> {
        block * self.block_size..((block + 1) * self.block_size).min(self.seq_len)
    }

    pub(crate) fn check(&self, slots: usize, seq: usize) -> Result<()> {
        if self.slots != slots || self.seq_len != seq {
            return Err(Error::shape(
                "routing plan",
                format!(
                    "plan covers {} slots x {} tokens, input has {slots} x {seq}",
                    self.slots, self.seq_len
                ),
            ));
        }
        Ok(())
    }
}

/// Routes every query of every head of every batch element.
///
/// `q` and `k` are flat `[batch, seq, d_model]` buffers.
pub fn route_batch(
    q: &[f64],
    k: &[f64],
    batch: usize,
    seq: usize,
    d_model: usize,
    heads: usize,
    cfg: RouteConfig,
) -> Result<RoutingPlan> {
    if cfg.block_size == 0 {
        return Err(Error::Config("block size must be >= 1".into()));
    }
    let n_blocks = num_blocks(seq, cfg.block_size);
    if cfg.k_blocks == 0 || cfg.k_blocks > n_blocks {
        return Err(Error::Config(format!(
            "k_blocks {} must be in 1..={n_blocks}",
            cfg.k_blocks
        )));
    }
    let dims = kernel::Dims::new(batch, seq, d_model, heads)?;
    let dh = dims.d_head;
    let slots = batch * heads;
    let mut selected = Vec::with_capacity(slots * seq * cfg.k_blocks);
    let mut gates = Vec::with_capacity(slots * seq * n_blocks);
    let mut means = vec![0.0; n_blocks * dh];
    let mut order: Vec<usize> = Vec::with_capacity(n_blocks);
    for b in 0..batch {
        for h in 0..heads {
            means.iter_mut().for_each(|m| *m = 0.0);
            for blk in 0..n_blocks {
                let range = blk * cfg.block_size..((blk + 1) * cfg.block_size).min(seq);
                let count = range.len() as f64;
                let mean = &mut means[blk * dh..(blk + 1) * dh];
                for j in range {
                    let o = (b * seq + j) * d_model + h * dh;
                    for (m, kv) in mean.iter_mut().zip(&k[o..o + dh]) {
                        *m += kv;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
            }
            for i in 0..seq {
                let o = (b * seq + i) * d_model + h * dh;
                let qi = &q[o..o + dh];
                let start = gates.len();
                for blk in 0..n_blocks {
                    let g: f64 = qi.iter().zip(&means[blk * dh..(blk + 1) * dh]).map(|(a, c)| a * c).sum();
                    gates.push(g);
                }
                let g = &gates[start..];
                let own = i / cfg.block_size;
                order.clear();
                order.extend(0..n_blocks);
                // Highest gate first; ties go to the lower block index.
                order.sort_by(|&x, &y| g[y].total_cmp(&g[x]).then(x.cmp(&y)));
                let first = selected.len();
                if cfg.force_own_block {
                    selected.push(own);
                    selected.extend(order.iter().copied().filter(|&x| x != own).take(cfg.k_blocks - 1));
                } else {
                    selected.extend(order.iter().copied().take(cfg.k_blocks));
                }
                selected[first..].sort_unstable();
            }
        }
    }
    Ok(RoutingPlan {
        seq_len: seq,
        block_size: cfg.block_size,
        n_blocks,
        k_blocks: cfg.k_blocks,
        slots,
        selected,
        gates,
    })
}

/// Routes a single head: `q` and `k` are `[seq, d_head]`.
pub fn moba_route(q: &Tensor, k: &Tensor, cfg: RouteConfig) -> Result<RoutingPlan> {
    if q.shape().len() != 2 || q.shape() != k.shape() {
        return Err(Error::shape(
            "moba_route",
            format!("q {:?} vs k {:?}", q.shape(), k.shape()),
        ));
    }
    let (seq, dh) = (q.shape()[0], q.shape()[1]);
    route_batch(q.data(), k.data(), 1, seq, dh, 1, cfg)
}

/// Projection weights and routing knobs for one attention layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub n_heads: usize,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub block_size: usize,
    pub sparsity: f64,
    pub force_own_block: bool,
}

impl AttentionParams {
    pub fn random(
        d_model: usize,
        n_heads: usize,
        block_size: usize,
        sparsity: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (d_model as f64).sqrt();
        let p = Self {
            n_heads,
            wq: Tensor::randn(&[d_model, d_model], std, &mut rng),
            wk: Tensor::randn(&[d_model, d_model], std, &mut rng),
            wv: Tensor::randn(&[d_model, d_model], std, &mut rng),
            wo: Tensor::randn(&[d_model, d_model], std, &mut rng),
            block_size,
            sparsity,
            force_own_block: true,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn d_model(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        for w in [&self.wq, &self.wk, &self.wv, &self.wo] {
            if w.shape() != [d, d] {
                return Err(Error::shape("attention params", format!("{:?}", w.shape())));
            }
        }
        if self.n_heads == 0 || !d.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {d} not divisible by {} heads",
                self.n_heads
            )));
        }
        if self.block_size == 0 {
            return Err(Error::Config("block size must be >= 1".into()));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(Error::Config(format!("sparsity {} not in (0, 1]", self.sparsity)));
        }
        Ok(())
    }

    pub fn k_blocks(&self, seq: usize) -> usize {
        k_blocks_for(seq, self.block_size, self.sparsity)
    }

    pub fn route_config(&self, seq: usize) -> RouteConfig {
        RouteConfig {
            block_size: self.block_size,
            k_blocks: self.k_blocks(seq),
            force_own_block: self.force_own_block,
        }
    }
}

fn as_batch(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, d] => Ok((1, h, d)),
        [n, h, d] => Ok((n, h, d)),
        _ => Err(Error::shape("attention", format!("{:?}", x.shape()))),
    }
}

fn run(x: &Tensor, params: &AttentionParams, sparse: bool) -> Result<Tensor> {
    params.validate()?;
    let (n, h, d) = as_batch(x)?;
    if h == 0 {
        return Err(Error::shape("attention", "H must be >= 1"));
    }
    if d != params.d_model() {
        return Err(Error::shape(
            "attention",
            format!("token dim {d} vs d_model {}", params.d_model()),
        ));
    }
    let q = x.matmul(&params.wq)?;
    let k = x.matmul(&params.wk)?;
    let v = x.matmul(&params.wv)?;
    let dims = kernel::Dims::new(n, h, d, params.n_heads)?;
    let cfg = params.route_config(h);
    let plan = if sparse && cfg.k_blocks < num_blocks(h, cfg.block_size) {
        Some(route_batch(q.data(), k.data(), n, h, d, params.n_heads, cfg)?)
    } else {
        None
    };
    let (ctx, _) = kernel::forward(q.data(), k.data(), v.data(), dims, plan.as_ref(), false);
    let ctx = Tensor::from_parts(x.shape().to_vec(), ctx);
    ctx.matmul(&params.wo)
}

/// Full multi-head attention over all `H` tokens of each instance.
/// Accepts `[H, d]` or `[N, H, d]`.
pub fn dense_attention(x: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    run(x, params, false)
}

/// Block-routed attention; each query only sees keys in its routed blocks.
/// Identical to [`dense_attention`] when every block is selected.
pub fn efficient_attention(x: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    run(x, params, true)
}

/// Routing plan that [`efficient_attention`] would use for `x`, or `None`
/// when every block is selected.
pub fn plan_for(x: &Tensor, params: &AttentionParams) -> Result<Option<Rc<RoutingPlan>>> {
    let (n, h, d) = as_batch(x)?;
    let cfg = params.route_config(h);
    if cfg.k_blocks >= num_blocks(h, cfg.block_size) {
        return Ok(None);
    }
    let q = x.matmul(&params.wq)?;
    let k = x.matmul(&params.wk)?;
    Ok(Some(Rc::new(route_batch(
        q.data(),
        k.data(),
        n,
        h,
        d,
        params.n_heads,
        cfg,
    )?)))
}

/// Multiply-add counts for one attention layer on one instance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopCount {
    /// Q, K, V and output projections.
    pub projections: u64,
    /// Query-key dot products.
    pub scores: u64,
    /// Probability-weighted sum of values.
    pub values: u64,
    /// Block key means and gate scores.
    pub routing: u64,
}

impl FlopCount {
    pub fn attention_terms(&self) -> u64 {
        self.scores + self.values
    }

    pub fn total(&self) -> u64 {
        self.projections + self.scores + self.values + self.routing
    }
}

/// Analytic multiply-add count of one attention layer for one instance.
///
/// Each query scores `min(k_blocks * B, H)` keys; with `k_blocks` equal to
/// the block count this is the dense cost and no routing work is charged.
pub fn attention_flops(
    seq: usize,
    d_model: usize,
    n_heads: usize,
    block_size: usize,
    k_blocks: usize,
    include_projections: bool,
) -> Result<FlopCount> {
    if n_heads == 0 || !d_model.is_multiple_of(n_heads) || block_size == 0 || seq == 0 {
        return Err(Error::Config(format!(
            "invalid attention dims H={seq} d={d_model} heads={n_heads} B={block_size}"
        )));
    }
    let n_blocks = num_blocks(seq, block_size);
    let k_blocks = k_blocks.clamp(1, n_blocks);
    let (h, d) = (seq as u64, d_model as u64);
    let keys = ((k_blocks * block_size).min(seq)) as u64;
    let routing = if k_blocks < n_blocks {
        // block means over keys + one gate per (query, block), summed over heads
        h * d + h * n_blocks as u64 * d
    } else {
        0
    };
    Ok(FlopCount {
        projections: if include_projections { 4 * h * d * d } else { 0 },
        scores: h * keys * d,
        values: h * keys * d,
        routing,
    })
}
