//! The ranking model.
//!
//! Each instance becomes `H` tokens. Token `i` is a shared linear map of the
//! concatenation of the `i`-th semantic-ID embedding and the feature block
//! rotated by `R_i`. The tokens pass through `L` layers of
//! `LN(attention(X) + X)`, are mean-pooled, and a linear head gives the
//! click logit.

mod baseline;
mod train;

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_flops, k_blocks_for, num_blocks, route_batch, RouteConfig, RoutingPlan};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, Linear, Mlp, ParamId, ParamStore};
use crate::rotation::{GroupConfig, GroupFusion, RotationBank};
use crate::tensor::{Graph, Tensor, Var, LN_EPS};
use crate::tokenizer::SidTable;

pub use baseline::{fit_logistic, LogisticConfig, LogisticModel};
pub use train::{evaluate, fit, predict, EpochRecord, FitReport, TrainOptions};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    #[default]
    Efficient,
    Vanilla,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemInput {
    /// One learned embedding table per semantic-ID position.
    #[default]
    Sid,
    /// A single item-id embedding, repeated at every token position.
    RawId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoreConfig {
    /// Tokens per instance; equals the number of semantic IDs per item.
    pub h: usize,
    /// Codes per semantic-ID position.
    pub v: usize,
    /// Semantic-ID (or raw-id) embedding width.
    pub d_s: usize,
    /// Token width.
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub block_size: usize,
    pub sparsity: f64,
    pub force_own_block: bool,
    pub attention: AttentionKind,
    pub ffn: bool,
    pub item_input: ItemInput,
    pub rotation: bool,
    /// Diversity weight of the rotation bank.
    pub lambda: f64,
    /// Step size of the rotation updates.
    pub rotation_lr: f64,
    /// Batches between rotation updates.
    pub rotation_every: usize,
    pub groups: GroupConfig,
    /// Group count used when `groups` lists no groups.
    pub default_groups: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            h: 3,
            v: 16,
            d_s: 8,
            d: 16,
            n_layers: 2,
            n_heads: 2,
            block_size: 1,
            sparsity: 0.5,
            force_own_block: true,
            attention: AttentionKind::Efficient,
            ffn: false,
            item_input: ItemInput::Sid,
            rotation: true,
            lambda: 0.1,
            rotation_lr: 0.01,
            rotation_every: 1,
            groups: GroupConfig::default(),
            default_groups: 3,
            lr: 2e-3,
            batch_size: 1024,
            epochs: 1,
            seed: 42,
        }
    }
}

impl StoreConfig {
    /// The larger setting: 32 semantic IDs over codebooks of 300.
    pub fn industrial() -> Self {
        Self {
            h: 32,
            v: 300,
            d_s: 32,
            d: 64,
            n_heads: 4,
            block_size: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("h", self.h),
            ("v", self.v),
            ("d_s", self.d_s),
            ("d", self.d),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("block_size", self.block_size),
            ("batch_size", self.batch_size),
            ("rotation_every", self.rotation_every),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if !self.d.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("d {} not divisible by {} heads", self.d, self.n_heads)));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(Error::Config(format!("sparsity {} not in (0, 1]", self.sparsity)));
        }
        if !(self.lr > 0.0) || self.rotation_lr < 0.0 || self.lambda < 0.0 {
            return Err(Error::Config("learning rates and lambda must be non-negative".into()));
        }
        Ok(())
    }

    /// Routed blocks per query; all blocks for vanilla attention.
    pub fn k_blocks(&self) -> usize {
        match self.attention {
            AttentionKind::Vanilla => num_blocks(self.h, self.block_size),
            AttentionKind::Efficient => k_blocks_for(self.h, self.block_size, self.sparsity),
        }
    }

    fn route_config(&self) -> RouteConfig {
        RouteConfig {
            block_size: self.block_size,
            k_blocks: self.k_blocks(),
            force_own_block: self.force_own_block,
        }
    }

    fn routed(&self) -> bool {
        self.k_blocks() < num_blocks(self.h, self.block_size)
    }
}

/// Maps a dataset's item index to the embedding rows of its tokens.
#[derive(Clone, Debug, PartialEq)]
pub enum ItemLookup {
    /// `codes[item * h + i]` is the code at position `i`.
    Sids { h: usize, codes: Vec<u16> },
    /// `rows[item]` is the raw-id embedding row; row 0 is out-of-vocabulary.
    RawIds { rows: Vec<usize>, table_rows: usize },
}

impl ItemLookup {
    /// Semantic IDs of every item key; every key must be in `sids`.
    pub fn from_sids(sids: &SidTable, item_keys: &[String]) -> Result<Self> {
        let h = sids.k();
        let mut codes = Vec::with_capacity(item_keys.len() * h);
        for key in item_keys {
            let c = sids
                .get(key)
                .ok_or_else(|| Error::Config(format!("item {key} has no semantic id")))?;
            codes.extend_from_slice(c);
        }
        Ok(Self::Sids { h, codes })
    }

    /// Raw-id rows: items seen in `train` get their own row, the rest share
    /// the out-of-vocabulary row 0.
    pub fn raw_ids(train: &Dataset, n_items: usize) -> Self {
        let mut rows = vec![0usize; n_items];
        let mut next = 1;
        for &it in &train.items {
            let r = &mut rows[it as usize];
            if *r == 0 {
                *r = next;
                next += 1;
            }
        }
        Self::RawIds { rows, table_rows: next }
    }

    pub fn n_items(&self) -> usize {
        match self {
            Self::Sids { h, codes } => codes.len() / h,
            Self::RawIds { rows, .. } => rows.len(),
        }
    }
}

/// Model inputs for a set of instances.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub n: usize,
    /// Per token position, the embedding row of each instance.
    pub items: Vec<Vec<usize>>,
    pub statics: Vec<u32>,
    pub n_static: usize,
    pub labels: Vec<f64>,
}

impl Batch {
    pub fn from_rows(ds: &Dataset, rows: &[usize], lookup: &ItemLookup, h: usize) -> Result<Self> {
        let mut items = vec![Vec::with_capacity(rows.len()); h];
        let mut statics = Vec::with_capacity(rows.len() * ds.n_static());
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            let it = ds.items[r] as usize;
            if it >= lookup.n_items() {
                return Err(Error::OutOfRange {
                    what: "item lookup",
                    index: it,
                    len: lookup.n_items(),
                });
            }
            match lookup {
                ItemLookup::Sids { h: hs, codes } => {
                    if *hs != h {
                        return Err(Error::Config(format!("{hs} semantic ids per item but H = {h}")));
                    }
                    for (i, pos) in items.iter_mut().enumerate() {
                        pos.push(codes[it * h + i] as usize);
                    }
                }
                ItemLookup::RawIds { rows: map, .. } => {
                    for pos in items.iter_mut() {
                        pos.push(map[it]);
                    }
                }
            }
            statics.extend_from_slice(ds.static_row(r));
            labels.push(f64::from(ds.labels[r]));
        }
        Ok(Self {
            n: rows.len(),
            items,
            statics,
            n_static: ds.n_static(),
            labels,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub ffn: Option<(Mlp, ParamId, ParamId)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreModel {
    pub cfg: StoreConfig,
    pub store: ParamStore,
    /// One table per token position for semantic IDs, a single table for
    /// raw ids.
    pub item_tables: Vec<ParamId>,
    pub fusion: GroupFusion,
    pub proj: Linear,
    pub layers: Vec<LayerParams>,
    pub head: Linear,
    pub rotations: RotationBank,
}

/// Graph leaves of a model: network parameters and rotation matrices.
#[derive(Clone, Debug)]
pub struct Bindings {
    pub params: Bound,
    pub rotations: Vec<Var>,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub logits: Var,
    /// Feature block `[n, d_c]`.
    pub block: Var,
    /// `C R_i` for every token position.
    pub rotated: Vec<Var>,
    /// `[n, H, d]` before the first layer.
    pub tokens: Var,
    /// Output of every layer.
    pub layers: Vec<Var>,
    /// Routing of every layer (`None` when every block is attended).
    pub plans: Vec<Option<Rc<RoutingPlan>>>,
}

fn at_layer(l: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("layer {l}: {m}")),
        other => other,
    }
}

impl StoreModel {
    /// `item_rows` is the raw-id table size and is ignored for semantic IDs.
    pub fn new(cfg: &StoreConfig, static_names: &[String], static_cards: &[usize], item_rows: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let item_tables = match cfg.item_input {
            ItemInput::Sid => (0..cfg.h)
                .map(|i| store.add(format!("sid{i}"), Tensor::randn(&[cfg.v, cfg.d_s], 0.1, &mut rng)))
                .collect(),
            ItemInput::RawId => {
                if item_rows == 0 {
                    return Err(Error::Config("raw-id table needs at least one row".into()));
                }
                vec![store.add("item_id", Tensor::randn(&[item_rows, cfg.d_s], 0.1, &mut rng))]
            }
        };
        let groups = if cfg.groups.groups.is_empty() {
            GroupConfig::contiguous(
                static_names,
                cfg.default_groups.min(static_names.len()).max(1),
                cfg.groups.embed_dim,
                cfg.groups.d_g,
            )?
        } else {
            cfg.groups.clone()
        };
        let fusion = GroupFusion::new(&mut store, &groups, static_names, static_cards, &mut rng)?;
        let d_c = fusion.d_c();
        let proj = Linear::new(&mut store, "proj", cfg.d_s + d_c, cfg.d, &mut rng);
        let std = (1.0 / cfg.d as f64).sqrt();
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let mut w = |n: &str| store.add(format!("layer{l}.{n}"), Tensor::randn(&[cfg.d, cfg.d], std, &mut rng));
                let (wq, wk, wv, wo) = (w("wq"), w("wk"), w("wv"), w("wo"));
                let ln_gamma = store.add(format!("layer{l}.ln.gamma"), Tensor::filled(&[cfg.d], 1.0));
                let ln_beta = store.add(format!("layer{l}.ln.beta"), Tensor::zeros(&[cfg.d]));
                let ffn = cfg.ffn.then(|| {
                    let mlp = Mlp::new(
                        &mut store,
                        &format!("layer{l}.ffn"),
                        (cfg.d, 2 * cfg.d, cfg.d),
                        Activation::Tanh,
                        &mut rng,
                    );
                    let g = store.add(format!("layer{l}.ffn_ln.gamma"), Tensor::filled(&[cfg.d], 1.0));
                    let b = store.add(format!("layer{l}.ffn_ln.beta"), Tensor::zeros(&[cfg.d]));
                    (mlp, g, b)
                });
                LayerParams {
                    wq,
                    wk,
                    wv,
                    wo,
                    ln_gamma,
                    ln_beta,
                    ffn,
                }
            })
            .collect();
        let head = Linear::zeros(&mut store, "head", cfg.d, 1);
        let rotations = if cfg.rotation {
            RotationBank::random(cfg.h, d_c, cfg.lambda, cfg.seed ^ 0x5eed)?
        } else {
            RotationBank::identity(cfg.h, d_c, cfg.lambda)
        };
        Ok(Self {
            cfg: cfg.clone(),
            store,
            item_tables,
            fusion,
            proj,
            layers,
            head,
            rotations,
        })
    }

    pub fn d_c(&self) -> usize {
        self.fusion.d_c()
    }

    pub fn bind(&self, g: &mut Graph) -> Result<Bindings> {
        let params = self.store.bind(g)?;
        let rotations = self
            .rotations
            .mats
            .iter()
            .map(|r| g.param(r.clone()))
            .collect::<Result<_>>()?;
        Ok(Bindings { params, rotations })
    }

    /// Builds the `[n, H, d]` token tensor.
    pub fn build_tokens(&self, g: &mut Graph, b: &Bindings, batch: &Batch) -> Result<(Var, Var, Vec<Var>)> {
        let h = self.cfg.h;
        if batch.items.len() != h || b.rotations.len() != h {
            return Err(Error::shape(
                "build_tokens",
                format!("{} id positions and {} rotations for H = {h}", batch.items.len(), b.rotations.len()),
            ));
        }
        let block = self.fusion.forward(g, &b.params, &batch.statics, batch.n_static)?;
        let mut tokens = Vec::with_capacity(h);
        let mut rotated = Vec::with_capacity(h);
        let mut raw = None;
        for i in 0..h {
            let s = match self.cfg.item_input {
                ItemInput::Sid => g.gather_rows(b.params.var(self.item_tables[i]), &batch.items[i])?,
                ItemInput::RawId => match raw {
                    Some(v) => v,
                    None => {
                        let v = g.gather_rows(b.params.var(self.item_tables[0]), &batch.items[i])?;
                        raw = Some(v);
                        v
                    }
                },
            };
            let o = g.matmul(block, b.rotations[i])?;
            rotated.push(o);
            let x = g.concat_last(&[s, o])?;
            tokens.push(self.proj.forward(g, &b.params, x)?);
        }
        let flat = if h == 1 { tokens[0] } else { g.concat_last(&tokens)? };
        let x0 = g.reshape(flat, &[batch.n, h, self.cfg.d])?;
        Ok((x0, block, rotated))
    }

    /// Forward pass up to the logits. With `frozen` set, the given routing
    /// is reused instead of being recomputed from the current weights.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bindings,
        batch: &Batch,
        frozen: Option<&[Option<Rc<RoutingPlan>>]>,
    ) -> Result<ForwardOut> {
        if batch.n == 0 {
            return Err(Error::shape("forward", "empty batch"));
        }
        let (tokens, block, rotated) = self.build_tokens(g, b, batch)?;
        let p = &b.params;
        let (h, d) = (self.cfg.h, self.cfg.d);
        let mut x = tokens;
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut plans = Vec::with_capacity(self.layers.len());
        for (l, lp) in self.layers.iter().enumerate() {
            let run = |g: &mut Graph| -> Result<(Var, Option<Rc<RoutingPlan>>)> {
                let q = g.matmul(x, p.var(lp.wq))?;
                let k = g.matmul(x, p.var(lp.wk))?;
                let v = g.matmul(x, p.var(lp.wv))?;
                let plan = match frozen {
                    Some(f) => f.get(l).cloned().flatten(),
                    None if self.cfg.routed() => Some(Rc::new(route_batch(
                        g.value(q).data(),
                        g.value(k).data(),
                        batch.n,
                        h,
                        d,
                        self.cfg.n_heads,
                        self.cfg.route_config(),
                    )?)),
                    None => None,
                };
                let ctx = g.attention(q, k, v, self.cfg.n_heads, plan.clone())?;
                let out = g.matmul(ctx, p.var(lp.wo))?;
                let res = g.add(x, out)?;
                let mut y = g.layer_norm(res, p.var(lp.ln_gamma), p.var(lp.ln_beta), LN_EPS)?;
                if let Some((mlp, gamma, beta)) = &lp.ffn {
                    let f = mlp.forward(g, p, y)?;
                    let r = g.add(y, f)?;
                    y = g.layer_norm(r, p.var(*gamma), p.var(*beta), LN_EPS)?;
                }
                Ok((y, plan))
            };
            let (y, plan) = run(g).map_err(at_layer(l))?;
            x = y;
            layers.push(y);
            plans.push(plan);
        }
        let pooled = g.mean_tokens(x)?;
        let logits = self.head.forward(g, p, pooled)?;
        Ok(ForwardOut {
            logits,
            block,
            rotated,
            tokens,
            layers,
            plans,
        })
    }

    /// Multiply-adds of one forward pass for one instance.
    pub fn forward_madds(&self) -> Result<u64> {
        model_forward_madds(&self.cfg, &self.fusion_shape())
    }

    fn fusion_shape(&self) -> Vec<(usize, usize)> {
        self.fusion
            .mlps
            .iter()
            .map(|m| (m.in_dim(&self.store), m.out_dim(&self.store)))
            .collect()
    }
}

/// Forward multiply-adds per instance. `groups` gives each fusion MLP's
/// input and output width.
pub fn model_forward_madds(cfg: &StoreConfig, groups: &[(usize, usize)]) -> Result<u64> {
    let (h, d) = (cfg.h as u64, cfg.d as u64);
    let d_c: u64 = groups.iter().map(|&(_, o)| o as u64).sum();
    let fusion: u64 = groups
        .iter()
        .map(|&(i, o)| (i as u64) * 2 * o as u64 + 2 * (o as u64) * o as u64)
        .sum();
    let rotations = h * d_c * d_c;
    let proj = h * (cfg.d_s as u64 + d_c) * d;
    let attn = attention_flops(cfg.h, cfg.d, cfg.n_heads, cfg.block_size, cfg.k_blocks(), true)?.total();
    let ffn = if cfg.ffn { h * 4 * d * d } else { 0 };
    let head = d;
    Ok(fusion + rotations + proj + cfg.n_layers as u64 * (attn + ffn) + head)
}

/// Floating-point operations of one training step on `batch_size`
/// instances: two flops per multiply-add, backward counted as twice the
/// forward.
pub fn training_flops_per_batch(forward_madds: u64, batch_size: usize) -> u64 {
    3 * 2 * forward_madds * batch_size as u64
}
