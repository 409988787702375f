//! Oracles and fixtures shared by the integration tests. Each oracle is
//! written with plain loops and never calls the code path it checks.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use store_core::attention::{route_batch, RouteConfig, RoutingPlan};
use store_core::data::{Dataset, EmbeddingTable};
use store_core::metrics::EvalRecord;
use store_core::model::{Batch, ItemLookup, StoreConfig, StoreModel};
use store_core::nn::ParamId;
use store_core::rotation::{GroupConfig, RotationBank};
use store_core::tensor::gradcheck::{max_rel_error, numeric_grad};
use store_core::tensor::{Graph, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    Distribution::<f64>::sample(&StandardNormal, rng)
}

/// `n` items around `clusters` Gaussian centers.
pub fn clustered_table(n: usize, d: usize, clusters: usize, noise: f64, seed: u64) -> EmbeddingTable {
    let mut rng = rng(seed);
    let centers: Vec<f64> = (0..clusters * d).map(|_| normal(&mut rng)).collect();
    let mut t = EmbeddingTable::new(d);
    for i in 0..n {
        let c = i % clusters;
        let v: Vec<f64> = (0..d).map(|j| centers[c * d + j] + noise * normal(&mut rng)).collect();
        t.insert(format!("item{i}"), &v).unwrap();
    }
    t
}

/// Index of the nearest row by exhaustive squared distance; lowest index on ties.
pub fn exhaustive_nearest(z: &[f64], codebook: &Tensor) -> usize {
    let mut best = (f64::INFINITY, 0);
    for j in 0..codebook.shape()[0] {
        let d: f64 = z.iter().enumerate().map(|(c, v)| (v - codebook.at2(j, c)).powi(2)).sum();
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

// ---- gradients ----

/// Max relative error between the tape gradient of `sum(op(inputs) * w)`
/// and central differences, for a random fixed weighting `w`.
pub fn op_grad_error(inputs: &[Tensor], op: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone()).unwrap()).collect();
    let out = op(&mut g, &vars);
    let w = Tensor::randn(g.value(out).shape(), 1.0, &mut rng(77));
    let wv = g.constant(w.clone()).unwrap();
    let prod = g.mul(out, wv).unwrap();
    let loss = g.sum(prod).unwrap();
    let analytic = g.grad(loss, &vars).unwrap();
    let numeric = numeric_grad(inputs, |ts| {
        let mut g = Graph::new();
        let vs: Vec<Var> = ts.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
        let o = op(&mut g, &vs);
        g.value(o).data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    });
    max_rel_error(&analytic, &numeric, 1e-4)
}

/// Gradient error of every differentiable graph operation.
pub fn elementary_grad_errors() -> Vec<(&'static str, f64)> {
    let mut r = rng(5);
    let mut rn = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut r);
    let a = rn(&[3, 4]);
    let b = rn(&[3, 4]);
    let m = rn(&[4, 5]);
    let x3 = rn(&[2, 3, 4]);
    let bias = rn(&[4]);
    let s = Tensor::scalar(0.7);
    let pos = Tensor::uniform(&[3, 4], 0.5, 2.0, &mut rng(6));
    let away = Tensor::new(vec![2, 3], vec![0.8, -1.3, 1.9, -0.6, 1.1, -2.2]).unwrap();
    let table = rn(&[5, 3]);
    let gamma = Tensor::uniform(&[4], 0.5, 1.5, &mut rng(7));
    let logits = rn(&[6, 1]);
    let labels = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    let (q, k, v) = (rn(&[2, 6, 4]), rn(&[2, 6, 4]), rn(&[2, 6, 4]));
    let plan = Rc::new(
        route_batch(
            q.data(),
            k.data(),
            2,
            6,
            4,
            2,
            RouteConfig {
                block_size: 2,
                k_blocks: 2,
                force_own_block: true,
            },
        )
        .unwrap(),
    );

    vec![
        ("add", op_grad_error(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap())),
        ("sub", op_grad_error(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]).unwrap())),
        ("mul", op_grad_error(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]).unwrap())),
        ("scale", op_grad_error(std::slice::from_ref(&a), |g, v| g.scale(v[0], -1.7).unwrap())),
        ("scale_by", op_grad_error(&[a.clone(), s], |g, v| g.scale_by(v[0], v[1]).unwrap())),
        ("add_bias", op_grad_error(&[x3.clone(), bias.clone()], |g, v| g.add_bias(v[0], v[1]).unwrap())),
        ("matmul", op_grad_error(&[a.clone(), m.clone()], |g, v| g.matmul(v[0], v[1]).unwrap())),
        ("matmul_3d", op_grad_error(&[x3.clone(), m], |g, v| g.matmul(v[0], v[1]).unwrap())),
        ("transpose", op_grad_error(std::slice::from_ref(&a), |g, v| g.transpose(v[0]).unwrap())),
        ("tanh", op_grad_error(std::slice::from_ref(&a), |g, v| g.tanh(v[0]).unwrap())),
        ("sigmoid", op_grad_error(std::slice::from_ref(&a), |g, v| g.sigmoid(v[0]).unwrap())),
        ("sqrt", op_grad_error(&[pos], |g, v| g.sqrt(v[0]).unwrap())),
        ("recip", op_grad_error(&[away], |g, v| g.recip(v[0]).unwrap())),
        ("sum", op_grad_error(std::slice::from_ref(&a), |g, v| g.sum(v[0]).unwrap())),
        ("mean", op_grad_error(std::slice::from_ref(&a), |g, v| g.mean(v[0]).unwrap())),
        ("mean_tokens", op_grad_error(std::slice::from_ref(&x3), |g, v| g.mean_tokens(v[0]).unwrap())),
        ("reshape", op_grad_error(std::slice::from_ref(&x3), |g, v| g.reshape(v[0], &[6, 4]).unwrap())),
        (
            "concat_last",
            op_grad_error(&[a.clone(), rn(&[3, 2])], |g, v| g.concat_last(&[v[0], v[1]]).unwrap()),
        ),
        (
            "concat_rows",
            op_grad_error(&[a.clone(), rn(&[2, 4])], |g, v| g.concat_rows(&[v[0], v[1]]).unwrap()),
        ),
        (
            "gather_rows",
            op_grad_error(&[table], |g, v| g.gather_rows(v[0], &[4, 0, 4, 2, 4]).unwrap()),
        ),
        ("softmax", op_grad_error(std::slice::from_ref(&a), |g, v| g.softmax(v[0]).unwrap())),
        (
            "layer_norm",
            op_grad_error(&[x3, gamma, bias], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()),
        ),
        (
            "bce_with_logits",
            op_grad_error(&[logits], |g, v| g.bce_with_logits(v[0], &labels).unwrap()),
        ),
        (
            "attention_dense",
            op_grad_error(&[q.clone(), k.clone(), v.clone()], |g, x| {
                g.attention(x[0], x[1], x[2], 2, None).unwrap()
            }),
        ),
        (
            "attention_routed",
            op_grad_error(&[q, k, v], |g, x| g.attention(x[0], x[1], x[2], 2, Some(plan.clone())).unwrap()),
        ),
    ]
}

// ---- model fixtures ----

pub fn toy_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = rng(seed);
    let names: Vec<String> = (0..3).map(|i| format!("f{i}")).collect();
    let cards = vec![4, 5, 3];
    let mut statics = Vec::new();
    for _ in 0..n {
        for &c in &cards {
            statics.push(rng.random_range(0..c) as u32);
        }
    }
    Dataset {
        static_names: names,
        static_cards: cards,
        item_keys: (0..6).map(|i| format!("i{i}")).collect(),
        items: (0..n).map(|_| rng.random_range(0..6)).collect(),
        statics,
        groups: (0..n as u64).map(|i| i % 3).collect(),
        labels: (0..n).map(|i| (i % 2) as u8).collect(),
        chronological: false,
    }
}

pub fn toy_lookup(h: usize, v: usize) -> ItemLookup {
    let codes = (0..6 * h).map(|i| ((i * 7 + 3) % v) as u16).collect();
    ItemLookup::Sids { h, codes }
}

/// H=3, d=8, two layers, two heads.
pub fn small_cfg() -> StoreConfig {
    StoreConfig {
        h: 3,
        v: 5,
        d_s: 4,
        d: 8,
        n_layers: 2,
        n_heads: 2,
        groups: GroupConfig {
            embed_dim: 3,
            d_g: 2,
            ..Default::default()
        },
        ..Default::default()
    }
}

pub fn model_loss(model: &StoreModel, batch: &Batch, plans: Option<&[Option<Rc<RoutingPlan>>]>) -> f64 {
    let mut g = Graph::new();
    let b = model.bind(&mut g).unwrap();
    let f = model.forward(&mut g, &b, batch, plans).unwrap();
    let l = g.bce_with_logits(f.logits, &batch.labels).unwrap();
    g.scalar_value(l)
}

/// Full-model gradient check on a batch of 4 with routing plans and semantic
/// IDs held fixed. Returns the max relative error over every parameter and
/// rotation matrix.
pub fn model_grad_error() -> f64 {
    let ds = toy_dataset(4, 1);
    let lookup = toy_lookup(3, 5);
    let cfg = small_cfg();
    let mut model = StoreModel::new(&cfg, &ds.static_names, &ds.static_cards, 0).unwrap();
    let mut r = rng(2);
    *model.store.get_mut(model.head.weight) = Tensor::randn(&[8, 1], 0.5, &mut r);
    *model.store.get_mut(model.head.bias) = Tensor::vector(vec![0.1]);
    let batch = Batch::from_rows(&ds, &[0, 1, 2, 3], &lookup, 3).unwrap();

    let mut g = Graph::new();
    let b = model.bind(&mut g).unwrap();
    let f = model.forward(&mut g, &b, &batch, None).unwrap();
    assert!(f.plans.iter().all(Option::is_some), "routing should be active at H=3, B=1, rho=1/2");
    let plans = f.plans.clone();
    let loss = g.bce_with_logits(f.logits, &batch.labels).unwrap();
    let mut wrt = b.params.vars().to_vec();
    wrt.extend_from_slice(&b.rotations);
    let analytic = g.grad(loss, &wrt).unwrap();

    let mut inputs: Vec<Tensor> = model.store.values().to_vec();
    inputs.extend(model.rotations.mats.iter().cloned());
    let n_params = model.store.len();
    let numeric = numeric_grad(&inputs, |ts| {
        let mut m = model.clone();
        for (i, t) in ts[..n_params].iter().enumerate() {
            *m.store.get_mut(ParamId(i)) = t.clone();
        }
        m.rotations = RotationBank {
            mats: ts[n_params..].to_vec(),
            lambda: m.rotations.lambda,
        };
        model_loss(&m, &batch, Some(&plans))
    });
    max_rel_error(&analytic, &numeric, 1e-6)
}

// ---- attention ----

/// Multi-head attention with explicit loops over `[n, h, d]` buffers.
/// `allowed(slot, query, key)` masks keys; `slot = instance * heads + head`.
pub fn naive_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    (n, h, d): (usize, usize, usize),
    heads: usize,
    allowed: impl Fn(usize, usize, usize) -> bool,
) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let at = |b: usize, i: usize, hd: usize, c: usize| (b * h + i) * d + hd * dh + c;
    let mut out = vec![0.0; n * h * d];
    for b in 0..n {
        for hd in 0..heads {
            for i in 0..h {
                let keys: Vec<usize> = (0..h).filter(|&j| allowed(b * heads + hd, i, j)).collect();
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|&j| scale * (0..dh).map(|c| q[at(b, i, hd, c)] * k[at(b, j, hd, c)]).sum::<f64>())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for (e, &j) in exps.iter().zip(&keys) {
                    for c in 0..dh {
                        out[at(b, i, hd, c)] += e / z * v[at(b, j, hd, c)];
                    }
                }
            }
        }
    }
    out
}

/// Out-of-place `x @ w` for a row-major `[rows, d]` buffer.
pub fn naive_matmul(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / din;
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        for j in 0..dout {
            out[r * dout + j] = (0..din).map(|i| x[r * din + i] * w.data()[i * dout + j]).sum();
        }
    }
    out
}

// ---- metrics ----

/// Pairwise AUC: every (positive, negative) pair scores 1, 1/2 on a tie.
pub fn brute_auc(records: &[EvalRecord]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0u64;
    for p in records.iter().filter(|r| r.label != 0) {
        for n in records.iter().filter(|r| r.label == 0) {
            den += 1;
            if p.score > n.score {
                num += 1.0;
            } else if p.score == n.score {
                num += 0.5;
            }
        }
    }
    (den > 0).then(|| num / den as f64)
}

/// Impression-weighted mean of per-group pairwise AUC over mixed groups.
pub fn brute_gauc(records: &[EvalRecord]) -> Option<f64> {
    let mut groups: BTreeMap<u64, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.group).or_default().push(*r);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for g in groups.values() {
        if let Some(a) = brute_auc(g) {
            num += g.len() as f64 * a;
            den += g.len() as f64;
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Random evaluation suite. Scores come from a tiny grid when `ties` is set.
pub fn random_suite(rng: &mut ChaCha8Rng, ties: bool) -> Vec<EvalRecord> {
    let n = rng.random_range(2..60);
    let groups = rng.random_range(1..6);
    let ctr: f64 = rng.random_range(0.05..0.95);
    (0..n)
        .map(|_| {
            let score = if ties {
                rng.random_range(0..4) as f64 / 4.0
            } else {
                rng.random::<f64>()
            };
            EvalRecord::new(rng.random_bool(ctr) as u8, score, rng.random_range(0..groups))
        })
        .collect()
}

/// One random (H, B, d) configuration at rho = 1: the larger of
/// |efficient - dense| and |routed-over-all-blocks - dense|, in max-abs.
pub fn sparse_dense_diff_at_rho1(seed: u64) -> (f64, (usize, usize, usize)) {
    use store_core::attention::{dense_attention, efficient_attention, num_blocks, AttentionParams};
    let mut r = rng(seed);
    let h = r.random_range(1..40);
    let block = r.random_range(1..=h.min(12));
    let heads = r.random_range(1..4);
    let d = heads * r.random_range(1..6);
    let n = r.random_range(1..4);
    let params = AttentionParams::random(d, heads, block, 1.0, seed).unwrap();
    let x = Tensor::randn(&[n, h, d], 1.0, &mut r);
    let dense = dense_attention(&x, &params).unwrap();
    let eff = efficient_attention(&x, &params).unwrap();
    let mut diff = dense.max_abs_diff(&eff);

    // force the routed kernel with every block selected
    let q = x.matmul(&params.wq).unwrap();
    let k = x.matmul(&params.wk).unwrap();
    let v = x.matmul(&params.wv).unwrap();
    let cfg = RouteConfig {
        block_size: block,
        k_blocks: num_blocks(h, block),
        force_own_block: true,
    };
    let plan = Rc::new(route_batch(q.data(), k.data(), n, h, d, heads, cfg).unwrap());
    let mut g = Graph::new();
    let (qv, kv, vv) = (
        g.constant(q).unwrap(),
        g.constant(k).unwrap(),
        g.constant(v).unwrap(),
    );
    let ctx = g.attention(qv, kv, vv, heads, Some(plan)).unwrap();
    let routed = g.value(ctx).matmul(&params.wo).unwrap();
    diff = diff.max(dense.max_abs_diff(&routed));
    (diff, (h, block, d))
}
