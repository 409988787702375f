use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use store_core::data::EmbeddingTable;
use store_core::nn::Activation;
use store_core::tensor::gradcheck::{max_rel_error, numeric_grad};
use store_core::tensor::{Graph, Tensor};
use store_core::tokenizer::*;

mod common;
use common::clustered_table;

// x W + b followed by the activation, computed with explicit loops
fn dense(x: &[f64], w: &Tensor, b: &Tensor, tanh: bool) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    (0..cols)
        .map(|j| {
            let mut acc = b.data()[j];
            for i in 0..rows {
                acc += x[i] * w.data()[i * cols + j];
            }
            if tanh {
                acc.tanh()
            } else {
                acc
            }
        })
        .collect()
}

fn small_model(k: usize, seed: u64) -> OpmqModel {
    let cfg = OpmqConfig {
        k,
        v: 5,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = OpmqModel::new(4, &cfg, &mut rng).unwrap();
    for i in 0..k {
        let cb = m.codebooks[i];
        *m.store.get_mut(cb) = Tensor::randn(&[5, 4], 1.0, &mut rng);
    }
    m
}

#[test]
fn experts_match_loop_oracle() {
    let m = small_model(3, 4);
    let x = [0.3, -1.2, 0.8, 0.05];
    let z = encode_experts(&x, &m).unwrap();
    for (i, e) in m.experts.iter().enumerate() {
        let h = dense(&x, m.store.get(e.hidden.weight), m.store.get(e.hidden.bias), true);
        let o = dense(&h, m.store.get(e.out.weight), m.store.get(e.out.bias), false);
        for (a, b) in z[i].iter().zip(&o) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn nearest_codeword_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cb = Tensor::randn(&[300, 16], 1.0, &mut rng);
    for _ in 0..1000 {
        let z: Vec<f64> = (0..16).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut best = (f64::INFINITY, 0);
        for j in 0..300 {
            let d: f64 = (0..16).map(|c| (z[c] - cb.at2(j, c)).powi(2)).sum();
            if d < best.0 {
                best = (d, j);
            }
        }
        assert_eq!(nearest_codeword(&z, &cb).unwrap().0, best.1);
    }
}

/// Reconstruction loss of one embedding with codeword offsets held fixed:
/// decoder(sum_i z_i(W) + delta_i). Independent of the graph code.
fn frozen_recon(m: &OpmqModel, e: &[f64], deltas: &[Vec<f64>]) -> f64 {
    let mut sum = vec![0.0; m.d_z];
    for (i, ex) in m.experts.iter().enumerate() {
        let h = dense(e, m.store.get(ex.hidden.weight), m.store.get(ex.hidden.bias), true);
        let z = dense(&h, m.store.get(ex.out.weight), m.store.get(ex.out.bias), false);
        for j in 0..m.d_z {
            sum[j] += z[j] + deltas[i][j];
        }
    }
    let d = &m.decoder;
    let h = dense(&sum, m.store.get(d.hidden.weight), m.store.get(d.hidden.bias), true);
    let r = dense(&h, m.store.get(d.out.weight), m.store.get(d.out.bias), false);
    e.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum()
}

#[test]
fn straight_through_matches_frozen_assignment_differences() {
    let m = small_model(3, 9);
    let e = [0.7, -0.3, 1.1, -0.9];
    let batch = Tensor::matrix(1, 4, e.to_vec()).unwrap();
    let mut g = Graph::new();
    let p = m.store.bind(&mut g).unwrap();
    let l = m.losses(&mut g, &p, &batch, 0.25).unwrap();
    let grads = g.grad(l.recon, p.vars()).unwrap();

    let z0 = encode_experts(&e, &m).unwrap();
    let deltas: Vec<Vec<f64>> = (0..m.k())
        .map(|i| {
            let (_, s) = nearest_codeword(&z0[i], m.codebook(i)).unwrap();
            s.iter().zip(&z0[i]).map(|(a, b)| a - b).collect()
        })
        .collect();
    assert!((frozen_recon(&m, &e, &deltas) - g.scalar_value(l.recon)).abs() < 1e-10);

    for ex in &m.experts {
        for id in [ex.hidden.weight, ex.hidden.bias, ex.out.weight, ex.out.bias] {
            let base = m.store.get(id).clone();
            let numeric = numeric_grad(&[base], |t| {
                let mut mm = m.clone();
                *mm.store.get_mut(id) = t[0].clone();
                frozen_recon(&mm, &e, &deltas)
            });
            let err = max_rel_error(std::slice::from_ref(&grads[id.0]), &numeric, 1e-4);
            assert!(err < 1e-3, "{}: {err}", m.store.name(id));
        }
    }
    for &cb in &m.codebooks {
        assert!(grads[cb.0].data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn orth_penalty_graph_matches_numeric_and_is_scale_invariant() {
    let mut m = small_model(3, 2);
    let mut g = Graph::new();
    let p = m.store.bind(&mut g).unwrap();
    let pen = m.orth_penalty_graph(&mut g, &p).unwrap();
    let before = orth_penalty(&m).unwrap();
    assert!((g.scalar_value(pen) - before).abs() < 1e-12);

    let id = m.experts[1].hidden.weight;
    let grads = g.grad(pen, &[p.var(id)]).unwrap();
    let numeric = numeric_grad(&[m.store.get(id).clone()], |t| {
        let mut mm = m.clone();
        *mm.store.get_mut(id) = t[0].clone();
        orth_penalty(&mm).unwrap()
    });
    let err = max_rel_error(&grads, &numeric, 1e-4);
    assert!(err < 1e-4, "{err}");

    m.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 7.5);
    assert!((orth_penalty(&m).unwrap() - before).abs() < 1e-12);
}

#[test]
fn all_layers_scope_uses_output_weights() {
    let cfg = OpmqConfig {
        k: 2,
        v: 3,
        orth_scope: OrthScope::AllLayers,
        activation: Activation::Tanh,
        ..Default::default()
    };
    let mut m = OpmqModel::new(3, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let w = m.store.get(m.experts[0].hidden.weight).clone();
    *m.store.get_mut(m.experts[1].hidden.weight) = w;
    // identical hidden weights but distinct output weights: penalty below 2
    let p = orth_penalty(&m).unwrap();
    assert!(p > 0.0 && p < 2.0);
}

fn quick_cfg(seed: u64) -> OpmqConfig {
    OpmqConfig {
        k: 3,
        v: 16,
        epochs: 60,
        seed,
        ..Default::default()
    }
}

#[test]
fn training_beats_mean_baseline_and_reduces_penalty() {
    let table = clustered_table(1000, 16, 16, 0.3, 5);
    let (model, log) = train_opmq(&table, &quick_cfg(3)).unwrap();
    assert_eq!(log.epochs.len(), 60);
    assert!(
        log.final_loss_recon < 0.5 * log.mean_baseline_loss,
        "{} vs {}",
        log.final_loss_recon,
        log.mean_baseline_loss
    );
    assert!(log.final_orth_penalty < log.initial_orth_penalty);

    let sids = tokenize_catalog(&table, &model).unwrap();
    assert_eq!(sids.len(), 1000);
    for r in 0..sids.len() {
        assert!(sids.codes(r).iter().all(|&c| (c as usize) < 16));
        let expect: Vec<u16> = log.final_assignments[r].iter().map(|&c| c as u16).collect();
        assert_eq!(sids.codes(r), &expect[..]);
    }
    assert_eq!(tokenize_catalog(&table, &model).unwrap(), sids);
}

#[test]
fn training_is_deterministic() {
    let table = clustered_table(200, 8, 4, 0.3, 1);
    let cfg = OpmqConfig {
        epochs: 5,
        ..quick_cfg(8)
    };
    let (a, _) = train_opmq(&table, &cfg).unwrap();
    let (b, _) = train_opmq(&table, &cfg).unwrap();
    assert_eq!(tokenize_catalog(&table, &a).unwrap(), tokenize_catalog(&table, &b).unwrap());
}

#[test]
fn single_item_table() {
    let table = clustered_table(1, 4, 1, 0.1, 0);
    let cfg = OpmqConfig {
        epochs: 2,
        ..quick_cfg(0)
    };
    let (m, _) = train_opmq(&table, &cfg).unwrap();
    let sids = tokenize_catalog(&table, &m).unwrap();
    assert_eq!(sids.len(), 1);
    assert_eq!(sids.codes(0).len(), 3);
}

#[test]
fn rq_single_stage_is_kmeans_assignment() {
    let table = clustered_table(300, 6, 5, 0.2, 3);
    let cfg = RqConfig {
        k: 1,
        v: 5,
        ..Default::default()
    };
    let (sids, model) = train_rq_baseline(&table, &cfg).unwrap();
    for r in 0..table.len() {
        let (c, _) = nearest_codeword(table.vector(r), &model.codebooks[0]).unwrap();
        assert_eq!(sids.codes(r)[0] as usize, c);
    }
}

#[test]
fn rq_residual_non_increasing_and_deterministic() {
    let table = clustered_table(500, 8, 16, 0.3, 4);
    let cfg = RqConfig {
        k: 4,
        v: 8,
        ..Default::default()
    };
    let (a, m) = train_rq_baseline(&table, &cfg).unwrap();
    assert_eq!(m.residual_sse.len(), 5);
    for w in m.residual_sse.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "{:?}", m.residual_sse);
    }
    let (b, _) = train_rq_baseline(&table, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn small_table_warns_but_trains() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut t = EmbeddingTable::new(3);
    for i in 0..5 {
        t.insert(format!("x{i}"), &[rng.random(), rng.random(), rng.random()]).unwrap();
    }
    let cfg = OpmqConfig {
        epochs: 3,
        ..quick_cfg(1)
    };
    assert!(train_opmq(&t, &cfg).is_ok());
}
