use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use store_core::nn::{Activation, Mlp, ParamStore};
use store_core::rotation::*;
use store_core::tensor::gradcheck::{max_rel_error, numeric_grad};
use store_core::tensor::{Graph, Tensor};

fn frob(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn rotation_preserves_norm() {
    let bank = RotationBank::random(4, 12, 0.1, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let c = Tensor::randn(&[12], 2.0, &mut rng);
        let n = c.frobenius_norm();
        for i in 0..4 {
            let o = rotate(c.data(), &bank, i).unwrap();
            let m = o.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((m - n).abs() < 1e-6);
        }
    }
}

#[test]
fn polar_factor_beats_random_orthogonal_candidates() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut m = Tensor::randn(&[8, 8], 1.0, &mut rng);
    for i in 0..8 {
        m.data_mut()[i * 8 + i] += 3.0;
    }
    let r = project_orthogonal(&m).unwrap();
    assert!(orthogonality_error(&r).unwrap() < 1e-6);
    let best = frob(&m, &r);
    for s in 0..1000 {
        let q = random_orthogonal(8, 100 + s).unwrap();
        assert!(frob(&m, &q) >= best - 1e-12);
    }
}

#[test]
fn diversity_gradient_matches_differences() {
    let bank = RotationBank::random(3, 3, 0.1, 9).unwrap();
    let analytic = diversity_grad(&bank);
    let numeric = numeric_grad(&bank.mats, |mats| {
        diversity_penalty(&RotationBank {
            mats: mats.to_vec(),
            lambda: 0.1,
        })
    });
    assert!(max_rel_error(&analytic, &numeric, 1e-6) < 1e-6);
}

#[test]
fn diversity_only_steps_spread_the_bank() {
    let mut bank = RotationBank::random(3, 4, 0.1, 2).unwrap();
    let mut last = -diversity_penalty(&bank);
    for _ in 0..50 {
        let g = diversity_grad(&bank);
        rotation_step(&mut bank, &g, 0.1).unwrap();
        assert!(bank.max_orthogonality_error().unwrap() < 1e-6);
        let now = -diversity_penalty(&bank);
        assert!(now >= last - 1e-12, "{now} < {last}");
        last = now;
    }
}

#[test]
fn penalty_is_never_positive() {
    for seed in 0..20 {
        let bank = RotationBank::random(4, 5, 0.1, seed).unwrap();
        assert!(diversity_penalty(&bank) < 0.0);
    }
}

fn identity_mlp(store: &mut ParamStore, d: usize) -> Mlp {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m = Mlp::new(store, "id", (d, d, d), Activation::Identity, &mut rng);
    *store.get_mut(m.hidden.weight) = Tensor::eye(d);
    *store.get_mut(m.out.weight) = Tensor::eye(d);
    m
}

#[test]
fn identity_group_fusion() {
    let mut store = ParamStore::new();
    let m = identity_mlp(&mut store, 2);
    let g1 = Tensor::matrix(1, 2, vec![0.5, -0.5]).unwrap();
    let c = fuse_groups(&store, &[m], std::slice::from_ref(&g1)).unwrap();
    assert_eq!(c.data(), &[0.5, -0.5]);
    assert!(fuse_groups(&store, &[m, m], &[g1]).is_err());
}

#[test]
fn fusion_is_local_to_groups() {
    let names: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
    let cfg = GroupConfig::contiguous(&names, 2, 3, 2).unwrap();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let fusion = GroupFusion::new(&mut store, &cfg, &names, &[5, 5, 5, 5], &mut rng).unwrap();
    let eval = |statics: &[u32]| {
        let mut g = Graph::new();
        let p = store.bind(&mut g).unwrap();
        let c = fusion.forward(&mut g, &p, statics, 4).unwrap();
        g.value(c).clone()
    };
    let base = eval(&[1, 2, 3, 4]);
    assert_eq!(base.shape(), &[1, 4]);
    let moved = eval(&[1, 2, 0, 4]);
    assert_eq!(&base.data()[..2], &moved.data()[..2]);
    assert_ne!(&base.data()[2..], &moved.data()[2..]);
    let mut g = Graph::new();
    let p = store.bind(&mut g).unwrap();
    assert!(fusion.forward(&mut g, &p, &[9, 0, 0, 0], 4).is_err());
}
