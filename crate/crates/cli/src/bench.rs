use std::fmt::Write as _;
use std::time::Instant;

use anyhow::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use store_core::attention::{
    attention_flops, dense_attention, efficient_attention, num_blocks, AttentionParams,
};
use store_core::tensor::Tensor;

use crate::config::BenchSection;

pub const HEADER: &str =
    "H,B,k_blocks,dense_flops,sparse_flops,wall_time_dense_ms,wall_time_sparse_ms,max_abs_diff_at_rho1";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub h: usize,
    pub block_size: usize,
    pub k_blocks: usize,
    pub dense_flops: u64,
    pub sparse_flops: u64,
    pub wall_dense_ms: f64,
    pub wall_sparse_ms: f64,
    pub max_abs_diff_at_rho1: f64,
}

fn median_ms(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?; // warm-up
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Times dense and block-routed attention at each sequence length.
pub fn run(cfg: &BenchSection, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &h in &cfg.seq_lens {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h as u64);
        let x = Tensor::randn(&[cfg.batch, h, cfg.d_model], 1.0, &mut rng);
        let sparse = AttentionParams::random(cfg.d_model, cfg.n_heads, cfg.block_size, cfg.sparsity, seed)?;
        let full = AttentionParams { sparsity: 1.0, ..sparse.clone() };
        let k_blocks = sparse.k_blocks(h);
        let nb = num_blocks(h, cfg.block_size);
        let dense_flops = attention_flops(h, cfg.d_model, cfg.n_heads, cfg.block_size, nb, true)?.total();
        let sparse_flops = attention_flops(h, cfg.d_model, cfg.n_heads, cfg.block_size, k_blocks, true)?.total();

        let wall_dense_ms = median_ms(cfg.reps, || dense_attention(&x, &full).map(drop).map_err(Into::into))?;
        let wall_sparse_ms =
            median_ms(cfg.reps, || efficient_attention(&x, &sparse).map(drop).map_err(Into::into))?;

        let a = dense_attention(&x, &full)?;
        let b = efficient_attention(&x, &full)?;
        let max_abs_diff_at_rho1 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        log::info!("H={h} dense {wall_dense_ms:.3} ms sparse {wall_sparse_ms:.3} ms");
        rows.push(BenchRow {
            h,
            block_size: cfg.block_size,
            k_blocks,
            dense_flops: dense_flops * cfg.batch as u64,
            sparse_flops: sparse_flops * cfg.batch as u64,
            wall_dense_ms,
            wall_sparse_ms,
            max_abs_diff_at_rho1,
        });
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.4},{:.4},{:e}",
            r.h,
            r.block_size,
            r.k_blocks,
            r.dense_flops,
            r.sparse_flops,
            r.wall_dense_ms,
            r.wall_sparse_ms,
            r.max_abs_diff_at_rho1
        );
    }
    s
}
