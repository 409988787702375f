//! Static-feature fusion and rotated feature views.
//!
//! Static features are embedded, grouped by meaning, and each group is fused
//! by a small MLP; the concatenation is the instance's feature block `C`.
//! A bank of orthogonal matrices produces one view `C R_i` per token. The
//! matrices are trained by plain gradient steps followed by projection back
//! onto the orthogonal group.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, Mlp, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Singular values below this make a matrix unprojectable.
pub const RANK_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub name: String,
    pub features: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupConfig {
    pub groups: Vec<FeatureGroup>,
    /// Embedding width of every static feature.
    pub embed_dim: usize,
    /// Output width of each group MLP.
    pub d_g: usize,
}

impl Default for GroupConfig {
    fn default() -> Self {
        Self {
            groups: Vec::new(),
            embed_dim: 8,
            d_g: 8,
        }
    }
}

impl GroupConfig {
    /// Splits `names` into `n_groups` contiguous groups of near-equal size.
    pub fn contiguous(names: &[String], n_groups: usize, embed_dim: usize, d_g: usize) -> Result<Self> {
        if n_groups == 0 || n_groups > names.len() {
            return Err(Error::Config(format!(
                "cannot split {} static features into {n_groups} groups",
                names.len()
            )));
        }
        let mut groups = Vec::with_capacity(n_groups);
        let mut start = 0;
        for k in 0..n_groups {
            let size = names.len() / n_groups + usize::from(k < names.len() % n_groups);
            groups.push(FeatureGroup {
                name: format!("g{k}"),
                features: names[start..start + size].to_vec(),
            });
            start += size;
        }
        Ok(Self {
            groups,
            embed_dim,
            d_g,
        })
    }

    pub fn d_c(&self) -> usize {
        self.groups.len() * self.d_g
    }

    /// Column index of each group member in `static_names`; every static
    /// feature must belong to exactly one group.
    pub fn resolve(&self, static_names: &[String]) -> Result<Vec<Vec<usize>>> {
        if self.groups.is_empty() || self.embed_dim == 0 || self.d_g == 0 {
            return Err(Error::Config("feature groups need at least one group and positive widths".into()));
        }
        let mut seen = vec![false; static_names.len()];
        let mut out = Vec::with_capacity(self.groups.len());
        for g in &self.groups {
            if g.features.is_empty() {
                return Err(Error::Config(format!("group {} is empty", g.name)));
            }
            let mut cols = Vec::with_capacity(g.features.len());
            for f in &g.features {
                let c = static_names
                    .iter()
                    .position(|n| n == f)
                    .ok_or_else(|| Error::Config(format!("group {} lists unknown feature {f}", g.name)))?;
                if seen[c] {
                    return Err(Error::Config(format!("feature {f} is in more than one group")));
                }
                seen[c] = true;
                cols.push(c);
            }
            out.push(cols);
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("feature {} is in no group", static_names[c])));
        }
        Ok(out)
    }
}

/// Concatenation of each group's MLP output: `[MLP_1(g_1), ..., MLP_K(g_K)]`.
/// `inputs` holds one `[n, in_k]` tensor per group.
pub fn fuse_groups(store: &ParamStore, mlps: &[Mlp], inputs: &[Tensor]) -> Result<Tensor> {
    if mlps.len() != inputs.len() {
        return Err(Error::Config(format!(
            "{} group inputs for {} groups",
            inputs.len(),
            mlps.len()
        )));
    }
    let outs = mlps
        .iter()
        .zip(inputs)
        .map(|(m, x)| m.eval(store, x))
        .collect::<Result<Vec<_>>>()?;
    let n = outs[0].rows();
    let width: usize = outs.iter().map(Tensor::last_dim).sum();
    let mut data = Vec::with_capacity(n * width);
    for r in 0..n {
        for o in &outs {
            data.extend_from_slice(o.row(r));
        }
    }
    Tensor::matrix(n, width, data)
}

/// Learned static-feature embeddings plus the per-group fusion MLPs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupFusion {
    pub columns: Vec<Vec<usize>>,
    /// One embedding table per static column, indexed by column.
    pub tables: Vec<ParamId>,
    pub mlps: Vec<Mlp>,
    pub d_g: usize,
}

impl GroupFusion {
    pub fn new(
        store: &mut ParamStore,
        cfg: &GroupConfig,
        static_names: &[String],
        cards: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cards.len() != static_names.len() {
            return Err(Error::Config("cardinality count differs from feature count".into()));
        }
        let columns = cfg.resolve(static_names)?;
        let tables = static_names
            .iter()
            .zip(cards)
            .map(|(name, &card)| {
                store.add(
                    format!("static.{name}"),
                    Tensor::randn(&[card.max(1), cfg.embed_dim], 0.1, rng),
                )
            })
            .collect();
        let mlps = columns
            .iter()
            .zip(&cfg.groups)
            .map(|(cols, g)| {
                let d_in = cols.len() * cfg.embed_dim;
                Mlp::new(
                    store,
                    &format!("group.{}", g.name),
                    (d_in, 2 * cfg.d_g, cfg.d_g),
                    Activation::Tanh,
                    rng,
                )
            })
            .collect();
        Ok(Self {
            columns,
            tables,
            mlps,
            d_g: cfg.d_g,
        })
    }

    pub fn d_c(&self) -> usize {
        self.mlps.len() * self.d_g
    }

    /// Feature block `[n, d_c]` for `n` instances whose encoded static
    /// values are stored row-major in `statics` (`n_static` per row).
    pub fn forward(&self, g: &mut Graph, p: &Bound, statics: &[u32], n_static: usize) -> Result<Var> {
        if n_static != self.tables.len() || !statics.len().is_multiple_of(n_static.max(1)) {
            return Err(Error::shape(
                "fuse_groups",
                format!("{} values with {n_static} features per row", statics.len()),
            ));
        }
        let n = statics.len() / n_static;
        let mut outs = Vec::with_capacity(self.mlps.len());
        for (cols, mlp) in self.columns.iter().zip(&self.mlps) {
            let mut parts = Vec::with_capacity(cols.len());
            for &c in cols {
                let idx: Vec<usize> = (0..n).map(|r| statics[r * n_static + c] as usize).collect();
                parts.push(g.gather_rows(p.var(self.tables[c]), &idx)?);
            }
            let x = if parts.len() == 1 {
                parts[0]
            } else {
                g.concat_last(&parts)?
            };
            outs.push(mlp.forward(g, p, x)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            g.concat_last(&outs)
        }
    }
}

fn to_na(m: &Tensor) -> Result<DMatrix<f64>> {
    let s = m.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::shape("orthogonal projection", format!("{s:?} is not square")));
    }
    Ok(DMatrix::from_row_slice(s[0], s[1], m.data()))
}

fn from_na(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(m[(i, j)]);
        }
    }
    Tensor::from_parts(vec![r, c], data)
}

/// Nearest orthogonal matrix in Frobenius norm: the polar factor `U V^T`
/// of `M = U S V^T`.
pub fn project_orthogonal(m: &Tensor) -> Result<Tensor> {
    let a = to_na(m)?;
    if !m.all_finite() {
        return Err(Error::NonFinite("matrix to project".into()));
    }
    let svd = a.svd(true, true);
    let smin = svd.singular_values.iter().copied().fold(f64::INFINITY, f64::min);
    if smin < RANK_TOL {
        return Err(Error::RankDeficient(smin));
    }
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    Ok(from_na(&(u * vt)))
}

/// Haar-distributed random orthogonal matrix from the QR factorization of
/// a Gaussian matrix, with column signs fixed by `diag(R)`.
pub fn random_orthogonal(dim: usize, seed: u64) -> Result<Tensor> {
    if dim == 0 {
        return Err(Error::Config("rotation dimension must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut rng));
    let qr = a.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(from_na(&q))
}

/// `|R^T R - I|_F`.
pub fn orthogonality_error(r: &Tensor) -> Result<f64> {
    let a = to_na(r)?;
    let n = a.nrows();
    Ok((a.transpose() * &a - DMatrix::identity(n, n)).norm())
}

/// Orthogonal matrices `R_1..R_K` and the weight of the diversity term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationBank {
    pub mats: Vec<Tensor>,
    pub lambda: f64,
}

impl RotationBank {
    pub fn random(k: usize, dim: usize, lambda: f64, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("rotation bank needs at least one matrix".into()));
        }
        let mats = (0..k)
            .map(|i| random_orthogonal(dim, seed.wrapping_add(i as u64)))
            .collect::<Result<_>>()?;
        Ok(Self { mats, lambda })
    }

    /// `k` copies of the identity; used when rotation is switched off.
    pub fn identity(k: usize, dim: usize, lambda: f64) -> Self {
        Self {
            mats: vec![Tensor::eye(dim); k],
            lambda,
        }
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.mats[0].shape()[0]
    }

    /// Largest `|R_i^T R_i - I|_F` over the bank.
    pub fn max_orthogonality_error(&self) -> Result<f64> {
        self.mats
            .iter()
            .map(orthogonality_error)
            .try_fold(0.0, |acc, e| e.map(|e| f64::max(acc, e)))
    }
}

/// `O_i = C R_i` for one instance (row-vector convention).
pub fn rotate(c: &[f64], bank: &RotationBank, i: usize) -> Result<Vec<f64>> {
    let r = bank.mats.get(i).ok_or(Error::OutOfRange {
        what: "rotation bank",
        index: i,
        len: bank.len(),
    })?;
    let d = r.shape()[0];
    if c.len() != d {
        return Err(Error::shape("rotate", format!("block dim {} vs rotation dim {d}", c.len())));
    }
    Ok((0..d).map(|j| (0..d).map(|k| c[k] * r.at2(k, j)).sum()).collect())
}

/// `-lambda * sum_{i<j} |R_i - R_j|_F^2`.
pub fn diversity_penalty(bank: &RotationBank) -> f64 {
    let mut total = 0.0;
    for i in 0..bank.len() {
        for j in i + 1..bank.len() {
            total += bank.mats[i]
                .data()
                .iter()
                .zip(bank.mats[j].data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    -bank.lambda * total
}

/// Gradient of [`diversity_penalty`] with respect to each `R_i`:
/// `-2 lambda sum_{j != i} (R_i - R_j)`.
pub fn diversity_grad(bank: &RotationBank) -> Vec<Tensor> {
    (0..bank.len())
        .map(|i| {
            let mut g = Tensor::zeros(bank.mats[i].shape());
            for j in (0..bank.len()).filter(|&j| j != i) {
                for ((o, a), b) in g.data_mut().iter_mut().zip(bank.mats[i].data()).zip(bank.mats[j].data()) {
                    *o -= 2.0 * bank.lambda * (a - b);
                }
            }
            g
        })
        .collect()
}

/// One gradient step of size `lr` on every `R_i`, each followed by
/// projection back onto the orthogonal group.
pub fn rotation_step(bank: &mut RotationBank, grads: &[Tensor], lr: f64) -> Result<()> {
    if grads.len() != bank.len() {
        return Err(Error::shape(
            "rotation_step",
            format!("{} gradients for {} matrices", grads.len(), bank.len()),
        ));
    }
    let mut next = Vec::with_capacity(bank.len());
    for (r, g) in bank.mats.iter().zip(grads) {
        if g.shape() != r.shape() {
            return Err(Error::shape("rotation_step", format!("{:?} vs {:?}", g.shape(), r.shape())));
        }
        let mut m = r.clone();
        for (x, d) in m.data_mut().iter_mut().zip(g.data()) {
            *x -= lr * d;
        }
        next.push(project_orthogonal(&m)?);
    }
    bank.mats = next;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotate_known_cases() {
        let bank = RotationBank::identity(1, 3, 0.1);
        assert_eq!(rotate(&[1.0, 2.0, 3.0], &bank, 0).unwrap(), vec![1.0, 2.0, 3.0]);
        let quarter = RotationBank {
            mats: vec![Tensor::matrix(2, 2, vec![0.0, 1.0, -1.0, 0.0]).unwrap()],
            lambda: 0.1,
        };
        assert_eq!(rotate(&[1.0, 0.0], &quarter, 0).unwrap(), vec![0.0, 1.0]);
        assert!(rotate(&[1.0, 0.0], &quarter, 1).is_err());
    }

    #[test]
    fn diversity_known_values() {
        let one = RotationBank::identity(1, 2, 0.1);
        assert_eq!(diversity_penalty(&one), 0.0);
        let same = RotationBank::identity(2, 2, 0.1);
        assert_eq!(diversity_penalty(&same), 0.0);
        let pair = RotationBank {
            mats: vec![Tensor::eye(2), Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, -1.0]).unwrap()],
            lambda: 0.1,
        };
        assert!((diversity_penalty(&pair) + 0.4).abs() < 1e-15);
    }

    #[test]
    fn projection_fixed_points() {
        let q = random_orthogonal(5, 3).unwrap();
        assert!(project_orthogonal(&q).unwrap().max_abs_diff(&q) < 1e-10);
        let two = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        assert!(project_orthogonal(&two).unwrap().max_abs_diff(&Tensor::eye(2)) < 1e-12);
        let singular = Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(matches!(project_orthogonal(&singular), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn random_orthogonal_contract() {
        let one = random_orthogonal(1, 0).unwrap();
        assert!((one.data()[0].abs() - 1.0).abs() < 1e-15);
        let r = random_orthogonal(32, 7).unwrap();
        assert!(orthogonality_error(&r).unwrap() < 1e-6);
        assert_eq!(r, random_orthogonal(32, 7).unwrap());
    }

    #[test]
    fn zero_gradient_step_keeps_bank() {
        let mut bank = RotationBank::random(3, 4, 0.1, 1).unwrap();
        let before = bank.clone();
        rotation_step(&mut bank, &vec![Tensor::zeros(&[4, 4]); 3], 0.5).unwrap();
        for (a, b) in bank.mats.iter().zip(&before.mats) {
            assert!(a.max_abs_diff(b) < 1e-10);
        }
    }

    #[test]
    fn contiguous_groups_cover_features() {
        let names: Vec<String> = (0..7).map(|i| format!("f{i}")).collect();
        let cfg = GroupConfig::contiguous(&names, 3, 4, 2).unwrap();
        assert_eq!(cfg.resolve(&names).unwrap(), vec![vec![0, 1, 2], vec![3, 4], vec![5, 6]]);
        assert_eq!(cfg.d_c(), 6);
        let mut dup = cfg.clone();
        dup.groups[1].features.push("f0".into());
        assert!(dup.resolve(&names).is_err());
        let mut missing = cfg;
        missing.groups[2].features.pop();
        assert!(missing.resolve(&names).is_err());
    }
}
