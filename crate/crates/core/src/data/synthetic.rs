use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, EmbeddingTable};
use crate::error::{Error, Result};
use crate::tensor::sigmoid;

/// Parameters of the synthetic click log.
///
/// Items belong to `n_clusters` latent clusters; their pretrained embedding
/// is the cluster center plus Gaussian noise. The click logit is
///
/// ```text
/// base + lin(static values) + cluster_effect[c] + item_effect[item]
///      + sum_f A_f[c][v_f] + sum_{f<g} B_fg[v_f][v_g]
/// ```
///
/// scaled by `logit_scale`. The `A` (cluster x feature) and `B` (feature x
/// feature) tables are the planted pairwise interactions; each family has
/// total standard deviation `interaction_weight`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_instances: usize,
    pub n_items: usize,
    pub n_users: usize,
    pub d_p: usize,
    pub n_clusters: usize,
    pub static_cardinalities: Vec<usize>,
    /// The first `user_features` static features are fixed per user.
    pub user_features: usize,
    pub embedding_noise: f64,
    pub base_logit: f64,
    pub linear_weight: f64,
    pub cluster_weight: f64,
    pub item_weight: f64,
    pub interaction_weight: f64,
    pub logit_scale: f64,
    /// Probability of flipping a sampled label.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_instances: 120_000,
            n_items: 1000,
            n_users: 2000,
            d_p: 16,
            n_clusters: 16,
            static_cardinalities: vec![6, 4, 8, 5, 3, 7],
            user_features: 3,
            embedding_noise: 0.3,
            base_logit: -1.0,
            linear_weight: 0.5,
            cluster_weight: 0.5,
            item_weight: 0.0,
            interaction_weight: 1.0,
            logit_scale: 1.0,
            label_noise: 0.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 || self.n_users == 0 || self.d_p == 0 || self.n_clusters == 0 {
            return Err(Error::Config("synthetic sizes must be positive".into()));
        }
        if self.n_clusters > self.n_items {
            return Err(Error::Config(format!(
                "n_clusters {} exceeds n_items {}",
                self.n_clusters, self.n_items
            )));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::Config(format!(
                "label noise {} not in [0, 0.5)",
                self.label_noise
            )));
        }
        if self.static_cardinalities.is_empty() || self.static_cardinalities.contains(&0) {
            return Err(Error::Config("need at least one static feature, all cardinalities >= 1".into()));
        }
        if self.user_features > self.static_cardinalities.len() {
            return Err(Error::Config("user_features exceeds the static feature count".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub embeddings: EmbeddingTable,
    /// Click probability of every row after label noise.
    pub probabilities: Vec<f64>,
    pub item_clusters: Vec<usize>,
}

fn gaussian_table(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = Normal::new(0.0, std.max(0.0)).expect("finite std");
    (0..rows * cols).map(|_| n.sample(rng)).collect()
}

/// Pure function of `spec`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cards = &spec.static_cardinalities;
    let nf = cards.len();

    // item embeddings
    let centers = gaussian_table(spec.n_clusters, spec.d_p, 1.0, &mut rng);
    let mut item_clusters: Vec<usize> = (0..spec.n_items).map(|i| i % spec.n_clusters).collect();
    rand::seq::SliceRandom::shuffle(item_clusters.as_mut_slice(), &mut rng);
    let mut embeddings = EmbeddingTable::new(spec.d_p);
    let mut v = vec![0.0; spec.d_p];
    for (i, &c) in item_clusters.iter().enumerate() {
        for (k, x) in v.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = centers[c * spec.d_p + k] + spec.embedding_noise * z;
        }
        embeddings.insert(format!("i{i}"), &v)?;
    }

    // planted weights
    let linear: Vec<Vec<f64>> = cards
        .iter()
        .map(|&c| gaussian_table(c, 1, spec.linear_weight / (nf as f64).sqrt(), &mut rng))
        .collect();
    let cluster_effect = gaussian_table(spec.n_clusters, 1, spec.cluster_weight, &mut rng);
    let item_effect = gaussian_table(spec.n_items, 1, spec.item_weight, &mut rng);
    let cluster_inter: Vec<Vec<f64>> = cards
        .iter()
        .map(|&c| {
            gaussian_table(
                spec.n_clusters,
                c,
                spec.interaction_weight / (nf as f64).sqrt(),
                &mut rng,
            )
        })
        .collect();
    let n_pairs = (nf * (nf - 1) / 2).max(1) as f64;
    let mut pair_inter = Vec::new();
    for f in 0..nf {
        for g in f + 1..nf {
            pair_inter.push((
                f,
                g,
                gaussian_table(cards[f], cards[g], spec.interaction_weight / n_pairs.sqrt(), &mut rng),
            ));
        }
    }

    let user_attrs: Vec<Vec<usize>> = (0..spec.n_users)
        .map(|_| {
            cards[..spec.user_features]
                .iter()
                .map(|&c| rng.random_range(0..c))
                .collect()
        })
        .collect();

    let n = spec.n_instances;
    let mut ds = Dataset {
        static_names: (0..nf).map(|f| format!("f{f}")).collect(),
        static_cards: cards.iter().map(|c| c + 1).collect(),
        item_keys: embeddings.ids().to_vec(),
        items: Vec::with_capacity(n),
        statics: Vec::with_capacity(n * nf),
        groups: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        chronological: false,
    };
    let mut probabilities = Vec::with_capacity(n);
    let mut values = vec![0usize; nf];
    for _ in 0..n {
        let user = rng.random_range(0..spec.n_users);
        let item = rng.random_range(0..spec.n_items);
        let c = item_clusters[item];
        for f in 0..nf {
            values[f] = if f < spec.user_features {
                user_attrs[user][f]
            } else {
                rng.random_range(0..cards[f])
            };
        }
        let mut logit = spec.base_logit + cluster_effect[c] + item_effect[item];
        for f in 0..nf {
            logit += linear[f][values[f]];
            logit += cluster_inter[f][c * cards[f] + values[f]];
        }
        for (f, g, table) in &pair_inter {
            logit += table[values[*f] * cards[*g] + values[*g]];
        }
        let p = sigmoid(spec.logit_scale * logit);
        let mut label = rng.random::<f64>() < p;
        if spec.label_noise > 0.0 && rng.random::<f64>() < spec.label_noise {
            label = !label;
        }
        probabilities.push(spec.label_noise + (1.0 - 2.0 * spec.label_noise) * p);
        ds.items.push(item as u32);
        ds.groups.push(user as u64);
        ds.labels.push(label as u8);
        ds.statics.extend(values.iter().map(|&v| v as u32 + 1));
    }
    Ok(SyntheticData {
        dataset: ds,
        embeddings,
        probabilities,
        item_clusters,
    })
}

/// Writes the click log in the [`super::DatasetSchema::synthetic`] layout.
pub fn write_synthetic_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "click,user_id,item_id")?;
    for name in &data.static_names {
        write!(w, ",{name}")?;
    }
    writeln!(w)?;
    for i in 0..data.len() {
        write!(
            w,
            "{},u{},{}",
            data.labels[i],
            data.groups[i],
            data.item_keys[data.items[i] as usize]
        )?;
        for v in data.static_row(i) {
            // stored values are shifted by the OOV slot
            write!(w, ",{}", v - 1)?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}
