//! Planted-cluster toy data: users and items belong to `clusters` groups,
//! in-cluster pairs interact with probability `p_in` and others with
//! `p_out`, and each item's contextual vector is its cluster center plus
//! Gaussian noise.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_embedding_file, InteractionSet};
use crate::error::{Error, Result};
use crate::io::write_atomic;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedConfig {
    pub clusters: usize,
    pub users: usize,
    pub items: usize,
    pub dim: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub center_scale: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            clusters: 4,
            users: 200,
            items: 120,
            dim: 16,
            p_in: 0.3,
            p_out: 0.01,
            center_scale: 1.0,
            noise: 0.1,
            seed: 7,
        }
    }
}

pub struct PlantedData {
    pub interactions: InteractionSet,
    /// One row per item id `i0000…`, including items that drew no interactions.
    pub item_ids: Vec<String>,
    pub embeddings: Array2<f32>,
}

impl PlantedData {
    pub fn cluster_of_user(&self, raw_id: &str, clusters: usize) -> Option<usize> {
        raw_id.strip_prefix('u')?.parse::<usize>().ok().map(|n| n % clusters)
    }

    pub fn cluster_of_item(&self, raw_id: &str, clusters: usize) -> Option<usize> {
        raw_id.strip_prefix('i')?.parse::<usize>().ok().map(|n| n % clusters)
    }

    /// Writes `interactions.tsv` and `items.ccemb` into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut text = String::new();
        for &(u, i) in self.interactions.pairs() {
            text.push_str(self.interactions.users().raw(u));
            text.push('\t');
            text.push_str(self.interactions.items().raw(i));
            text.push('\n');
        }
        write_atomic(dir.join("interactions.tsv"), text.as_bytes())?;
        write_embedding_file(dir.join("items.ccemb"), &self.item_ids, &self.embeddings)
    }
}

pub fn user_id(n: usize) -> String {
    format!("u{n:04}")
}

pub fn item_id(n: usize) -> String {
    format!("i{n:04}")
}

/// User `u` and item `i` sit in clusters `u % clusters` and `i % clusters`.
pub fn generate_planted(cfg: &PlantedConfig) -> Result<PlantedData> {
    let mut problems = Vec::new();
    if cfg.clusters == 0 || cfg.users == 0 || cfg.items == 0 || cfg.dim == 0 {
        problems.push("clusters, users, items and dim must all be positive".to_string());
    }
    for (name, p) in [("p_in", cfg.p_in), ("p_out", cfg.p_out)] {
        if !(0.0..=1.0).contains(&p) {
            problems.push(format!("{name} must lie in [0, 1], got {p}"));
        }
    }
    if !(cfg.noise >= 0.0 && cfg.center_scale >= 0.0) {
        problems.push("noise and center_scale must be non-negative".into());
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers = Array2::from_shape_simple_fn((cfg.clusters, cfg.dim), || {
        cfg.center_scale * rng.sample::<f64, _>(StandardNormal)
    });
    let embeddings = Array2::from_shape_fn((cfg.items, cfg.dim), |(i, d)| {
        (centers[[i % cfg.clusters, d]] + cfg.noise * rng.sample::<f64, _>(StandardNormal)) as f32
    });

    let mut raw = Vec::new();
    for u in 0..cfg.users {
        for i in 0..cfg.items {
            let p = if u % cfg.clusters == i % cfg.clusters {
                cfg.p_in
            } else {
                cfg.p_out
            };
            if rng.random_bool(p) {
                raw.push((user_id(u), item_id(i)));
            }
        }
    }
    if raw.is_empty() {
        return Err(Error::EmptyInput("planted generator drew no interactions".into()));
    }
    Ok(PlantedData {
        interactions: InteractionSet::from_raw_pairs(raw),
        item_ids: (0..cfg.items).map(item_id).collect(),
        embeddings,
    })
}
