//! Full-ranking Recall@K / NDCG@K for warm and cold-start items.
//!
//! For every user with ground truth in the evaluated split, all candidate items
//! are scored and sorted descending (ties broken by ascending item index).
//! Candidates exclude the user's training items, plus validation items when
//! scoring the test split. Warm evaluation ranks all warm items; cold
//! evaluation ranks the cold-item pool only. Users without ground truth are
//! skipped.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::SplitBundle;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::trainer::TrainedModel;

pub const DEFAULT_KS: [usize; 2] = [10, 50];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Warm,
    Cold,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Items pass through the adapter before propagation.
    WithMlp,
    /// Raw contextual embeddings.
    WithoutMlp,
}

impl InferenceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InferenceMode::WithMlp => "with_mlp",
            InferenceMode::WithoutMlp => "without_mlp",
        }
    }
}

impl std::str::FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "with_mlp" => Ok(Self::WithMlp),
            "without_mlp" => Ok(Self::WithoutMlp),
            _ => Err(Error::InvalidArgument(format!(
                "unknown mode {s:?} (expected with_mlp or without_mlp)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Valid,
    Test,
    ColdTest,
}

impl EvalSplit {
    pub fn setting(self) -> Setting {
        match self {
            EvalSplit::ColdTest => Setting::Cold,
            _ => Setting::Warm,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EvalSplit::Valid => "valid",
            EvalSplit::Test => "test",
            EvalSplit::ColdTest => "cold_test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: Setting,
    pub mode: Option<InferenceMode>,
    pub split: EvalSplit,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub user_count: usize,
}

impl EvalReport {
    pub fn recall_at(&self, k: usize) -> f64 {
        self.recall[&k]
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg[&k]
    }

    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "setting = {:?}", format!("{:?}", self.setting).to_lowercase());
        if let Some(mode) = self.mode {
            let _ = writeln!(out, "mode = {:?}", mode.as_str());
        }
        let _ = writeln!(out, "split = {:?}", self.split.as_str());
        let _ = writeln!(out, "user_count = {}", self.user_count);
        for (k, v) in &self.recall {
            let _ = writeln!(out, "recall@{k} = {v:.6}");
        }
        for (k, v) in &self.ndcg {
            let _ = writeln!(out, "ndcg@{k} = {v:.6}");
        }
        out
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Hits in the first `k` ranked items over the ground-truth size.
pub fn metric_recall_at_k(ranked: &[usize], truth: &[usize], k: usize) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = ranked.iter().take(k).filter(|i| truth.contains(i)).count();
    hits as f64 / truth.len() as f64
}

/// Binary-gain NDCG with `1/log₂(rank + 1)` discounts.
pub fn metric_ndcg_at_k(ranked: &[usize], truth: &[usize], k: usize) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| truth.contains(i))
        .map(|(pos, _)| 1.0 / ((pos + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..truth.len().min(k)).map(|pos| 1.0 / ((pos + 2) as f64).log2()).sum();
    dcg / idcg
}

/// Top `k` of `candidates` by `scores` (parallel slices), descending score,
/// ascending item index on ties.
pub fn top_k(candidates: &[usize], scores: &[f64], k: usize) -> Vec<usize> {
    debug_assert_eq!(candidates.len(), scores.len());
    let mut order: Vec<(f64, usize)> = scores.iter().copied().zip(candidates.iter().copied()).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    let k = k.min(order.len());
    if k == 0 {
        return Vec::new();
    }
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    order.into_iter().map(|(_, i)| i).collect()
}

/// Per-user ground truth, exclusions and the shared candidate pool.
#[derive(Clone, Debug)]
pub struct EvalProtocol {
    pub split: EvalSplit,
    truth: Vec<Vec<usize>>,
    excluded: Vec<Vec<usize>>,
    pool: Vec<usize>,
}

impl EvalProtocol {
    pub fn new(bundle: &SplitBundle, split: EvalSplit) -> Self {
        let users = bundle.train.user_count();
        let target = match split {
            EvalSplit::Valid => &bundle.valid,
            EvalSplit::Test => &bundle.test,
            EvalSplit::ColdTest => &bundle.cold_test,
        };
        let mut truth = vec![Vec::new(); users];
        for &(u, i) in target.pairs() {
            truth[u].push(i);
        }
        let mut excluded = vec![Vec::new(); users];
        for &(u, i) in bundle.train.pairs() {
            excluded[u].push(i);
        }
        if split != EvalSplit::Valid {
            for &(u, i) in bundle.valid.pairs() {
                excluded[u].push(i);
            }
        }
        for v in truth.iter_mut().chain(excluded.iter_mut()) {
            v.sort_unstable();
        }
        let pool = match split {
            EvalSplit::ColdTest => bundle.cold_items.iter().copied().collect(),
            _ => bundle.warm_items(),
        };
        Self {
            split,
            truth,
            excluded,
            pool,
        }
    }

    pub fn truth(&self, user: usize) -> &[usize] {
        &self.truth[user]
    }

    pub fn candidates(&self, user: usize) -> Vec<usize> {
        let ex = &self.excluded[user];
        self.pool
            .iter()
            .copied()
            .filter(|i| ex.binary_search(i).is_err())
            .collect()
    }

    pub fn evaluable_users(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.truth.len()).filter(|&u| !self.truth[u].is_empty())
    }

    /// Ranks every evaluable user with `score(user, candidates) -> scores`.
    pub fn run<F>(&self, ks: &[usize], mode: Option<InferenceMode>, score: F) -> Result<EvalReport>
    where
        F: Fn(usize, &[usize]) -> Vec<f64> + Sync,
    {
        if ks.is_empty() || ks.contains(&0) {
            return Err(Error::InvalidArgument("K values must be positive".into()));
        }
        let k_max = *ks.iter().max().expect("non-empty");
        let users: Vec<usize> = self.evaluable_users().collect();
        if users.is_empty() {
            return Err(Error::EmptyReport(self.split.as_str().into()));
        }
        let per_user: Vec<Vec<(f64, f64)>> = users
            .par_iter()
            .map(|&u| {
                let cands = self.candidates(u);
                let scores = score(u, &cands);
                let ranked = top_k(&cands, &scores, k_max);
                let truth = self.truth(u);
                ks.iter()
                    .map(|&k| {
                        (
                            metric_recall_at_k(&ranked, truth, k),
                            metric_ndcg_at_k(&ranked, truth, k),
                        )
                    })
                    .collect()
            })
            .collect();
        let n = users.len() as f64;
        let mut recall = BTreeMap::new();
        let mut ndcg = BTreeMap::new();
        for (j, &k) in ks.iter().enumerate() {
            recall.insert(k, per_user.iter().map(|m| m[j].0).sum::<f64>() / n);
            ndcg.insert(k, per_user.iter().map(|m| m[j].1).sum::<f64>() / n);
        }
        Ok(EvalReport {
            setting: self.split.setting(),
            mode,
            split: self.split,
            recall,
            ndcg,
            user_count: users.len(),
        })
    }
}

/// Dot-product ranking with explicit final user/item embeddings.
pub fn evaluate_embeddings(
    users: ArrayView2<f64>,
    items: ArrayView2<f64>,
    protocol: &EvalProtocol,
    ks: &[usize],
    mode: Option<InferenceMode>,
) -> Result<EvalReport> {
    protocol.run(ks, mode, |u, cands| {
        let hu = users.row(u);
        cands.iter().map(|&i| hu.dot(&items.row(i))).collect()
    })
}

/// `s(u, i) = h_u · h̃_i` from the model's cached final embeddings for `mode`.
///
/// Cold items have no training edges, so their cached rows are `x_i`
/// (without MLP) or `adapter(x_i)` (with MLP).
pub fn score(model: &TrainedModel, user: usize, item: usize, mode: InferenceMode) -> Result<f64> {
    let (users, items) = model.final_embeddings(mode);
    if user >= users.nrows() {
        return Err(Error::IndexOutOfRange {
            kind: "user",
            index: user,
            count: users.nrows(),
        });
    }
    if item >= items.nrows() {
        return Err(Error::IndexOutOfRange {
            kind: "item",
            index: item,
            count: items.nrows(),
        });
    }
    Ok(users.row(user).dot(&items.row(item)))
}

pub fn full_ranking(
    model: &TrainedModel,
    bundle: &SplitBundle,
    split: EvalSplit,
    mode: InferenceMode,
    ks: &[usize],
) -> Result<EvalReport> {
    let (users, items) = model.final_embeddings(mode);
    if users.nrows() != bundle.train.user_count() || items.nrows() != bundle.train.item_count() {
        return Err(Error::Mismatch(format!(
            "model has {}×{} users×items, splits have {}×{}",
            users.nrows(),
            items.nrows(),
            bundle.train.user_count(),
            bundle.train.item_count()
        )));
    }
    evaluate_embeddings(
        users.view(),
        items.view(),
        &EvalProtocol::new(bundle, split),
        ks,
        Some(mode),
    )
}

/// Ranks candidates by training degree; the reference point for planted-data checks.
pub fn popularity_report(bundle: &SplitBundle, split: EvalSplit, ks: &[usize]) -> Result<EvalReport> {
    let degree = bundle.train.item_degrees();
    EvalProtocol::new(bundle, split).run(ks, None, |_, cands| cands.iter().map(|&i| degree[i] as f64).collect())
}

/// Writes `kind<TAB>index<TAB>id<TAB>d0…` rows for contextual items, adapter-mapped
/// items and final users.
pub fn export_projections(model: &TrainedModel, path: impl AsRef<Path>) -> Result<usize> {
    let contextual = model.item_contextual().matrix();
    let mapped = model.adapter().forward(contextual.view())?;
    let (users, _) = model.final_embeddings(InferenceMode::WithMlp);
    let dim = contextual.ncols();
    let mut out = String::from("kind\tindex\tid");
    for d in 0..dim {
        let _ = write!(out, "\td{d}");
    }
    out.push('\n');
    let mut rows = 0;
    let mut emit = |kind: &str, table: &Array2<f64>, ids: &[String]| {
        for (idx, row) in table.rows().into_iter().enumerate() {
            let _ = write!(out, "{kind}\t{idx}\t{}", ids[idx]);
            for v in row {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
            rows += 1;
        }
    };
    emit("item_contextual", contextual, model.items().raw_ids());
    emit("item_mapped", &mapped, model.items().raw_ids());
    emit("user_learned", users, model.users().raw_ids());
    write_atomic(path, out.as_bytes())?;
    Ok(rows)
}
