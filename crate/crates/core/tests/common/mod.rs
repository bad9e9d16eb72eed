//! Independent dense reference implementations used by the integration and
//! acceptance tests. Nothing here calls into the propagation or loss code
//! under test.

#![allow(dead_code)]

use std::sync::Arc;

use collabctx::adapter::{DenseLayer, MlpAdapter};
use collabctx::dataset::{IdMap, InteractionSet};
use collabctx::graph::{build_graph, BipartiteGraph};
use collabctx::objective::{LossConfig, Phase, UniformityMode};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn id_map(prefix: &str, n: usize) -> Arc<IdMap> {
    Arc::new(IdMap::from_raw((0..n).map(|i| format!("{prefix}{i}")).collect()).unwrap())
}

pub fn interaction_set(users: usize, items: usize, edges: &[(usize, usize)]) -> InteractionSet {
    InteractionSet::new(edges.to_vec(), id_map("u", users), id_map("i", items)).unwrap()
}

pub fn graph_of(users: usize, items: usize, edges: &[(usize, usize)]) -> BipartiteGraph {
    build_graph(&interaction_set(users, items, edges))
}

pub fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * rng.sample::<f64, _>(StandardNormal))
}

/// Distinct random edges; some nodes may end up isolated.
pub fn random_edges<R: Rng>(rng: &mut R, users: usize, items: usize, density: f64) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for u in 0..users {
        for i in 0..items {
            if rng.random_bool(density) {
                edges.push((u, i));
            }
        }
    }
    if edges.is_empty() {
        edges.push((rng.random_range(0..users), rng.random_range(0..items)));
    }
    edges.shuffle(rng);
    edges
}

/// `(I + D^{-1/2} A D^{-1/2})^K` applied to the stacked `[h_u; h_i]`, computed
/// with a dense `(|U|+|I|)²` matrix.
pub fn dense_propagate(
    users: usize,
    items: usize,
    edges: &[(usize, usize)],
    h_u: &Array2<f64>,
    h_i: &Array2<f64>,
    layers: usize,
) -> (Array2<f64>, Array2<f64>) {
    let n = users + items;
    let mut adj = Array2::<f64>::zeros((n, n));
    for &(u, i) in edges {
        adj[[u, users + i]] = 1.0;
        adj[[users + i, u]] = 1.0;
    }
    let deg = adj.sum_axis(Axis(1));
    let mut op = Array2::<f64>::eye(n);
    for a in 0..n {
        for b in 0..n {
            if adj[[a, b]] != 0.0 {
                op[[a, b]] += 1.0 / (deg[a].sqrt() * deg[b].sqrt());
            }
        }
    }
    let mut h = ndarray::concatenate![Axis(0), h_u.view(), h_i.view()];
    for _ in 0..layers {
        h = op.dot(&h);
    }
    (
        h.slice(ndarray::s![..users, ..]).to_owned(),
        h.slice(ndarray::s![users.., ..]).to_owned(),
    )
}

pub fn l2_normalize(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    out
}

pub fn naive_alignment(pairs: &[(usize, usize)], a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for &(x, y) in pairs {
        let mut s = 0.0;
        for d in 0..a.ncols() {
            let diff = a[[x, d]] - b[[y, d]];
            s += diff * diff;
        }
        total += s;
    }
    total / pairs.len() as f64
}

pub fn naive_uniformity(rows: &Array2<f64>, mode: UniformityMode) -> f64 {
    let n = rows.nrows();
    let mut total = 0.0;
    for a in 0..n {
        for b in 0..n {
            let mut sq = 0.0;
            for d in 0..rows.ncols() {
                let diff = rows[[a, d]] - rows[[b, d]];
                sq += diff * diff;
            }
            let dist = match mode {
                UniformityMode::Squared => sq,
                UniformityMode::Literal => sq.sqrt(),
            };
            total += (-2.0 * dist).exp();
        }
    }
    (total / (n * n) as f64).ln()
}

/// Affine layers with ReLU between them; no dropout.
pub fn naive_mlp(layers: &[(Array2<f64>, Array1<f64>)], x: &Array2<f64>) -> Array2<f64> {
    let mut h = x.clone();
    for (l, (w, b)) in layers.iter().enumerate() {
        let mut next = Array2::<f64>::zeros((h.nrows(), w.ncols()));
        for r in 0..h.nrows() {
            for c in 0..w.ncols() {
                let mut s = b[c];
                for k in 0..w.nrows() {
                    s += h[[r, k]] * w[[k, c]];
                }
                next[[r, c]] = if l + 1 < layers.len() { s.max(0.0) } else { s };
            }
        }
        h = next;
    }
    h
}

pub fn adapter_params(adapter: &MlpAdapter) -> Vec<(Array2<f64>, Array1<f64>)> {
    adapter
        .layers()
        .iter()
        .map(|l| (l.weight.clone(), l.bias.clone()))
        .collect()
}

pub fn adapter_from(params: &[(Array2<f64>, Array1<f64>)]) -> MlpAdapter {
    MlpAdapter::from_layers(
        params
            .iter()
            .map(|(w, b)| DenseLayer {
                weight: w.clone(),
                bias: b.clone(),
            })
            .collect(),
        0.0,
    )
    .unwrap()
}

fn distinct(v: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut out: Vec<usize> = v.collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// A small problem for phase-loss checks.
pub struct Toy {
    pub users: usize,
    pub items: usize,
    pub edges: Vec<(usize, usize)>,
    pub u0: Array2<f64>,
    pub x: Array2<f64>,
}

impl Toy {
    pub fn random<R: Rng>(rng: &mut R, users: usize, items: usize, dim: usize) -> Self {
        let edges = random_edges(rng, users, items, 0.5);
        Self {
            users,
            items,
            u0: gaussian(rng, users, dim, 0.5),
            x: gaussian(rng, items, dim, 1.0),
            edges,
        }
    }

    pub fn graph(&self) -> BipartiteGraph {
        graph_of(self.users, self.items, &self.edges)
    }
}

/// Propagated `(users, items)` for a phase: raw `x` feeds item tutoring,
/// `mlp(x)` feeds user tutoring.
pub fn naive_propagated(
    phase: Phase,
    toy: &Toy,
    u0: &Array2<f64>,
    params: &[(Array2<f64>, Array1<f64>)],
    layers: usize,
) -> (Array2<f64>, Array2<f64>) {
    let items0 = match phase {
        Phase::ItemTutoring => toy.x.clone(),
        Phase::UserTutoring => naive_mlp(params, &toy.x),
    };
    dense_propagate(toy.users, toy.items, &toy.edges, u0, &items0, layers)
}

/// Phase objective with dense propagation and loops. The frozen side (items
/// when tutoring users, users when tutoring the adapter) is taken from
/// `frozen`, matching the stop-gradient of the library.
#[allow(clippy::too_many_arguments)]
pub fn naive_phase_loss(
    phase: Phase,
    toy: &Toy,
    batch: &[(usize, usize)],
    u0: &Array2<f64>,
    params: &[(Array2<f64>, Array1<f64>)],
    frozen: &Array2<f64>,
    layers: usize,
    cfg: &LossConfig,
) -> f64 {
    let (h_u, h_i) = naive_propagated(phase, toy, u0, params, layers);
    let norm = |m: Array2<f64>| if cfg.normalize { l2_normalize(&m) } else { m };
    match phase {
        Phase::ItemTutoring => {
            let (h_u, h_i) = (norm(h_u), norm(frozen.clone()));
            let users = distinct(batch.iter().map(|&(u, _)| u));
            naive_alignment(batch, &h_u, &h_i) + naive_uniformity(&h_u.select(Axis(0), &users), cfg.uniformity)
        }
        Phase::UserTutoring => {
            let (h_u, h_i) = (norm(frozen.clone()), norm(h_i));
            let flipped: Vec<(usize, usize)> = batch.iter().map(|&(u, i)| (i, u)).collect();
            let items = distinct(batch.iter().map(|&(_, i)| i));
            naive_alignment(&flipped, &h_i, &h_u) + naive_uniformity(&h_i.select(Axis(0), &items), cfg.uniformity)
        }
    }
}

/// Central differences of `f` at every coordinate of `params`.
pub fn central_differences(params: &mut [f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.len());
    for k in 0..params.len() {
        let orig = params[k];
        params[k] = orig + step;
        let plus = f(params);
        params[k] = orig - step;
        let minus = f(params);
        params[k] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    out
}

/// ‖a − b‖ / max(‖b‖, 1e-12)
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

#[derive(Clone, Copy, Debug)]
pub struct GradCase {
    pub phase: Phase,
    pub normalize: bool,
    pub uniformity: UniformityMode,
    pub adapter_layers: usize,
    pub layers: usize,
    pub seed: u64,
}

pub struct GradOutcome {
    /// |library loss − dense reference loss|
    pub forward_gap: f64,
    pub relative_error: f64,
    pub loss: f64,
}

/// Compares the analytic phase gradient with central differences of the
/// dense reference loss on a graph of at most 10 nodes.
pub fn check_phase_gradient(case: GradCase) -> GradOutcome {
    use collabctx::adapter::AdapterConfig;
    use collabctx::objective::{phase_loss, PhaseGradient, PhaseInputs};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
    let dim = 3;
    let toy = Toy::random(&mut rng, 4, 5, dim);
    let init = MlpAdapter::init(
        dim,
        &AdapterConfig {
            layers: case.adapter_layers,
            hidden: 4,
            dropout: 0.0,
        },
        case.seed,
    )
    .unwrap();
    let mut params = adapter_params(&init);
    for (_, b) in params.iter_mut() {
        b.mapv_inplace(|_| 0.3 * rng.sample::<f64, _>(StandardNormal));
    }
    let adapter = adapter_from(&params);
    let batch: Vec<(usize, usize)> = toy.edges.iter().copied().take(4).collect();
    let cfg = LossConfig {
        normalize: case.normalize,
        uniformity: case.uniformity,
        batch_size: batch.len(),
    };
    let graph = toy.graph();
    let inputs = PhaseInputs {
        graph: &graph,
        user_layer0: toy.u0.view(),
        item_contextual: toy.x.view(),
        adapter: &adapter,
        layers: case.layers,
        loss: &cfg,
    };
    let out = phase_loss(case.phase, &batch, &inputs, &mut rng).unwrap();
    let (base_u, base_i) = naive_propagated(case.phase, &toy, &toy.u0, &params, case.layers);
    let frozen = match case.phase {
        Phase::ItemTutoring => base_i,
        Phase::UserTutoring => base_u,
    };
    let reference = naive_phase_loss(case.phase, &toy, &batch, &toy.u0, &params, &frozen, case.layers, &cfg);
    let step = 1e-6;

    let (analytic, numeric) = match (case.phase, out.gradient) {
        (Phase::ItemTutoring, PhaseGradient::Users(g)) => {
            let mut flat: Vec<f64> = toy.u0.iter().copied().collect();
            let numeric = central_differences(&mut flat, step, |p| {
                let u0 = Array2::from_shape_vec(toy.u0.raw_dim(), p.to_vec()).unwrap();
                naive_phase_loss(case.phase, &toy, &batch, &u0, &params, &frozen, case.layers, &cfg)
            });
            (g.iter().copied().collect::<Vec<_>>(), numeric)
        }
        (Phase::UserTutoring, PhaseGradient::Adapter(g)) => {
            let mut analytic = Vec::new();
            let mut flat = Vec::new();
            for (l, (w, b)) in params.iter().enumerate() {
                analytic.extend(g.weights[l].iter().copied());
                analytic.extend(g.biases[l].iter().copied());
                flat.extend(w.iter().copied());
                flat.extend(b.iter().copied());
            }
            let shapes: Vec<((usize, usize), usize)> = params.iter().map(|(w, b)| (w.dim(), b.len())).collect();
            let numeric = central_differences(&mut flat, step, |p| {
                let mut rebuilt = Vec::new();
                let mut pos = 0;
                for &((r, c), nb) in &shapes {
                    let w = Array2::from_shape_vec((r, c), p[pos..pos + r * c].to_vec()).unwrap();
                    pos += r * c;
                    let b = Array1::from_vec(p[pos..pos + nb].to_vec());
                    pos += nb;
                    rebuilt.push((w, b));
                }
                naive_phase_loss(case.phase, &toy, &batch, &toy.u0, &rebuilt, &frozen, case.layers, &cfg)
            });
            (analytic, numeric)
        }
        (phase, g) => panic!("phase {phase:?} returned gradient for the wrong parameters: {g:?}"),
    };
    GradOutcome {
        forward_gap: (out.total - reference).abs(),
        relative_error: relative_error(&analytic, &numeric),
        loss: out.total,
    }
}

/// Every combination the gradient suite covers.
pub fn gradient_cases(seeds: std::ops::Range<u64>) -> Vec<GradCase> {
    let mut cases = Vec::new();
    for seed in seeds {
        for phase in [Phase::ItemTutoring, Phase::UserTutoring] {
            for uniformity in [UniformityMode::Squared, UniformityMode::Literal] {
                for normalize in [true, false] {
                    for adapter_layers in 1..=3 {
                        if phase == Phase::ItemTutoring && adapter_layers > 1 {
                            continue;
                        }
                        cases.push(GradCase {
                            phase,
                            normalize,
                            uniformity,
                            adapter_layers,
                            layers: 1 + (seed as usize % 3),
                            seed,
                        });
                    }
                }
            }
        }
    }
    cases
}

/// Planted-cluster data split with `cold` held-out items, ready for training.
pub fn planted_training_data(
    cfg: &collabctx::synth::PlantedConfig,
    cold: usize,
    split_seed: u64,
) -> collabctx::trainer::TrainingData {
    use collabctx::dataset::{cold_item_split_count, SplitBundle, SplitRatios};
    use collabctx::graph::{EmbeddingTable, NodeKind};

    let planted = collabctx::synth::generate_planted(cfg).unwrap();
    let split = cold_item_split_count(&planted.interactions, cold, split_seed).unwrap();
    let bundle = SplitBundle::assemble(split, SplitRatios::default(), split_seed).unwrap();
    let items = bundle.items().clone();
    let matrix = Array2::from_shape_fn((items.len(), cfg.dim), |(r, d)| {
        let n: usize = items.raw(r)[1..].parse().unwrap();
        f64::from(planted.embeddings[[n, d]])
    });
    let table = EmbeddingTable::new(matrix, NodeKind::Item, false).unwrap();
    collabctx::trainer::TrainingData::new(bundle, table).unwrap()
}
