//! Two-phase schedule: item tutoring (users learn against frozen items), then
//! user tutoring (the item adapter learns against frozen users), repeated for
//! `rounds` rounds. Each phase runs shuffled edge batches with Adam and stops
//! early on validation NDCG@10, keeping its best epoch. The model returned
//! is the best phase snapshot over the whole run.

mod adam;
mod checkpoint;
mod model;

use std::fmt;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, MlpAdapter};
use crate::dataset::SplitBundle;
use crate::error::{Error, Result};
use crate::eval::{evaluate_embeddings, EvalProtocol, EvalReport, EvalSplit, InferenceMode};
use crate::graph::{build_graph, propagate, BipartiteGraph, EmbeddingTable};
use crate::objective::{phase_loss, LossConfig, Phase, PhaseGradient, PhaseInputs};

pub use adam::{adam_step, Adam, AdamMoments, BETA1, BETA2, EPSILON};
pub use checkpoint::{
    read_checkpoint_header, read_resume, write_resume, CheckpointHeader, CheckpointKind, MODEL_MAGIC,
};
pub use model::TrainedModel;

/// Validation cutoff used for early stopping and snapshot selection.
pub const EVAL_K: usize = 10;

const USER_INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 1_000;
const DROPOUT_STREAM: u64 = 2_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Propagation depth `K`.
    pub layers: usize,
    pub patience: usize,
    pub max_epochs: usize,
    /// Number of (item tutoring, user tutoring) alternations.
    pub rounds: usize,
    pub seed: u64,
    /// Expected embedding width `d_W`.
    pub dim: usize,
    /// Standard deviation of the Gaussian layer-0 user init.
    pub user_init_std: f64,
    pub loss: LossConfig,
    pub adapter: AdapterConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-6,
            layers: 2,
            patience: 30,
            max_epochs: 500,
            rounds: 1,
            seed: 2024,
            dim: 768,
            user_init_std: 0.1,
            loss: LossConfig::default(),
            adapter: AdapterConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Collects every problem at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            problems.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.loss.batch_size == 0 {
            problems.push("loss.batch_size must be at least 1".into());
        }
        if self.patience == 0 {
            problems.push("patience must be at least 1".into());
        }
        if self.max_epochs == 0 {
            problems.push("max_epochs must be at least 1".into());
        }
        if self.rounds == 0 {
            problems.push("rounds must be at least 1".into());
        }
        if self.dim == 0 {
            problems.push("dim must be at least 1".into());
        }
        if !(self.user_init_std > 0.0 && self.user_init_std.is_finite()) {
            problems.push(format!("user_init_std must be positive, got {}", self.user_init_std));
        }
        problems.extend(self.adapter.problems());
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        if ![1e-4, 1e-3, 1e-2].contains(&self.learning_rate)
            || ![1e-4, 1e-5, 1e-6].contains(&self.weight_decay)
            || ![1, 2, 3].contains(&self.layers)
        {
            log::warn!(
                "lr {} / weight decay {} / layers {} outside the documented grid",
                self.learning_rate,
                self.weight_decay,
                self.layers
            );
        }
        Ok(())
    }
}

/// Splits, the training graph and the frozen item contextual embeddings.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub splits: SplitBundle,
    pub graph: BipartiteGraph,
    pub item_contextual: EmbeddingTable,
}

impl TrainingData {
    pub fn new(splits: SplitBundle, mut item_contextual: EmbeddingTable) -> Result<Self> {
        if item_contextual.rows() != splits.train.item_count() {
            return Err(Error::DimensionMismatch {
                expected: splits.train.item_count(),
                found: item_contextual.rows(),
                context: "item embedding rows".into(),
            });
        }
        item_contextual.set_trainable(false);
        let graph = build_graph(&splits.train);
        Ok(Self {
            splits,
            graph,
            item_contextual,
        })
    }

    pub fn dim(&self) -> usize {
        self.item_contextual.dim()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseLabel {
    pub phase: Phase,
    pub round: usize,
}

impl PhaseLabel {
    fn from_index(index: usize) -> Self {
        let phase = if index.is_multiple_of(2) {
            Phase::ItemTutoring
        } else {
            Phase::UserTutoring
        };
        Self {
            phase,
            round: index / 2 + 1,
        }
    }
}

impl fmt::Display for PhaseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.phase {
            Phase::ItemTutoring => "item_tut",
            Phase::UserTutoring => "user_tut",
        };
        write!(f, "{name}:{}", self.round)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: PhaseLabel,
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_recall: f64,
    pub valid_ndcg: f64,
}

impl EpochRecord {
    pub const LOG_HEADER: &'static str = "phase\tepoch\ttrain_loss\tvalid_recall@10\tvalid_ndcg@10";

    pub fn log_line(&self) -> String {
        format!(
            "{}\t{}\t{:.8}\t{:.8}\t{:.8}",
            self.phase, self.epoch, self.train_loss, self.valid_recall, self.valid_ndcg
        )
    }
}

/// Best-epoch summary of one phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: PhaseLabel,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub valid_recall: f64,
    pub valid_ndcg: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricHistory {
    pub epochs: Vec<EpochRecord>,
    pub phases: Vec<PhaseRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestSnapshot {
    pub record: PhaseRecord,
    pub user_layer0: Array2<f64>,
    pub adapter: MlpAdapter,
}

/// Everything needed to continue training at a phase boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub user_layer0: Array2<f64>,
    pub adapter: MlpAdapter,
    pub completed_phases: usize,
    pub best: Option<BestSnapshot>,
    pub history: MetricHistory,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// Parameters cross phase boundaries at checkpoint (f32) precision, so a resumed
// run continues from exactly the state an uninterrupted run has.
fn round_to_f32(m: &mut Array2<f64>) {
    m.mapv_inplace(|v| v as f32 as f64);
}

fn round_adapter(adapter: &mut MlpAdapter) {
    for layer in adapter.layers_mut() {
        round_to_f32(&mut layer.weight);
        layer.bias.mapv_inplace(|v| v as f32 as f64);
    }
}

impl TrainState {
    /// Gaussian users and a freshly initialized adapter, both seeded.
    pub fn fresh(config: &TrainConfig, data: &TrainingData) -> Result<Self> {
        config.validate()?;
        let normal =
            Normal::new(0.0, config.user_init_std).map_err(|e| Error::Config(vec![format!("user_init_std: {e}")]))?;
        let mut rng = stream_rng(config.seed, USER_INIT_STREAM);
        let mut user_layer0 =
            Array2::from_shape_simple_fn((data.graph.user_count(), data.dim()), || normal.sample(&mut rng));
        round_to_f32(&mut user_layer0);
        let mut adapter = MlpAdapter::init(data.dim(), &config.adapter, config.seed.wrapping_add(1))?;
        round_adapter(&mut adapter);
        Ok(Self {
            user_layer0,
            adapter,
            completed_phases: 0,
            best: None,
            history: MetricHistory::default(),
        })
    }
}

/// Hooks for streaming logs and checkpoints out of a run.
pub trait TrainObserver {
    fn on_epoch(&mut self, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }

    fn on_phase_end(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Warm validation metrics at `K = 10` for the current state, scoring items
/// with or without the adapter.
pub fn validation_report(
    data: &TrainingData,
    state: &TrainState,
    config: &TrainConfig,
    mode: InferenceMode,
) -> Result<EvalReport> {
    let contextual = data.item_contextual.matrix();
    let (users, items) = match mode {
        InferenceMode::WithoutMlp => {
            propagate(&data.graph, state.user_layer0.view(), contextual.view(), config.layers)?
        }
        InferenceMode::WithMlp => {
            let mapped = state.adapter.forward(contextual.view())?;
            propagate(&data.graph, state.user_layer0.view(), mapped.view(), config.layers)?
        }
    };
    let protocol = EvalProtocol::new(&data.splits, EvalSplit::Valid);
    evaluate_embeddings(users.view(), items.view(), &protocol, &[EVAL_K], Some(mode)).map_err(|e| match e {
        Error::EmptyReport(_) => Error::EmptyInput("validation split has no users; early stopping needs one".into()),
        other => other,
    })
}

enum Snapshot {
    Users(Array2<f64>),
    Adapter(MlpAdapter),
}

fn run_phase(
    label: PhaseLabel,
    config: &TrainConfig,
    data: &TrainingData,
    state: &mut TrainState,
    observer: &mut dyn TrainObserver,
) -> Result<PhaseRecord> {
    let mut edges: Vec<(usize, usize)> = data.graph.edges().collect();
    if edges.is_empty() {
        return Err(Error::EmptyInput("training split has no interactions".into()));
    }
    let phase_index = state.completed_phases as u64;
    let mut shuffle_rng = stream_rng(config.seed, SHUFFLE_STREAM + phase_index);
    let mut dropout_rng = stream_rng(config.seed, DROPOUT_STREAM + phase_index);
    let mode = match label.phase {
        Phase::ItemTutoring => InferenceMode::WithoutMlp,
        Phase::UserTutoring => InferenceMode::WithMlp,
    };
    let tensors = match label.phase {
        Phase::ItemTutoring => 1,
        Phase::UserTutoring => 2 * state.adapter.layers().len(),
    };
    let mut adam = Adam::new(config.learning_rate, config.weight_decay, tensors);
    let mut best: Option<(PhaseRecord, Snapshot)> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;

    for epoch in 1..=config.max_epochs {
        epochs_run = epoch;
        edges.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in edges.chunks(config.loss.batch_size) {
            let out = {
                let inputs = PhaseInputs {
                    graph: &data.graph,
                    user_layer0: state.user_layer0.view(),
                    item_contextual: data.item_contextual.matrix().view(),
                    adapter: &state.adapter,
                    layers: config.layers,
                    loss: &config.loss,
                };
                phase_loss(label.phase, batch, &inputs, &mut dropout_rng)?
            };
            loss_sum += out.total;
            batches += 1;
            adam.tick();
            match out.gradient {
                PhaseGradient::Users(g) => adam.update(
                    0,
                    state.user_layer0.as_slice_mut().expect("standard layout"),
                    g.as_slice().expect("standard layout"),
                    true,
                ),
                PhaseGradient::Adapter(g) => {
                    for (l, layer) in state.adapter.layers_mut().iter_mut().enumerate() {
                        adam.update(
                            2 * l,
                            layer.weight.as_slice_mut().expect("standard layout"),
                            g.weights[l].as_slice().expect("standard layout"),
                            true,
                        );
                        adam.update(
                            2 * l + 1,
                            layer.bias.as_slice_mut().expect("standard layout"),
                            g.biases[l].as_slice().expect("standard layout"),
                            false,
                        );
                    }
                }
            }
        }

        let report = validation_report(data, state, config, mode)?;
        let record = EpochRecord {
            phase: label,
            epoch,
            train_loss: loss_sum / batches as f64,
            valid_recall: report.recall_at(EVAL_K),
            valid_ndcg: report.ndcg_at(EVAL_K),
        };
        log::debug!("{}", record.log_line());
        observer.on_epoch(&record)?;
        state.history.epochs.push(record.clone());

        let improved = best.as_ref().is_none_or(|(b, _)| record.valid_ndcg > b.valid_ndcg);
        if improved {
            let snapshot = match label.phase {
                Phase::ItemTutoring => Snapshot::Users(state.user_layer0.clone()),
                Phase::UserTutoring => Snapshot::Adapter(state.adapter.clone()),
            };
            let summary = PhaseRecord {
                phase: label,
                epochs_run: 0,
                best_epoch: epoch,
                valid_recall: record.valid_recall,
                valid_ndcg: record.valid_ndcg,
            };
            best = Some((summary, snapshot));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let (mut summary, snapshot) = best.expect("at least one epoch ran");
    summary.epochs_run = epochs_run;
    match snapshot {
        Snapshot::Users(mut u) => {
            round_to_f32(&mut u);
            state.user_layer0 = u;
        }
        Snapshot::Adapter(mut a) => {
            round_adapter(&mut a);
            state.adapter = a;
        }
    }
    log::info!(
        "{label}: best epoch {} of {}, valid ndcg@10 {:.4}",
        summary.best_epoch,
        summary.epochs_run,
        summary.valid_ndcg
    );
    Ok(summary)
}

/// Trains the layer-0 user table against frozen contextual items.
pub fn item_tutoring_phase(
    config: &TrainConfig,
    data: &TrainingData,
    state: &mut TrainState,
    round: usize,
    observer: &mut dyn TrainObserver,
) -> Result<PhaseRecord> {
    let label = PhaseLabel {
        phase: Phase::ItemTutoring,
        round,
    };
    run_phase(label, config, data, state, observer)
}

/// Trains only the adapter; layer-0 users stay fixed.
pub fn user_tutoring_phase(
    config: &TrainConfig,
    data: &TrainingData,
    state: &mut TrainState,
    round: usize,
    observer: &mut dyn TrainObserver,
) -> Result<PhaseRecord> {
    let label = PhaseLabel {
        phase: Phase::UserTutoring,
        round,
    };
    run_phase(label, config, data, state, observer)
}

fn check_data(config: &TrainConfig, data: &TrainingData) -> Result<()> {
    if data.dim() != config.dim {
        return Err(Error::DimensionMismatch {
            expected: config.dim,
            found: data.dim(),
            context: "embedding file dim vs configured dim".into(),
        });
    }
    if data.splits.train.is_empty() {
        return Err(Error::EmptyInput("training split has no interactions".into()));
    }
    Ok(())
}

/// Full schedule from a fresh state.
pub fn train(config: &TrainConfig, data: &TrainingData) -> Result<TrainedModel> {
    config.validate()?;
    check_data(config, data)?;
    let state = TrainState::fresh(config, data)?;
    train_from(config, data, state, &mut ())
}

/// Continues the schedule from `state` (fresh or resumed), reporting to `observer`.
pub fn train_from(
    config: &TrainConfig,
    data: &TrainingData,
    mut state: TrainState,
    observer: &mut dyn TrainObserver,
) -> Result<TrainedModel> {
    config.validate()?;
    check_data(config, data)?;
    let total = 2 * config.rounds;
    while state.completed_phases < total {
        let label = PhaseLabel::from_index(state.completed_phases);
        let record = run_phase(label, config, data, &mut state, observer)?;
        state.history.phases.push(record.clone());
        let better = state
            .best
            .as_ref()
            .is_none_or(|b| record.valid_ndcg > b.record.valid_ndcg);
        if better {
            state.best = Some(BestSnapshot {
                record,
                user_layer0: state.user_layer0.clone(),
                adapter: state.adapter.clone(),
            });
        }
        state.completed_phases += 1;
        observer.on_phase_end(&state)?;
    }
    let best = state
        .best
        .ok_or_else(|| Error::InvalidArgument("no phase completed".into()))?;
    TrainedModel::assemble(
        config.clone(),
        data,
        best.user_layer0,
        best.adapter,
        state.history.phases,
        Some(best.record.phase),
    )
}
