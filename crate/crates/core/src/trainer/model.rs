use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;

use super::checkpoint::{
    adapter_tensors, check_ids, read_checkpoint, take_adapter, take_tensor, write_checkpoint, CheckpointHeader,
    CheckpointKind, Tensor, FORMAT_VERSION,
};
use super::{PhaseLabel, PhaseRecord, TrainConfig, TrainingData};
use crate::adapter::MlpAdapter;
use crate::dataset::{IdMap, SplitBundle};
use crate::error::{Error, Result};
use crate::eval::InferenceMode;
use crate::graph::{build_graph, propagate, BipartiteGraph, EmbeddingTable, NodeKind};

/// Learned layer-0 users, the adapter, and cached propagated embeddings for
/// both inference modes.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    config: TrainConfig,
    users: Arc<IdMap>,
    items: Arc<IdMap>,
    user_layer0: EmbeddingTable,
    item_contextual: EmbeddingTable,
    adapter: MlpAdapter,
    with_mlp: (Array2<f64>, Array2<f64>),
    without_mlp: (Array2<f64>, Array2<f64>),
    phases: Vec<PhaseRecord>,
    best_phase: Option<PhaseLabel>,
}

impl TrainedModel {
    pub fn assemble(
        config: TrainConfig,
        data: &TrainingData,
        user_layer0: Array2<f64>,
        adapter: MlpAdapter,
        phases: Vec<PhaseRecord>,
        best_phase: Option<PhaseLabel>,
    ) -> Result<Self> {
        Self::from_parts(
            config,
            data.splits.users().clone(),
            data.splits.items().clone(),
            user_layer0,
            data.item_contextual.clone(),
            adapter,
            &data.graph,
            phases,
            best_phase,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn from_parts(
        config: TrainConfig,
        users: Arc<IdMap>,
        items: Arc<IdMap>,
        user_layer0: Array2<f64>,
        item_contextual: EmbeddingTable,
        adapter: MlpAdapter,
        graph: &BipartiteGraph,
        phases: Vec<PhaseRecord>,
        best_phase: Option<PhaseLabel>,
    ) -> Result<Self> {
        if user_layer0.nrows() != graph.user_count() || item_contextual.rows() != graph.item_count() {
            return Err(Error::Mismatch(format!(
                "tables are {}×{} users×items, graph is {}×{}",
                user_layer0.nrows(),
                item_contextual.rows(),
                graph.user_count(),
                graph.item_count()
            )));
        }
        let user_layer0 = EmbeddingTable::new(user_layer0, NodeKind::User, false)?;
        let x = item_contextual.matrix().view();
        let without_mlp = propagate(graph, user_layer0.matrix().view(), x, config.layers)?;
        let mapped = adapter.forward(x)?;
        let with_mlp = propagate(graph, user_layer0.matrix().view(), mapped.view(), config.layers)?;
        Ok(Self {
            config,
            users,
            items,
            user_layer0,
            item_contextual,
            adapter,
            with_mlp,
            without_mlp,
            phases,
            best_phase,
        })
    }

    /// Final `(users, items)` embeddings for `mode`. Items without training
    /// edges keep their layer-0 row.
    pub fn final_embeddings(&self, mode: InferenceMode) -> (&Array2<f64>, &Array2<f64>) {
        let pair = match mode {
            InferenceMode::WithMlp => &self.with_mlp,
            InferenceMode::WithoutMlp => &self.without_mlp,
        };
        (&pair.0, &pair.1)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn users(&self) -> &Arc<IdMap> {
        &self.users
    }

    pub fn items(&self) -> &Arc<IdMap> {
        &self.items
    }

    pub fn user_layer0(&self) -> &EmbeddingTable {
        &self.user_layer0
    }

    pub fn item_contextual(&self) -> &EmbeddingTable {
        &self.item_contextual
    }

    pub fn adapter(&self) -> &MlpAdapter {
        &self.adapter
    }

    pub fn phases(&self) -> &[PhaseRecord] {
        &self.phases
    }

    pub fn best_phase(&self) -> Option<PhaseLabel> {
        self.best_phase
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = CheckpointHeader {
            kind: CheckpointKind::Model,
            format_version: FORMAT_VERSION,
            users: self.users.len(),
            items: self.items.len(),
            dim: self.item_contextual.dim(),
            adapter_layers: self.adapter.layers().len(),
            adapter_dropout: self.adapter.dropout(),
            completed_phases: None,
            best_phase: self.best_phase,
            config: self.config.clone(),
            best: None,
            phases: self.phases.clone(),
            epochs: Vec::new(),
        };
        let mut tensors = vec![
            Tensor {
                name: "user_layer0".into(),
                ids: self.users.raw_ids().to_vec(),
                data: self.user_layer0.matrix().clone(),
            },
            Tensor {
                name: "item_contextual".into(),
                ids: self.items.raw_ids().to_vec(),
                data: self.item_contextual.matrix().clone(),
            },
        ];
        tensors.extend(adapter_tensors("adapter", &self.adapter));
        write_checkpoint(path.as_ref(), &header, &tensors)
    }

    /// Loads a model checkpoint and rebuilds the propagation caches from the
    /// training split of `splits`, whose ids must match the checkpoint's.
    pub fn load(path: impl AsRef<Path>, splits: &SplitBundle) -> Result<Self> {
        let (header, mut tensors) = read_checkpoint(path.as_ref())?;
        if header.kind != CheckpointKind::Model {
            return Err(Error::Mismatch("not a model checkpoint".into()));
        }
        let users_t = take_tensor(&mut tensors, "user_layer0")?;
        let items_t = take_tensor(&mut tensors, "item_contextual")?;
        check_ids(&users_t, splits.users())?;
        check_ids(&items_t, splits.items())?;
        let adapter = take_adapter(&mut tensors, "adapter", header.adapter_layers, header.adapter_dropout)?;
        let graph = build_graph(&splits.train);
        Self::from_parts(
            header.config,
            splits.users().clone(),
            splits.items().clone(),
            users_t.data,
            EmbeddingTable::new(items_t.data, NodeKind::Item, false)?,
            adapter,
            &graph,
            header.phases,
            header.best_phase,
        )
    }
}
