//! CCMDL1 checkpoint container.
//!
//! ```text
//! "CCMDL1"
//! u32 header_len, header_len bytes of TOML
//! u32 tensor_count
//! tensor_count × { u32 name_len, name, u32 rows, u32 dim,
//!                  rows × { u32 id_len, id, dim × f32 } }
//! ```
//!
//! Rows use the CCEMB1 record layout. Embedding tensors carry raw user or
//! item ids; adapter tensors carry row numbers.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{BestSnapshot, EpochRecord, MetricHistory, PhaseLabel, PhaseRecord, TrainConfig, TrainState};
use crate::adapter::{DenseLayer, MlpAdapter};
use crate::dataset::embeddings::{check_magic, put_record, put_u32, Cursor};
use crate::dataset::IdMap;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MODEL_MAGIC: &[u8; 6] = b"CCMDL1";
pub(crate) const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Model,
    Resume,
}

/// TOML metadata block at the start of every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub format_version: u32,
    pub users: usize,
    pub items: usize,
    pub dim: usize,
    pub adapter_layers: usize,
    pub adapter_dropout: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completed_phases: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_phase: Option<PhaseLabel>,
    pub config: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best: Option<PhaseRecord>,
    #[serde(default)]
    pub phases: Vec<PhaseRecord>,
    #[serde(default)]
    pub epochs: Vec<EpochRecord>,
}

pub(crate) struct Tensor {
    pub name: String,
    pub ids: Vec<String>,
    pub data: Array2<f64>,
}

impl Tensor {
    fn numbered(name: String, data: Array2<f64>) -> Self {
        Self {
            name,
            ids: (0..data.nrows()).map(|r| r.to_string()).collect(),
            data,
        }
    }
}

fn encode(header: &CheckpointHeader, tensors: &[Tensor]) -> Result<Vec<u8>> {
    let text = toml::to_string(header).map_err(|e| Error::InvalidArgument(format!("checkpoint header: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    put_u32(&mut out, text.len());
    out.extend_from_slice(text.as_bytes());
    put_u32(&mut out, tensors.len());
    for t in tensors {
        put_u32(&mut out, t.name.len());
        out.extend_from_slice(t.name.as_bytes());
        put_u32(&mut out, t.data.nrows());
        put_u32(&mut out, t.data.ncols());
        for (id, row) in t.ids.iter().zip(t.data.rows()) {
            put_record(&mut out, id, row.iter().map(|&v| v as f32));
        }
    }
    Ok(out)
}

fn read_header_only(bytes: &[u8]) -> Result<(CheckpointHeader, Cursor<'_>)> {
    check_magic(bytes, MODEL_MAGIC)?;
    let mut cur = Cursor::new(&bytes[MODEL_MAGIC.len()..]);
    let text = cur.string("header")?;
    let header: CheckpointHeader =
        toml::from_str(&text).map_err(|e| Error::Corrupt(format!("checkpoint header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Corrupt(format!(
            "unsupported checkpoint version {}",
            header.format_version
        )));
    }
    Ok((header, cur))
}

fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<Tensor>)> {
    let (header, mut cur) = read_header_only(bytes)?;
    let count = cur.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = cur.string("tensor name")?;
        let rows = cur.u32("tensor rows")?;
        let dim = cur.u32("tensor dim")?;
        let mut ids = Vec::with_capacity(rows.min(1 << 20));
        let mut flat = Vec::with_capacity(rows.saturating_mul(dim).min(1 << 26));
        for _ in 0..rows {
            ids.push(cur.string(&name)?);
            cur.f32s(dim, &mut flat, &name)?;
        }
        let data = Array2::from_shape_vec((rows, dim), flat.into_iter().map(f64::from).collect())
            .expect("shape matches record count");
        tensors.push(Tensor { name, ids, data });
    }
    if !cur.is_empty() {
        return Err(Error::Corrupt("trailing bytes after last tensor".into()));
    }
    Ok((header, tensors))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses only the TOML header, for inspection.
pub fn read_checkpoint_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let bytes = read_bytes(path.as_ref())?;
    Ok(read_header_only(&bytes)?.0)
}

pub(crate) fn write_checkpoint(path: &Path, header: &CheckpointHeader, tensors: &[Tensor]) -> Result<()> {
    write_atomic(path, &encode(header, tensors)?)
}

pub(crate) fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<Tensor>)> {
    decode(&read_bytes(path)?)
}

pub(crate) fn adapter_tensors(prefix: &str, adapter: &MlpAdapter) -> Vec<Tensor> {
    let mut out = Vec::new();
    for (l, layer) in adapter.layers().iter().enumerate() {
        out.push(Tensor::numbered(format!("{prefix}.{l}.weight"), layer.weight.clone()));
        out.push(Tensor::numbered(
            format!("{prefix}.{l}.bias"),
            layer.bias.clone().insert_axis(ndarray::Axis(0)),
        ));
    }
    out
}

pub(crate) fn take_tensor(tensors: &mut Vec<Tensor>, name: &str) -> Result<Tensor> {
    let pos = tensors
        .iter()
        .position(|t| t.name == name)
        .ok_or_else(|| Error::Corrupt(format!("checkpoint lacks tensor {name:?}")))?;
    Ok(tensors.swap_remove(pos))
}

pub(crate) fn take_adapter(tensors: &mut Vec<Tensor>, prefix: &str, layers: usize, dropout: f64) -> Result<MlpAdapter> {
    let mut dense = Vec::with_capacity(layers);
    for l in 0..layers {
        let weight = take_tensor(tensors, &format!("{prefix}.{l}.weight"))?.data;
        let bias = take_tensor(tensors, &format!("{prefix}.{l}.bias"))?.data;
        if bias.nrows() != 1 {
            return Err(Error::Corrupt(format!("{prefix}.{l}.bias must have one row")));
        }
        let bias: Array1<f64> = bias.row(0).to_owned();
        dense.push(DenseLayer { weight, bias });
    }
    MlpAdapter::from_layers(dense, dropout)
}

/// Checks that a tensor's row ids are exactly `ids`, in order.
pub(crate) fn check_ids(tensor: &Tensor, ids: &IdMap) -> Result<()> {
    if tensor.ids.as_slice() != ids.raw_ids() {
        return Err(Error::Mismatch(format!(
            "tensor {:?} ids do not match the split's {} ids",
            tensor.name,
            ids.len()
        )));
    }
    Ok(())
}

/// Saves training state at a phase boundary so a run can continue later.
pub fn write_resume(
    path: impl AsRef<Path>,
    config: &TrainConfig,
    state: &TrainState,
    users: &IdMap,
    items: &IdMap,
) -> Result<()> {
    let header = CheckpointHeader {
        kind: CheckpointKind::Resume,
        format_version: FORMAT_VERSION,
        users: users.len(),
        items: items.len(),
        dim: state.user_layer0.ncols(),
        adapter_layers: state.adapter.layers().len(),
        adapter_dropout: state.adapter.dropout(),
        completed_phases: Some(state.completed_phases),
        best_phase: state.best.as_ref().map(|b| b.record.phase),
        config: config.clone(),
        best: state.best.as_ref().map(|b| b.record.clone()),
        phases: state.history.phases.clone(),
        epochs: state.history.epochs.clone(),
    };
    let mut tensors = vec![Tensor {
        name: "user_layer0".into(),
        ids: users.raw_ids().to_vec(),
        data: state.user_layer0.clone(),
    }];
    tensors.extend(adapter_tensors("adapter", &state.adapter));
    if let Some(best) = &state.best {
        tensors.push(Tensor {
            name: "best.user_layer0".into(),
            ids: users.raw_ids().to_vec(),
            data: best.user_layer0.clone(),
        });
        tensors.extend(adapter_tensors("best.adapter", &best.adapter));
    }
    write_checkpoint(path.as_ref(), &header, &tensors)
}

/// Loads a resume file written by [`write_resume`], checking its user ids
/// against `users`. Returns the stored config with the state.
pub fn read_resume(path: impl AsRef<Path>, users: &IdMap, items: &IdMap) -> Result<(TrainConfig, TrainState)> {
    let (header, mut tensors) = read_checkpoint(path.as_ref())?;
    if header.kind != CheckpointKind::Resume {
        return Err(Error::Mismatch("not a resume checkpoint".into()));
    }
    if header.items != items.len() {
        return Err(Error::Mismatch(format!(
            "resume file has {} items, splits have {}",
            header.items,
            items.len()
        )));
    }
    let user_t = take_tensor(&mut tensors, "user_layer0")?;
    check_ids(&user_t, users)?;
    let adapter = take_adapter(&mut tensors, "adapter", header.adapter_layers, header.adapter_dropout)?;
    let best = match header.best {
        Some(record) => {
            let bu = take_tensor(&mut tensors, "best.user_layer0")?;
            check_ids(&bu, users)?;
            let ba = take_adapter(
                &mut tensors,
                "best.adapter",
                header.adapter_layers,
                header.adapter_dropout,
            )?;
            Some(BestSnapshot {
                record,
                user_layer0: bu.data,
                adapter: ba,
            })
        }
        None => None,
    };
    let state = TrainState {
        user_layer0: user_t.data,
        adapter,
        completed_phases: header.completed_phases.unwrap_or(0),
        best,
        history: MetricHistory {
            epochs: header.epochs,
            phases: header.phases,
        },
    };
    Ok((header.config, state))
}
