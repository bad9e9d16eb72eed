//! Bipartite user–item graph and residual symmetric-normalized propagation.
//!
//! One layer maps `(H_u, H_i)` to
//!
//! ```text
//! H_u' = H_u + Â H_i      H_i' = H_i + Âᵀ H_u      Â[u, i] = 1 / (√deg(u) · √deg(i))
//! ```
//!
//! Both halves read the layer-k inputs. The operator `I + [[0, Â], [Âᵀ, 0]]` is
//! symmetric, so the adjoint of `K` layers is the same `K`-layer propagation.

use ndarray::parallel::prelude::*;
use ndarray::{Array2, ArrayView2, Axis};

use crate::dataset::InteractionSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    User,
    Item,
}

/// Dense `n × d` embedding rows with a trainability flag.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    matrix: Array2<f64>,
    kind: NodeKind,
    trainable: bool,
}

impl EmbeddingTable {
    pub fn new(matrix: Array2<f64>, kind: NodeKind, trainable: bool) -> Result<Self> {
        ensure_finite(&matrix.view(), "embedding table")?;
        Ok(Self {
            matrix,
            kind,
            trainable,
        })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    /// Mutable access for optimizers. Panics on frozen tables.
    pub fn matrix_mut(&mut self) -> &mut Array2<f64> {
        assert!(self.trainable, "attempted to mutate a frozen {:?} table", self.kind);
        &mut self.matrix
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.matrix
    }

    pub fn kind(&self) -> NodeKind {
        self.kind
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }
}

pub(crate) fn ensure_finite(m: &ArrayView2<f64>, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_owned()))
    }
}

/// CSR adjacency in both directions over the training interactions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BipartiteGraph {
    user_offsets: Vec<usize>,
    user_items: Vec<usize>,
    item_offsets: Vec<usize>,
    item_users: Vec<usize>,
}

fn csr(rows: usize, edges: impl Iterator<Item = (usize, usize)> + Clone) -> (Vec<usize>, Vec<usize>) {
    let mut offsets = vec![0usize; rows + 1];
    for (r, _) in edges.clone() {
        offsets[r + 1] += 1;
    }
    for r in 0..rows {
        offsets[r + 1] += offsets[r];
    }
    let mut cursor = offsets.clone();
    let mut cols = vec![0usize; offsets[rows]];
    for (r, c) in edges {
        cols[cursor[r]] = c;
        cursor[r] += 1;
    }
    for r in 0..rows {
        cols[offsets[r]..offsets[r + 1]].sort_unstable();
    }
    (offsets, cols)
}

/// Builds sorted CSR rows for users and items from `train`.
pub fn build_graph(train: &InteractionSet) -> BipartiteGraph {
    let pairs = train.pairs();
    let (user_offsets, user_items) = csr(train.user_count(), pairs.iter().copied());
    let (item_offsets, item_users) = csr(train.item_count(), pairs.iter().map(|&(u, i)| (i, u)));
    BipartiteGraph {
        user_offsets,
        user_items,
        item_offsets,
        item_users,
    }
}

impl BipartiteGraph {
    pub fn user_count(&self) -> usize {
        self.user_offsets.len() - 1
    }

    pub fn item_count(&self) -> usize {
        self.item_offsets.len() - 1
    }

    pub fn edge_count(&self) -> usize {
        self.user_items.len()
    }

    pub fn user_neighbors(&self, u: usize) -> &[usize] {
        &self.user_items[self.user_offsets[u]..self.user_offsets[u + 1]]
    }

    pub fn item_neighbors(&self, i: usize) -> &[usize] {
        &self.item_users[self.item_offsets[i]..self.item_offsets[i + 1]]
    }

    pub fn user_degree(&self, u: usize) -> usize {
        self.user_offsets[u + 1] - self.user_offsets[u]
    }

    pub fn item_degree(&self, i: usize) -> usize {
        self.item_offsets[i + 1] - self.item_offsets[i]
    }

    pub fn user_degrees(&self) -> Vec<usize> {
        (0..self.user_count()).map(|u| self.user_degree(u)).collect()
    }

    pub fn item_degrees(&self) -> Vec<usize> {
        (0..self.item_count()).map(|i| self.item_degree(i)).collect()
    }

    /// All edges as (user, item), user-major and sorted.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.user_count()).flat_map(move |u| self.user_neighbors(u).iter().map(move |&i| (u, i)))
    }

    fn check_shapes(&self, h_u: &ArrayView2<f64>, h_i: &ArrayView2<f64>) -> Result<()> {
        if h_u.nrows() != self.user_count() {
            return Err(Error::DimensionMismatch {
                expected: self.user_count(),
                found: h_u.nrows(),
                context: "user rows".into(),
            });
        }
        if h_i.nrows() != self.item_count() {
            return Err(Error::DimensionMismatch {
                expected: self.item_count(),
                found: h_i.nrows(),
                context: "item rows".into(),
            });
        }
        if h_u.ncols() != h_i.ncols() {
            return Err(Error::DimensionMismatch {
                expected: h_u.ncols(),
                found: h_i.ncols(),
                context: "user vs item embedding dim".into(),
            });
        }
        Ok(())
    }
}

fn inv_sqrt(deg: usize) -> f64 {
    if deg == 0 {
        0.0
    } else {
        1.0 / (deg as f64).sqrt()
    }
}

// dst[r] = src_self[r] + Σ_{c ∈ nbrs(r)} src_other[c] · s_r · s_c
fn aggregate_side(
    offsets: &[usize],
    cols: &[usize],
    self_scale: &[f64],
    other_scale: &[f64],
    src_self: &ArrayView2<f64>,
    src_other: &ArrayView2<f64>,
) -> Array2<f64> {
    let mut out = src_self.to_owned();
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(r, mut row)| {
            let nbrs = &cols[offsets[r]..offsets[r + 1]];
            for &c in nbrs {
                let w = self_scale[r] * other_scale[c];
                row.scaled_add(w, &src_other.row(c));
            }
        });
    out
}

/// One residual LGCN layer. Zero-degree nodes pass through unchanged.
pub fn aggregate_layer(
    graph: &BipartiteGraph,
    h_u: ArrayView2<f64>,
    h_i: ArrayView2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    graph.check_shapes(&h_u, &h_i)?;
    let su: Vec<f64> = graph.user_degrees().into_iter().map(inv_sqrt).collect();
    let si: Vec<f64> = graph.item_degrees().into_iter().map(inv_sqrt).collect();
    Ok(layer(graph, &su, &si, &h_u, &h_i))
}

fn layer(
    graph: &BipartiteGraph,
    su: &[f64],
    si: &[f64],
    h_u: &ArrayView2<f64>,
    h_i: &ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let (next_u, next_i) = rayon::join(
        || aggregate_side(&graph.user_offsets, &graph.user_items, su, si, h_u, h_i),
        || aggregate_side(&graph.item_offsets, &graph.item_users, si, su, h_i, h_u),
    );
    (next_u, next_i)
}

/// Applies [`aggregate_layer`] `layers` times and returns the last layer.
pub fn propagate(
    graph: &BipartiteGraph,
    h_u0: ArrayView2<f64>,
    h_i0: ArrayView2<f64>,
    layers: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    graph.check_shapes(&h_u0, &h_i0)?;
    let su: Vec<f64> = graph.user_degrees().into_iter().map(inv_sqrt).collect();
    let si: Vec<f64> = graph.item_degrees().into_iter().map(inv_sqrt).collect();
    let mut h_u = h_u0.to_owned();
    let mut h_i = h_i0.to_owned();
    for _ in 0..layers {
        let (u, i) = layer(graph, &su, &si, &h_u.view(), &h_i.view());
        h_u = u;
        h_i = i;
    }
    ensure_finite(&h_u.view(), "propagated user embeddings")?;
    ensure_finite(&h_i.view(), "propagated item embeddings")?;
    Ok((h_u, h_i))
}

/// Pulls gradients on the layer-`layers` outputs back to the layer-0 inputs.
pub fn propagate_backward(
    graph: &BipartiteGraph,
    grad_out_u: ArrayView2<f64>,
    grad_out_i: ArrayView2<f64>,
    layers: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    // Self-adjoint operator; see module docs.
    propagate(graph, grad_out_u, grad_out_i, layers)
}
