//! Alignment / uniformity objectives and their gradients for both tutoring phases.
//!
//! * alignment: `(1/B) Σ_(a,b) ‖z_a − z_b‖²` over a batch of edges, gradient to the
//!   trainable side only.
//! * uniformity: `log((1/n²) Σ_a Σ_b exp(−2·D(a, b)))` over the distinct batch rows
//!   of the trainable side, self-pairs included. `D` is the squared L2 distance in
//!   [`UniformityMode::Squared`] and the plain distance in [`UniformityMode::Literal`].
//!
//! With `normalize` set both losses see L2-normalized rows (zero rows stay zero).

use ndarray::parallel::prelude::*;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterGrads, MlpAdapter};
use crate::error::{Error, Result};
use crate::graph::{propagate, propagate_backward, BipartiteGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UniformityMode {
    /// `exp(−2‖a − b‖²)`
    Squared,
    /// `exp(−2‖a − b‖)`
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub normalize: bool,
    pub uniformity: UniformityMode,
    pub batch_size: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            normalize: true,
            uniformity: UniformityMode::Squared,
            batch_size: 1024,
        }
    }
}

fn normalize_row(x: ArrayView1<f64>) -> (Array1<f64>, f64) {
    let norm = x.dot(&x).sqrt();
    if norm > 0.0 {
        (x.mapv(|v| v / norm), norm)
    } else {
        (Array1::zeros(x.len()), 0.0)
    }
}

// d(x/‖x‖)ᵀ g = (g − y (y·g)) / ‖x‖
fn normalize_backward(mut g: ArrayViewMut1<f64>, y: ArrayView1<f64>, norm: f64) {
    if norm > 0.0 {
        let proj = y.dot(&g);
        g.zip_mut_with(&y, |gv, &yv| *gv = (*gv - yv * proj) / norm);
    } else {
        g.fill(0.0);
    }
}

fn prepare_rows(rows: ArrayView2<f64>, normalize: bool) -> (Array2<f64>, Vec<f64>) {
    if !normalize {
        return (rows.to_owned(), Vec::new());
    }
    let mut out = Array2::zeros(rows.raw_dim());
    let mut norms = Vec::with_capacity(rows.nrows());
    for (src, mut dst) in rows.rows().into_iter().zip(out.rows_mut()) {
        let (y, n) = normalize_row(src);
        dst.assign(&y);
        norms.push(n);
    }
    (out, norms)
}

fn check_pairs(pairs: &[(usize, usize)], trainable: &ArrayView2<f64>, frozen: &ArrayView2<f64>) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if trainable.ncols() != frozen.ncols() {
        return Err(Error::DimensionMismatch {
            expected: trainable.ncols(),
            found: frozen.ncols(),
            context: "alignment sides".into(),
        });
    }
    for &(a, b) in pairs {
        if a >= trainable.nrows() {
            return Err(Error::IndexOutOfRange {
                kind: "trainable row",
                index: a,
                count: trainable.nrows(),
            });
        }
        if b >= frozen.nrows() {
            return Err(Error::IndexOutOfRange {
                kind: "frozen row",
                index: b,
                count: frozen.nrows(),
            });
        }
    }
    Ok(())
}

/// Mean squared distance over `pairs` of (trainable row, frozen row).
pub fn alignment_loss(
    pairs: &[(usize, usize)],
    trainable: ArrayView2<f64>,
    frozen: ArrayView2<f64>,
    normalize: bool,
) -> Result<f64> {
    Ok(alignment_with_grad(pairs, trainable, frozen, normalize)?.0)
}

/// Alignment loss and its gradient with respect to every row of `trainable`.
pub fn alignment_with_grad(
    pairs: &[(usize, usize)],
    trainable: ArrayView2<f64>,
    frozen: ArrayView2<f64>,
    normalize: bool,
) -> Result<(f64, Array2<f64>)> {
    check_pairs(pairs, &trainable, &frozen)?;
    let scale = 1.0 / pairs.len() as f64;
    let mut grad = Array2::<f64>::zeros(trainable.raw_dim());
    let mut touched = vec![false; trainable.nrows()];
    let mut loss = 0.0;
    for &(a, b) in pairs {
        let (za, zb) = if normalize {
            (normalize_row(trainable.row(a)).0, normalize_row(frozen.row(b)).0)
        } else {
            (trainable.row(a).to_owned(), frozen.row(b).to_owned())
        };
        let diff = &za - &zb;
        loss += diff.dot(&diff);
        grad.row_mut(a).scaled_add(2.0 * scale, &diff);
        touched[a] = true;
    }
    if normalize {
        for (a, _) in touched.iter().enumerate().filter(|(_, t)| **t) {
            let (y, n) = normalize_row(trainable.row(a));
            normalize_backward(grad.row_mut(a), y.view(), n);
        }
    }
    Ok((loss * scale, grad))
}

/// Uniformity over the given rows (all ordered pairs, self-pairs included).
pub fn uniformity_loss(rows: ArrayView2<f64>, normalize: bool, mode: UniformityMode) -> f64 {
    uniformity_with_grad(rows, normalize, mode).0
}

/// Uniformity value and its gradient with respect to each input row. An empty
/// input yields 0.
pub fn uniformity_with_grad(rows: ArrayView2<f64>, normalize: bool, mode: UniformityMode) -> (f64, Array2<f64>) {
    let n = rows.nrows();
    if n == 0 {
        return (0.0, Array2::zeros(rows.raw_dim()));
    }
    let (z, norms) = prepare_rows(rows, normalize);
    let (sum, mut grad) = match mode {
        UniformityMode::Squared => uniformity_squared(&z),
        UniformityMode::Literal => uniformity_literal(&z),
    };
    if normalize {
        for (r, g) in grad.rows_mut().into_iter().enumerate() {
            normalize_backward(g, z.row(r), norms[r]);
        }
    }
    ((sum / (n * n) as f64).ln(), grad)
}

// Gram-matrix form. Returns (Σ w, ∂ log Σw / ∂z).
fn uniformity_squared(z: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = z.nrows();
    let gram = z.dot(&z.t());
    let sq: Vec<f64> = (0..n).map(|a| gram[[a, a]]).collect();
    let mut w = Array2::<f64>::zeros((n, n));
    w.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(a, mut row)| {
            for b in 0..n {
                let d = if a == b {
                    0.0
                } else {
                    (sq[a] + sq[b] - 2.0 * gram[[a, b]]).max(0.0)
                };
                row[b] = (-2.0 * d).exp();
            }
        });
    let total: f64 = w.sum();
    // ∂/∂z_a = −(8/S) Σ_b w_ab (z_a − z_b)
    let row_sums = w.sum_axis(Axis(1));
    let wz = w.dot(z);
    let mut grad = z * &row_sums.insert_axis(Axis(1)) - wz;
    grad *= -8.0 / total;
    (total, grad)
}

// Pairwise form; ∂/∂z_a = −(4/S) Σ_b (w_ab / D_ab)(z_a − z_b), zero where D = 0.
fn uniformity_literal(z: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = z.nrows();
    let mut grad = Array2::<f64>::zeros(z.raw_dim());
    let partial: Vec<f64> = grad
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .map(|(a, mut g)| {
            let mut s = 0.0;
            for b in 0..n {
                if a == b {
                    s += 1.0;
                    continue;
                }
                let diff = &z.row(a) - &z.row(b);
                let d = diff.dot(&diff).sqrt();
                let w = (-2.0 * d).exp();
                s += w;
                if d > 0.0 {
                    g.scaled_add(w / d, &diff);
                }
            }
            s
        })
        .collect();
    let total: f64 = partial.iter().sum();
    grad *= -4.0 / total;
    (total, grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Users learn against frozen item embeddings.
    ItemTutoring,
    /// The item adapter learns against frozen users.
    UserTutoring,
}

/// Everything a phase loss reads. Nothing here is mutated.
#[derive(Clone, Copy, Debug)]
pub struct PhaseInputs<'a> {
    pub graph: &'a BipartiteGraph,
    pub user_layer0: ArrayView2<'a, f64>,
    pub item_contextual: ArrayView2<'a, f64>,
    pub adapter: &'a MlpAdapter,
    pub layers: usize,
    pub loss: &'a LossConfig,
}

/// Gradient for the phase's trainable set only.
#[derive(Clone, Debug, PartialEq)]
pub enum PhaseGradient {
    /// With respect to the layer-0 user table.
    Users(Array2<f64>),
    Adapter(AdapterGrads),
}

#[derive(Clone, Debug)]
pub struct PhaseLoss {
    pub total: f64,
    pub alignment: f64,
    pub uniformity: f64,
    pub gradient: PhaseGradient,
}

fn distinct(iter: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut v: Vec<usize> = iter.collect();
    v.sort_unstable();
    v.dedup();
    v
}

fn uniform_over(table: &Array2<f64>, rows: &[usize], cfg: &LossConfig, grad: &mut Array2<f64>) -> f64 {
    let batch = table.select(Axis(0), rows);
    let (value, g) = uniformity_with_grad(batch.view(), cfg.normalize, cfg.uniformity);
    for (r, &idx) in rows.iter().enumerate() {
        grad.row_mut(idx).scaled_add(1.0, &g.row(r));
    }
    value
}

/// Loss and trainable-side gradient for one batch of (user, item) edges.
///
/// Item tutoring trains the layer-0 users; propagated items are treated as
/// constants. User tutoring feeds `adapter(item_contextual)` through the
/// aggregator and trains only the adapter; propagated users are constants.
/// `rng` drives adapter dropout in the user phase.
pub fn phase_loss<R: Rng>(
    phase: Phase,
    batch: &[(usize, usize)],
    inputs: &PhaseInputs<'_>,
    rng: &mut R,
) -> Result<PhaseLoss> {
    let cfg = inputs.loss;
    match phase {
        Phase::ItemTutoring => {
            let (h_u, h_i) = propagate(inputs.graph, inputs.user_layer0, inputs.item_contextual, inputs.layers)?;
            let (alignment, mut grad_u) = alignment_with_grad(batch, h_u.view(), h_i.view(), cfg.normalize)?;
            let users = distinct(batch.iter().map(|&(u, _)| u));
            let uniformity = uniform_over(&h_u, &users, cfg, &mut grad_u);
            let zeros_i = Array2::zeros(h_i.raw_dim());
            let (grad_u0, _) = propagate_backward(inputs.graph, grad_u.view(), zeros_i.view(), inputs.layers)?;
            finish(alignment, uniformity, PhaseGradient::Users(grad_u0))
        }
        Phase::UserTutoring => {
            let (mapped, cache) = inputs.adapter.forward_train(inputs.item_contextual, rng)?;
            let (h_u, h_i) = propagate(inputs.graph, inputs.user_layer0, mapped.view(), inputs.layers)?;
            let flipped: Vec<(usize, usize)> = batch.iter().map(|&(u, i)| (i, u)).collect();
            let (alignment, mut grad_i) = alignment_with_grad(&flipped, h_i.view(), h_u.view(), cfg.normalize)?;
            let items = distinct(batch.iter().map(|&(_, i)| i));
            let uniformity = uniform_over(&h_i, &items, cfg, &mut grad_i);
            let zeros_u = Array2::zeros(h_u.raw_dim());
            let (_, grad_mapped) = propagate_backward(inputs.graph, zeros_u.view(), grad_i.view(), inputs.layers)?;
            let (grads, _) = inputs.adapter.backward(&cache, grad_mapped.view())?;
            finish(alignment, uniformity, PhaseGradient::Adapter(grads))
        }
    }
}

fn finish(alignment: f64, uniformity: f64, gradient: PhaseGradient) -> Result<PhaseLoss> {
    let total = alignment + uniformity;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "phase loss (alignment {alignment}, uniformity {uniformity})"
        )));
    }
    Ok(PhaseLoss {
        total,
        alignment,
        uniformity,
        gradient,
    })
}
