//! MLP that maps frozen item contextual embeddings into the training space.
//!
//! Hidden layers are `affine → ReLU → dropout`; the output layer is affine only,
//! and input and output widths both equal the embedding dim. Dropout uses
//! inverted scaling, so inference needs no rescale.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub layers: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 768,
            dropout: 0.2,
        }
    }
}

impl AdapterConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.layers == 0 {
            out.push("adapter.layers must be at least 1".to_owned());
        }
        if self.layers > 1 && self.hidden == 0 {
            out.push("adapter.hidden must be positive".to_owned());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            out.push(format!("adapter.dropout must lie in [0, 1), got {}", self.dropout));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `d_in × d_out`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpAdapter {
    layers: Vec<DenseLayer>,
    dropout: f64,
}

/// Activations and dropout masks recorded by [`MlpAdapter::forward_train`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    // Input seen by each layer (post-dropout for hidden inputs).
    inputs: Vec<Array2<f64>>,
    // ReLU-derivative times dropout scale, per hidden layer.
    gates: Vec<Array2<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl AdapterGrads {
    pub fn zeros_like(adapter: &MlpAdapter) -> Self {
        Self {
            weights: adapter
                .layers
                .iter()
                .map(|l| Array2::zeros(l.weight.raw_dim()))
                .collect(),
            biases: adapter.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
        }
    }
}

impl MlpAdapter {
    /// Fan-based uniform weights, zero biases; deterministic per seed.
    pub fn init(dim: usize, config: &AdapterConfig, seed: u64) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        if ![1, 2, 3].contains(&config.layers)
            || (config.layers > 1 && ![384, 768, 1536].contains(&config.hidden))
            || ![0.2, 0.5].contains(&config.dropout)
        {
            log::warn!("adapter config {config:?} lies outside the documented tuning grid");
        }
        let mut widths = vec![dim];
        widths.extend(std::iter::repeat_n(config.hidden, config.layers - 1));
        widths.push(dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                DenseLayer {
                    weight: Array2::from_shape_simple_fn((w[0], w[1]), || dist.sample(&mut rng)),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(Self {
            layers,
            dropout: config.dropout,
        })
    }

    /// Single identity layer: maps every input to itself.
    pub fn identity(dim: usize) -> Self {
        Self {
            layers: vec![DenseLayer {
                weight: Array2::eye(dim),
                bias: Array1::zeros(dim),
            }],
            dropout: 0.0,
        }
    }

    pub fn from_layers(layers: Vec<DenseLayer>, dropout: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("adapter needs at least one layer".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].weight.ncols() != pair[1].weight.nrows() {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].weight.ncols(),
                    found: pair[1].weight.nrows(),
                    context: format!("adapter layer {} input width", l + 1),
                });
            }
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.weight.ncols() {
                return Err(Error::DimensionMismatch {
                    expected: layer.weight.ncols(),
                    found: layer.bias.len(),
                    context: format!("adapter layer {l} bias"),
                });
            }
        }
        let dim_in = layers[0].weight.nrows();
        let dim_out = layers[layers.len() - 1].weight.ncols();
        if dim_in != dim_out {
            return Err(Error::DimensionMismatch {
                expected: dim_in,
                found: dim_out,
                context: "adapter output width".into(),
            });
        }
        Ok(Self { layers, dropout })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn set_dropout(&mut self, rate: f64) {
        self.dropout = rate;
    }

    pub fn dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.ncols(),
                context: "adapter input width".into(),
            });
        }
        Ok(())
    }

    /// Inference-mode forward: no dropout, no randomness.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let last = self.layers.len() - 1;
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weight) + &layer.bias;
            if l < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            a = z;
        }
        Ok(a)
    }

    /// Train-mode forward. Dropout masks are drawn from `rng` and cached.
    pub fn forward_train<R: Rng>(&self, x: ArrayView2<f64>, rng: &mut R) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&x)?;
        let last = self.layers.len() - 1;
        let keep = 1.0 - self.dropout;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut gates = Vec::with_capacity(last);
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.weight) + &layer.bias;
            inputs.push(a);
            if l == last {
                return Ok((z, ForwardCache { inputs, gates }));
            }
            let gate = if self.dropout > 0.0 {
                z.mapv(|v| {
                    let kept = rng.random::<f64>() < keep;
                    if v > 0.0 && kept {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
            } else {
                z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })
            };
            a = z * &gate;
            gates.push(gate);
        }
        unreachable!("adapter has at least one layer")
    }

    /// Reverse pass for the batch recorded in `cache`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: ArrayView2<f64>) -> Result<(AdapterGrads, Array2<f64>)> {
        if cache.inputs.len() != self.layers.len() || cache.gates.len() + 1 != self.layers.len() {
            return Err(Error::InvalidArgument(
                "forward cache does not match adapter depth".into(),
            ));
        }
        let rows = cache.inputs[0].nrows();
        if grad_out.dim() != (rows, self.dim()) {
            return Err(Error::DimensionMismatch {
                expected: rows,
                found: grad_out.nrows(),
                context: "adapter grad_out rows (or width)".into(),
            });
        }
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut g = grad_out.to_owned();
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            weights.push(cache.inputs[l].t().dot(&g));
            biases.push(g.sum_axis(Axis(0)));
            let mut ga = g.dot(&layer.weight.t());
            if l > 0 {
                ga *= &cache.gates[l - 1];
            }
            g = ga;
        }
        weights.reverse();
        biases.reverse();
        Ok((AdapterGrads { weights, biases }, g))
    }
}
