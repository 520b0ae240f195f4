//! Auto-decoder occupancy network: an MLP mapping a world coordinate (mm)
//! and a per-shape latent code to six-class probabilities.
//!
//! Every hidden layer that consumes the raw input keeps its weight matrix
//! split into blocks per input segment (`h`, `x`, `z`). The latent block is
//! identical for every point of a shape, so `z · W_z + b` is evaluated once
//! per shape and added as a row bias.

mod checkpoint;
mod loss;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointError};
pub use loss::{
    cross_entropy, labels_one_hot, loss_total, soft_dice, tape_cross_entropy, tape_data_loss, tape_latent_penalty,
    tape_soft_dice, DICE_SMOOTHING,
};

use crate::autodiff::{gemm, softmax_row, AutodiffError, NodeId, Tape, Tensor};
use crate::volume::{Class, NUM_CLASSES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default latent regularization weight.
pub const LATENT_REG: f64 = 1e-4;
/// Standard deviation of freshly drawn latent codes.
pub const LATENT_INIT_STD: f64 = 0.01;
/// Coordinates are raw millimetres inside roughly `[-COORD_SCALE_MM, COORD_SCALE_MM]`;
/// the coordinate weight blocks are initialized `1 / COORD_SCALE_MM` smaller
/// so first-layer pre-activations start at unit scale.
pub const COORD_SCALE_MM: f64 = 100.0;
/// Points per block in the tape-free forward pass.
const INFER_CHUNK: usize = 2048;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("latent code has {got} components, model expects {expected}")]
    LatentDim { expected: usize, got: usize },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch has {points} points but {labels} labels")]
    BatchMismatch { points: usize, labels: usize },
    #[error("label {0} is not a class id")]
    InvalidLabel(u8),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Architecture hyperparameters; fixed once a model is constructed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub hidden_layers: usize,
    pub width: usize,
    pub latent_dim: usize,
    pub coord_dim: usize,
    pub num_classes: usize,
    /// Index of the hidden layer whose input is `[h, x, z]`.
    pub skip_layer: usize,
    pub activation: String,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden_layers: 8,
            width: 128,
            latent_dim: 128,
            coord_dim: 3,
            num_classes: NUM_CLASSES,
            skip_layer: 4,
            activation: "relu".into(),
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Architecture(m.into()));
        if self.hidden_layers == 0 || self.width == 0 || self.latent_dim == 0 {
            return bad("layer count, width and latent size must be positive");
        }
        if self.coord_dim != 3 {
            return bad("coordinates must be 3-dimensional");
        }
        if self.num_classes != NUM_CLASSES {
            return bad("class count must match the label set");
        }
        if self.skip_layer == 0 || self.skip_layer >= self.hidden_layers {
            return bad("skip layer must be an inner hidden layer");
        }
        if self.activation != "relu" {
            return bad("only relu activation is supported");
        }
        Ok(())
    }

    fn takes_input(&self, layer: usize) -> bool {
        layer == 0 || layer == self.skip_layer
    }

    /// Total input width of layer `l` (hidden layers, then the output layer).
    fn fan_in(&self, layer: usize) -> usize {
        let h = if layer == 0 { 0 } else { self.width };
        let input = if self.takes_input(layer) && layer < self.hidden_layers {
            self.coord_dim + self.latent_dim
        } else {
            0
        };
        h + input
    }
}

/// One affine layer; weights are `[in, out]` row-major blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w_h: Option<Tensor>,
    pub w_x: Option<Tensor>,
    pub w_z: Option<Tensor>,
    pub b: Tensor,
}

impl Layer {
    fn blocks(&self) -> [(&'static str, Option<&Tensor>); 4] {
        [
            ("w_h", self.w_h.as_ref()),
            ("w_x", self.w_x.as_ref()),
            ("w_z", self.w_z.as_ref()),
            ("b", Some(&self.b)),
        ]
    }

    fn blocks_mut(&mut self) -> [Option<&mut Tensor>; 4] {
        [self.w_h.as_mut(), self.w_x.as_mut(), self.w_z.as_mut(), Some(&mut self.b)]
    }
}

/// Network parameters θ. Layers `0..hidden_layers` are hidden, the last
/// layer produces logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    arch: Architecture,
    layers: Vec<Layer>,
}

/// Parameter tensors recorded on a tape, mirroring [`ModelState::layers`].
#[derive(Debug, Clone)]
pub struct ModelNodes {
    layers: Vec<[Option<NodeId>; 4]>,
}

impl ModelNodes {
    /// Node ids in [`ModelState::named_params`] order.
    pub fn ids(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|l| l.iter().flatten().copied()).collect()
    }
}

/// Per-shape row biases `b + z · W_z` for the layers that see the input.
#[derive(Debug, Clone, Copy)]
pub struct LatentTerms {
    first: NodeId,
    skip: NodeId,
}

impl ModelState {
    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`) and biases uniform
    /// in `±1 / sqrt(fan_in)`, so first-layer ReLU hyperplanes spread over
    /// the field of view instead of all passing through the origin.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize, bound: f64| {
            let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::matrix(rows, cols, data)
        };
        let w = arch.width;
        let mut layers = Vec::with_capacity(arch.hidden_layers + 1);
        for l in 0..=arch.hidden_layers {
            let out = if l == arch.hidden_layers { arch.num_classes } else { w };
            let bound = (6.0 / arch.fan_in(l) as f64).sqrt();
            let input = l < arch.hidden_layers && arch.takes_input(l);
            layers.push(Layer {
                w_h: (l > 0).then(|| uniform(w, out, bound)),
                w_x: input.then(|| uniform(arch.coord_dim, out, bound / COORD_SCALE_MM)),
                w_z: input.then(|| uniform(arch.latent_dim, out, bound)),
                b: uniform(1, out, 1.0 / (arch.fan_in(l) as f64).sqrt()).reshaped(&[out]),
            });
        }
        // Start from near-uniform class probabilities.
        if let Some(w_h) = layers[arch.hidden_layers].w_h.as_mut() {
            w_h.data_mut().iter_mut().for_each(|v| *v *= OUTPUT_INIT_GAIN);
        }
        Ok(Self { arch, layers })
    }

    /// Assemble a model from explicit layers (used by checkpoint loading).
    pub fn from_layers(arch: Architecture, layers: Vec<Layer>) -> Result<Self, ModelError> {
        arch.validate()?;
        let template = Self::init(arch.clone(), 0)?;
        if template.layers.len() != layers.len() {
            return Err(ModelError::Architecture("wrong layer count".into()));
        }
        for (t, l) in template.layers.iter().zip(&layers) {
            for ((_, a), (_, b)) in t.blocks().iter().zip(l.blocks().iter()) {
                if a.map(|t| t.shape()) != b.map(|t| t.shape()) {
                    return Err(ModelError::Architecture("parameter shapes do not match".into()));
                }
            }
        }
        Ok(Self { arch, layers })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    /// `(name, tensor)` for every parameter block in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.blocks() {
                if let Some(t) = t {
                    out.push((format!("{}.{name}", self.layer_name(l)), t));
                }
            }
        }
        out
    }

    /// Mutable parameter slices in [`ModelState::named_params`] order.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.blocks_mut().into_iter().flatten().map(|t| t.data_mut()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    fn layer_name(&self, l: usize) -> String {
        if l == self.arch.hidden_layers {
            "out".into()
        } else {
            format!("hidden{l}")
        }
    }

    pub fn check_latent(&self, z: &[f64]) -> Result<(), ModelError> {
        if z.len() != self.arch.latent_dim {
            return Err(ModelError::LatentDim {
                expected: self.arch.latent_dim,
                got: z.len(),
            });
        }
        Ok(())
    }

    /// Record all parameters on `tape`, as trainable leaves or as constants.
    pub fn record(&self, tape: &mut Tape, trainable: bool) -> ModelNodes {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let layers = self
            .layers
            .iter()
            .map(|l| l.blocks().map(|(_, t)| t.map(&mut put)))
            .collect();
        ModelNodes { layers }
    }

    /// `b + z · W_z` for the first and the skip layer; `z` is a `[latent_dim]` node.
    pub fn latent_terms(&self, tape: &mut Tape, nodes: &ModelNodes, z: NodeId) -> Result<LatentTerms, ModelError> {
        self.check_latent(tape.value(z).data())?;
        let z_row = tape.reshape(z, &[1, self.arch.latent_dim])?;
        let mut term = |l: usize| -> Result<NodeId, ModelError> {
            let [_, _, w_z, b] = nodes.layers[l];
            let zw = tape.matmul(z_row, w_z.expect("input layer has a latent block"))?;
            let zw = tape.reshape(zw, &[self.arch.width])?;
            Ok(tape.add(zw, b.expect("bias"))?)
        };
        Ok(LatentTerms {
            first: term(0)?,
            skip: term(self.arch.skip_layer)?,
        })
    }

    /// Logits `[n, num_classes]` for a `[n, 3]` coordinate node.
    pub fn tape_logits(
        &self,
        tape: &mut Tape,
        nodes: &ModelNodes,
        terms: LatentTerms,
        coords: NodeId,
    ) -> Result<NodeId, ModelError> {
        let mut h: Option<NodeId> = None;
        for (l, ids) in nodes.layers.iter().enumerate() {
            let [w_h, w_x, _, b] = *ids;
            let mut pre = match (h, w_h) {
                (Some(h), Some(w)) => Some(tape.matmul(h, w)?),
                _ => None,
            };
            if let Some(w_x) = w_x {
                let xw = tape.matmul(coords, w_x)?;
                pre = Some(match pre {
                    Some(p) => tape.add(p, xw)?,
                    None => xw,
                });
            }
            let pre = pre.expect("every layer has an input block");
            let bias = if l == 0 {
                terms.first
            } else if l == self.arch.skip_layer {
                terms.skip
            } else {
                b.expect("bias")
            };
            let pre = tape.add_row(pre, bias)?;
            h = Some(if l == self.arch.hidden_layers {
                pre
            } else {
                tape.relu(pre)?
            });
        }
        Ok(h.expect("at least one layer"))
    }

    /// Tape-free logits, row-major `[n, num_classes]`.
    pub fn logits(&self, points: &[[f64; 3]], z: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_latent(z)?;
        let k = self.arch.num_classes;
        let biases = self.latent_biases(z);
        let mut out = vec![0.0; points.len() * k];
        let mut scratch = Scratch::default();
        for (chunk, dst) in points.chunks(INFER_CHUNK).zip(out.chunks_mut(INFER_CHUNK * k)) {
            self.logits_chunk(chunk, &biases, &mut scratch, dst, None);
        }
        Ok(out)
    }

    /// Which hidden units are active (pre-activation > 0), point by point
    /// and layer by layer. Two inputs with the same pattern lie on the same
    /// linear piece of every ReLU, which is what finite-difference checks
    /// need to know.
    pub fn activation_pattern(&self, points: &[[f64; 3]], z: &[f64]) -> Result<Vec<bool>, ModelError> {
        self.check_latent(z)?;
        let k = self.arch.num_classes;
        let biases = self.latent_biases(z);
        let mut logits = vec![0.0; INFER_CHUNK * k];
        let (w, layers) = (self.arch.width, self.arch.hidden_layers);
        let mut pattern = Vec::with_capacity(points.len() * w * layers);
        let mut scratch = Scratch::default();
        let mut chunk_pattern = Vec::new();
        for chunk in points.chunks(INFER_CHUNK) {
            let n = chunk.len();
            chunk_pattern.clear();
            self.logits_chunk(chunk, &biases, &mut scratch, &mut logits[..n * k], Some(&mut chunk_pattern));
            // recorded layer-major; reorder to point-major
            for i in 0..n {
                for l in 0..layers {
                    let start = (l * n + i) * w;
                    pattern.extend_from_slice(&chunk_pattern[start..start + w]);
                }
            }
        }
        Ok(pattern)
    }

    /// Class probabilities for each point.
    pub fn probs(&self, points: &[[f64; 3]], z: &[f64]) -> Result<Vec<[f64; NUM_CLASSES]>, ModelError> {
        let logits = self.logits(points, z)?;
        Ok(logits
            .chunks_exact(NUM_CLASSES)
            .map(|row| {
                let mut p = [0.0; NUM_CLASSES];
                p.copy_from_slice(row);
                softmax_row(&mut p, false);
                p
            })
            .collect())
    }

    /// Single-point class probabilities.
    pub fn forward(&self, x: [f64; 3], z: &[f64]) -> Result<[f64; NUM_CLASSES], ModelError> {
        Ok(self.probs(&[x], z)?[0])
    }

    /// Argmax class per point; ties go to the lowest class index.
    pub fn classify(&self, points: &[[f64; 3]], z: &[f64]) -> Result<Vec<u8>, ModelError> {
        let logits = self.logits(points, z)?;
        Ok(logits.chunks_exact(NUM_CLASSES).map(argmax).collect())
    }

    fn latent_biases(&self, z: &[f64]) -> [Vec<f64>; 2] {
        [0, self.arch.skip_layer].map(|l| {
            let layer = &self.layers[l];
            let w_z = layer.w_z.as_ref().expect("input layer has a latent block");
            let mut row = layer.b.data().to_vec();
            gemm(1, self.arch.latent_dim, self.arch.width, z, false, w_z.data(), false, &mut row, 1.0);
            row
        })
    }

    fn logits_chunk(
        &self,
        points: &[[f64; 3]],
        biases: &[Vec<f64>; 2],
        s: &mut Scratch,
        out: &mut [f64],
        mut pattern: Option<&mut Vec<bool>>,
    ) {
        let n = points.len();
        let w = self.arch.width;
        s.x.clear();
        s.x.extend(points.iter().flatten());
        s.h.resize(n * w, 0.0);
        s.next.resize(n * w, 0.0);
        let last = self.arch.hidden_layers;
        for (l, layer) in self.layers.iter().enumerate() {
            let width_out = if l == last { self.arch.num_classes } else { w };
            let bias: &[f64] = if l == 0 {
                &biases[0]
            } else if l == self.arch.skip_layer {
                &biases[1]
            } else {
                layer.b.data()
            };
            let dst: &mut [f64] = if l == last { &mut out[..n * width_out] } else { &mut s.next[..n * w] };
            for row in dst.chunks_exact_mut(width_out) {
                row.copy_from_slice(bias);
            }
            if let Some(w_h) = &layer.w_h {
                gemm(n, w, width_out, &s.h, false, w_h.data(), false, dst, 1.0);
            }
            if let Some(w_x) = &layer.w_x {
                gemm(n, 3, width_out, &s.x, false, w_x.data(), false, dst, 1.0);
            }
            if l < last {
                if let Some(p) = pattern.as_deref_mut() {
                    p.extend(dst.iter().map(|v| *v > 0.0));
                }
                for v in dst.iter_mut() {
                    *v = v.max(0.0);
                }
                std::mem::swap(&mut s.h, &mut s.next);
            }
        }
    }
}

/// Logit scale of the freshly initialized output layer.
const OUTPUT_INIT_GAIN: f64 = 0.1;

#[derive(Default)]
struct Scratch {
    x: Vec<f64>,
    h: Vec<f64>,
    next: Vec<f64>,
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> u8 {
    let mut best = 0;
    for (k, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = k;
        }
    }
    best as u8
}

/// Convenience: a model with the default architecture.
pub fn init_model(seed: u64) -> ModelState {
    ModelState::init(Architecture::default(), seed).expect("default architecture is valid")
}

/// Latent code with i.i.d. `N(0, LATENT_INIT_STD²)` components.
pub fn init_latent(latent_dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, LATENT_INIT_STD).expect("valid std");
    (0..latent_dim).map(|_| normal.sample(&mut rng)).collect()
}

/// Per-training-shape latent codes keyed by shape id.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodebook {
    pub ids: Vec<String>,
    pub codes: Vec<Vec<f64>>,
    pub lambda: f64,
}

impl LatentCodebook {
    /// One code per id, drawn from `seed` in id order.
    pub fn init(ids: Vec<String>, latent_dim: usize, lambda: f64, seed: u64) -> Self {
        let codes = (0..ids.len())
            .map(|i| init_latent(latent_dim, seed.wrapping_add(i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
            .collect();
        Self { ids, codes, lambda }
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.ids.iter().position(|i| i == id).map(|k| self.codes[k].as_slice())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Fixed class order written into checkpoints.
pub fn class_order() -> Vec<String> {
    Class::names()
}

#[cfg(test)]
mod tests;
