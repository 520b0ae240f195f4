use super::PipelineError;
use crate::autodiff::{AdamConfig, AdamState, Tape, Tensor};
use crate::geometry::Vec3;
use crate::model::{init_model, tape_data_loss, tape_latent_penalty, Checkpoint, LatentCodebook, ModelState, LATENT_REG};
use crate::volume::LabelVolume;
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Auto-decoder training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Shapes per iteration.
    pub batch_size: usize,
    pub points_per_volume: usize,
    pub learning_rate: f64,
    /// Multiply the learning rate by `lr_decay_factor` every this many
    /// epochs (0 keeps it constant).
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub latent_reg: f64,
    pub seed: u64,
    /// Emit a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1800,
            batch_size: 8,
            points_per_volume: 64 * 64 * 64,
            learning_rate: 1e-4,
            lr_decay_every: 0,
            lr_decay_factor: 0.5,
            latent_reg: LATENT_REG,
            seed: 0,
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.batch_size == 0 || self.points_per_volume == 0 {
            return Err(PipelineError::InvalidConfig("batch size and point count must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.latent_reg >= 0.0) {
            return Err(PipelineError::InvalidConfig("learning rate must be positive, λ non-negative".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(PipelineError::InvalidConfig("learning-rate decay factor must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_every {
            0 => self.learning_rate,
            every => self.learning_rate * self.lr_decay_factor.powi((epoch / every) as i32),
        }
    }
}

/// A training volume with its identifier.
#[derive(Debug, Clone, Copy)]
pub struct TrainingShape<'a> {
    pub id: &'a str,
    pub volume: &'a LabelVolume,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Batch-mean total loss per iteration.
    pub losses: Vec<f64>,
}

/// `n` points uniform over the volume's bounding box, labelled by
/// nearest-neighbour lookup.
pub fn sample_points(vol: &LabelVolume, n: usize, rng: &mut impl Rng) -> (Vec<[f64; 3]>, Vec<u8>) {
    let (lo, hi) = vol.grid().bounds();
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let p = [rng.gen_range(lo.x..hi.x), rng.gen_range(lo.y..hi.y), rng.gen_range(lo.z..hi.z)];
        labels.push(vol.label_at(Vec3::from_array(p)));
        points.push(p);
    }
    (points, labels)
}

/// Loss and gradients of `CE + Dice + λ‖z‖²` for one shape.
pub(crate) struct ShapeGradients {
    pub loss: f64,
    pub theta: Vec<Tensor>,
    pub latent: Vec<f64>,
}

pub(crate) fn shape_gradients(
    model: &ModelState,
    z: &[f64],
    points: &[[f64; 3]],
    labels: &[u8],
    lambda: f64,
) -> Result<ShapeGradients, PipelineError> {
    let mut tape = Tape::new();
    let nodes = model.record(&mut tape, true);
    let zn = tape.param(Tensor::vector(z.to_vec()));
    let terms = model.latent_terms(&mut tape, &nodes, zn)?;
    let x = tape.constant(Tensor::matrix(points.len(), 3, points.iter().flatten().copied().collect()));
    let logits = model.tape_logits(&mut tape, &nodes, terms, x)?;
    let data = tape_data_loss(&mut tape, logits, labels)?;
    let penalty = tape_latent_penalty(&mut tape, zn, lambda)?;
    let root = tape.add(data, penalty)?;
    let loss = tape.value(root).item();
    let mut grads = tape.backward(root)?;
    let theta = nodes
        .ids()
        .into_iter()
        .map(|id| grads.take(id).expect("parameter leaf"))
        .collect();
    let latent = grads.take(zn).expect("latent leaf").into_data();
    Ok(ShapeGradients { loss, theta, latent })
}

/// Jointly optimize network weights and one latent code per training
/// shape. `on_checkpoint(epoch, ckpt)` is called at the configured cadence.
pub fn train(
    cohort: &[TrainingShape<'_>],
    config: &TrainConfig,
    mut on_checkpoint: impl FnMut(usize, &Checkpoint) -> Result<(), PipelineError>,
) -> Result<TrainOutcome, PipelineError> {
    config.validate()?;
    if cohort.is_empty() {
        return Err(PipelineError::EmptyCohort);
    }
    let mut model = init_model(config.seed);
    let ids: Vec<String> = cohort.iter().map(|s| s.id.to_string()).collect();
    let mut codebook = LatentCodebook::init(ids, model.latent_dim(), config.latent_reg, config.seed ^ 0x5EED_C0DE);
    let adam = AdamConfig::with_lr(config.learning_rate);
    let groups: Vec<(String, usize)> = model.named_params().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let mut theta_opt = AdamState::new(adam, groups);
    // Latent codes only move when their shape is in the batch, so each has
    // its own moment estimates and step count.
    let mut latent_opt: Vec<AdamState> = cohort
        .iter()
        .map(|s| AdamState::new(adam, [(format!("z[{}]", s.id), model.latent_dim())]))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..cohort.len()).collect();
    let mut losses = Vec::new();

    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        theta_opt.set_learning_rate(lr);
        latent_opt.iter_mut().for_each(|o| o.set_learning_rate(lr));
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut theta_sum: Option<Vec<Tensor>> = None;
            let mut batch_loss = 0.0;
            let mut latent_grads = Vec::with_capacity(batch.len());
            for &i in batch {
                let (points, labels) = sample_points(cohort[i].volume, config.points_per_volume, &mut rng);
                let g = shape_gradients(&model, &codebook.codes[i], &points, &labels, config.latent_reg)?;
                batch_loss += scale * g.loss;
                match theta_sum.as_mut() {
                    None => theta_sum = Some(g.theta),
                    Some(acc) => {
                        for (a, t) in acc.iter_mut().zip(&g.theta) {
                            a.data_mut().iter_mut().zip(t.data()).for_each(|(a, t)| *a += t);
                        }
                    }
                }
                latent_grads.push(g.latent);
            }
            let iteration = losses.len();
            if !batch_loss.is_finite() {
                return Err(PipelineError::Diverged { iteration, loss: batch_loss });
            }
            losses.push(batch_loss);

            let mut theta_grads = theta_sum.expect("non-empty batch");
            for t in &mut theta_grads {
                t.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            let grads: Vec<&[f64]> = theta_grads.iter().map(|t| t.data()).collect();
            theta_opt.step(&mut model.param_slices_mut(), &grads)?;
            for (&i, mut g) in batch.iter().zip(latent_grads) {
                g.iter_mut().for_each(|v| *v *= scale);
                latent_opt[i].step(&mut [codebook.codes[i].as_mut_slice()], &[&g])?;
            }
            debug!("iteration {iteration}: loss {batch_loss:.5}");
        }
        let done = epoch + 1;
        if done % 10 == 0 || done == config.epochs {
            let recent = &losses[losses.len().saturating_sub(10)..];
            info!(
                "epoch {done}/{}: loss {:.5}",
                config.epochs,
                recent.iter().sum::<f64>() / recent.len().max(1) as f64
            );
        }
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
            on_checkpoint(
                done,
                &Checkpoint {
                    model: model.clone(),
                    codebook: codebook.clone(),
                },
            )?;
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint { model, codebook },
        losses,
    })
}
