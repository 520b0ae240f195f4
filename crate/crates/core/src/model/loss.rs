//! Cross-entropy, soft Dice, and the latent L2 penalty, in plain and
//! tape-recorded form.

use super::ModelError;
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::volume::NUM_CLASSES;

/// Smoothing term `s` in the soft Dice numerator and denominator.
pub const DICE_SMOOTHING: f64 = 1e-6;

fn check_batch(n: usize, labels: &[u8]) -> Result<(), ModelError> {
    if labels.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if n != labels.len() {
        return Err(ModelError::BatchMismatch {
            points: n,
            labels: labels.len(),
        });
    }
    if let Some(bad) = labels.iter().find(|l| **l as usize >= NUM_CLASSES) {
        return Err(ModelError::InvalidLabel(*bad));
    }
    Ok(())
}

/// Mean of `-ln p[label]`.
pub fn cross_entropy(probs: &[[f64; NUM_CLASSES]], labels: &[u8]) -> Result<f64, ModelError> {
    check_batch(probs.len(), labels)?;
    let total: f64 = probs.iter().zip(labels).map(|(p, l)| -p[*l as usize].ln()).sum();
    Ok(total / labels.len() as f64)
}

/// `1 - mean_k (2 Σ p_k t_k + s) / (Σ p_k + Σ t_k + s)`, averaged over the
/// classes that occur in `labels`.
pub fn soft_dice(probs: &[[f64; NUM_CLASSES]], labels: &[u8]) -> Result<f64, ModelError> {
    check_batch(probs.len(), labels)?;
    let mut inter = [0.0; NUM_CLASSES];
    let mut psum = [0.0; NUM_CLASSES];
    let mut tsum = [0.0; NUM_CLASSES];
    for (p, l) in probs.iter().zip(labels) {
        let l = *l as usize;
        inter[l] += p[l];
        tsum[l] += 1.0;
        for k in 0..NUM_CLASSES {
            psum[k] += p[k];
        }
    }
    let mut score = 0.0;
    let mut present = 0;
    for k in 0..NUM_CLASSES {
        if tsum[k] > 0.0 {
            score += (2.0 * inter[k] + DICE_SMOOTHING) / (psum[k] + tsum[k] + DICE_SMOOTHING);
            present += 1;
        }
    }
    Ok(1.0 - score / present as f64)
}

/// `data_loss + λ ‖z‖²`.
pub fn loss_total(data_loss: f64, z: &[f64], lambda: f64) -> f64 {
    data_loss + lambda * z.iter().map(|v| v * v).sum::<f64>()
}

/// `[n, NUM_CLASSES]` one-hot targets.
pub fn labels_one_hot(labels: &[u8]) -> Result<Tensor, ModelError> {
    check_batch(labels.len(), labels)?;
    let mut data = vec![0.0; labels.len() * NUM_CLASSES];
    for (row, l) in data.chunks_exact_mut(NUM_CLASSES).zip(labels) {
        row[*l as usize] = 1.0;
    }
    Ok(Tensor::matrix(labels.len(), NUM_CLASSES, data))
}

/// Cross-entropy of `[n, 6]` logits against a one-hot constant, via log-softmax.
pub fn tape_cross_entropy(tape: &mut Tape, logits: NodeId, one_hot: NodeId) -> Result<NodeId, ModelError> {
    let n = tape.value(logits).leading();
    let log_p = tape.log_softmax(logits)?;
    let picked = tape.mul(log_p, one_hot)?;
    let total = tape.sum(picked)?;
    Ok(tape.scale(total, -1.0 / n as f64)?)
}

/// Soft Dice of `[n, 6]` logits against `labels` (see [`soft_dice`]).
pub fn tape_soft_dice(tape: &mut Tape, logits: NodeId, one_hot: NodeId, labels: &[u8]) -> Result<NodeId, ModelError> {
    let mut tsum = [0.0; NUM_CLASSES];
    for l in labels {
        tsum[*l as usize] += 1.0;
    }
    let present = tsum.iter().filter(|t| **t > 0.0).count() as f64;
    let weights: Vec<f64> = tsum.iter().map(|t| if *t > 0.0 { 1.0 / present } else { 0.0 }).collect();
    let p = tape.softmax(logits)?;
    let hits = tape.mul(p, one_hot)?;
    let inter = tape.sum_rows(hits)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, DICE_SMOOTHING)?;
    let psum = tape.sum_rows(p)?;
    let tsum = tape.constant(Tensor::vector(tsum.iter().map(|t| t + DICE_SMOOTHING).collect()));
    let den = tape.add(psum, tsum)?;
    let ratio = tape.div(num, den)?;
    let weights = tape.constant(Tensor::vector(weights));
    let mean = tape.dot(ratio, weights)?;
    let neg = tape.scale(mean, -1.0)?;
    Ok(tape.add_scalar(neg, 1.0)?)
}

/// `CE + soft Dice` for one batch of logits.
pub fn tape_data_loss(tape: &mut Tape, logits: NodeId, labels: &[u8]) -> Result<NodeId, ModelError> {
    let one_hot = tape.constant(labels_one_hot(labels)?);
    let n = tape.value(logits).leading();
    check_batch(n, labels)?;
    let ce = tape_cross_entropy(tape, logits, one_hot)?;
    let dice = tape_soft_dice(tape, logits, one_hot, labels)?;
    Ok(tape.add(ce, dice)?)
}

/// `λ ‖z‖²` as a tape scalar.
pub fn tape_latent_penalty(tape: &mut Tape, z: NodeId, lambda: f64) -> Result<NodeId, ModelError> {
    let sq = tape.dot(z, z)?;
    Ok(tape.scale(sq, lambda)?)
}
