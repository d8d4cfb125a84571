//! Training objectives, expressed as tape graphs so gradients flow to the
//! model parameters that produced the logits.

use crate::agreement::{ProbMap, PseudoLabelSet};
use crate::data::Mask;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

fn check_logits(tape: &Tape, logits: Var, h: usize, w: usize) -> Result<()> {
    let shape = tape.shape(logits);
    if shape.len() != 3 || shape[0] != h || shape[1] != w {
        return Err(Error::ShapeMismatch(format!(
            "logits {shape:?} for a {h}x{w} target"
        )));
    }
    Ok(())
}

/// Confidence-weighted pixel cross-entropy against pseudo-labels:
/// `(1/(H·W)) · Σ λ(w,h) · −log softmax(logits)(w,h)[label]`.
pub fn weighted_ce(tape: &mut Tape, logits: Var, pl: &PseudoLabelSet) -> Result<Var> {
    check_logits(tape, logits, pl.h, pl.w)?;
    tape.weighted_cross_entropy(logits, &pl.labels, &pl.weights)
}

/// Mean weighted cross-entropy over a batch of (logits, pseudo-labels).
pub fn batch_unsup_loss(tape: &mut Tape, items: &[(Var, &PseudoLabelSet)]) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = None;
    for &(logits, pl) in items {
        let term = weighted_ce(tape, logits, pl)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    tape.mul_scalar(total.unwrap(), 1.0 / items.len() as f32)
}

/// Plain mean pixel cross-entropy against a ground-truth mask
/// (the weighted form with every weight at 1).
pub fn supervised_ce(tape: &mut Tape, logits: Var, mask: &Mask) -> Result<Var> {
    check_logits(tape, logits, mask.h, mask.w)?;
    let weights = vec![1.0f32; mask.labels.len()];
    tape.weighted_cross_entropy(logits, &mask.labels, &weights)
}

/// Mean per-pixel KL(server ‖ client) distillation loss. The server map
/// is a constant reference; gradients reach only the client probabilities.
pub fn kl_fusion_loss(tape: &mut Tape, client_probs: Var, server: &ProbMap) -> Result<Var> {
    let shape = tape.shape(client_probs);
    if shape != [server.h, server.w, server.n] {
        return Err(Error::ShapeMismatch(format!(
            "client probs {shape:?} vs server map {}x{}x{}",
            server.h, server.w, server.n
        )));
    }
    tape.kl_to_reference(client_probs, &server.probs)
}
