//! Pixel-wise pseudo-label fusion between a teacher and a client model.
//!
//! Where the two argmax predictions agree, the consensus label is trusted
//! fully (weight 1). Where they disagree, the more confident model wins
//! and its max softmax score becomes the per-pixel training weight, so
//! contested regions contribute less to the unsupervised loss.

use std::path::Path;

use crate::data::pgm;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Who produced a probability map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Teacher,
    Client,
}

/// Per-pixel class distribution, row-major `h*w*n` with the class axis
/// innermost. Each pixel's channel values must sum to 1 (±1e-6).
#[derive(Debug, Clone)]
pub struct ProbMap {
    pub h: usize,
    pub w: usize,
    pub n: usize,
    pub probs: Vec<f32>,
    pub source: Source,
}

impl ProbMap {
    pub fn new(h: usize, w: usize, n: usize, probs: Vec<f32>, source: Source) -> Result<ProbMap> {
        if probs.len() != h * w * n || n < 2 {
            return Err(Error::ShapeMismatch(format!(
                "prob map {}x{}x{} with {} values",
                h,
                w,
                n,
                probs.len()
            )));
        }
        for px in 0..h * w {
            let row = &probs[px * n..(px + 1) * n];
            if row.iter().any(|&p| !(0.0..=1.0 + 1e-6).contains(&p)) {
                return Err(Error::InvalidProbability(format!("pixel {px} outside [0, 1]")));
            }
            let sum: f32 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidProbability(format!("pixel {px} sums to {sum}")));
            }
        }
        Ok(ProbMap { h, w, n, probs, source })
    }

    /// Softmax output of a `[H,W,N]` logits node, detached from the tape.
    pub fn from_softmax_var(tape: &Tape, probs: Var, source: Source) -> Result<ProbMap> {
        let shape = tape.shape(probs);
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch(format!("expected [H,W,N] node, got {shape:?}")));
        }
        ProbMap::new(shape[0], shape[1], shape[2], tape.value(probs).to_vec(), source)
    }

    /// Argmax class and max probability at one pixel (tie → lowest class).
    fn top(&self, px: usize) -> (u8, f32) {
        let row = &self.probs[px * self.n..(px + 1) * self.n];
        let mut best = 0usize;
        for (i, &p) in row.iter().enumerate().skip(1) {
            if p > row[best] {
                best = i;
            }
        }
        (best as u8, row[best])
    }
}

/// Fused training targets for one image: hard labels, per-pixel loss
/// weights, and the agreement mask they were derived from.
#[derive(Debug, Clone)]
pub struct PseudoLabelSet {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u8>,
    pub weights: Vec<f32>,
    pub agreement: Vec<bool>,
}

impl PseudoLabelSet {
    /// Targets taken from a single model's predictions: labels are its
    /// argmax, weights its max softmax score, no pixel marked as agreed.
    /// This is the ablation path; `fuse` is the full mechanism.
    pub fn from_single(map: &ProbMap) -> PseudoLabelSet {
        let npx = map.h * map.w;
        let mut labels = vec![0u8; npx];
        let mut weights = vec![0.0f32; npx];
        for px in 0..npx {
            let (l, s) = map.top(px);
            labels[px] = l;
            weights[px] = s;
        }
        PseudoLabelSet { h: map.h, w: map.w, labels, weights, agreement: vec![false; npx] }
    }
}

/// Hard argmax labels of a probability map (ties → lowest class index).
pub fn hard_labels(map: &ProbMap) -> Vec<u8> {
    (0..map.h * map.w).map(|px| map.top(px).0).collect()
}

/// Combine teacher and client predictions into per-pixel pseudo-labels:
/// consensus pixels get the shared label at weight 1; contested pixels get
/// the more confident model's label at that model's max score, with exact
/// confidence ties going to the client.
pub fn fuse(teacher: &ProbMap, client: &ProbMap) -> Result<PseudoLabelSet> {
    if teacher.h != client.h || teacher.w != client.w {
        return Err(Error::ShapeMismatch(format!(
            "teacher {}x{} vs client {}x{}",
            teacher.h, teacher.w, client.h, client.w
        )));
    }
    if teacher.n != client.n {
        return Err(Error::ClassCountMismatch(teacher.n, client.n));
    }
    let npx = teacher.h * teacher.w;
    let mut labels = vec![0u8; npx];
    let mut weights = vec![0.0f32; npx];
    let mut agreement = vec![false; npx];
    for px in 0..npx {
        let (lt, st) = teacher.top(px);
        let (lc, sc) = client.top(px);
        if lt == lc {
            labels[px] = lt;
            weights[px] = 1.0;
            agreement[px] = true;
        } else if st > sc {
            labels[px] = lt;
            weights[px] = st;
        } else {
            labels[px] = lc;
            weights[px] = sc;
        }
    }
    Ok(PseudoLabelSet { h: teacher.h, w: teacher.w, labels, weights, agreement })
}

/// Fraction of pixels where teacher and client argmax coincided.
pub fn agreement_rate(pl: &PseudoLabelSet) -> f64 {
    let agreed = pl.agreement.iter().filter(|&&a| a).count();
    agreed as f64 / pl.agreement.len() as f64
}

/// Write the agreement mask as a PGM: 255 = agreement, 0 = disagreement.
pub fn export_agreement_image(pl: &PseudoLabelSet, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = pl.agreement.iter().map(|&a| if a { 255 } else { 0 }).collect();
    pgm::write_pgm(path, pl.w, pl.h, &bytes)
}
