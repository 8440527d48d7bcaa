//! Dense f64 math with exact reverse-mode gradients.
//!
//! Parameters live in a [`ParamSet`]; a forward pass records its operations on
//! a [`Tape`], and [`Tape::backward`] replays them in reverse to produce a
//! [`Gradients`] buffer aligned with the parameter set. Vectors are plain
//! `Vec<f64>`; matrices are row-major [`Tensor`]s that only appear as
//! parameters.

mod gradcheck;
mod gru;
mod kernels;
mod param;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use gru::GruParams;
pub use param::{Checkpoint, CheckpointEntry, Gradients, Init, ParamId, ParamSet, Parameter, Tensor};
pub use tape::{NodeId, Tape};

use rand::Rng;

use crate::{Error, Result};

/// `W x + b`.
pub fn linear(w: &Tensor, x: &[f64], b: Option<&[f64]>) -> Result<Vec<f64>> {
    if w.cols() != x.len() {
        return Err(Error::Dimension {
            context: "linear input".into(),
            expected: w.cols(),
            found: x.len(),
        });
    }
    let mut y = match b {
        Some(b) if b.len() != w.rows() => {
            return Err(Error::Dimension {
                context: "linear bias".into(),
                expected: w.rows(),
                found: b.len(),
            })
        }
        Some(b) => b.to_vec(),
        None => vec![0.0; w.rows()],
    };
    kernels::matvec_acc(w.data(), w.cols(), x, &mut y);
    Ok(y)
}

/// Max-shifted softmax.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

/// Probabilities below this are clamped before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

/// `-ln(max(probs[label], 1e-12))`.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or_else(|| {
        Error::invalid(format!("label {label} out of range for {} classes", probs.len()))
    })?;
    Ok(-p.max(LOG_FLOOR).ln())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverted dropout mask: each entry is 0 with probability `rate`, otherwise
/// `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    let keep = 1.0 / (1.0 - rate);
    Ok((0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect())
}

/// Inverted dropout; the identity outside training or at rate 0.
pub fn dropout<R: Rng + ?Sized>(x: &[f64], rate: f64, rng: &mut R, training: bool) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if !training || rate == 0.0 {
        return Ok(x.to_vec());
    }
    let mask = dropout_mask(x.len(), rate, rng)?;
    Ok(x.iter().zip(&mask).map(|(a, m)| a * m).collect())
}
