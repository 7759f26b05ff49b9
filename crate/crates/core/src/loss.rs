//! Hinge-style attack losses on log-probabilities.

use crate::error::{invalid, Error, Result};
use crate::numerics::Tensor;
use crate::oracle::{Oracle, ProbabilityVector};

/// Smallest probability fed to `ln`. Anything below, including an exact 0,
/// behaves as `ln(1e-300) ≈ -690.8`, a finite stand-in for `-∞` that keeps
/// symmetric differences free of `∞ - ∞`.
pub const LOG_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GoalKind {
    /// Push the prediction to this class.
    Targeted(usize),
    /// Push the prediction away from this (original) class.
    Untargeted(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackGoal {
    pub kind: GoalKind,
    /// Confidence margin; the loss bottoms out at `-kappa`.
    pub kappa: f64,
}

impl AttackGoal {
    pub fn targeted(class: usize) -> Self {
        Self {
            kind: GoalKind::Targeted(class),
            kappa: 0.0,
        }
    }

    pub fn untargeted(original: usize) -> Self {
        Self {
            kind: GoalKind::Untargeted(original),
            kappa: 0.0,
        }
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = kappa;
        self
    }

    pub fn class(&self) -> usize {
        match self.kind {
            GoalKind::Targeted(c) | GoalKind::Untargeted(c) => c,
        }
    }

    pub fn loss(&self, probs: &ProbabilityVector) -> Result<f64> {
        match self.kind {
            GoalKind::Targeted(t) => targeted_loss(probs, t, self.kappa),
            GoalKind::Untargeted(t0) => untargeted_loss(probs, t0, self.kappa),
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(self.kappa >= 0.0) {
            return Err(invalid("kappa must be non-negative"));
        }
        if self.class() >= classes {
            return Err(Error::LabelOutOfRange {
                label: self.class(),
                classes,
            });
        }
        Ok(())
    }
}

fn log_p(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

/// `(log F_c, max_{i≠c} log F_i)`.
fn split_logs(probs: &ProbabilityVector, c: usize) -> Result<(f64, f64)> {
    let f = probs.as_slice();
    if f.len() < 2 {
        return Err(invalid("loss needs at least two classes"));
    }
    if c >= f.len() {
        return Err(Error::LabelOutOfRange {
            label: c,
            classes: f.len(),
        });
    }
    let other = f
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != c)
        .map(|(_, &p)| log_p(p))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((log_p(f[c]), other))
}

/// `max{ max_{i≠t} log F_i − log F_t, −κ }`.
pub fn targeted_loss(probs: &ProbabilityVector, t: usize, kappa: f64) -> Result<f64> {
    let (own, other) = split_logs(probs, t)?;
    Ok((other - own).max(-kappa))
}

/// `max{ log F_{t0} − max_{i≠t0} log F_i, −κ }`.
pub fn untargeted_loss(probs: &ProbabilityVector, t0: usize, kappa: f64) -> Result<f64> {
    let (own, other) = split_logs(probs, t0)?;
    Ok((own - other).max(-kappa))
}

/// Whether the prediction satisfies the goal. Ties resolve to the lowest
/// class index, so a targeted attack tied with a lower class fails.
pub fn is_success(probs: &ProbabilityVector, goal: &AttackGoal) -> bool {
    let pred = probs.argmax();
    match goal.kind {
        GoalKind::Targeted(t) => pred == t,
        GoalKind::Untargeted(t0) => pred != t0,
    }
}

/// `‖x − x0‖² + c · loss(F(x))`, spending exactly one query.
pub fn total_objective(x: &Tensor, x0: &Tensor, goal: &AttackGoal, c: f64, oracle: &dyn Oracle) -> Result<f64> {
    let dist = x.squared_distance(x0)?;
    let probs = oracle.query(x)?;
    Ok(dist + c * goal.loss(&probs)?)
}
