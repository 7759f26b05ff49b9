//! Symmetric-difference coordinate derivatives and coordinate sampling.
//!
//! For coordinate `i` and step `h`:
//!
//! ```text
//! g_i ≈ (f(x + h e_i) − f(x − h e_i)) / 2h
//! h_i ≈ (f(x + h e_i) − 2 f(x) + f(x − h e_i)) / h²
//! ```
//!
//! A batch of `B` coordinates costs exactly `2B` evaluations of `f`; the
//! second-derivative estimate reuses them plus one shared `f(x)`.

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::numerics::Tensor;

/// A point `x + offset · e_index`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub index: usize,
    pub offset: f64,
}

/// Scalar function of a tensor, evaluated one point or one probe set at a
/// time.
pub trait Objective {
    fn eval(&self, x: &Tensor) -> Result<f64>;

    /// Values at `x + p.offset · e_{p.index}` for each probe, in order.
    /// Implementations may evaluate them all at once.
    fn eval_probes(&self, x: &Tensor, probes: &[Probe]) -> Result<Vec<f64>> {
        let mut point = x.clone();
        probes
            .iter()
            .map(|p| {
                let orig = point.data()[p.index];
                point.data_mut()[p.index] = orig + p.offset;
                let v = self.eval(&point);
                point.data_mut()[p.index] = orig;
                v
            })
            .collect()
    }
}

/// Adapts a plain closure.
pub struct FnObjective<F>(pub F);

impl<F: Fn(&Tensor) -> f64> Objective for FnObjective<F> {
    fn eval(&self, x: &Tensor) -> Result<f64> {
        Ok((self.0)(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordinateEstimate {
    pub index: usize,
    pub grad: f64,
    pub hess: Option<f64>,
}

fn check(x: &Tensor, indices: &[usize], h: f64) -> Result<()> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(invalid(format!("difference step must be positive, got {h}")));
    }
    let mut seen = vec![false; x.len()];
    for &i in indices {
        let slot = seen.get_mut(i).ok_or(Error::IndexOutOfRange { index: i, dim: x.len() })?;
        if *slot {
            return Err(invalid(format!("coordinate {i} repeated in batch")));
        }
        *slot = true;
    }
    Ok(())
}

fn probes_for(indices: &[usize], h: f64) -> Vec<Probe> {
    indices
        .iter()
        .flat_map(|&index| [Probe { index, offset: h }, Probe { index, offset: -h }])
        .collect()
}

fn finite(v: f64, what: &str, index: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(format!("non-finite {what} estimate at coordinate {index}")))
    }
}

/// Coordinate gradients at `x` from `2 · indices.len()` evaluations.
pub fn estimate_gradient(
    f: &dyn Objective,
    x: &Tensor,
    indices: &[usize],
    h: f64,
) -> Result<Vec<CoordinateEstimate>> {
    check(x, indices, h)?;
    let values = f.eval_probes(x, &probes_for(indices, h))?;
    indices
        .iter()
        .zip(values.chunks_exact(2))
        .map(|(&index, pair)| {
            Ok(CoordinateEstimate {
                index,
                grad: finite((pair[0] - pair[1]) / (2.0 * h), "gradient", index)?,
                hess: None,
            })
        })
        .collect()
}

/// Gradients and diagonal second derivatives from one probe set.
/// `f_at_x` must be `f(x)`; it is shared across the batch, so the probe
/// count stays at `2 · indices.len()`.
pub fn estimate_hessian_diag(
    f: &dyn Objective,
    x: &Tensor,
    f_at_x: f64,
    indices: &[usize],
    h: f64,
) -> Result<Vec<CoordinateEstimate>> {
    check(x, indices, h)?;
    let values = f.eval_probes(x, &probes_for(indices, h))?;
    indices
        .iter()
        .zip(values.chunks_exact(2))
        .map(|(&index, pair)| {
            let (plus, minus) = (pair[0], pair[1]);
            Ok(CoordinateEstimate {
                index,
                grad: finite((plus - minus) / (2.0 * h), "gradient", index)?,
                hess: Some(finite((plus - 2.0 * f_at_x + minus) / (h * h), "curvature", index)?),
            })
        })
        .collect()
}

/// Draws `batch` distinct coordinates out of `n_total`.
///
/// Without `probs` the draw is uniform. With `probs` it is weighted and
/// without replacement, distributed exactly as drawing one index at a time
/// and renormalizing the rest; this uses exponential keys
/// (`-Exp(1) / w_i`, keep the `batch` largest) in a single pass.
pub fn sample_coordinates<R: Rng + ?Sized>(
    n_total: usize,
    batch: usize,
    probs: Option<&[f64]>,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if batch == 0 || batch > n_total {
        return Err(invalid(format!("cannot draw {batch} of {n_total} coordinates")));
    }
    let Some(p) = probs else {
        return Ok(rand::seq::index::sample(rng, n_total, batch).into_vec());
    };
    if p.len() != n_total {
        return Err(invalid(format!("{} weights for {n_total} coordinates", p.len())));
    }
    if p.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(invalid("sampling weights must be finite and non-negative"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("sampling weights sum to {sum}")));
    }
    if p.iter().filter(|&&w| w > 0.0).count() < batch {
        return Err(invalid("fewer positive-weight coordinates than the batch size"));
    }
    let mut keyed: Vec<(f64, usize)> = p
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            // 1 - u lies in (0, 1], so the log is finite.
            let e = -(1.0 - rng.gen::<f64>()).ln();
            let key = if w > 0.0 { -e / w } else { f64::NEG_INFINITY };
            (key, i)
        })
        .collect();
    keyed.select_nth_unstable_by(batch - 1, |a, b| b.0.total_cmp(&a.0));
    keyed.truncate(batch);
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(keyed.into_iter().map(|(_, i)| i).collect())
}
