use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{Graph, Matrix, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReceiverLossParams {
    pub margin: f64,
    pub l1_weight: f64,
    pub tau_start: f64,
    pub tau_end: f64,
}

impl Default for ReceiverLossParams {
    fn default() -> Self {
        ReceiverLossParams {
            margin: 0.4,
            l1_weight: 1e-4,
            tau_start: 10.0,
            tau_end: 0.5,
        }
    }
}

impl ReceiverLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::InvalidArgument("margin must be > 0".into()));
        }
        if !(self.l1_weight >= 0.0) {
            return Err(Error::InvalidArgument("l1_weight must be >= 0".into()));
        }
        if !(self.tau_end > 0.0 && self.tau_start >= self.tau_end) {
            return Err(Error::InvalidArgument(format!(
                "tau schedule {} -> {} must be positive and non-increasing",
                self.tau_start, self.tau_end
            )));
        }
        Ok(())
    }

    /// Temperature used outside training.
    pub fn inference_tau(&self) -> f64 {
        self.tau_end
    }
}

/// Linear interpolation from `tau_start` at step 0 to `tau_end` at `total_steps`.
pub fn tau_schedule(step: usize, total_steps: usize, params: &ReceiverLossParams) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return params.tau_end;
    }
    let frac = step as f64 / total_steps as f64;
    params.tau_start + (params.tau_end - params.tau_start) * frac
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")))
    }
}

/// Temperature-weighted pooling `Σ e^{x/τ}·x / Σ e^{x/τ}`: the mean as τ→∞,
/// the maximum as τ→0.
pub fn agg(row: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if row.is_empty() {
        return Err(Error::InvalidArgument("agg of an empty row".into()));
    }
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut num = 0.0;
    let mut den = 0.0;
    for &x in row {
        let w = ((x - max) / tau).exp();
        num += w * (x - max);
        den += w;
    }
    Ok(max + num / den)
}

/// Mean of `agg` over the rows of `u`.
pub fn cumulative_score(u: &Matrix, tau: f64) -> Result<f64> {
    if u.nrows() == 0 {
        return Err(Error::InvalidArgument("relevance matrix has no rows".into()));
    }
    let mut total = 0.0;
    for row in u.rows() {
        total += agg(&row.to_vec(), tau)?;
    }
    Ok(total / u.nrows() as f64)
}

/// `U = H·Wᵀ/√d`.
pub fn relevance_matrix(h: &Matrix, w: &Matrix) -> Result<Matrix> {
    if h.ncols() != w.ncols() {
        return Err(Error::Shape(format!(
            "impression dim {} but persona dim {}",
            h.ncols(),
            w.ncols()
        )));
    }
    Ok(h.dot(&w.t()) / (h.ncols() as f64).sqrt())
}

/// `max(0, m + c_z − c_a) + β·l1`.
pub fn receiver_loss_value(c_real: f64, c_distractor: f64, l1: f64, params: &ReceiverLossParams) -> f64 {
    hinge(c_real, c_distractor, params.margin) + params.l1_weight * l1
}

pub fn hinge(c_real: f64, c_distractor: f64, margin: f64) -> f64 {
    (margin - (c_real - c_distractor)).max(0.0)
}

/// Loss from two relevance matrices sharing the same impression.
pub fn receiver_loss(u_real: &Matrix, u_distractor: &Matrix, params: &ReceiverLossParams, tau: f64) -> Result<f64> {
    let ca = cumulative_score(u_real, tau)?;
    let cz = cumulative_score(u_distractor, tau)?;
    let l1 = u_real.iter().map(|v| v.abs()).sum::<f64>() + u_distractor.iter().map(|v| v.abs()).sum::<f64>();
    Ok(receiver_loss_value(ca, cz, l1, params))
}

/// Graph form of [`cumulative_score`]; returns a 1×1 node.
pub(crate) fn cumulative_score_node(g: &mut Graph<'_>, u: Var, tau: f64) -> Var {
    let scaled = g.scale(u, 1.0 / tau);
    let weights = g.softmax(scaled, false);
    let weighted = g.mul(weights, u);
    let per_row = g.sum_cols(weighted);
    g.mean(per_row)
}
