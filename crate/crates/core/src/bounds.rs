//! Probabilistic closeness guarantees derived from a simulation function.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundQuery {
    /// `V(a, â)` at the initial states.
    pub v0: f64,
    pub alpha_coef: f64,
    pub epsilon: f64,
    pub horizon: u64,
    pub psi_hat: f64,
    pub kappa_hat: f64,
}

/// Which case of the finite-horizon bound applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// `α(ε) ≥ ψ̂/κ̂`.
    LargeThreshold,
    /// `α(ε) < ψ̂/κ̂`.
    SmallThreshold,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::LargeThreshold => "alpha(eps) >= psi_hat/kappa_hat",
            Branch::SmallThreshold => "alpha(eps) < psi_hat/kappa_hat",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundResult {
    pub branch: Branch,
    /// Formula value before clamping to `[0, 1]`.
    pub raw: f64,
    pub probability: f64,
    pub clamped: bool,
}

impl BoundResult {
    /// Lower bound on the probability of staying `ε`-close.
    pub fn closeness(&self) -> f64 {
        1.0 - self.probability
    }
}

fn clamp_unit(raw: f64) -> (f64, bool) {
    let p = raw.clamp(0.0, 1.0);
    (p, p != raw)
}

/// Tight choice `ψ̂ = c_ext·‖ν̂‖∞² + ψ`.
pub fn psi_hat(rho_ext_coef: f64, nuhat_sup: f64, psi: f64) -> f64 {
    rho_ext_coef * nuhat_sup * nuhat_sup + psi
}

/// Upper bound on `P{sup_{k≤T} ‖y(k) − ŷ(k)‖ ≥ ε}`.
pub fn finite_horizon_bound(q: &BoundQuery) -> Result<BoundResult> {
    if !(q.kappa_hat > 0.0 && q.kappa_hat < 1.0) {
        return Err(Error::Domain(format!(
            "kappa_hat must lie in (0,1), got {}",
            q.kappa_hat
        )));
    }
    if !(q.epsilon > 0.0) {
        return Err(Error::Domain(format!("epsilon must be positive, got {}", q.epsilon)));
    }
    if !(q.v0 >= 0.0 && q.psi_hat >= 0.0 && q.alpha_coef > 0.0) {
        return Err(Error::Domain(format!(
            "need V0 >= 0, psi_hat >= 0, alpha > 0 (got {}, {}, {})",
            q.v0, q.psi_hat, q.alpha_coef
        )));
    }
    let alpha_eps = q.alpha_coef * q.epsilon * q.epsilon;
    let branch = if alpha_eps >= q.psi_hat / q.kappa_hat {
        Branch::LargeThreshold
    } else {
        Branch::SmallThreshold
    };
    let raw = branch_value(q, branch);
    let (probability, clamped) = clamp_unit(raw);
    Ok(BoundResult {
        branch,
        raw,
        probability,
        clamped,
    })
}

/// Unclamped value of one case of the bound, whether or not its threshold
/// condition holds. Inputs are assumed validated.
pub fn branch_value(q: &BoundQuery, branch: Branch) -> f64 {
    let alpha_eps = q.alpha_coef * q.epsilon * q.epsilon;
    let pow = |base: f64| match i32::try_from(q.horizon) {
        Ok(t) => base.powi(t),
        Err(_) => base.powf(q.horizon as f64),
    };
    match branch {
        Branch::LargeThreshold => 1.0 - (1.0 - q.v0 / alpha_eps) * pow(1.0 - q.psi_hat / alpha_eps),
        Branch::SmallThreshold => {
            let decay = pow(1.0 - q.kappa_hat);
            (q.v0 / alpha_eps) * decay + (q.psi_hat / (q.kappa_hat * alpha_eps)) * (1.0 - decay)
        }
    }
}

/// `min(V0 / α(ε), 1)`, valid over an unbounded horizon when the composed
/// function has no offset and no external gain.
pub fn infinite_horizon_bound(
    v0: f64,
    alpha_coef: f64,
    epsilon: f64,
    psi: f64,
    rho_ext_coef: f64,
) -> Result<f64> {
    if psi > 0.0 || rho_ext_coef > 0.0 {
        return Err(Error::PreconditionViolated(format!(
            "infinite-horizon bound needs psi = 0 and rho_ext = 0 (got {psi}, {rho_ext_coef})"
        )));
    }
    if !(epsilon > 0.0 && alpha_coef > 0.0) {
        return Err(Error::Domain("epsilon and alpha must be positive".into()));
    }
    Ok((v0 / (alpha_coef * epsilon * epsilon)).min(1.0))
}

/// Axis-aligned box in output space.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch("box bounds differ in length".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| l > u) {
            return Err(Error::Domain("box lower bound exceeds upper bound".into()));
        }
        Ok(BoxSet { lower, upper })
    }

    pub fn contains(&self, y: &[f64]) -> bool {
        y.len() == self.lower.len()
            && y
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| l <= v && v <= u)
    }
}

/// Box containing the Euclidean `ε`-neighbourhood of `set`.
pub fn inflate_set(set: &BoxSet, epsilon: f64) -> Result<BoxSet> {
    if !(epsilon >= 0.0) {
        return Err(Error::Domain(format!("epsilon must be nonnegative, got {epsilon}")));
    }
    Ok(BoxSet {
        lower: set.lower.iter().map(|l| l - epsilon).collect(),
        upper: set.upper.iter().map(|u| u + epsilon).collect(),
    })
}

/// Probability that the concrete output reaches the unsafe set, given the
/// abstract probability of reaching its inflation and the closeness bound.
pub fn safety_transfer(p_abstract: f64, delta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_abstract) || !(0.0..=1.0).contains(&delta) {
        return Err(Error::Domain("probabilities must lie in [0,1]".into()));
    }
    Ok((p_abstract + delta).min(1.0))
}
