//! Virtual adversarial perturbations under an L2 budget.
//!
//! The direction is found by power iteration on the adversarial objective:
//! starting from a random unit vector `d`, repeatedly replace `d` by the
//! normalized input-gradient of `KL(f(x) ‖ f(x + ξd)) + γ·ℓ_cons(f(x + ξd))`.
//! The returned perturbation is `ε·d`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::constraints::Constraint;
use crate::grid::{Grid, Image, ProbMap, RngState};
use crate::losses::{kl_lds_term, reinforce_constraint, LossError, MonteCarloConfig};
use crate::net::NetworkParams;

/// Perturbation `r`, same shape as the image.
pub type Perturbation = Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvConfig {
    /// L2 radius `ε` in standardized intensity units.
    pub epsilon: f64,
    /// Probe scale `ξ`; `None` selects `10·sqrt(f64::EPSILON)·max(‖x‖₂, 1)`.
    pub xi: Option<f64>,
    pub power_iters: usize,
}

impl Default for AdvConfig {
    fn default() -> Self {
        AdvConfig {
            epsilon: 0.5,
            xi: None,
            power_iters: 1,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(LossError::InvalidArgument(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if let Some(xi) = self.xi {
            if !(xi.is_finite() && xi > 0.0) {
                return Err(LossError::InvalidArgument(format!("xi must be > 0, got {xi}")));
            }
        }
        if self.power_iters == 0 {
            return Err(LossError::InvalidArgument("power_iters must be >= 1".into()));
        }
        Ok(())
    }

    pub fn probe_scale(&self, x: &Image) -> f64 {
        self.xi
            .unwrap_or_else(|| 10.0 * f64::EPSILON.sqrt() * x.l2_norm().max(1.0))
    }
}

#[derive(Clone, Debug)]
pub struct PerturbationOutcome {
    pub r: Perturbation,
    /// The objective had a zero or non-finite input gradient and the random
    /// starting direction was used instead.
    pub fell_back: bool,
}

fn random_unit(h: usize, w: usize, rng: &mut RngState) -> Image {
    loop {
        let d = Grid::from_fn(h, w, |_, _| rng.normal());
        let norm = d.l2_norm();
        if norm > 0.0 {
            return d.map(|v| v / norm);
        }
    }
}

/// Approximate maximizer of the adversarial objective on `‖r‖₂ ≤ ε`.
///
/// `clean` must be `f(x)`; it is treated as a constant target. The constraint
/// term is skipped when `γ = 0`, so no Monte-Carlo samples are drawn.
#[allow(clippy::too_many_arguments)]
pub fn gen_perturbation(
    net: &NetworkParams,
    x: &Image,
    clean: &ProbMap,
    gamma: f64,
    constraint: &dyn Constraint,
    mc: &MonteCarloConfig,
    cfg: &AdvConfig,
    rng: &mut RngState,
) -> Result<PerturbationOutcome, LossError> {
    cfg.validate()?;
    let (h, w) = x.shape();
    if cfg.epsilon == 0.0 {
        return Ok(PerturbationOutcome {
            r: Image::zeros(h, w),
            fell_back: false,
        });
    }
    let xi = cfg.probe_scale(x);
    let start = random_unit(h, w, rng);
    let mut d = start.clone();
    let mut fell_back = false;
    for _ in 0..cfg.power_iters {
        let probe = x.add_scaled(&d, xi)?;
        let pass = net.forward(&probe)?;
        let mut objective = kl_lds_term(clean, &pass.probs)?;
        if gamma != 0.0 {
            let reinforce = reinforce_constraint(&pass.probs, constraint, mc, rng)?;
            objective.add_scaled(&reinforce.term, gamma);
        }
        let g = net
            .backward(&pass, &objective.d_prob, true)?
            .input
            .expect("input gradient requested");
        let norm = g.l2_norm();
        if norm == 0.0 || !norm.is_finite() {
            warn!("zero adversarial gradient; using the random direction");
            d = start;
            fell_back = true;
            break;
        }
        d = g.map(|v| v / norm);
    }
    // Renormalize so the budget is met to rounding.
    let norm = d.l2_norm();
    Ok(PerturbationOutcome {
        r: d.map(|v| cfg.epsilon * v / norm),
        fell_back,
    })
}
