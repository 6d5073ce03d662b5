//! Scalar training objectives and their adjoints with respect to the
//! network output probabilities.
//!
//! Every per-pixel reduction is a mean over pixels, so the weights `λ` and
//! `γ` do not depend on image resolution. Logs are taken of
//! `max(p, PROB_FLOOR)`; where the floor is active the derivative is zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversarial::{gen_perturbation, AdvConfig};
use crate::constraints::{Constraint, ConstraintError, SeedPolicy};
use crate::grid::{sample_mask_unchecked, DiscreteMask, GridError, Image, ProbMap, RngState};
use crate::net::{GradientSet, NetError, NetworkParams};

pub const PROB_FLOOR: f64 = 1e-12;

/// Tags of the independent random streams derived per unlabeled example.
pub(crate) mod stream {
    pub const PERTURBATION: u64 = 0x7065_7274;
    pub const CONSTRAINT: u64 = 0x636f_6e73;
    pub const NOISE: u64 = 0x6e6f_6973;
    pub const TEACHER_NOISE: u64 = 0x7465_6163;
}

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the unlabeled term in the total objective.
    pub lambda: f64,
    /// Weight of the constraint term inside the adversarial objective.
    pub gamma: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0 && self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(LossError::InvalidArgument(format!(
                "loss weights must be finite and nonnegative, got lambda={} gamma={}",
                self.lambda, self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    /// Number of sampled masks `m`.
    pub samples: usize,
    /// Constant subtracted from every reward; 0 gives the raw estimator.
    pub reward_baseline: f64,
    pub seed_policy: SeedPolicy,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig {
            samples: 10,
            reward_baseline: 0.0,
            seed_policy: SeedPolicy::PerSample,
        }
    }
}

/// A loss value and its derivative with respect to each output probability
/// (pixel-major, like the [`ProbMap`] it was computed from).
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub d_prob: Vec<f64>,
}

impl LossTerm {
    fn zero(len: usize) -> Self {
        LossTerm {
            value: 0.0,
            d_prob: vec![0.0; len],
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &LossTerm, scale: f64) {
        self.value += scale * other.value;
        for (a, b) in self.d_prob.iter_mut().zip(&other.d_prob) {
            *a += scale * b;
        }
    }
}

fn floored_ln(p: f64) -> (f64, bool) {
    if p > PROB_FLOOR {
        (p.ln(), true)
    } else {
        (PROB_FLOOR.ln(), false)
    }
}

fn check_same_shape(a: &ProbMap, b: (usize, usize), classes: usize) -> Result<(), LossError> {
    if a.shape() != b || a.classes() != classes {
        return Err(LossError::InvalidArgument(format!(
            "shape mismatch: {:?}x{} vs {:?}x{}",
            a.shape(),
            a.classes(),
            b,
            classes
        )));
    }
    Ok(())
}

/// Mean over pixels of `−log p[true class]`.
pub fn cross_entropy_term(p: &ProbMap, y: &DiscreteMask) -> Result<LossTerm, LossError> {
    check_same_shape(p, y.shape(), y.classes())?;
    let n = p.pixels() as f64;
    let c = p.classes();
    let mut term = LossTerm::zero(p.as_slice().len());
    for (i, &label) in y.labels().as_slice().iter().enumerate() {
        let q = p.prob(i, label as usize);
        let (ln, active) = floored_ln(q);
        term.value -= ln;
        if active {
            term.d_prob[i * c + label as usize] = -1.0 / (n * q);
        }
    }
    term.value /= n;
    Ok(term)
}

pub fn cross_entropy(p: &ProbMap, y: &DiscreteMask) -> Result<f64, LossError> {
    Ok(cross_entropy_term(p, y)?.value)
}

/// Mean over pixels of `KL(p_clean ‖ p_adv)`. Only `p_adv` receives a
/// gradient; `p_clean` is a constant target.
pub fn kl_lds_term(p_clean: &ProbMap, p_adv: &ProbMap) -> Result<LossTerm, LossError> {
    check_same_shape(p_adv, p_clean.shape(), p_clean.classes())?;
    let n = p_clean.pixels() as f64;
    let mut term = LossTerm::zero(p_adv.as_slice().len());
    for (j, (&pc, &qa)) in p_clean.as_slice().iter().zip(p_adv.as_slice()).enumerate() {
        if pc == 0.0 {
            continue;
        }
        let (ln_p, _) = floored_ln(pc);
        let (ln_q, active) = floored_ln(qa);
        term.value += pc * (ln_p - ln_q);
        if active {
            term.d_prob[j] = -pc / (n * qa);
        }
    }
    term.value /= n;
    Ok(term)
}

pub fn kl_lds(p_clean: &ProbMap, p_adv: &ProbMap) -> Result<f64, LossError> {
    Ok(kl_lds_term(p_clean, p_adv)?.value)
}

/// Mean over pixels of the Shannon entropy `−Σ_j p_j log p_j`.
pub fn entropy_term(p: &ProbMap) -> LossTerm {
    let n = p.pixels() as f64;
    let mut term = LossTerm::zero(p.as_slice().len());
    for (j, &q) in p.as_slice().iter().enumerate() {
        let (ln, active) = floored_ln(q);
        term.value -= q * ln;
        term.d_prob[j] = -(ln + if active { 1.0 } else { 0.0 }) / n;
    }
    term.value /= n;
    term
}

pub fn entropy_min(p: &ProbMap) -> f64 {
    entropy_term(p).value
}

/// Mean over pixels of `Σ_j (p_j − target_j)²`; gradient flows to `p` only.
pub fn consistency_term(p: &ProbMap, target: &ProbMap) -> Result<LossTerm, LossError> {
    check_same_shape(p, target.shape(), target.classes())?;
    let n = p.pixels() as f64;
    let mut term = LossTerm::zero(p.as_slice().len());
    for (j, (&a, &b)) in p.as_slice().iter().zip(target.as_slice()).enumerate() {
        let d = a - b;
        term.value += d * d;
        term.d_prob[j] = 2.0 * d / n;
    }
    term.value /= n;
    Ok(term)
}

/// Score-function surrogate of the constraint loss together with what was
/// sampled to build it.
#[derive(Clone, Debug)]
pub struct ReinforceTerm {
    pub term: LossTerm,
    /// Fraction of pixels with `J_i = 1`, averaged over samples.
    pub mean_reward: f64,
    pub samples: Vec<DiscreteMask>,
}

/// `−(1/(mN)) Σ_s Σ_i (J_i(ŷ⁽ˢ⁾) − b) log p(ŷ⁽ˢ⁾_i)` over `m` masks sampled from
/// `p_adv`. Masks and rewards are constants; the gradient flows only through
/// `log p`, so its expectation is the score-function estimate of
/// `−∇ E[J]` (per pixel, up to the `1/N` mean).
pub fn reinforce_constraint(
    p_adv: &ProbMap,
    constraint: &dyn Constraint,
    mc: &MonteCarloConfig,
    rng: &mut RngState,
) -> Result<ReinforceTerm, LossError> {
    if mc.samples == 0 {
        return Err(LossError::InvalidArgument("need at least one Monte-Carlo sample".into()));
    }
    p_adv.validate()?;
    let n = p_adv.pixels();
    let c = p_adv.classes();
    let scale = 1.0 / (mc.samples * n) as f64;
    let mut term = LossTerm::zero(p_adv.as_slice().len());
    let mut satisfied = 0usize;
    let mut samples = Vec::with_capacity(mc.samples);
    for s in 0..mc.samples {
        let mask = sample_mask_unchecked(p_adv, rng);
        let mut seed_rng = match mc.seed_policy {
            SeedPolicy::PerSample => rng.derive(s as u64),
            SeedPolicy::Shared => rng.derive(0),
        };
        let reward = constraint.evaluate(&mask, &mut seed_rng)?;
        if !mask.labels().same_shape(&reward) {
            return Err(LossError::InvalidArgument(format!(
                "constraint {} returned a {:?} map for a {:?} mask",
                constraint.name(),
                reward.shape(),
                mask.shape()
            )));
        }
        for (i, (&label, &ok)) in mask.labels().as_slice().iter().zip(reward.as_slice()).enumerate() {
            satisfied += ok as usize;
            let weight = ok as u8 as f64 - mc.reward_baseline;
            if weight == 0.0 {
                continue;
            }
            let q = p_adv.prob(i, label as usize);
            let (ln, active) = floored_ln(q);
            term.value -= weight * ln;
            if active {
                term.d_prob[i * c + label as usize] -= weight * scale / q;
            }
        }
        samples.push(mask);
    }
    term.value *= scale;
    Ok(ReinforceTerm {
        term,
        mean_reward: satisfied as f64 * scale,
        samples,
    })
}

/// Parts of the adversarial objective for one unlabeled image at a given
/// perturbation, with the parameter gradient of `lds + γ·cons`.
#[derive(Clone, Debug)]
pub struct CavatEval {
    pub lds: f64,
    pub cons: f64,
    pub value: f64,
    pub grad: GradientSet,
}

/// Evaluates `KL(f(x) ‖ f(x + r)) + γ·ℓ_cons(f(x + r))` given the clean
/// prediction `clean = f(x)`. The constraint term is skipped when `γ = 0`.
#[allow(clippy::too_many_arguments)]
pub fn cavat_example(
    net: &NetworkParams,
    x: &Image,
    clean: &ProbMap,
    r: &Image,
    gamma: f64,
    constraint: &dyn Constraint,
    mc: &MonteCarloConfig,
    rng: &mut RngState,
) -> Result<CavatEval, LossError> {
    let x_adv = x.add_scaled(r, 1.0)?;
    let pass = net.forward(&x_adv)?;
    let mut total = kl_lds_term(clean, &pass.probs)?;
    let lds = total.value;
    let mut cons = 0.0;
    if gamma != 0.0 {
        let reinforce = reinforce_constraint(&pass.probs, constraint, mc, rng)?;
        cons = reinforce.term.value;
        total.add_scaled(&reinforce.term, gamma);
    }
    let grad = net.backward(&pass, &total.d_prob, false)?.params;
    Ok(CavatEval {
        lds,
        cons,
        value: total.value,
        grad,
    })
}

/// The bracketed adversarial objective at perturbation `r`.
#[allow(clippy::too_many_arguments)]
pub fn cavat_inner(
    net: &NetworkParams,
    x: &Image,
    r: &Image,
    weights: &LossWeights,
    constraint: &dyn Constraint,
    mc: &MonteCarloConfig,
    rng: &mut RngState,
) -> Result<f64, LossError> {
    let clean = net.predict(x)?;
    Ok(cavat_example(net, x, &clean, r, weights.gamma, constraint, mc, rng)?.value)
}

/// Mean cross-entropy over a labeled batch and its parameter gradient.
pub fn supervised_term(
    net: &NetworkParams,
    batch: &[(&Image, &DiscreteMask)],
) -> Result<(f64, GradientSet), LossError> {
    let mut grad = GradientSet::zeros_like(net);
    let mut value = 0.0;
    if batch.is_empty() {
        return Ok((value, grad));
    }
    let scale = 1.0 / batch.len() as f64;
    for (x, y) in batch {
        let pass = net.forward(x)?;
        let ce = cross_entropy_term(&pass.probs, y)?;
        value += scale * ce.value;
        let g = net.backward(&pass, &ce.d_prob, false)?;
        grad.add_scaled(&g.params, scale);
    }
    Ok((value, grad))
}

/// Loss components of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub sup: f64,
    /// Batch mean of the divergence term (or the method's consistency term).
    pub lds: f64,
    /// Batch mean of the constraint surrogate.
    pub cons: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct StepLoss {
    pub breakdown: LossBreakdown,
    pub grad: GradientSet,
}

/// Per-example random streams for an unlabeled image.
pub(crate) fn example_streams(rng: &RngState, index: usize) -> (RngState, RngState) {
    let base = rng.derive(index as u64);
    (base.derive(stream::PERTURBATION), base.derive(stream::CONSTRAINT))
}

/// Mean over the unlabeled batch of the adversarial objective at generated
/// perturbations (zero perturbations when `perturb` is false), with its
/// gradient. Each example draws from streams derived from `rng` and its
/// batch position.
#[allow(clippy::too_many_arguments)]
pub fn cavat_batch(
    net: &NetworkParams,
    unlabeled: &[&Image],
    gamma: f64,
    constraint: &dyn Constraint,
    mc: &MonteCarloConfig,
    adv: &AdvConfig,
    perturb: bool,
    rng: &RngState,
) -> Result<(LossBreakdown, GradientSet), LossError> {
    let mut grad = GradientSet::zeros_like(net);
    let mut parts = LossBreakdown::default();
    if unlabeled.is_empty() {
        return Ok((parts, grad));
    }
    let scale = 1.0 / unlabeled.len() as f64;
    for (u, x) in unlabeled.iter().enumerate() {
        let (mut perturb_rng, mut cons_rng) = example_streams(rng, u);
        let clean = net.predict(x)?;
        let r = if perturb {
            gen_perturbation(net, x, &clean, gamma, constraint, mc, adv, &mut perturb_rng)?.r
        } else {
            Image::zeros(x.height(), x.width())
        };
        let eval = cavat_example(net, x, &clean, &r, gamma, constraint, mc, &mut cons_rng)?;
        parts.lds += scale * eval.lds;
        parts.cons += scale * eval.cons;
        parts.total += scale * eval.value;
        grad.add_scaled(&eval.grad, scale);
    }
    Ok((parts, grad))
}

/// Supervised cross-entropy plus `λ` times the batch-mean adversarial
/// objective. The unlabeled term is skipped entirely when `λ = 0` or the
/// unlabeled batch is empty.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    net: &NetworkParams,
    labeled: &[(&Image, &DiscreteMask)],
    unlabeled: &[&Image],
    weights: &LossWeights,
    constraint: &dyn Constraint,
    mc: &MonteCarloConfig,
    adv: &AdvConfig,
    rng: &RngState,
) -> Result<StepLoss, LossError> {
    weights.validate()?;
    let (sup, mut grad) = supervised_term(net, labeled)?;
    let mut breakdown = LossBreakdown {
        sup,
        total: sup,
        ..LossBreakdown::default()
    };
    if weights.lambda != 0.0 && !unlabeled.is_empty() {
        let (parts, g) = cavat_batch(net, unlabeled, weights.gamma, constraint, mc, adv, true, rng)?;
        breakdown.lds = parts.lds;
        breakdown.cons = parts.cons;
        breakdown.total += weights.lambda * parts.total;
        grad.add_scaled(&g, weights.lambda);
    }
    Ok(StepLoss { breakdown, grad })
}
