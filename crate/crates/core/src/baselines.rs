//! Semi-supervised methods sharing one training harness. Every method adds
//! its own unlabeled term to the same supervised cross-entropy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adversarial::AdvConfig;
use crate::constraints::Constraint;
use crate::grid::{DiscreteMask, Grid, Image, RngState};
use crate::losses::{
    cavat_batch, consistency_term, entropy_term, stream, supervised_term, LossBreakdown, LossError,
    LossWeights, MonteCarloConfig, StepLoss,
};
use crate::net::{GradientSet, NetworkParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    /// Supervised cross-entropy only.
    Baseline,
    EntropyMin,
    Vat,
    MeanTeacher,
    Cavat,
    /// CaVAT objective evaluated at `r = 0`.
    CavatNoPerturb,
    MtCavat,
}

impl MethodId {
    pub const ALL: [MethodId; 7] = [
        MethodId::Baseline,
        MethodId::EntropyMin,
        MethodId::Vat,
        MethodId::MeanTeacher,
        MethodId::Cavat,
        MethodId::CavatNoPerturb,
        MethodId::MtCavat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodId::Baseline => "baseline",
            MethodId::EntropyMin => "entropy_min",
            MethodId::Vat => "vat",
            MethodId::MeanTeacher => "mean_teacher",
            MethodId::Cavat => "cavat",
            MethodId::CavatNoPerturb => "cavat_no_perturb",
            MethodId::MtCavat => "mt_cavat",
        }
    }

    pub fn uses_teacher(self) -> bool {
        matches!(self, MethodId::MeanTeacher | MethodId::MtCavat)
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodId {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| LossError::InvalidArgument(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub id: MethodId,
    /// Teacher EMA decay.
    pub ema_alpha: f64,
    /// Std of the Gaussian input noise on the student in mean-teacher consistency.
    pub noise_sigma: f64,
}

impl MethodSpec {
    pub fn new(id: MethodId) -> Self {
        MethodSpec {
            id,
            ema_alpha: 0.99,
            noise_sigma: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.ema_alpha) || !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(LossError::InvalidArgument(format!(
                "bad method hyperparameters alpha={} sigma={}",
                self.ema_alpha, self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// `teacher ← α·teacher + (1 − α)·student`, elementwise.
pub fn ema_update(teacher: &mut NetworkParams, student: &NetworkParams, alpha: f64) -> Result<(), LossError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LossError::InvalidArgument(format!("EMA decay must be in [0, 1], got {alpha}")));
    }
    if !teacher.same_layout(student) {
        return Err(LossError::InvalidArgument("teacher and student architectures differ".into()));
    }
    for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
        for (a, b) in t.data.iter_mut().zip(&s.data) {
            *a = alpha * *a + (1.0 - alpha) * b;
        }
    }
    Ok(())
}

/// Everything a method needs besides data and parameters.
pub struct LossContext<'a> {
    pub weights: LossWeights,
    pub constraint: &'a dyn Constraint,
    pub mc: MonteCarloConfig,
    pub adv: AdvConfig,
}

fn entropy_batch(net: &NetworkParams, unlabeled: &[&Image]) -> Result<(f64, GradientSet), LossError> {
    let scale = 1.0 / unlabeled.len() as f64;
    let mut grad = GradientSet::zeros_like(net);
    let mut value = 0.0;
    for x in unlabeled {
        let pass = net.forward(x)?;
        let term = entropy_term(&pass.probs);
        value += scale * term.value;
        grad.add_scaled(&net.backward(&pass, &term.d_prob, false)?.params, scale);
    }
    Ok((value, grad))
}

fn consistency_batch(
    student: &NetworkParams,
    teacher: &NetworkParams,
    unlabeled: &[&Image],
    sigma: f64,
    rng: &RngState,
) -> Result<(f64, GradientSet), LossError> {
    let scale = 1.0 / unlabeled.len() as f64;
    let mut grad = GradientSet::zeros_like(student);
    let mut value = 0.0;
    for (u, x) in unlabeled.iter().enumerate() {
        let mut noise_rng = rng.derive(u as u64).derive(stream::NOISE);
        let noise = Grid::from_fn(x.height(), x.width(), |_, _| noise_rng.normal());
        let target = teacher.predict(x)?;
        let pass = student.forward(&x.add_scaled(&noise, sigma)?)?;
        let term = consistency_term(&pass.probs, &target)?;
        value += scale * term.value;
        grad.add_scaled(&student.backward(&pass, &term.d_prob, false)?.params, scale);
    }
    Ok((value, grad))
}

/// Training loss and parameter gradient of one step for `spec`.
///
/// The unlabeled term is skipped when `λ = 0` or `unlabeled` is empty, so
/// every method then reduces exactly to the supervised baseline. Stochastic
/// parts draw only from streams derived from `rng`.
pub fn method_loss(
    spec: &MethodSpec,
    ctx: &LossContext<'_>,
    labeled: &[(&Image, &DiscreteMask)],
    unlabeled: &[&Image],
    student: &NetworkParams,
    teacher: Option<&NetworkParams>,
    rng: &RngState,
) -> Result<StepLoss, LossError> {
    spec.validate()?;
    ctx.weights.validate()?;
    let (sup, mut grad) = supervised_term(student, labeled)?;
    let mut breakdown = LossBreakdown {
        sup,
        total: sup,
        ..LossBreakdown::default()
    };
    let lambda = ctx.weights.lambda;
    if spec.id == MethodId::Baseline || lambda == 0.0 || unlabeled.is_empty() {
        return Ok(StepLoss { breakdown, grad });
    }
    let teacher = || {
        teacher.ok_or_else(|| LossError::InvalidArgument(format!("method {} needs a teacher network", spec.id)))
    };
    let mut unsup = 0.0;
    let mut add = |value: f64, g: &GradientSet, grad: &mut GradientSet| {
        unsup += value;
        grad.add_scaled(g, lambda);
    };
    match spec.id {
        MethodId::Baseline => unreachable!(),
        MethodId::EntropyMin => {
            let (value, g) = entropy_batch(student, unlabeled)?;
            breakdown.lds = value;
            add(value, &g, &mut grad);
        }
        MethodId::Vat | MethodId::Cavat | MethodId::CavatNoPerturb => {
            let gamma = if spec.id == MethodId::Vat { 0.0 } else { ctx.weights.gamma };
            let perturb = spec.id != MethodId::CavatNoPerturb;
            let (parts, g) = cavat_batch(student, unlabeled, gamma, ctx.constraint, &ctx.mc, &ctx.adv, perturb, rng)?;
            breakdown.lds = parts.lds;
            breakdown.cons = parts.cons;
            add(parts.total, &g, &mut grad);
        }
        MethodId::MeanTeacher => {
            let (value, g) = consistency_batch(student, teacher()?, unlabeled, spec.noise_sigma, rng)?;
            breakdown.lds = value;
            add(value, &g, &mut grad);
        }
        MethodId::MtCavat => {
            let (value, g) = consistency_batch(
                student,
                teacher()?,
                unlabeled,
                spec.noise_sigma,
                &rng.derive(stream::TEACHER_NOISE),
            )?;
            add(value, &g, &mut grad);
            let (parts, g) = cavat_batch(student, unlabeled, ctx.weights.gamma, ctx.constraint, &ctx.mc, &ctx.adv, true, rng)?;
            breakdown.lds = value + parts.lds;
            breakdown.cons = parts.cons;
            add(parts.total, &g, &mut grad);
        }
    }
    breakdown.total += lambda * unsup;
    Ok(StepLoss { breakdown, grad })
}
