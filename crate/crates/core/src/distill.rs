//! Distillation losses and their closed-form logit gradients.
//!
//! The student's training signal is split into three streams:
//!
//! * task-oriented (TOG): cross-entropy against the hard label, un-tempered;
//! * target-class (TCG): KL between the tempered binary distributions
//!   `[p_t, 1 - p_t]` of teacher and student;
//! * non-target-class (NCG): KL between the tempered non-target
//!   distributions, renormalized over an optional selection of classes.
//!
//! All gradients are with respect to the *raw* student logits. For the two
//! tempered streams that includes the `1/tau` chain-rule factor; the `tau^2`
//! loss weight is applied by the caller, so the effective per-logit scale of a
//! weighted stream is `tau * (probability difference)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numkit::{log_softmax, softmax, Vec64};

/// Floor applied to probabilities inside `ln` only.
const LOG_FLOOR: f64 = 1e-300;

fn safe_ln(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

fn check_target(c: usize, target: usize) -> Result<()> {
    if target >= c {
        return Err(invalid(format!(
            "target class {target} out of range for {c} classes"
        )));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(invalid(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    Ok(())
}

fn check_pair(teacher: &[f64], student: &[f64]) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(invalid(format!(
            "teacher has {} logits but student has {}",
            teacher.len(),
            student.len()
        )));
    }
    if student.is_empty() {
        return Err(invalid("empty logit vectors"));
    }
    Ok(())
}

fn scaled(z: &[f64], tau: f64) -> Vec64 {
    z.iter().map(|v| v / tau).collect()
}

/// A normalized distribution over classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec64);

impl ProbVector {
    /// `softmax(z / tau)`.
    pub fn from_logits(z: &[f64], tau: f64) -> Result<Self> {
        check_tau(tau)?;
        Ok(Self(softmax(&scaled(z, tau))?))
    }

    /// Wraps an existing distribution after checking it sums to one.
    pub fn try_new(p: Vec64) -> Result<Self> {
        if p.is_empty() {
            return Err(invalid("empty probability vector"));
        }
        if p.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(invalid("probability entries must lie in [0, 1]"));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("probabilities sum to {s}, not 1")));
        }
        Ok(Self(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec64 {
        self.0
    }
}

/// Target mass and total non-target mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinaryProb {
    pub pt: f64,
    pub pnt: f64,
}

pub fn binary_probs(p: &ProbVector, target: usize) -> Result<BinaryProb> {
    check_target(p.len(), target)?;
    let pt = p.as_slice()[target];
    Ok(BinaryProb { pt, pnt: 1.0 - pt })
}

/// Non-target probabilities renormalized to sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct NonTargetDist {
    pub phat: Vec64,
    pub target_index: usize,
    /// Original class id of each entry of `phat`, ascending.
    pub source_class_ids: Vec<usize>,
}

/// `p_i / (1 - p_t)` for every `i != t`.
///
/// The normalizer is the summed non-target mass rather than `1 - p_t`, which
/// keeps full relative precision when `p_t` is close to one.
pub fn nontarget_dist(p: &ProbVector, target: usize) -> Result<NonTargetDist> {
    check_target(p.len(), target)?;
    if p.len() < 2 {
        return Err(invalid(
            "non-target distribution needs at least two classes",
        ));
    }
    let source_class_ids: Vec<usize> = (0..p.len()).filter(|&i| i != target).collect();
    let mass: f64 = source_class_ids.iter().map(|&i| p.as_slice()[i]).sum();
    let phat = source_class_ids
        .iter()
        .map(|&i| p.as_slice()[i] / mass)
        .collect();
    Ok(NonTargetDist {
        phat,
        target_index: target,
        source_class_ids,
    })
}

/// `KL(p || q) = sum p_i ln(p_i / q_i)`, zero-mass entries of `p` contribute 0.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (safe_ln(pi) - safe_ln(qi)))
        .sum()
}

/// Cross-entropy `-ln softmax(z)_t` and its gradient `softmax(z) - onehot(t)`.
pub fn ce_loss_and_grad(student: &[f64], target: usize) -> Result<(f64, Vec64)> {
    check_target(student.len(), target)?;
    let logp = log_softmax(student)?;
    let mut grad = softmax(student)?;
    grad[target] -= 1.0;
    Ok((-logp[target], grad))
}

/// `KL(b^T || b^S)` on tempered binary probabilities and its raw-logit gradient.
pub fn tckd_loss_and_grad(
    teacher: &[f64],
    student: &[f64],
    target: usize,
    tau: f64,
) -> Result<(f64, Vec64)> {
    check_pair(teacher, student)?;
    check_target(student.len(), target)?;
    check_tau(tau)?;
    let pt = ProbVector::from_logits(teacher, tau)?;
    let ps = ProbVector::from_logits(student, tau)?;
    let bt = binary_probs(&pt, target)?;
    let bs = binary_probs(&ps, target)?;
    let loss = kl_divergence(&[bt.pt, bt.pnt], &[bs.pt, bs.pnt]);

    let gap = bs.pt - bt.pt;
    let mut grad = vec![0.0; student.len()];
    grad[target] = gap / tau;
    if student.len() > 1 {
        let phat = nontarget_dist(&ps, target)?;
        for (&i, &ph) in phat.source_class_ids.iter().zip(&phat.phat) {
            grad[i] = -ph * gap / tau;
        }
    }
    Ok((loss, grad))
}

fn check_mask(c: usize, target: usize, mask: &[usize]) -> Result<()> {
    if mask.is_empty() {
        return Err(invalid("mask selects no classes"));
    }
    let mut seen = vec![false; c];
    for &i in mask {
        if i >= c {
            return Err(invalid(format!(
                "mask class {i} out of range for {c} classes"
            )));
        }
        if i == target {
            return Err(invalid(format!("mask contains the target class {target}")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(invalid(format!("mask lists class {i} twice")));
        }
    }
    Ok(())
}

/// `KL(p̂^T || p̂^S)` over the selected non-target classes and its raw-logit
/// gradient.
///
/// Both sides are renormalized over the selection, which is the softmax of the
/// selected tempered logits. `mask = None` selects every non-target class.
/// Gradient entries outside the selection, and at the target, are exactly 0.
pub fn nckd_loss_and_grad(
    teacher: &[f64],
    student: &[f64],
    target: usize,
    tau: f64,
    mask: Option<&[usize]>,
) -> Result<(f64, Vec64)> {
    check_pair(teacher, student)?;
    let c = student.len();
    check_target(c, target)?;
    check_tau(tau)?;
    if c < 2 {
        return Err(invalid("non-target loss needs at least two classes"));
    }
    let all: Vec<usize>;
    let selected = match mask {
        Some(m) => {
            check_mask(c, target, m)?;
            m
        }
        None => {
            all = (0..c).filter(|&i| i != target).collect();
            &all
        }
    };

    let zt: Vec64 = selected.iter().map(|&i| teacher[i] / tau).collect();
    let zs: Vec64 = selected.iter().map(|&i| student[i] / tau).collect();
    let log_t = log_softmax(&zt)?;
    let log_s = log_softmax(&zs)?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; c];
    for (k, &i) in selected.iter().enumerate() {
        let pt = log_t[k].exp();
        let ps = log_s[k].exp();
        loss += pt * (log_t[k] - log_s[k]);
        grad[i] = (ps - pt) / tau;
    }
    Ok((loss, grad))
}

/// Full tempered `KL(p^T || p^S)` and its raw-logit gradient `(p^S - p^T)/tau`.
pub fn kd_loss_and_grad(teacher: &[f64], student: &[f64], tau: f64) -> Result<(f64, Vec64)> {
    check_pair(teacher, student)?;
    check_tau(tau)?;
    let log_t = log_softmax(&scaled(teacher, tau))?;
    let log_s = log_softmax(&scaled(student, tau))?;
    let mut loss = 0.0;
    let grad = log_t
        .iter()
        .zip(&log_s)
        .map(|(&lt, &ls)| {
            let pt = lt.exp();
            loss += pt * (lt - ls);
            (ls.exp() - pt) / tau
        })
        .collect();
    Ok((loss, grad))
}

/// `|KL(p^T||p^S) - KL(b^T||b^S) - (1 - p_t^T) KL(p̂^T||p̂^S)|` on tempered
/// distributions.
pub fn kd_decomposition_check(
    teacher: &[f64],
    student: &[f64],
    target: usize,
    tau: f64,
) -> Result<f64> {
    check_pair(teacher, student)?;
    check_target(student.len(), target)?;
    let (full, _) = kd_loss_and_grad(teacher, student, tau)?;
    let (tckd, _) = tckd_loss_and_grad(teacher, student, target, tau)?;
    if student.len() < 2 {
        return Ok((full - tckd).abs());
    }
    let (nckd, _) = nckd_loss_and_grad(teacher, student, target, tau, None)?;
    let bt = binary_probs(&ProbVector::from_logits(teacher, tau)?, target)?;
    Ok((full - tckd - bt.pnt * nckd).abs())
}

/// Loss weights of the combined objective
/// `alpha * CE + tau^2 * (beta1 * TCKD + beta2 * NCKD)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta1: 1.0,
            beta2: 1.0,
        }
    }
}

/// How the non-target term is weighted per sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NckdWeighting {
    /// `beta2` alone (DKD-style).
    #[default]
    Constant,
    /// `beta2 * (1 - p_t^T)`: with `beta1 = beta2 = 1` and no mask, TCKD + NCKD
    /// is exactly the vanilla tempered KL.
    TeacherNonTargetMass,
}

/// Per-sample loss components.
///
/// `nckd` already carries the per-sample weighting factor, so
/// `total = alpha * ce + tau^2 * (beta1 * tckd + beta2 * nckd)` always holds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub tckd: f64,
    pub nckd: f64,
    pub total: f64,
    pub weights: LossWeights,
    pub tau: f64,
}

impl LossBreakdown {
    pub fn assemble(ce: f64, tckd: f64, nckd: f64, weights: LossWeights, tau: f64) -> Self {
        let total = weights.alpha * ce + tau * tau * (weights.beta1 * tckd + weights.beta2 * nckd);
        Self {
            ce,
            tckd,
            nckd,
            total,
            weights,
            tau,
        }
    }
}

/// Unweighted raw-logit gradients of the three streams.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGradTriple {
    pub tog: Vec64,
    pub tcg: Vec64,
    pub ncg: Vec64,
    pub tau: f64,
}

/// Losses and stream gradients for one sample.
pub fn decoupled_terms(
    teacher: &[f64],
    student: &[f64],
    target: usize,
    tau: f64,
    weights: LossWeights,
    weighting: NckdWeighting,
    mask: Option<&[usize]>,
) -> Result<(LossBreakdown, LogitGradTriple)> {
    check_pair(teacher, student)?;
    let (ce, tog) = ce_loss_and_grad(student, target)?;
    let (tckd, tcg) = tckd_loss_and_grad(teacher, student, target, tau)?;
    let (mut nckd, mut ncg) = nckd_loss_and_grad(teacher, student, target, tau, mask)?;
    if weighting == NckdWeighting::TeacherNonTargetMass {
        let scale = binary_probs(&ProbVector::from_logits(teacher, tau)?, target)?.pnt;
        nckd *= scale;
        for g in &mut ncg {
            *g *= scale;
        }
    }
    Ok((
        LossBreakdown::assemble(ce, tckd, nckd, weights, tau),
        LogitGradTriple { tog, tcg, ncg, tau },
    ))
}

/// The combined objective for one sample, non-target term optionally masked.
pub fn deepkd_loss(
    teacher: &[f64],
    student: &[f64],
    target: usize,
    tau: f64,
    weights: LossWeights,
    mask: Option<&[usize]>,
) -> Result<LossBreakdown> {
    for w in [weights.alpha, weights.beta1, weights.beta2] {
        if !w.is_finite() {
            return Err(invalid("loss weights must be finite"));
        }
    }
    decoupled_terms(
        teacher,
        student,
        target,
        tau,
        weights,
        NckdWeighting::Constant,
        mask,
    )
    .map(|(b, _)| b)
}
