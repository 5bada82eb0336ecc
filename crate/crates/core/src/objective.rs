//! Batch-level objective: per-sample decoupled terms, mean reduction, and the
//! three per-stream parameter gradients.

use crate::distill::{decoupled_terms, LogitGradTriple, LossBreakdown, LossWeights, NckdWeighting};
use crate::dtm::build_mask;
use crate::error::{invalid, Result};
use crate::net::{MlpModel, ParamGradTriple, StreamWeights};
use crate::numkit::Mat64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub tau: f64,
    pub weights: LossWeights,
    pub weighting: NckdWeighting,
    /// Number of retained non-target classes; `None` keeps all of them.
    pub top_k: Option<usize>,
}

impl Objective {
    pub fn stream_weights(&self) -> StreamWeights {
        let t2 = self.tau * self.tau;
        StreamWeights {
            tog: self.weights.alpha,
            tcg: t2 * self.weights.beta1,
            ncg: t2 * self.weights.beta2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchTerms {
    /// Batch means of every loss component.
    pub loss: LossBreakdown,
    pub triples: Vec<LogitGradTriple>,
}

fn check_batch(logits: &Mat64, teacher: &Mat64, labels: &[usize]) -> Result<()> {
    if teacher.rows() != logits.rows() || teacher.cols() != logits.cols() {
        return Err(invalid(format!(
            "teacher logits are {}x{}, student logits {}x{}",
            teacher.rows(),
            teacher.cols(),
            logits.rows(),
            logits.cols()
        )));
    }
    if labels.len() != logits.rows() || labels.is_empty() {
        return Err(invalid(format!(
            "{} labels for a batch of {}",
            labels.len(),
            logits.rows()
        )));
    }
    Ok(())
}

/// Per-sample losses and logit gradients for a batch of student logits.
pub fn batch_terms(
    obj: &Objective,
    logits: &Mat64,
    teacher: &Mat64,
    labels: &[usize],
) -> Result<BatchTerms> {
    check_batch(logits, teacher, labels)?;
    let c = logits.cols();
    let k = match obj.top_k {
        Some(k) if k < c.saturating_sub(1) => Some(k),
        _ => None,
    };
    let n = labels.len() as f64;
    let (mut ce, mut tckd, mut nckd) = (0.0, 0.0, 0.0);
    let mut triples = Vec::with_capacity(labels.len());
    for (s, &y) in labels.iter().enumerate() {
        let t = teacher.row(s);
        let mask = k.map(|k| build_mask(t, y, k)).transpose()?;
        let (b, tri) = decoupled_terms(
            t,
            logits.row(s),
            y,
            obj.tau,
            obj.weights,
            obj.weighting,
            mask.as_ref().map(|m| m.selected.as_slice()),
        )?;
        ce += b.ce;
        tckd += b.tckd;
        nckd += b.nckd;
        triples.push(tri);
    }
    Ok(BatchTerms {
        loss: LossBreakdown::assemble(ce / n, tckd / n, nckd / n, obj.weights, obj.tau),
        triples,
    })
}

/// Mean batch loss and its per-stream parameter gradients.
pub fn batch_gradients(
    model: &MlpModel,
    obj: &Objective,
    inputs: &Mat64,
    teacher: &Mat64,
    labels: &[usize],
) -> Result<(LossBreakdown, ParamGradTriple)> {
    let (logits, tape) = model.forward(inputs)?;
    let terms = batch_terms(obj, &logits, teacher, labels)?;
    let grads = model.param_grad_triple(&tape, &terms.triples, obj.stream_weights())?;
    Ok((terms.loss, grads))
}

/// Mean batch loss only.
pub fn batch_loss(
    model: &MlpModel,
    obj: &Objective,
    inputs: &Mat64,
    teacher: &Mat64,
    labels: &[usize],
) -> Result<LossBreakdown> {
    let logits = model.predict(inputs)?;
    batch_terms(obj, &logits, teacher, labels).map(|t| t.loss)
}
