//! End-to-end audit of the assembled parameter gradient against central
//! finite differences of the scalar batch loss.

use deepkd_core::distill::nckd_loss_and_grad;
use deepkd_core::dtm::build_mask;
use deepkd_core::fd::{central_partial, coord_rel_error};
use deepkd_core::net::MlpModel;
use deepkd_core::numkit::{Mat64, Rng};
use deepkd_core::objective::{batch_gradients, batch_loss, batch_terms, Objective};

use crate::config::{validation, RunConfig};
use crate::error::Result;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
/// Per-coordinate error denominator floor for near-zero gradient entries.
pub const FLOOR: f64 = 1e-6;
pub const MAX_PARAMS: usize = 10_000;
const BATCH: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub params: usize,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub top_k: Option<usize>,
    /// Unselected classes carry exactly zero NCG and do not move the masked loss.
    pub mask_ok: bool,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE && self.mask_ok
    }
}

/// Half of the non-target classes, so at least one class is masked out.
fn audit_k(classes: usize) -> Option<usize> {
    (classes >= 3).then(|| (classes - 1).div_ceil(2).min(classes - 2))
}

fn check_mask(obj: &Objective, logits: &Mat64, teacher: &Mat64, labels: &[usize]) -> Result<bool> {
    let Some(k) = obj.top_k else {
        return Ok(true);
    };
    let terms = batch_terms(obj, logits, teacher, labels)?;
    for (s, (&y, tri)) in labels.iter().zip(&terms.triples).enumerate() {
        let t = teacher.row(s);
        let mask = build_mask(t, y, k)?;
        let sel = Some(mask.selected.as_slice());
        let mut z = logits.row(s).to_vec();
        let (before, _) = nckd_loss_and_grad(t, &z, y, obj.tau, sel)?;
        for i in (0..z.len()).filter(|&i| i != y && !mask.selected.contains(&i)) {
            if tri.ncg[i] != 0.0 {
                return Ok(false);
            }
            z[i] += 1.0 + z[i].abs();
        }
        let (after, _) = nckd_loss_and_grad(t, &z, y, obj.tau, sel)?;
        if after != before {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Checks `samples` randomly chosen coordinates (all of them when 0).
pub fn gradcheck(cfg: &RunConfig, samples: usize) -> Result<GradcheckReport> {
    let c = cfg.classes;
    let dims = RunConfig::dims(&cfg.student_hidden, cfg.dim, c);
    let mut rng = Rng::new(cfg.seed);
    let model = MlpModel::he_init(&dims, cfg.activation, &mut rng)?;
    let p = model.param_count();
    if p > MAX_PARAMS {
        return Err(validation(format!(
            "gradcheck model has {p} parameters, limit is {MAX_PARAMS}"
        ))
        .into());
    }
    let x = Mat64::from_vec(
        BATCH,
        cfg.dim,
        (0..BATCH * cfg.dim).map(|_| rng.normal()).collect(),
    )?;
    let teacher = Mat64::from_vec(
        BATCH,
        c,
        (0..BATCH * c).map(|_| 3.0 * rng.normal()).collect(),
    )?;
    let labels: Vec<usize> = (0..BATCH).map(|_| rng.below(c)).collect();
    let obj = Objective {
        tau: cfg.tau,
        weights: cfg.loss_weights(),
        weighting: cfg.weighting(),
        top_k: audit_k(c),
    };

    let (_, grads) = batch_gradients(&model, &obj, &x, &teacher, &labels)?;
    let analytic = grads.summed();
    let mut coords: Vec<usize> = (0..p).collect();
    if samples > 0 && samples < p {
        rng.shuffle(&mut coords);
        coords.truncate(samples);
        coords.sort_unstable();
    }

    let mut probe_model = model.clone();
    let mut probe = model.params();
    let mut f = |theta: &[f64]| {
        probe_model.set_params(theta).expect("length unchanged");
        batch_loss(&probe_model, &obj, &x, &teacher, &labels)
            .expect("inputs validated above")
            .total
    };
    let (mut worst, mut worst_coord) = (0.0, 0);
    for &i in &coords {
        let num = central_partial(&mut f, &mut probe, i, STEP);
        let err = coord_rel_error(analytic[i], num, FLOOR);
        if err > worst {
            worst = err;
            worst_coord = i;
        }
    }
    let logits = model.predict(&x)?;
    Ok(GradcheckReport {
        params: p,
        coords_checked: coords.len(),
        max_rel_error: worst,
        worst_coord,
        top_k: obj.top_k,
        mask_ok: check_mask(&obj, &logits, &teacher, &labels)?,
    })
}
