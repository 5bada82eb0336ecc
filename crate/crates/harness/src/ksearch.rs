//! Grid search for the plateau `k` of the masking curriculum: short static-k
//! distillation runs on a subsample of the training split.

use deepkd_core::dtm::DtmSchedule;
use deepkd_core::numkit::{Mat64, Rng};

use crate::config::{validation, Mode, RunConfig};
use crate::data::Dataset;
use crate::error::Result;
use crate::train::{fit, FitSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct KsearchResult {
    /// `(k, test accuracy)` in grid order.
    pub rows: Vec<(usize, f64)>,
    /// First grid entry with the highest accuracy.
    pub best_k: usize,
}

/// Seeded subsample of `ceil(frac * n)` training rows, kept in original order.
pub fn subsample(n: usize, frac: f64, seed: u64) -> Vec<usize> {
    let m = ((frac * n as f64).ceil() as usize).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut idx);
    idx.truncate(m);
    idx.sort_unstable();
    idx
}

pub fn ksearch(
    cfg: &RunConfig,
    grid: &[usize],
    train: &Dataset,
    test: &Dataset,
    teacher: &Mat64,
) -> Result<KsearchResult> {
    if grid.is_empty() {
        return Err(validation("k grid is empty").into());
    }
    if cfg.mode == Mode::CeOnly {
        return Err(validation("ksearch needs a distillation mode").into());
    }
    let c = train.num_classes;
    if let Some(&bad) = grid.iter().find(|&&k| k == 0 || k >= c) {
        return Err(validation(format!("grid value {bad} outside 1..={}", c - 1)).into());
    }
    let idx = subsample(train.len(), cfg.ksearch_frac, cfg.seed);
    let sub = train.subset(&idx)?;
    let sub_teacher = teacher.select_rows(&idx);
    let dims = RunConfig::dims(&cfg.student_hidden, train.dim(), c);

    let mut rows = Vec::with_capacity(grid.len());
    for &k in grid {
        let res = fit(FitSpec {
            cfg,
            dims: dims.clone(),
            train: &sub,
            test,
            teacher: Some(&sub_teacher),
            epochs: cfg.ksearch_epochs,
            schedule: Some(DtmSchedule::constant(c, k, cfg.ksearch_epochs)?),
            track_gsnr: false,
        })?;
        let acc = res.metrics.last().map_or(0.0, |m| m.test_acc);
        log::info!("k = {k}: test accuracy {acc:.4}");
        rows.push((k, acc));
    }
    let mut best = rows[0];
    for &r in &rows[1..] {
        if r.1 > best.1 {
            best = r;
        }
    }
    Ok(KsearchResult {
        rows,
        best_k: best.0,
    })
}
