//! Dynamic top-k masking of non-target classes.
//!
//! The number of retained non-target classes follows a three-phase
//! curriculum: a linear ramp from `k_init` to `k_opt` during the easy phase, a
//! plateau at `k_opt`, and a linear ramp to `k_max` during the hard phase. The
//! final epoch always uses `k_max`, even when the hard phase is empty. The
//! retained classes are the `k` non-target classes with the largest teacher
//! logits.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtmSchedule {
    num_classes: usize,
    k_init: usize,
    k_opt: usize,
    k_max: usize,
    easy_end_frac: f64,
    hard_start_frac: f64,
    total_epochs: usize,
}

impl DtmSchedule {
    pub fn new(
        num_classes: usize,
        k_init: usize,
        k_opt: usize,
        k_max: usize,
        easy_end_frac: f64,
        hard_start_frac: f64,
        total_epochs: usize,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(invalid("top-k masking needs at least two classes"));
        }
        if !(1 <= k_init && k_init <= k_opt && k_opt <= k_max && k_max < num_classes) {
            return Err(invalid(format!(
                "need 1 <= k_init <= k_opt <= k_max <= C-1, got {k_init}, {k_opt}, {k_max} with C={num_classes}"
            )));
        }
        if !(0.0 < easy_end_frac && easy_end_frac <= hard_start_frac && hard_start_frac < 1.0) {
            return Err(invalid(format!(
                "need 0 < easy_end_frac <= hard_start_frac < 1, got {easy_end_frac}, {hard_start_frac}"
            )));
        }
        if total_epochs == 0 {
            return Err(invalid("schedule needs at least one epoch"));
        }
        Ok(Self {
            num_classes,
            k_init,
            k_opt,
            k_max,
            easy_end_frac,
            hard_start_frac,
            total_epochs,
        })
    }

    /// Phase fractions 0.3 / 0.7, `k_init` at 5% of the classes, `k_opt` at 55%
    /// and `k_max = C - 1`.
    pub fn with_defaults(num_classes: usize, total_epochs: usize) -> Result<Self> {
        let (k_init, k_opt, k_max) = default_ks(num_classes);
        Self::new(num_classes, k_init, k_opt, k_max, 0.3, 0.7, total_epochs)
    }

    /// The CIFAR ablation setting: k_opt = 55 with phase boundaries at epochs 60
    /// and 170 of 240.
    pub fn cifar_ablation(num_classes: usize, total_epochs: usize) -> Result<Self> {
        let (k_init, _, k_max) = default_ks(num_classes);
        let k_opt = 55.clamp(k_init, k_max);
        Self::new(
            num_classes,
            k_init,
            k_opt,
            k_max,
            60.0 / 240.0,
            170.0 / 240.0,
            total_epochs,
        )
    }

    /// A schedule that holds `k` for every epoch.
    pub fn constant(num_classes: usize, k: usize, total_epochs: usize) -> Result<Self> {
        Self::new(num_classes, k, k, k, 0.3, 0.7, total_epochs)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn total_epochs(&self) -> usize {
        self.total_epochs
    }

    pub fn k_init(&self) -> usize {
        self.k_init
    }

    pub fn k_opt(&self) -> usize {
        self.k_opt
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn k_for_epoch(&self, epoch: usize) -> Result<usize> {
        if epoch >= self.total_epochs {
            return Err(invalid(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        let total = self.total_epochs as f64;
        let e = epoch as f64;
        let easy_end = self.easy_end_frac * total;
        let hard_start = self.hard_start_frac * total;
        let (k_init, k_opt, k_max) = (self.k_init as f64, self.k_opt as f64, self.k_max as f64);

        let k = if self.total_epochs >= 2 && epoch + 1 == self.total_epochs {
            k_max
        } else if e < easy_end {
            k_init + (k_opt - k_init) * e / easy_end
        } else if e < hard_start {
            k_opt
        } else {
            let span = (total - 1.0) - hard_start;
            if span <= 0.0 {
                k_max
            } else {
                k_opt + (k_max - k_opt) * ((e - hard_start) / span).min(1.0)
            }
        };
        Ok((k.round() as usize).clamp(self.k_init, self.k_max))
    }
}

fn default_ks(num_classes: usize) -> (usize, usize, usize) {
    let k_max = num_classes.saturating_sub(1).max(1);
    let k_init = ((0.05 * num_classes as f64).round() as usize).clamp(1, k_max);
    let k_opt = ((0.55 * num_classes as f64).round() as usize).clamp(k_init, k_max);
    (k_init, k_opt, k_max)
}

/// The retained non-target classes, ascending by class id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopkMask {
    pub selected: Vec<usize>,
    pub k: usize,
    pub epoch: Option<usize>,
}

impl TopkMask {
    pub fn at_epoch(mut self, epoch: usize) -> Self {
        self.epoch = Some(epoch);
        self
    }
}

/// Keeps the `k` non-target classes with the largest teacher logits; ties go to
/// the lower class id.
pub fn build_mask(teacher_logits: &[f64], target: usize, k: usize) -> Result<TopkMask> {
    let c = teacher_logits.len();
    if target >= c {
        return Err(invalid(format!(
            "target class {target} out of range for {c} classes"
        )));
    }
    if k == 0 || k >= c {
        return Err(invalid(format!(
            "k = {k} outside 1..={}",
            c.saturating_sub(1)
        )));
    }
    let mut order: Vec<usize> = (0..c).filter(|&i| i != target).collect();
    order.sort_by(|&a, &b| {
        teacher_logits[b]
            .total_cmp(&teacher_logits[a])
            .then(a.cmp(&b))
    });
    let mut selected = order[..k].to_vec();
    selected.sort_unstable();
    Ok(TopkMask {
        selected,
        k,
        epoch: None,
    })
}
