//! The training loop shared by teacher training, distillation and k search,
//! plus evaluation and metrics export.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use deepkd_core::dtm::DtmSchedule;
use deepkd_core::net::MlpModel;
use deepkd_core::numkit::{Mat64, Rng};
use deepkd_core::objective::{batch_gradients, Objective};
use deepkd_core::optim::{
    DotState, GsnrReport, GsnrTracker, Momentum, MomentumState, StreamOptimizer,
};

use crate::config::{Mode, RunConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,lr,k,ce,tckd,nckd,total,test_acc";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    /// Non-target classes kept by the mask (C - 1 when masking is off).
    pub k: usize,
    pub ce: f64,
    pub tckd: f64,
    pub nckd: f64,
    pub total: f64,
    pub test_acc: f64,
    pub wall_ms: u128,
}

/// Worker count for evaluation: `DEEPKD_THREADS` if set (0 = sequential),
/// otherwise the available parallelism.
pub fn eval_threads() -> usize {
    match std::env::var("DEEPKD_THREADS") {
        Ok(v) => v.trim().parse().unwrap_or(0),
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Logits for every row of `x`, computed in contiguous chunks on up to
/// `threads` workers and reassembled in row order.
pub fn predict_all(model: &MlpModel, x: &Mat64, threads: usize) -> Result<Mat64> {
    let n = x.rows();
    let workers = threads.clamp(1, n.max(1));
    if workers == 1 {
        return Ok(model.predict(x)?);
    }
    let chunk = n.div_ceil(workers);
    let idx: Vec<usize> = (0..n).collect();
    let parts = std::thread::scope(|s| {
        let handles: Vec<_> = idx
            .chunks(chunk)
            .map(|rows| s.spawn(move || model.predict(&x.select_rows(rows))))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect::<deepkd_core::Result<Vec<Mat64>>>()
    })?;
    let data: Vec<f64> = parts.into_iter().flat_map(Mat64::into_vec).collect();
    Ok(Mat64::from_vec(n, model.output_dim(), data)?)
}

pub fn accuracy(model: &MlpModel, ds: &Dataset, threads: usize) -> Result<f64> {
    let logits = predict_all(model, &ds.features, threads)?;
    let correct = logits
        .iter_rows()
        .zip(&ds.labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

pub struct FitSpec<'a> {
    pub cfg: &'a RunConfig,
    pub dims: Vec<usize>,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    /// Raw teacher logits aligned with `train`; required unless ce-only.
    pub teacher: Option<&'a Mat64>,
    pub epochs: usize,
    pub schedule: Option<DtmSchedule>,
    pub track_gsnr: bool,
}

pub struct FitResult {
    pub model: MlpModel,
    pub metrics: Vec<MetricsRow>,
    pub gsnr: Vec<GsnrReport>,
}

fn optimizer(cfg: &RunConfig, len: usize) -> Result<Box<dyn StreamOptimizer>> {
    let (mu, delta, lr) = (cfg.mu, cfg.delta(), cfg.lr);
    Ok(match cfg.mode {
        Mode::DeepKd => Box::new(MomentumState::new(len, mu, delta, lr)?),
        Mode::Dot => Box::new(DotState::new(len, mu, delta, lr)?),
        Mode::Kd | Mode::Dkd | Mode::CeOnly => Box::new(Momentum::new(len, mu, lr)?),
    })
}

/// Trains a freshly initialized model. Initialization and the per-epoch
/// shuffles draw from one generator seeded with `cfg.seed`, so every mode
/// sees the same initial weights and batch order.
pub fn fit(spec: FitSpec<'_>) -> Result<FitResult> {
    let cfg = spec.cfg;
    let train = spec.train;
    let c = *spec.dims.last().expect("dims are nonempty");
    if train.num_classes != c || spec.test.num_classes > c {
        return Err(Error::Core(deepkd_core::Error::Validation(format!(
            "model has {c} outputs but the data has {} classes",
            train.num_classes.max(spec.test.num_classes)
        ))));
    }
    let zeros;
    let teacher = match (spec.teacher, cfg.mode) {
        (Some(t), _) => t,
        (None, Mode::CeOnly) => {
            zeros = Mat64::zeros(train.len(), c);
            &zeros
        }
        (None, mode) => {
            return Err(Error::Core(deepkd_core::Error::Validation(format!(
                "mode {mode} needs teacher logits"
            ))))
        }
    };
    if teacher.rows() != train.len() || teacher.cols() != c {
        return Err(Error::Core(deepkd_core::Error::Validation(format!(
            "teacher logits are {}x{}, expected {}x{c}",
            teacher.rows(),
            teacher.cols(),
            train.len()
        ))));
    }

    let mut rng = Rng::new(cfg.seed);
    let mut model = MlpModel::he_init(&spec.dims, cfg.activation, &mut rng)?;
    let mut opt = optimizer(cfg, model.param_count())?;
    let mut tracker = if spec.track_gsnr {
        let mut g = cfg.gsnr_config();
        if cfg.gsnr_per_layer {
            g.segments = model
                .layer_ranges()
                .into_iter()
                .enumerate()
                .map(|(l, r)| (format!("layer{l}"), r))
                .collect();
        }
        Some(GsnrTracker::new(g)?)
    } else {
        None
    };
    let threads = eval_threads();
    let base = Objective {
        tau: cfg.tau,
        weights: cfg.loss_weights(),
        weighting: cfg.weighting(),
        top_k: None,
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut metrics = Vec::with_capacity(spec.epochs);
    let mut reports = Vec::new();
    let mut step = 0usize;
    for epoch in 0..spec.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        opt.set_lr(lr);
        let k = spec
            .schedule
            .as_ref()
            .map(|s| s.k_for_epoch(epoch))
            .transpose()?;
        let obj = Objective { top_k: k, ..base };
        rng.shuffle(&mut order);

        let (mut ce, mut tckd, mut nckd, mut total) = (0.0, 0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let x = train.features.select_rows(batch);
            let t = teacher.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let (loss, grads) = batch_gradients(&model, &obj, &x, &t, &y)?;
            let delta = opt.step(&grads)?;
            model.apply_delta(&delta)?;
            step += 1;
            if let Some(tr) = tracker.as_mut() {
                if let Some(r) = tr.record(step, &grads, opt.as_ref())? {
                    reports.push(r);
                }
            }
            let w = batch.len() as f64;
            ce += w * loss.ce;
            tckd += w * loss.tckd;
            nckd += w * loss.nckd;
            total += w * loss.total;
        }
        if !model.is_finite() {
            return Err(Error::Runtime(format!(
                "training diverged at epoch {epoch}; try a smaller lr"
            )));
        }
        let n = train.len() as f64;
        if cfg.mode == Mode::CeOnly {
            tckd = 0.0;
            nckd = 0.0;
        }
        metrics.push(MetricsRow {
            epoch,
            lr,
            k: k.unwrap_or(c - 1),
            ce: ce / n,
            tckd: tckd / n,
            nckd: nckd / n,
            total: total / n,
            test_acc: accuracy(&model, spec.test, threads)?,
            wall_ms: started.elapsed().as_millis(),
        });
        log::debug!(
            "epoch {epoch}: loss {:.4} acc {:.4}",
            metrics[epoch].total,
            metrics[epoch].test_acc
        );
    }
    Ok(FitResult {
        model,
        metrics,
        gsnr: reports,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| {
        Error::Core(deepkd_core::Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn write_with(path: &Path, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

/// Per-epoch metrics; deterministic for a fixed config and seed.
pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_with(path, |w| {
        writeln!(w, "{METRICS_HEADER}")?;
        for r in rows {
            writeln!(
                w,
                "{},{:e},{},{:.16e},{:.16e},{:.16e},{:.16e},{}",
                r.epoch, r.lr, r.k, r.ce, r.tckd, r.nckd, r.total, r.test_acc
            )?;
        }
        Ok(())
    })
}

/// Wall-clock time per epoch, kept apart from the deterministic metrics.
pub fn write_timings(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_with(path, |w| {
        writeln!(w, "epoch,wall_ms")?;
        for r in rows {
            writeln!(w, "{},{}", r.epoch, r.wall_ms)?;
        }
        Ok(())
    })
}

pub fn write_table(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    write_with(path, |w| {
        writeln!(w, "{header}")?;
        for r in rows {
            writeln!(w, "{r}")?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lower_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }

    #[test]
    fn parallel_prediction_matches_sequential() {
        let mut rng = Rng::new(3);
        let model = MlpModel::he_init(&[2, 5, 3], Default::default(), &mut rng).unwrap();
        let data = (0..2 * 37).map(|_| rng.normal()).collect();
        let x = Mat64::from_vec(37, 2, data).unwrap();
        let seq = predict_all(&model, &x, 1).unwrap();
        for t in [2, 4, 64] {
            assert_eq!(predict_all(&model, &x, t).unwrap(), seq);
        }
    }
}
