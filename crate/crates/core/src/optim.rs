//! Momentum optimizers with separately buffered gradient streams, and the
//! windowed gradient / buffer signal-to-noise estimators used to inspect them.

use std::collections::VecDeque;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::net::ParamGradTriple;
use crate::numkit::Vec64;

/// Denominator floor of the GSNR estimator.
pub const GSNR_EPS: f64 = 1e-12;

fn check_coeff(name: &str, c: f64) -> Result<()> {
    if !(0.0..1.0).contains(&c) {
        return Err(invalid(format!("{name} = {c} must lie in [0, 1)")));
    }
    Ok(())
}

fn check_len(expected: usize, got: usize, what: &str) -> Result<()> {
    if expected != got {
        return Err(invalid(format!(
            "{what} has length {got}, expected {expected}"
        )));
    }
    Ok(())
}

/// `v <- g + coeff * v`, in place.
fn accumulate(v: &mut [f64], g: &[f64], coeff: f64) {
    for (vi, gi) in v.iter_mut().zip(g) {
        *vi = gi + coeff * *vi;
    }
}

/// Common surface of the buffered optimizers so the training loop and the
/// GSNR tracker can drive any of them.
pub trait StreamOptimizer {
    /// Updates the buffers and returns the parameter delta `-lr * sum(v)`.
    fn step(&mut self, grads: &ParamGradTriple) -> Result<Vec64>;

    fn lr(&self) -> f64;

    fn set_lr(&mut self, lr: f64);

    /// `(name, gradient feeding the buffer, buffer contents)` per buffer.
    fn buffer_streams(&self, grads: &ParamGradTriple) -> Vec<(&'static str, Vec64, &[f64])>;
}

/// Three velocity buffers: task (`mu + delta`), target-class (`mu - delta`)
/// and non-target-class (`mu + delta`).
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub v_tog: Vec64,
    pub v_tcg: Vec64,
    pub v_ncg: Vec64,
    pub mu: f64,
    pub delta: f64,
    pub lr: f64,
}

impl MomentumState {
    pub fn new(len: usize, mu: f64, delta: f64, lr: f64) -> Result<Self> {
        check_coeff("mu + delta", mu + delta)?;
        check_coeff("mu - delta", mu - delta)?;
        Ok(Self {
            v_tog: vec![0.0; len],
            v_tcg: vec![0.0; len],
            v_ncg: vec![0.0; len],
            mu,
            delta,
            lr,
        })
    }

    pub fn len(&self) -> usize {
        self.v_tog.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v_tog.is_empty()
    }
}

impl StreamOptimizer for MomentumState {
    fn step(&mut self, grads: &ParamGradTriple) -> Result<Vec64> {
        let n = self.len();
        check_len(n, grads.tog.len(), "tog gradient")?;
        check_len(n, grads.tcg.len(), "tcg gradient")?;
        check_len(n, grads.ncg.len(), "ncg gradient")?;
        let hi = self.mu + self.delta;
        let lo = self.mu - self.delta;
        accumulate(&mut self.v_tog, &grads.tog, hi);
        accumulate(&mut self.v_tcg, &grads.tcg, lo);
        accumulate(&mut self.v_ncg, &grads.ncg, hi);
        Ok((0..n)
            .map(|i| -self.lr * (self.v_tog[i] + self.v_tcg[i] + self.v_ncg[i]))
            .collect())
    }

    fn lr(&self) -> f64 {
        self.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    fn buffer_streams(&self, grads: &ParamGradTriple) -> Vec<(&'static str, Vec64, &[f64])> {
        vec![
            ("tog", grads.tog.clone(), &self.v_tog),
            ("tcg", grads.tcg.clone(), &self.v_tcg),
            ("ncg", grads.ncg.clone(), &self.v_ncg),
        ]
    }
}

/// Two velocity buffers: cross-entropy (`mu - delta`) and distillation
/// (`mu + delta`).
#[derive(Debug, Clone, PartialEq)]
pub struct DotState {
    pub v_ce: Vec64,
    pub v_kd: Vec64,
    pub mu: f64,
    pub delta: f64,
    pub lr: f64,
}

impl DotState {
    pub fn new(len: usize, mu: f64, delta: f64, lr: f64) -> Result<Self> {
        check_coeff("mu + delta", mu + delta)?;
        check_coeff("mu - delta", mu - delta)?;
        Ok(Self {
            v_ce: vec![0.0; len],
            v_kd: vec![0.0; len],
            mu,
            delta,
            lr,
        })
    }

    pub fn dot_step(&mut self, g_ce: &[f64], g_kd: &[f64]) -> Result<Vec64> {
        let n = self.v_ce.len();
        check_len(n, g_ce.len(), "ce gradient")?;
        check_len(n, g_kd.len(), "kd gradient")?;
        accumulate(&mut self.v_ce, g_ce, self.mu - self.delta);
        accumulate(&mut self.v_kd, g_kd, self.mu + self.delta);
        Ok((0..n)
            .map(|i| -self.lr * (self.v_ce[i] + self.v_kd[i]))
            .collect())
    }
}

fn kd_stream(grads: &ParamGradTriple) -> Vec64 {
    grads
        .tcg
        .iter()
        .zip(&grads.ncg)
        .map(|(a, b)| a + b)
        .collect()
}

impl StreamOptimizer for DotState {
    fn step(&mut self, grads: &ParamGradTriple) -> Result<Vec64> {
        self.dot_step(&grads.tog, &kd_stream(grads))
    }

    fn lr(&self) -> f64 {
        self.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    fn buffer_streams(&self, grads: &ParamGradTriple) -> Vec<(&'static str, Vec64, &[f64])> {
        vec![
            ("ce", grads.tog.clone(), &self.v_ce),
            ("kd", kd_stream(grads), &self.v_kd),
        ]
    }
}

/// Plain SGD momentum on the summed gradient: `v <- g + mu v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Momentum {
    pub v: Vec64,
    pub mu: f64,
    pub lr: f64,
}

impl Momentum {
    pub fn new(len: usize, mu: f64, lr: f64) -> Result<Self> {
        check_coeff("mu", mu)?;
        Ok(Self {
            v: vec![0.0; len],
            mu,
            lr,
        })
    }

    pub fn step_flat(&mut self, g: &[f64]) -> Result<Vec64> {
        check_len(self.v.len(), g.len(), "gradient")?;
        accumulate(&mut self.v, g, self.mu);
        Ok(self.v.iter().map(|v| -self.lr * v).collect())
    }
}

impl StreamOptimizer for Momentum {
    fn step(&mut self, grads: &ParamGradTriple) -> Result<Vec64> {
        self.step_flat(&grads.summed())
    }

    fn lr(&self) -> f64 {
        self.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    fn buffer_streams(&self, grads: &ParamGradTriple) -> Vec<(&'static str, Vec64, &[f64])> {
        vec![("total", grads.summed(), &self.v)]
    }
}

/// Ring buffer of the most recent gradient samples of one stream.
#[derive(Debug, Clone)]
pub struct GsnrWindow {
    capacity: usize,
    samples: VecDeque<Vec64>,
    label: String,
}

impl GsnrWindow {
    pub fn new(label: impl Into<String>, capacity: usize) -> Result<Self> {
        if capacity < 2 {
            return Err(invalid("GSNR window must hold at least two samples"));
        }
        Ok(Self {
            capacity,
            samples: VecDeque::with_capacity(capacity),
            label: label.into(),
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.samples.len() == self.capacity
    }

    /// Appends a sample, evicting the oldest once the window is full.
    pub fn push(&mut self, sample: Vec64) -> Result<()> {
        if let Some(first) = self.samples.front() {
            check_len(first.len(), sample.len(), "GSNR sample")?;
        }
        if self.is_full() {
            self.samples.pop_front();
        }
        self.samples.push_back(sample);
        Ok(())
    }

    pub fn gsnr(&self) -> Result<f64> {
        let dim = self.samples.front().map_or(0, Vec::len);
        self.gsnr_range(0..dim)
    }

    /// GSNR restricted to the coordinates in `range`.
    pub fn gsnr_range(&self, range: Range<usize>) -> Result<f64> {
        let n = self.samples.len();
        if n < 2 {
            return Err(Error::NotReady(format!(
                "stream {} holds {n} sample(s), GSNR needs at least 2",
                self.label
            )));
        }
        let inv_n = 1.0 / n as f64;
        let mut mean = vec![0.0; range.len()];
        for s in &self.samples {
            for (m, v) in mean.iter_mut().zip(&s[range.clone()]) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m *= inv_n;
        }
        let signal: f64 = mean.iter().map(|m| m * m).sum();
        let noise = self
            .samples
            .iter()
            .map(|s| {
                s[range.clone()]
                    .iter()
                    .zip(&mean)
                    .map(|(v, m)| (v - m) * (v - m))
                    .sum::<f64>()
            })
            .sum::<f64>()
            * inv_n;
        Ok(signal / (noise + GSNR_EPS))
    }
}

/// `|mean g|^2 / (mean |g - mean g|^2 + eps)` over the samples in the window.
pub fn gsnr(window: &GsnrWindow) -> Result<f64> {
    window.gsnr()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GsnrConfig {
    pub window: usize,
    pub sample_every: usize,
    /// Samples between consecutive reports once the window is full.
    pub report_every: usize,
    /// Optional named coordinate ranges (e.g. layers) reported separately.
    pub segments: Vec<(String, Range<usize>)>,
}

impl Default for GsnrConfig {
    fn default() -> Self {
        Self {
            window: 200,
            sample_every: 1,
            report_every: 200,
            segments: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GsnrRow {
    pub stream: String,
    pub gsnr: f64,
    /// Buffer SNR; absent for streams without a dedicated buffer.
    pub bsnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GsnrReport {
    pub step: usize,
    pub rows: Vec<GsnrRow>,
}

struct TrackedStream {
    grads: GsnrWindow,
    buffer: Option<GsnrWindow>,
}

/// Samples raw stream gradients and buffer contents and emits a report every
/// `report_every` samples once the window is full.
///
/// Buffers are sampled after the step's decay-accumulate update.
pub struct GsnrTracker {
    cfg: GsnrConfig,
    streams: Vec<TrackedStream>,
    samples_taken: usize,
}

impl GsnrTracker {
    pub fn new(cfg: GsnrConfig) -> Result<Self> {
        if cfg.sample_every == 0 || cfg.report_every == 0 {
            return Err(invalid(
                "GSNR sample_every and report_every must be positive",
            ));
        }
        GsnrWindow::new("probe", cfg.window)?;
        Ok(Self {
            cfg,
            streams: Vec::new(),
            samples_taken: 0,
        })
    }

    pub fn config(&self) -> &GsnrConfig {
        &self.cfg
    }

    fn stream_mut(&mut self, name: &str) -> Result<&mut TrackedStream> {
        if let Some(i) = self.streams.iter().position(|s| s.grads.label() == name) {
            return Ok(&mut self.streams[i]);
        }
        self.streams.push(TrackedStream {
            grads: GsnrWindow::new(name, self.cfg.window)?,
            buffer: None,
        });
        Ok(self.streams.last_mut().expect("just pushed"))
    }

    /// Records one optimizer step (`step` counts from 1).
    pub fn record(
        &mut self,
        step: usize,
        raw: &ParamGradTriple,
        opt: &dyn StreamOptimizer,
    ) -> Result<Option<GsnrReport>> {
        if !step.is_multiple_of(self.cfg.sample_every) {
            return Ok(None);
        }
        for (name, g) in [("tog", &raw.tog), ("tcg", &raw.tcg), ("ncg", &raw.ncg)] {
            self.stream_mut(name)?.grads.push(g.clone())?;
        }
        let window = self.cfg.window;
        for (name, g, buf) in opt.buffer_streams(raw) {
            let is_component = matches!(name, "tog" | "tcg" | "ncg");
            let stream = self.stream_mut(name)?;
            if !is_component {
                stream.grads.push(g)?;
            }
            stream
                .buffer
                .get_or_insert(GsnrWindow::new(name, window)?)
                .push(buf.to_vec())?;
        }
        self.samples_taken += 1;

        let full = self.streams.iter().all(|s| s.grads.is_full());
        if !full || !(self.samples_taken - window).is_multiple_of(self.cfg.report_every) {
            return Ok(None);
        }
        self.report(step).map(Some)
    }

    fn report(&self, step: usize) -> Result<GsnrReport> {
        let mut rows = Vec::new();
        for s in &self.streams {
            rows.push(GsnrRow {
                stream: s.grads.label().to_string(),
                gsnr: s.grads.gsnr()?,
                bsnr: s.buffer.as_ref().map(GsnrWindow::gsnr).transpose()?,
            });
        }
        for (seg, range) in &self.cfg.segments {
            for s in &self.streams {
                rows.push(GsnrRow {
                    stream: format!("{}@{seg}", s.grads.label()),
                    gsnr: s.grads.gsnr_range(range.clone())?,
                    bsnr: s
                        .buffer
                        .as_ref()
                        .map(|b| b.gsnr_range(range.clone()))
                        .transpose()?,
                });
            }
        }
        Ok(GsnrReport { step, rows })
    }
}

/// Records the step and returns a report when one is due.
pub fn record_and_report(
    tracker: &mut GsnrTracker,
    step: usize,
    raw: &ParamGradTriple,
    opt: &dyn StreamOptimizer,
) -> Result<Option<GsnrReport>> {
    tracker.record(step, raw, opt)
}

pub const GSNR_CSV_HEADER: &str = "step,stream,gsnr,bsnr";

/// Writes reports as `step,stream,gsnr,bsnr`, one row per stream per report;
/// `bsnr` is empty for streams without a buffer.
pub fn write_gsnr_csv(mut w: impl Write, reports: &[GsnrReport]) -> std::io::Result<()> {
    writeln!(w, "{GSNR_CSV_HEADER}")?;
    for r in reports {
        for row in &r.rows {
            let bsnr = row.bsnr.map(|b| format!("{b:e}")).unwrap_or_default();
            writeln!(w, "{},{},{:e},{}", r.step, row.stream, row.gsnr, bsnr)?;
        }
    }
    Ok(())
}

pub fn save_gsnr_csv(path: &Path, reports: &[GsnrReport]) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    write_gsnr_csv(&mut f, reports).map_err(io)?;
    f.flush().map_err(io)
}
