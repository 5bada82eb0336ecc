//! Run configuration: a flat `key = value` file, overridden by command-line
//! flags.
//!
//! ```text
//! # comment
//! mode = deepkd
//! tau = 4
//! lr_decay_epochs = 150,180,210
//! ```
//!
//! Keys left unset fall back to the defaults of [`RunConfig::default`]. A few
//! keys (`delta`, `nckd_weighting`, `dtm_enabled`, `k_*`) default per mode.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use deepkd_core::distill::{LossWeights, NckdWeighting};
use deepkd_core::dtm::DtmSchedule;
use deepkd_core::net::Activation;
use deepkd_core::optim::GsnrConfig;
use deepkd_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Kd,
    Dkd,
    Dot,
    DeepKd,
    CeOnly,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kd" => Ok(Mode::Kd),
            "dkd" => Ok(Mode::Dkd),
            "dot" => Ok(Mode::Dot),
            "deepkd" => Ok(Mode::DeepKd),
            "ce-only" => Ok(Mode::CeOnly),
            other => Err(validation(format!(
                "unknown mode {other:?} (expected kd, dkd, dot, deepkd or ce-only)"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Kd => "kd",
            Mode::Dkd => "dkd",
            Mode::Dot => "dot",
            Mode::DeepKd => "deepkd",
            Mode::CeOnly => "ce-only",
        })
    }
}

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

/// Keys that only matter when a teacher is involved.
pub const DISTILL_KEYS: &[&str] = &[
    "tau",
    "alpha",
    "beta1",
    "beta2",
    "nckd_weighting",
    "delta",
    "dtm_enabled",
    "k_init",
    "k_opt",
    "k_max",
    "easy_frac",
    "hard_frac",
    "teacher",
    "logits",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub out: PathBuf,
    /// Directory holding train.csv / test.csv; defaults to `out`.
    pub data_dir: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
    pub logits: Option<PathBuf>,

    pub tau: f64,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub nckd_weighting: Option<NckdWeighting>,
    pub mu: f64,
    pub delta: Option<f64>,
    pub lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    pub epochs: usize,

    pub dtm_enabled: Option<bool>,
    pub k_init: Option<usize>,
    pub k_opt: Option<usize>,
    pub k_max: Option<usize>,
    pub easy_frac: f64,
    pub hard_frac: f64,

    pub gsnr_window: usize,
    pub gsnr_sample_every: usize,
    pub gsnr_report_every: usize,
    pub gsnr_per_layer: bool,

    pub student_hidden: Vec<usize>,
    pub teacher_hidden: Vec<usize>,
    pub activation: Activation,

    pub n_per_class: usize,
    pub classes: usize,
    pub components: usize,
    pub dim: usize,
    pub difficulty: f64,

    pub ksearch_epochs: usize,
    pub ksearch_frac: f64,

    /// Keys assigned by the config file or a flag.
    explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::DeepKd,
            seed: 0,
            out: PathBuf::from("out"),
            data_dir: None,
            teacher: None,
            logits: None,
            tau: 4.0,
            alpha: 1.0,
            beta1: 1.0,
            beta2: 1.0,
            nckd_weighting: None,
            mu: 0.9,
            delta: None,
            lr: 0.05,
            lr_decay_epochs: vec![150, 180, 210],
            lr_decay_factor: 0.1,
            batch_size: 64,
            epochs: 240,
            dtm_enabled: None,
            k_init: None,
            k_opt: None,
            k_max: None,
            easy_frac: 0.3,
            hard_frac: 0.7,
            gsnr_window: 200,
            gsnr_sample_every: 1,
            gsnr_report_every: 200,
            gsnr_per_layer: false,
            student_hidden: vec![8],
            teacher_hidden: vec![64, 64],
            activation: Activation::Relu,
            n_per_class: 500,
            classes: 3,
            components: 3,
            dim: 2,
            difficulty: 0.5,
            ksearch_epochs: 40,
            ksearch_frac: 0.2,
            explicit: BTreeSet::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| validation(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(validation(format!(
            "{key}: expected a boolean, got {value:?}"
        ))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_weighting(value: &str) -> Result<Option<NckdWeighting>> {
    match value {
        "auto" => Ok(None),
        "constant" => Ok(Some(NckdWeighting::Constant)),
        "teacher-mass" => Ok(Some(NckdWeighting::TeacherNonTargetMass)),
        other => Err(validation(format!(
            "nckd_weighting: expected auto, constant or teacher-mass, got {other:?}"
        ))),
    }
}

/// Splits `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                column: 1,
                msg: format!("expected key = value, got {line:?}"),
            });
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::default();
        for (k, v) in parse_kv(&text, path)? {
            cfg.set(&k, &v)
                .map_err(|e| validation(format!("{}: {e}", path.display())))?;
        }
        Ok(cfg)
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => self.mode = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "teacher" => self.teacher = Some(PathBuf::from(value)),
            "logits" => self.logits = Some(PathBuf::from(value)),
            "tau" => self.tau = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "nckd_weighting" => self.nckd_weighting = parse_weighting(value)?,
            "mu" => self.mu = parse(key, value)?,
            "delta" => self.delta = auto(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_decay_epochs" => self.lr_decay_epochs = parse_list(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "dtm_enabled" => {
                self.dtm_enabled = if value == "auto" {
                    None
                } else {
                    Some(parse_bool(key, value)?)
                }
            }
            "k_init" => self.k_init = auto(key, value)?,
            "k_opt" => self.k_opt = auto(key, value)?,
            "k_max" => self.k_max = auto(key, value)?,
            "easy_frac" => self.easy_frac = parse(key, value)?,
            "hard_frac" => self.hard_frac = parse(key, value)?,
            "gsnr_window" => self.gsnr_window = parse(key, value)?,
            "gsnr_sample_every" => self.gsnr_sample_every = parse(key, value)?,
            "gsnr_report_every" => self.gsnr_report_every = parse(key, value)?,
            "gsnr_per_layer" => self.gsnr_per_layer = parse_bool(key, value)?,
            "student_hidden" => self.student_hidden = parse_list(key, value)?,
            "teacher_hidden" => self.teacher_hidden = parse_list(key, value)?,
            "activation" => self.activation = value.parse()?,
            "n_per_class" => self.n_per_class = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "components" => self.components = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "difficulty" => self.difficulty = parse(key, value)?,
            "ksearch_epochs" => self.ksearch_epochs = parse(key, value)?,
            "ksearch_frac" => self.ksearch_frac = parse(key, value)?,
            other => return Err(validation(format!("unknown config key {other:?}"))),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<()> {
        for p in pairs {
            let p = p.as_ref();
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| validation(format!("override {p:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(validation(format!(
                    "{name} must be positive and finite, got {v}"
                )))
            }
        };
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(validation(format!(
                    "{name} must be non-negative and finite, got {v}"
                )))
            }
        };
        positive("tau", self.tau)?;
        nonneg("alpha", self.alpha)?;
        nonneg("beta1", self.beta1)?;
        nonneg("beta2", self.beta2)?;
        positive("lr", self.lr)?;
        nonneg("difficulty", self.difficulty)?;
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(validation("lr_decay_factor must lie in (0, 1]"));
        }
        let delta = self.delta();
        for (name, c) in [
            ("mu + delta", self.mu + delta),
            ("mu - delta", self.mu - delta),
        ] {
            if !(0.0..1.0).contains(&c) {
                return Err(validation(format!("{name} = {c} must lie in [0, 1)")));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 || self.ksearch_epochs == 0 {
            return Err(validation(
                "batch_size, epochs and ksearch_epochs must be positive",
            ));
        }
        if self.gsnr_window < 2 || self.gsnr_sample_every == 0 || self.gsnr_report_every == 0 {
            return Err(validation(
                "gsnr_window must be at least 2; gsnr_sample_every and gsnr_report_every positive",
            ));
        }
        if !(0.0 < self.easy_frac && self.easy_frac <= self.hard_frac && self.hard_frac < 1.0) {
            return Err(validation("need 0 < easy_frac <= hard_frac < 1"));
        }
        if !(self.ksearch_frac > 0.0 && self.ksearch_frac <= 1.0) {
            return Err(validation("ksearch_frac must lie in (0, 1]"));
        }
        if self.classes < 2 || self.components == 0 || self.dim == 0 || self.n_per_class < 5 {
            return Err(validation(
                "need classes >= 2, components >= 1, dim >= 1 and n_per_class >= 5",
            ));
        }
        if self.student_hidden.contains(&0) || self.teacher_hidden.contains(&0) {
            return Err(validation("hidden layer sizes must be positive"));
        }
        Ok(())
    }

    pub fn weighting(&self) -> NckdWeighting {
        self.nckd_weighting.unwrap_or(match self.mode {
            Mode::Kd | Mode::Dot => NckdWeighting::TeacherNonTargetMass,
            _ => NckdWeighting::Constant,
        })
    }

    pub fn delta(&self) -> f64 {
        self.delta.unwrap_or(match self.weighting() {
            NckdWeighting::TeacherNonTargetMass => 0.075,
            NckdWeighting::Constant => 0.05,
        })
    }

    pub fn dtm_enabled(&self) -> bool {
        self.mode != Mode::CeOnly && self.dtm_enabled.unwrap_or(self.mode == Mode::DeepKd)
    }

    pub fn loss_weights(&self) -> LossWeights {
        if self.mode == Mode::CeOnly {
            return LossWeights {
                alpha: 1.0,
                beta1: 0.0,
                beta2: 0.0,
            };
        }
        LossWeights {
            alpha: self.alpha,
            beta1: self.beta1,
            beta2: self.beta2,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.lr * self.lr_decay_factor.powi(drops as i32)
    }

    /// The masking curriculum for `num_classes`, or `None` when masking is off.
    pub fn schedule(&self, num_classes: usize, epochs: usize) -> Result<Option<DtmSchedule>> {
        if !self.dtm_enabled() {
            return Ok(None);
        }
        let d = DtmSchedule::with_defaults(num_classes, epochs)?;
        let k_max = self.k_max.unwrap_or(d.k_max());
        let k_init = self.k_init.unwrap_or(d.k_init()).min(k_max);
        let k_opt = self.k_opt.unwrap_or(d.k_opt()).clamp(k_init, k_max);
        DtmSchedule::new(
            num_classes,
            k_init,
            k_opt,
            k_max,
            self.easy_frac,
            self.hard_frac,
            epochs,
        )
        .map(Some)
        .map_err(|e| validation(e.to_string()))
    }

    pub fn gsnr_config(&self) -> GsnrConfig {
        GsnrConfig {
            window: self.gsnr_window,
            sample_every: self.gsnr_sample_every,
            report_every: self.gsnr_report_every,
            segments: Vec::new(),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out.clone())
    }

    pub fn teacher_path(&self) -> PathBuf {
        self.teacher
            .clone()
            .unwrap_or_else(|| self.data_dir().join("teacher.json"))
    }

    pub fn logits_path(&self) -> PathBuf {
        self.logits
            .clone()
            .unwrap_or_else(|| self.data_dir().join("teacher_logits.csv"))
    }

    pub fn dims(hidden: &[usize], input: usize, classes: usize) -> Vec<usize> {
        let mut d = vec![input];
        d.extend_from_slice(hidden);
        d.push(classes);
        d
    }

    /// Distillation keys that were set explicitly but have no effect.
    pub fn ignored_distill_keys(&self) -> Vec<&'static str> {
        DISTILL_KEYS
            .iter()
            .copied()
            .filter(|k| self.is_explicit(k))
            .collect()
    }
}
