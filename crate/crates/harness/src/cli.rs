//! The `deepkd` command line and the subcommands behind it.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, CommandFactory, FromArgMatches, Parser, Subcommand};
use deepkd_core::net::{load_model, save_model};
use deepkd_core::optim::save_gsnr_csv;

use crate::config::{validation, Mode, RunConfig};
use crate::data::{gen_data, read_logits, read_split, write_dataset, write_logits, GenParams};
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck, GradcheckReport};
use crate::ksearch::{ksearch, KsearchResult};
use crate::train::{
    eval_threads, fit, predict_all, write_metrics, write_table, write_timings, FitResult, FitSpec,
};

#[derive(Debug, Parser)]
#[command(
    name = "deepkd",
    version,
    about = "Decoupled knowledge distillation experiments"
)]
struct Cli {
    /// Flat key = value config file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// kd | dkd | dot | deepkd | ce-only
    #[arg(long, global = true, value_name = "M")]
    mode: Option<String>,
    /// Override any config key; repeatable, before or after the subcommand.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-mixture train/test split.
    GenData,
    /// Train the teacher with cross-entropy only.
    TrainTeacher,
    /// Cache the teacher's raw logits on the training split.
    CacheLogits,
    /// Train a student with the configured mode.
    Distill,
    /// Compare the analytic parameter gradient with finite differences.
    Gradcheck {
        /// Coordinates to check; 0 checks all of them.
        #[arg(long, default_value_t = 0)]
        samples: usize,
    },
    /// Summarize a GSNR CSV written by `distill`.
    GsnrReport {
        /// Defaults to OUT/gsnr.csv.
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
    },
    /// Static-k runs on a subsample to pick the plateau k.
    Ksearch {
        /// Comma-separated k values; defaults to 1..=C-1.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<usize>,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| {
        Error::Core(deepkd_core::Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn warn_ignored(cfg: &RunConfig, what: &str) {
    for key in cfg.ignored_distill_keys() {
        log::warn!("{what} ignores distillation key {key:?}");
    }
}

pub fn gen_data_cmd(cfg: &RunConfig) -> Result<(usize, usize)> {
    let (train, test) = gen_data(GenParams {
        seed: cfg.seed,
        n_per_class: cfg.n_per_class,
        classes: cfg.classes,
        components: cfg.components,
        dim: cfg.dim,
        difficulty: cfg.difficulty,
    })?;
    let dir = cfg.data_dir();
    ensure_dir(&dir)?;
    write_dataset(&train, &dir.join("train.csv"))?;
    write_dataset(&test, &dir.join("test.csv"))?;
    Ok((train.len(), test.len()))
}

/// Trains the teacher; returns its final test accuracy.
pub fn train_teacher_cmd(cfg: &RunConfig) -> Result<f64> {
    warn_ignored(cfg, "train-teacher");
    let mut tcfg = cfg.clone();
    tcfg.mode = Mode::CeOnly;
    let (train, test) = read_split(&cfg.data_dir())?;
    let res = fit(FitSpec {
        cfg: &tcfg,
        dims: RunConfig::dims(&cfg.teacher_hidden, train.dim(), train.num_classes),
        train: &train,
        test: &test,
        teacher: None,
        epochs: cfg.epochs,
        schedule: None,
        track_gsnr: false,
    })?;
    ensure_dir(&cfg.out)?;
    let path = cfg.teacher_path();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    save_model(&res.model, &path)?;
    write_metrics(&cfg.out.join("teacher_metrics.csv"), &res.metrics)?;
    let acc = res.metrics.last().map_or(0.0, |m| m.test_acc);
    log::info!(
        "teacher test accuracy {acc:.4} (majority rate {:.4})",
        test.majority_rate()
    );
    Ok(acc)
}

/// Writes the logit cache; returns its row count.
pub fn cache_logits_cmd(cfg: &RunConfig) -> Result<usize> {
    let teacher = load_model(&cfg.teacher_path())?;
    let (train, _) = read_split(&cfg.data_dir())?;
    if teacher.input_dim() != train.dim() {
        return Err(validation(format!(
            "teacher expects {} features, dataset has {}",
            teacher.input_dim(),
            train.dim()
        ))
        .into());
    }
    let logits = predict_all(&teacher, &train.features, eval_threads())?;
    let path = cfg.logits_path();
    write_logits(&logits, &path)?;
    Ok(logits.rows())
}

pub fn distill_cmd(cfg: &RunConfig) -> Result<FitResult> {
    if cfg.mode == Mode::CeOnly {
        warn_ignored(cfg, "ce-only mode");
    }
    let (train, test) = read_split(&cfg.data_dir())?;
    let logits = if cfg.mode == Mode::CeOnly {
        None
    } else {
        Some(read_logits(&cfg.logits_path())?)
    };
    let c = match &logits {
        Some(l) => l.cols(),
        None => train.num_classes,
    };
    let mut train = train;
    let mut test = test;
    if c < train.num_classes {
        return Err(validation(format!(
            "teacher logits have {c} classes but the data has {}",
            train.num_classes
        ))
        .into());
    }
    train.num_classes = c;
    test.num_classes = c;
    let res = fit(FitSpec {
        cfg,
        dims: RunConfig::dims(&cfg.student_hidden, train.dim(), c),
        train: &train,
        test: &test,
        teacher: logits.as_ref(),
        epochs: cfg.epochs,
        schedule: cfg.schedule(c, cfg.epochs)?,
        track_gsnr: true,
    })?;
    ensure_dir(&cfg.out)?;
    write_metrics(&cfg.out.join("metrics.csv"), &res.metrics)?;
    write_timings(&cfg.out.join("timings.csv"), &res.metrics)?;
    save_gsnr_csv(&cfg.out.join("gsnr.csv"), &res.gsnr)?;
    save_model(&res.model, &cfg.out.join("student.json"))?;
    Ok(res)
}

pub fn gradcheck_cmd(cfg: &RunConfig, samples: usize) -> Result<GradcheckReport> {
    gradcheck(cfg, samples)
}

#[derive(Debug, Default)]
struct StreamSummary {
    reports: usize,
    gsnr_sum: f64,
    bsnr_sum: f64,
    bsnr_count: usize,
    last_gsnr: f64,
    last_bsnr: Option<f64>,
}

/// Mean and final GSNR / BSNR per stream, in first-seen order.
pub fn gsnr_report_cmd(path: &Path) -> Result<String> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::Reader::from_reader(file);
    let mut streams: Vec<(String, StreamSummary)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            Error::Core(deepkd_core::Error::Parse {
                path: path.to_path_buf(),
                line: e.position().map_or(0, |p| p.line() as usize),
                column: 0,
                msg: e.to_string(),
            })
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |msg: &str| {
            Error::Core(deepkd_core::Error::Parse {
                path: path.to_path_buf(),
                line,
                column: 0,
                msg: msg.to_string(),
            })
        };
        if rec.len() != 4 {
            return Err(bad("expected step,stream,gsnr,bsnr"));
        }
        let gsnr: f64 = rec[2].parse().map_err(|_| bad("bad gsnr value"))?;
        let bsnr: Option<f64> = if rec[3].is_empty() {
            None
        } else {
            Some(rec[3].parse().map_err(|_| bad("bad bsnr value"))?)
        };
        let name = rec[1].to_string();
        let i = match streams.iter().position(|(n, _)| *n == name) {
            Some(i) => i,
            None => {
                streams.push((name, StreamSummary::default()));
                streams.len() - 1
            }
        };
        let s = &mut streams[i].1;
        s.reports += 1;
        s.gsnr_sum += gsnr;
        s.last_gsnr = gsnr;
        s.last_bsnr = bsnr;
        if let Some(b) = bsnr {
            s.bsnr_sum += b;
            s.bsnr_count += 1;
        }
    }
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>8} {:>12} {:>12} {:>12} {:>12}",
        "stream", "reports", "mean_gsnr", "last_gsnr", "mean_bsnr", "last_bsnr"
    );
    for (name, s) in &streams {
        let fmt_opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4e}"));
        let mean_b = (s.bsnr_count > 0).then(|| s.bsnr_sum / s.bsnr_count as f64);
        let _ = writeln!(
            out,
            "{:<16} {:>8} {:>12.4e} {:>12.4e} {:>12} {:>12}",
            name,
            s.reports,
            s.gsnr_sum / s.reports as f64,
            s.last_gsnr,
            fmt_opt(mean_b),
            fmt_opt(s.last_bsnr)
        );
    }
    Ok(out)
}

pub fn ksearch_cmd(cfg: &RunConfig, grid: &[usize]) -> Result<KsearchResult> {
    let (mut train, mut test) = read_split(&cfg.data_dir())?;
    let logits = read_logits(&cfg.logits_path())?;
    let c = logits.cols().max(train.num_classes);
    train.num_classes = c;
    test.num_classes = c;
    if logits.rows() != train.len() {
        return Err(validation(format!(
            "logit cache has {} rows, training split has {}",
            logits.rows(),
            train.len()
        ))
        .into());
    }
    let grid: Vec<usize> = if grid.is_empty() {
        (1..c).collect()
    } else {
        grid.to_vec()
    };
    let res = ksearch(cfg, &grid, &train, &test, &logits)?;
    ensure_dir(&cfg.out)?;
    let rows: Vec<String> = res.rows.iter().map(|(k, a)| format!("{k},{a}")).collect();
    write_table(&cfg.out.join("ksearch.csv"), "k,test_acc", &rows)?;
    Ok(res)
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &cli.out {
        cfg.set("out", &out.to_string_lossy())?;
    }
    if let Some(mode) = &cli.mode {
        cfg.set("mode", mode)?;
    }
    cfg.apply_overrides(&cli.set)?;
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = build_config(cli)?;
    match &cli.command {
        Command::GenData => {
            let (n_train, n_test) = gen_data_cmd(&cfg)?;
            println!(
                "wrote {n_train} train / {n_test} test rows to {}",
                cfg.data_dir().display()
            );
        }
        Command::TrainTeacher => {
            let acc = train_teacher_cmd(&cfg)?;
            println!("teacher test accuracy {acc:.4}");
        }
        Command::CacheLogits => {
            let rows = cache_logits_cmd(&cfg)?;
            println!(
                "cached {rows} logit rows to {}",
                cfg.logits_path().display()
            );
        }
        Command::Distill => {
            let res = distill_cmd(&cfg)?;
            let last = res.metrics.last().expect("at least one epoch");
            println!(
                "{} student test accuracy {:.4} after {} epochs",
                cfg.mode,
                last.test_acc,
                res.metrics.len()
            );
        }
        Command::Gradcheck { samples } => {
            let r = gradcheck_cmd(&cfg, *samples)?;
            println!(
                "gradcheck: {} of {} parameters, max relative error {:.3e} (coordinate {}), mask {}",
                r.coords_checked,
                r.params,
                r.max_rel_error,
                r.worst_coord,
                if r.mask_ok { "ok" } else { "LEAKS" }
            );
            if !r.passed() {
                return Err(Error::Runtime("gradcheck failed".into()));
            }
            println!("gradcheck passed");
        }
        Command::GsnrReport { input } => {
            let path = input.clone().unwrap_or_else(|| cfg.out.join("gsnr.csv"));
            print!("{}", gsnr_report_cmd(&path)?);
        }
        Command::Ksearch { grid } => {
            let res = ksearch_cmd(&cfg, grid)?;
            println!("k,test_acc");
            for (k, a) in &res.rows {
                println!("{k},{a}");
            }
            println!("recommended k_opt = {}", res.best_k);
        }
    }
    Ok(())
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cmd = Cli::command().mut_subcommands(|s| {
        s.arg(
            Arg::new("set")
                .long("set")
                .value_name("KEY=VALUE")
                .action(ArgAction::Append)
                .help("Override any config key; repeatable"),
        )
    });
    let parsed = cmd
        .try_get_matches_from(args)
        .and_then(|m| Ok((Cli::from_arg_matches(&m)?, m)));
    let cli = match parsed {
        Ok((mut cli, m)) => {
            if let Some((_, sub)) = m.subcommand() {
                cli.set
                    .extend(sub.get_many::<String>("set").into_iter().flatten().cloned());
            }
            cli
        }
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
