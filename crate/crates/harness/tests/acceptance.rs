//! Acceptance suite. Runs every criterion in order and prints one
//! `criterion N: PASS|FAIL` line each with the measured value, the tolerance
//! and the runtime. Exits nonzero if any criterion fails.
//!
//! Run with `cargo test -p deepkd-harness --test acceptance`.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use deepkd_core::distill::{
    ce_loss_and_grad, kd_decomposition_check, nckd_loss_and_grad, tckd_loss_and_grad,
};
use deepkd_core::dtm::{build_mask, DtmSchedule};
use deepkd_core::fd::{central_gradient, max_norm_rel_error};
use deepkd_core::net::ParamGradTriple;
use deepkd_core::numkit::Rng;
use deepkd_core::optim::{GsnrWindow, Momentum, MomentumState, StreamOptimizer, GSNR_EPS};
use deepkd_harness::cli::{cache_logits_cmd, distill_cmd, gen_data_cmd, train_teacher_cmd};
use deepkd_harness::config::{Mode, RunConfig};
use deepkd_harness::gradcheck::gradcheck;

fn report(n: u32, pass: bool, detail: &str, elapsed: Duration, budget: Duration) -> bool {
    let ok = pass && elapsed < budget;
    println!(
        "criterion {n}: {} | {detail} | runtime {:.3}s (limit {:.0}s)",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    ok
}

fn logits(rng: &mut Rng, c: usize, scale: f64) -> Vec<f64> {
    (0..c).map(|_| scale * rng.normal()).collect()
}

fn criterion_1_stream_gradients_match_finite_differences() -> bool {
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-5;
    let start = Instant::now();
    let mut rng = Rng::new(101);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let c = [2, 3, 10, 100][case % 4];
        let tau = [1.0, 2.0, 4.0][case % 3];
        let teacher = logits(&mut rng, c, 3.0);
        let student = logits(&mut rng, c, 3.0);
        let t = rng.below(c);

        let (_, g) = ce_loss_and_grad(&student, t).unwrap();
        let num = central_gradient(|s| ce_loss_and_grad(s, t).unwrap().0, &student, H);
        worst = worst.max(max_norm_rel_error(&g, &num, 1e-8));

        let (_, g) = tckd_loss_and_grad(&teacher, &student, t, tau).unwrap();
        let num = central_gradient(
            |s| tckd_loss_and_grad(&teacher, s, t, tau).unwrap().0,
            &student,
            H,
        );
        worst = worst.max(max_norm_rel_error(&g, &num, 1e-8));

        let (_, g) = nckd_loss_and_grad(&teacher, &student, t, tau, None).unwrap();
        let num = central_gradient(
            |s| nckd_loss_and_grad(&teacher, s, t, tau, None).unwrap().0,
            &student,
            H,
        );
        worst = worst.max(max_norm_rel_error(&g, &num, 1e-8));
    }
    report(
        1,
        worst < TOL,
        &format!("max relative error {worst:.2e} < {TOL:e} (h = {H:e}, 100 instances)"),
        start.elapsed(),
        Duration::from_secs(5),
    )
}

fn criterion_2_streams_sum_to_zero() -> bool {
    const TOL: f64 = 1e-10;
    let start = Instant::now();
    let mut rng = Rng::new(102);
    let mut worst: f64 = 0.0;
    let mut target_exact = true;
    for _ in 0..10_000 {
        let c = 2 + rng.below(99);
        let teacher = logits(&mut rng, c, 3.0);
        let student = logits(&mut rng, c, 3.0);
        let t = rng.below(c);
        let tau = 1.0 + 3.0 * rng.uniform();
        let (_, tog) = ce_loss_and_grad(&student, t).unwrap();
        let (_, tcg) = tckd_loss_and_grad(&teacher, &student, t, tau).unwrap();
        let (_, ncg) = nckd_loss_and_grad(&teacher, &student, t, tau, None).unwrap();
        for g in [&tog, &tcg, &ncg] {
            worst = worst.max(g.iter().sum::<f64>().abs());
        }
        target_exact &= ncg[t] == 0.0;
    }
    report(
        2,
        worst < TOL && target_exact,
        &format!(
            "max |sum| {worst:.2e} < {TOL:e}, NCG target entry exactly 0: {target_exact} (10^4 instances)"
        ),
        start.elapsed(),
        Duration::from_secs(5),
    )
}

fn criterion_3_kl_decomposes() -> bool {
    const TOL: f64 = 1e-10;
    let start = Instant::now();
    let mut rng = Rng::new(103);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let c = 2 + rng.below(99);
        let teacher = logits(&mut rng, c, 3.0);
        let student = logits(&mut rng, c, 3.0);
        let t = rng.below(c);
        let tau = [1.0, 2.0, 4.0][rng.below(3)];
        worst = worst.max(kd_decomposition_check(&teacher, &student, t, tau).unwrap());
    }
    report(
        3,
        worst < TOL,
        &format!("max residual {worst:.2e} < {TOL:e} (1000 instances)"),
        start.elapsed(),
        Duration::from_secs(2),
    )
}

fn criterion_4_tri_buffer_reduces_to_single_buffer() -> bool {
    const TOL: f64 = 1e-12;
    let start = Instant::now();
    let mut rng = Rng::new(104);
    let n = 128;
    let mut tri = MomentumState::new(n, 0.9, 0.0, 0.05).unwrap();
    let mut single = Momentum::new(n, 0.9, 0.05).unwrap();
    for _ in 0..500 {
        let mut draw = || (0..n).map(|_| rng.normal()).collect::<Vec<f64>>();
        let g = ParamGradTriple {
            tog: draw(),
            tcg: draw(),
            ncg: draw(),
        };
        tri.step(&g).unwrap();
        single.step(&g).unwrap();
    }
    let worst = (0..n)
        .map(|i| (tri.v_tog[i] + tri.v_tcg[i] + tri.v_ncg[i] - single.v[i]).abs())
        .fold(0.0, f64::max);
    report(
        4,
        worst < TOL,
        &format!("max buffer difference {worst:.2e} < {TOL:e} (500 steps)"),
        start.elapsed(),
        Duration::from_secs(1),
    )
}

fn brute_gsnr(samples: &[Vec<f64>]) -> f64 {
    let n = samples.len() as f64;
    let d = samples[0].len();
    let mut mean = vec![0.0; d];
    for s in samples {
        for j in 0..d {
            mean[j] += s[j] / n;
        }
    }
    let signal: f64 = mean.iter().map(|m| m * m).sum();
    let mut noise = 0.0;
    for s in samples {
        for j in 0..d {
            noise += (s[j] - mean[j]).powi(2);
        }
    }
    signal / (noise / n + GSNR_EPS)
}

fn window(samples: &[Vec<f64>]) -> GsnrWindow {
    let mut w = GsnrWindow::new("acceptance", samples.len()).unwrap();
    for s in samples {
        w.push(s.clone()).unwrap();
    }
    w
}

fn criterion_5_gsnr_estimator() -> bool {
    const TOL: f64 = 1e-12;
    let start = Instant::now();
    let mut rng = Rng::new(105);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = 2 + rng.below(60);
        let d = 1 + rng.below(50);
        let bias = rng.normal();
        let samples: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| bias + rng.normal()).collect())
            .collect();
        let got = window(&samples).gsnr().unwrap();
        let want = brute_gsnr(&samples);
        worst = worst.max((got - want).abs() / want.abs().max(1.0));
    }
    let pair = window(&[vec![1.0], vec![3.0]]).gsnr().unwrap();
    let alt: Vec<Vec<f64>> = (0..8)
        .map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }])
        .collect();
    let alt = window(&alt).gsnr().unwrap();
    let hand_ok = pair == 4.0 / (1.0 + GSNR_EPS) && alt == 0.0;
    report(
        5,
        worst < TOL && hand_ok,
        &format!(
            "max deviation from brute force {worst:.2e} < {TOL:e}; [1,3] -> {pair}, alternating -> {alt}"
        ),
        start.elapsed(),
        Duration::from_secs(1),
    )
}

fn criterion_6_masking_curriculum() -> bool {
    const TOL: f64 = 1e-12;
    let start = Instant::now();
    let mut rng = Rng::new(106);
    let mut monotone = true;
    for _ in 0..50 {
        let c = 2 + rng.below(200);
        let mut ks = [
            1 + rng.below(c - 1),
            1 + rng.below(c - 1),
            1 + rng.below(c - 1),
        ];
        ks.sort_unstable();
        let mut fr = [0.01 + 0.98 * rng.uniform(), 0.01 + 0.98 * rng.uniform()];
        fr.sort_by(f64::total_cmp);
        let s = DtmSchedule::new(c, ks[0], ks[1], ks[2], fr[0], fr[1], 1 + rng.below(400)).unwrap();
        let seq: Vec<usize> = (0..s.total_epochs())
            .map(|e| s.k_for_epoch(e).unwrap())
            .collect();
        monotone &= seq.windows(2).all(|w| w[0] <= w[1]);
    }
    let preset = DtmSchedule::new(100, 5, 55, 99, 0.3, 0.7, 240).unwrap();
    let ks = [0, 120, 239].map(|e| preset.k_for_epoch(e).unwrap());
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let c = 2 + rng.below(100);
        let teacher = logits(&mut rng, c, 3.0);
        let student = logits(&mut rng, c, 3.0);
        let t = rng.below(c);
        let tau = 1.0 + 3.0 * rng.uniform();
        let mask = build_mask(&teacher, t, c - 1).unwrap();
        let (masked, _) =
            nckd_loss_and_grad(&teacher, &student, t, tau, Some(&mask.selected)).unwrap();
        let (full, _) = nckd_loss_and_grad(&teacher, &student, t, tau, None).unwrap();
        worst = worst.max((masked - full).abs());
    }
    report(
        6,
        monotone && ks == [5, 55, 99] && worst < TOL,
        &format!(
            "50 schedules monotone: {monotone}; preset k(0,120,239) = {ks:?}; full-mask deviation {worst:.2e} < {TOL:e}"
        ),
        start.elapsed(),
        Duration::from_secs(1),
    )
}

fn criterion_7_end_to_end_gradcheck() -> bool {
    let start = Instant::now();
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&[
        "mode=deepkd",
        "classes=5",
        "dim=2",
        "student_hidden=8",
        "seed=7",
    ])
    .unwrap();
    cfg.validate().unwrap();
    let mut lines = Vec::new();
    let mut pass = true;
    for tau in ["1", "4"] {
        cfg.set("tau", tau).unwrap();
        let r = gradcheck(&cfg, 0).unwrap();
        pass &= r.params <= 200 && r.passed() && r.coords_checked == r.params && r.top_k.is_some();
        lines.push(format!(
            "tau {tau}: {} params, k = {:?}, max relative error {:.2e} < 1e-4, mask ok {}",
            r.params, r.top_k, r.max_rel_error, r.mask_ok
        ));
    }
    report(
        7,
        pass,
        &lines.join("; "),
        start.elapsed(),
        Duration::from_secs(30),
    )
}

const STUDENT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const MODES: [Mode; 3] = [Mode::CeOnly, Mode::Kd, Mode::DeepKd];

struct Experiment {
    root: tempfile::TempDir,
    teacher_acc: f64,
    /// Final test accuracy per mode, in seed order.
    accs: Vec<(Mode, Vec<f64>)>,
    elapsed: Duration,
}

impl Experiment {
    fn metrics_path(&self, mode: Mode, seed: u64) -> PathBuf {
        run_dir(self.root.path(), mode, seed).join("metrics.csv")
    }

    fn median(&self, mode: Mode) -> f64 {
        let mut v = self
            .accs
            .iter()
            .find(|(m, _)| *m == mode)
            .unwrap()
            .1
            .clone();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }
}

fn run_dir(root: &Path, mode: Mode, seed: u64) -> PathBuf {
    root.join(format!("{mode}-{seed}"))
}

fn base_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    let data = root.join("data");
    cfg.apply_overrides(&[
        "seed=0",
        &format!("out={}", data.display()),
        "n_per_class=500",
        "classes=3",
        "components=3",
        "dim=2",
        "difficulty=0.5",
        "teacher_hidden=64,64",
        "student_hidden=8",
        "epochs=120",
        "lr=0.005",
        "lr_decay_epochs=80,100",
    ])
    .unwrap();
    cfg
}

/// Data, teacher, logit cache, then five paired students per mode.
fn run_experiment() -> Experiment {
    let start = Instant::now();
    let root = tempfile::tempdir().unwrap();
    let cfg = base_config(root.path());
    cfg.validate().unwrap();
    gen_data_cmd(&cfg).unwrap();
    let teacher_acc = train_teacher_cmd(&cfg).unwrap();
    cache_logits_cmd(&cfg).unwrap();

    let mut accs = Vec::new();
    for mode in MODES {
        let mut per_seed = Vec::new();
        for seed in STUDENT_SEEDS {
            let mut s = base_config(root.path());
            s.apply_overrides(&[
                format!("mode={mode}"),
                format!("seed={seed}"),
                format!("data_dir={}", root.path().join("data").display()),
                format!("out={}", run_dir(root.path(), mode, seed).display()),
            ])
            .unwrap();
            if mode != Mode::CeOnly {
                s.set("nckd_weighting", "teacher-mass").unwrap();
            }
            s.validate().unwrap();
            let res = distill_cmd(&s).unwrap();
            per_seed.push(res.metrics.last().unwrap().test_acc);
        }
        accs.push((mode, per_seed));
    }
    Experiment {
        root,
        teacher_acc,
        accs,
        elapsed: start.elapsed(),
    }
}

fn criterion_8_directional_experiment(e: &Experiment) -> bool {
    let ce = e.median(Mode::CeOnly);
    let kd = e.median(Mode::Kd);
    let deep = e.median(Mode::DeepKd);
    for (mode, accs) in &e.accs {
        println!("  {mode}: {accs:?}");
    }
    report(
        8,
        e.teacher_acc >= 0.95 && deep >= kd && kd >= ce && deep >= ce,
        &format!(
            "teacher {:.4} >= 0.95; medians deepkd {deep:.4} >= kd {kd:.4} >= ce-only {ce:.4}",
            e.teacher_acc
        ),
        e.elapsed,
        Duration::from_secs(300),
    )
}

fn criterion_9_repeat_runs_are_byte_identical(first: &Experiment) -> bool {
    let start = Instant::now();
    let second = run_experiment();
    let mut mismatches = Vec::new();
    let mut compared = 0;
    for mode in MODES {
        for seed in STUDENT_SEEDS {
            let a = std::fs::read(first.metrics_path(mode, seed)).unwrap();
            let b = std::fs::read(second.metrics_path(mode, seed)).unwrap();
            compared += 1;
            if a != b {
                mismatches.push(format!("{mode}-{seed}"));
            }
        }
    }
    let teacher =
        |e: &Experiment| std::fs::read(e.root.path().join("data/teacher_metrics.csv")).unwrap();
    compared += 1;
    if teacher(first) != teacher(&second) {
        mismatches.push("teacher".into());
    }
    report(
        9,
        mismatches.is_empty(),
        &format!("{compared} metrics files compared, mismatches: {mismatches:?}"),
        start.elapsed(),
        Duration::from_secs(300),
    )
}

fn main() {
    let mut results = vec![
        criterion_1_stream_gradients_match_finite_differences(),
        criterion_2_streams_sum_to_zero(),
        criterion_3_kl_decomposes(),
        criterion_4_tri_buffer_reduces_to_single_buffer(),
        criterion_5_gsnr_estimator(),
        criterion_6_masking_curriculum(),
        criterion_7_end_to_end_gradcheck(),
    ];
    let experiment = run_experiment();
    results.push(criterion_8_directional_experiment(&experiment));
    results.push(criterion_9_repeat_runs_are_byte_identical(&experiment));
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
