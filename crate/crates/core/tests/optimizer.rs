//! Buffer linearity, the GSNR estimator against a brute-force evaluation, and
//! the steady-state behavior of the tracked buffers.

use deepkd_core::net::ParamGradTriple;
use deepkd_core::numkit::Rng;
use deepkd_core::optim::{
    DotState, GsnrConfig, GsnrTracker, GsnrWindow, Momentum, MomentumState, StreamOptimizer,
    GSNR_EPS,
};
use proptest::prelude::*;

fn random_triple(rng: &mut Rng, n: usize) -> ParamGradTriple {
    let mut draw = || (0..n).map(|_| rng.normal()).collect::<Vec<f64>>();
    ParamGradTriple {
        tog: draw(),
        tcg: draw(),
        ncg: draw(),
    }
}

#[test]
fn tri_buffer_without_delta_matches_single_buffer() {
    let mut rng = Rng::new(41);
    let n = 64;
    let mut tri = MomentumState::new(n, 0.9, 0.0, 0.05).unwrap();
    let mut single = Momentum::new(n, 0.9, 0.05).unwrap();
    for _ in 0..500 {
        let g = random_triple(&mut rng, n);
        let d_tri = tri.step(&g).unwrap();
        let d_single = single.step(&g).unwrap();
        for (a, b) in d_tri.iter().zip(&d_single) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    for i in 0..n {
        let sum = tri.v_tog[i] + tri.v_tcg[i] + tri.v_ncg[i];
        assert!((sum - single.v[i]).abs() < 1e-12);
    }
}

#[test]
fn two_buffer_without_delta_matches_single_buffer() {
    let mut rng = Rng::new(42);
    let n = 32;
    let mut dot = DotState::new(n, 0.9, 0.0, 0.1).unwrap();
    let mut single = Momentum::new(n, 0.9, 0.1).unwrap();
    for _ in 0..100 {
        let g = random_triple(&mut rng, n);
        dot.step(&g).unwrap();
        single.step(&g).unwrap();
    }
    for i in 0..n {
        assert!((dot.v_ce[i] + dot.v_kd[i] - single.v[i]).abs() < 1e-12);
    }
}

#[test]
fn updates_stay_finite_for_bounded_gradients() {
    let mut rng = Rng::new(43);
    let mut tri = MomentumState::new(8, 0.9, 0.075, 0.05).unwrap();
    for _ in 0..10_000 {
        let g = random_triple(&mut rng, 8);
        assert!(tri.step(&g).unwrap().iter().all(|v| v.is_finite()));
    }
}

/// The estimator written out directly from its definition.
fn brute_gsnr(samples: &[Vec<f64>]) -> f64 {
    let n = samples.len() as f64;
    let d = samples[0].len();
    let mut signal = 0.0;
    let mut mean = vec![0.0; d];
    for j in 0..d {
        mean[j] = samples.iter().map(|s| s[j]).sum::<f64>() / n;
        signal += mean[j] * mean[j];
    }
    let mut noise = 0.0;
    for s in samples {
        noise += (0..d).map(|j| (s[j] - mean[j]).powi(2)).sum::<f64>();
    }
    signal / (noise / n + GSNR_EPS)
}

fn filled(samples: &[Vec<f64>]) -> GsnrWindow {
    let mut w = GsnrWindow::new("w", samples.len()).unwrap();
    for s in samples {
        w.push(s.clone()).unwrap();
    }
    w
}

#[test]
fn gsnr_matches_brute_force_on_random_windows() {
    let mut rng = Rng::new(44);
    for _ in 0..100 {
        let n = 2 + rng.below(50);
        let d = 1 + rng.below(40);
        let bias = rng.normal();
        let samples: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| bias + rng.normal()).collect())
            .collect();
        let got = filled(&samples).gsnr().unwrap();
        let want = brute_gsnr(&samples);
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
}

#[test]
fn gsnr_hand_cases() {
    let v = filled(&[vec![1.0], vec![3.0]]).gsnr().unwrap();
    assert_eq!(v, 4.0 / (1.0 + GSNR_EPS));
    let alt: Vec<Vec<f64>> = (0..10)
        .map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }])
        .collect();
    assert_eq!(filled(&alt).gsnr().unwrap(), 0.0);
}

proptest! {
    #[test]
    fn gsnr_is_invariant_to_duplicating_the_window(
        samples in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 2..20)
    ) {
        let doubled: Vec<Vec<f64>> = samples.iter().chain(&samples).cloned().collect();
        let a = filled(&samples).gsnr().unwrap();
        let b = filled(&doubled).gsnr().unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn gsnr_is_scale_invariant_away_from_the_floor(
        samples in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 3..20),
        scale in 0.1f64..10.0,
    ) {
        let w = filled(&samples);
        let scaled: Vec<Vec<f64>> =
            samples.iter().map(|s| s.iter().map(|v| v * scale).collect()).collect();
        let ws = filled(&scaled);
        prop_assume!(brute_gsnr(&samples) < 1e6);
        let (a, b) = (w.gsnr().unwrap(), ws.gsnr().unwrap());
        prop_assert!((a - b).abs() <= 1e-6 * a.max(1e-3));
    }
}

#[test]
fn constant_gradients_saturate_and_buffers_settle() {
    let cfg = GsnrConfig {
        window: 20,
        report_every: 100,
        ..GsnrConfig::default()
    };
    let mut tracker = GsnrTracker::new(cfg).unwrap();
    let (mu, delta) = (0.9, 0.075);
    let mut opt = MomentumState::new(2, mu, delta, 0.01).unwrap();
    let g = ParamGradTriple {
        tog: vec![1.0, -2.0],
        tcg: vec![0.5, 0.5],
        ncg: vec![-1.0, 0.25],
    };
    let mut last = None;
    for step in 1..=1000 {
        opt.step(&g).unwrap();
        last = tracker.record(step, &g, &opt).unwrap().or(last);
    }
    for i in 0..2 {
        assert!((opt.v_tog[i] - g.tog[i] / (1.0 - mu - delta)).abs() < 1e-9);
        assert!((opt.v_tcg[i] - g.tcg[i] / (1.0 - mu + delta)).abs() < 1e-9);
        assert!((opt.v_ncg[i] - g.ncg[i] / (1.0 - mu - delta)).abs() < 1e-9);
    }
    let report = last.unwrap();
    assert_eq!(report.step, 920);
    for row in &report.rows {
        let norm2 = match row.stream.as_str() {
            "tog" => 5.0,
            "tcg" => 0.5,
            _ => 1.0625,
        };
        assert!((row.gsnr - norm2 / GSNR_EPS).abs() / (norm2 / GSNR_EPS) < 1e-9);
        assert!(row.bsnr.unwrap() > 1e6);
    }
}
