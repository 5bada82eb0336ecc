//! Schedule monotonicity, the preset curriculum, and full-selection masks.

use deepkd_core::distill::nckd_loss_and_grad;
use deepkd_core::dtm::{build_mask, DtmSchedule};
use deepkd_core::numkit::Rng;
use proptest::prelude::*;

fn random_schedule(rng: &mut Rng) -> DtmSchedule {
    let c = 2 + rng.below(200);
    let mut ks = [
        1 + rng.below(c - 1),
        1 + rng.below(c - 1),
        1 + rng.below(c - 1),
    ];
    ks.sort_unstable();
    let mut fr = [0.01 + 0.98 * rng.uniform(), 0.01 + 0.98 * rng.uniform()];
    fr.sort_by(f64::total_cmp);
    DtmSchedule::new(c, ks[0], ks[1], ks[2], fr[0], fr[1], 1 + rng.below(400)).unwrap()
}

#[test]
fn random_schedules_never_shrink_k() {
    let mut rng = Rng::new(51);
    for _ in 0..50 {
        let s = random_schedule(&mut rng);
        let ks: Vec<usize> = (0..s.total_epochs())
            .map(|e| s.k_for_epoch(e).unwrap())
            .collect();
        assert!(ks.windows(2).all(|w| w[0] <= w[1]), "{s:?}: {ks:?}");
        assert!(ks.iter().all(|&k| (s.k_init()..=s.k_max()).contains(&k)));
        assert_eq!(ks[0], s.k_init());
        if s.total_epochs() >= 2 {
            assert_eq!(*ks.last().unwrap(), s.k_max());
        }
    }
}

#[test]
fn preset_curriculum() {
    let s = DtmSchedule::new(100, 5, 55, 99, 0.3, 0.7, 240).unwrap();
    assert_eq!(s.k_for_epoch(0).unwrap(), 5);
    assert_eq!(s.k_for_epoch(120).unwrap(), 55);
    assert_eq!(s.k_for_epoch(239).unwrap(), 99);
    assert_eq!(DtmSchedule::with_defaults(100, 240).unwrap(), s);
}

#[test]
fn full_selection_reproduces_unmasked_loss() {
    let mut rng = Rng::new(52);
    for _ in 0..200 {
        let c = 2 + rng.below(100);
        let teacher: Vec<f64> = (0..c).map(|_| 3.0 * rng.normal()).collect();
        let student: Vec<f64> = (0..c).map(|_| 3.0 * rng.normal()).collect();
        let t = rng.below(c);
        let tau = 1.0 + 3.0 * rng.uniform();
        let mask = build_mask(&teacher, t, c - 1).unwrap();
        let (masked, gm) =
            nckd_loss_and_grad(&teacher, &student, t, tau, Some(&mask.selected)).unwrap();
        let (full, gf) = nckd_loss_and_grad(&teacher, &student, t, tau, None).unwrap();
        assert!((masked - full).abs() < 1e-12);
        for (a, b) in gm.iter().zip(&gf) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn unselected_classes_do_not_affect_the_masked_loss() {
    let mut rng = Rng::new(53);
    for _ in 0..100 {
        let c = 4 + rng.below(30);
        let teacher: Vec<f64> = (0..c).map(|_| 2.0 * rng.normal()).collect();
        let mut student: Vec<f64> = (0..c).map(|_| 2.0 * rng.normal()).collect();
        let t = rng.below(c);
        let mask = build_mask(&teacher, t, 1 + rng.below(c - 2)).unwrap();
        let sel = Some(mask.selected.as_slice());
        let (before, g) = nckd_loss_and_grad(&teacher, &student, t, 2.0, sel).unwrap();
        for i in (0..c).filter(|i| !mask.selected.contains(i)) {
            assert_eq!(g[i], 0.0);
            student[i] += 5.0 * rng.normal();
        }
        let (after, _) = nckd_loss_and_grad(&teacher, &student, t, 2.0, sel).unwrap();
        assert_eq!(before, after);
    }
}

proptest! {
    #[test]
    fn mask_keeps_the_largest_teacher_logits(
        (teacher, t, k) in (3usize..60).prop_flat_map(|c| (
            prop::collection::vec(-5.0f64..5.0, c),
            0..c,
            1..c,
        ))
    ) {
        let m = build_mask(&teacher, t, k).unwrap();
        prop_assert_eq!(m.selected.len(), k);
        prop_assert!(!m.selected.contains(&t));
        prop_assert!(m.selected.windows(2).all(|w| w[0] < w[1]));
        let weakest_kept = m.selected.iter().map(|&i| teacher[i]).fold(f64::INFINITY, f64::min);
        for i in (0..teacher.len()).filter(|&i| i != t && !m.selected.contains(&i)) {
            prop_assert!(teacher[i] <= weakest_kept);
        }
    }
}
