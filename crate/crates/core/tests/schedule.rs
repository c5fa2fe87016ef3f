mod common;

use common::lr_oracle;
use fpdanet::schedule::{compute_lr_bounds, lr_at_epoch, lr_csv, lr_table, LRScheduleConfig, Scaling};
use fpdanet::Error;
use proptest::prelude::*;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-15 * b.abs()
}

#[test]
fn table_matches_oracle_exactly() {
    let cfg = LRScheduleConfig::default();
    for b in [1, 2, 3, 7, 16, 32, 63, 64, 65, 128, 640, 6400] {
        let table = lr_table(&cfg, b).unwrap();
        assert_eq!(table.len(), 200);
        for (e, lr) in table.iter().enumerate() {
            assert_eq!(*lr, lr_oracle(b, e), "batch {b}, epoch {e}");
        }
    }
}

#[test]
fn nominal_batch_values() {
    let cfg = LRScheduleConfig::default();
    let b = compute_lr_bounds(&cfg, 64).unwrap();
    assert_eq!((b.lr_max, b.lr_min), (0.001, 1e-5));
    let at = |e| lr_at_epoch(&b, &cfg, e).unwrap();
    assert_eq!(at(0), 0.001);
    assert_eq!(at(119), 0.001);
    assert!(close(at(120), 1e-4));
    assert!(close(at(169), 1e-4));
    assert!(close(at(170), 1e-5));
    assert!(close(at(199), 1e-5));
}

#[test]
fn small_batches_scale_down() {
    let cfg = LRScheduleConfig::default();
    let b16 = compute_lr_bounds(&cfg, 16).unwrap();
    assert_eq!((b16.lr_max, b16.lr_min), (0.001, 1e-5));
    let b2 = compute_lr_bounds(&cfg, 2).unwrap();
    assert!(close(b2.lr_max, 3.125e-4));
    assert!(close(b2.lr_min, 3.125e-6));
    assert!(close(lr_at_epoch(&b2, &cfg, 120).unwrap(), 3.125e-5));
    assert!(close(lr_at_epoch(&b2, &cfg, 199).unwrap(), 3.125e-6));
}

#[test]
fn literal_scaling_saturates() {
    let cfg = LRScheduleConfig { scaling: Scaling::Literal, ..Default::default() };
    for b in [1, 2, 16, 64] {
        let bounds = compute_lr_bounds(&cfg, b).unwrap();
        assert_eq!((bounds.lr_max, bounds.lr_min), (0.001, 1e-5), "batch {b}");
    }
}

#[test]
fn milestones_round_to_epochs() {
    let cfg = LRScheduleConfig { total_epochs: 10, ..Default::default() };
    assert_eq!(cfg.milestone_epochs(), vec![6, 9]);
    let cfg = LRScheduleConfig { total_epochs: 3, ..Default::default() };
    assert_eq!(cfg.milestone_epochs(), vec![2, 3]);
    assert_eq!(lr_table(&cfg, 64).unwrap(), vec![0.001, 0.001, 0.0001]);
}

#[test]
fn csv_lists_every_epoch() {
    let text = lr_csv(&LRScheduleConfig::default(), 64).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,lr");
    assert_eq!(lines[1], "0,0.001");
    assert_eq!(lines.len(), 201);
    for (e, line) in lines[1..].iter().enumerate() {
        let (epoch, lr) = line.split_once(',').unwrap();
        assert_eq!(epoch.parse::<usize>().unwrap(), e);
        assert_eq!(lr.parse::<f64>().unwrap(), lr_oracle(64, e));
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let cfg = LRScheduleConfig::default();
    assert!(matches!(compute_lr_bounds(&cfg, 0), Err(Error::Input(_))));
    let b = compute_lr_bounds(&cfg, 8).unwrap();
    assert!(lr_at_epoch(&b, &cfg, 200).is_err());
    for bad in [
        LRScheduleConfig { total_epochs: 0, ..Default::default() },
        LRScheduleConfig { nbs: 0, ..Default::default() },
        LRScheduleConfig { decay_factor: 1.5, ..Default::default() },
        LRScheduleConfig { lr_min_init: 0.1, ..Default::default() },
        LRScheduleConfig { lr_min_lim: 0.01, ..Default::default() },
        LRScheduleConfig { decay_milestones: vec![1.2], ..Default::default() },
    ] {
        assert!(matches!(compute_lr_bounds(&bad, 8), Err(Error::Config(_))), "{bad:?}");
    }
}

proptest! {
    #[test]
    fn bounds_are_clamped_and_ordered(b in 1usize..100_000) {
        let cfg = LRScheduleConfig::default();
        let bounds = compute_lr_bounds(&cfg, b).unwrap();
        prop_assert!((1e-4..=1e-3).contains(&bounds.lr_max));
        prop_assert!((1e-6..=1e-5).contains(&bounds.lr_min));
        prop_assert!(bounds.lr_min <= bounds.lr_max);
    }

    #[test]
    fn rate_never_falls_with_batch(b in 1usize..10_000, extra in 1usize..500, e in 0usize..200) {
        let cfg = LRScheduleConfig::default();
        let small = lr_at_epoch(&compute_lr_bounds(&cfg, b).unwrap(), &cfg, e).unwrap();
        let large = lr_at_epoch(&compute_lr_bounds(&cfg, b + extra).unwrap(), &cfg, e).unwrap();
        prop_assert!(small <= large);
    }

    #[test]
    fn rate_never_rises_with_epoch(b in 1usize..10_000) {
        let cfg = LRScheduleConfig::default();
        let bounds = compute_lr_bounds(&cfg, b).unwrap();
        let table = lr_table(&cfg, b).unwrap();
        prop_assert!(table.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(table.iter().all(|&lr| lr >= bounds.lr_min && lr <= bounds.lr_max));
    }
}
