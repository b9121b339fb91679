mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpseg_core::dataset::{ClassTable, PanopticMap, VOID_SEMANTIC};
use vpseg_core::stq::{compute_aq, compute_sq, compute_stq, StqAccumulator};

use common::video::{id_switch_video, random_video, streaming, Video};
use common::{naive_aq, naive_sq};

#[test]
fn two_hundred_random_videos_match_brute_force() {
    assert_eq!(common::video::stq_suite(), 0.5);
}

#[test]
fn multi_sequence_batches_match_brute_force() {
    let classes = ClassTable::default();
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    for _ in 0..50 {
        let videos: Vec<Video> = (0..rng.random_range(2..=4)).map(|_| random_video(&mut rng)).collect();
        let (aq, sq) = streaming(&videos, &classes);
        assert_eq!(aq, naive_aq(&videos, &classes));
        assert_eq!(sq, naive_sq(&videos, &classes));
    }
}

#[test]
fn id_switch_per_track_score() {
    let classes = ClassTable::default();
    let (pred, gt) = id_switch_video();
    let (aq, tracks) = compute_aq(&pred, &gt, &classes).unwrap();
    assert_eq!(aq, 0.5);
    assert_eq!((tracks[0].semantic, tracks[0].instance, tracks[0].size), (3, 7, 40));
}

#[test]
fn half_swapped_two_class_frame() {
    let classes = ClassTable::default();
    let gt = PanopticMap::new(4, 1, vec![0, 0, 1, 1], vec![0; 4]).unwrap();
    let pred = PanopticMap::new(4, 1, vec![0, 1, 0, 1], vec![0; 4]).unwrap();
    let (sq, per_class) = compute_sq(&[pred], &[gt], &classes).unwrap();
    assert!((sq - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(per_class.iter().filter(|c| c.present).count(), 2);
}

#[test]
fn void_ground_truth_is_ignored() {
    let classes = ClassTable::default();
    let gt = PanopticMap::new(3, 1, vec![0, VOID_SEMANTIC, 3], vec![0, 0, 1]).unwrap();
    let pred = PanopticMap::new(3, 1, vec![0, 4, 3], vec![0, 9, 1]).unwrap();
    let mut acc = StqAccumulator::new();
    acc.add_sequence("a", &[pred], &[gt], &classes).unwrap();
    let r = acc.report(&classes).unwrap();
    assert_eq!((r.stq, r.aq, r.sq), (1.0, 1.0, 1.0));
    assert_eq!((r.evaluated_pixels, r.void_pixels), (2, 1));
}

#[test]
fn table_one_identities() {
    for (aq, sq, stq) in [(0.5516, 0.6071, 0.5787), (0.4555, 0.5981, 0.5219)] {
        assert!((compute_stq(aq, sq).unwrap() - stq).abs() <= 0.0005);
    }
    assert!(compute_stq(1.5, 0.5).is_err());
    assert!(compute_stq(f64::NAN, 0.5).is_err());
}

#[test]
fn misaligned_frame_counts_are_rejected() {
    let classes = ClassTable::default();
    let m = PanopticMap::filled(2, 2, 0, 0);
    let mut acc = StqAccumulator::new();
    assert!(acc.add_sequence("a", &[m.clone(), m.clone()], &[m.clone()], &classes).is_err());
    assert!(acc.add_sequence("b", &[PanopticMap::filled(3, 2, 0, 0)], &[m], &classes).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merge_order_does_not_change_the_report(seed in any::<u64>(), order in any::<u64>()) {
        let classes = ClassTable::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let videos: Vec<Video> = (0..4).map(|_| random_video(&mut rng)).collect();
        let mut parts: Vec<StqAccumulator> = videos
            .iter()
            .enumerate()
            .map(|(i, (p, g))| {
                let mut a = StqAccumulator::new();
                a.add_sequence(&format!("s{i}"), p, g, &classes).unwrap();
                a
            })
            .collect();
        let forward = parts.iter().cloned().try_fold(StqAccumulator::new(), |a, b| a.merge(b)).unwrap();
        let mut shuffle = ChaCha8Rng::seed_from_u64(order);
        for i in (1..parts.len()).rev() {
            parts.swap(i, shuffle.random_range(0..=i));
        }
        let shuffled = parts.into_iter().try_fold(StqAccumulator::new(), |a, b| a.merge(b)).unwrap();
        prop_assert_eq!(forward.report(&classes).unwrap(), shuffled.report(&classes).unwrap());
    }

    #[test]
    fn perfect_prediction_scores_one(seed in any::<u64>()) {
        let classes = ClassTable::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, gt) = random_video(&mut rng);
        let mut acc = StqAccumulator::new();
        acc.add_sequence("x", &gt, &gt, &classes).unwrap();
        let r = acc.report(&classes).unwrap();
        prop_assert_eq!((r.stq, r.aq, r.sq), (1.0, 1.0, 1.0));
    }

    #[test]
    fn components_stay_in_unit_range(seed in any::<u64>()) {
        let classes = ClassTable::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, g) = random_video(&mut rng);
        let mut acc = StqAccumulator::new();
        acc.add_sequence("x", &p, &g, &classes).unwrap();
        let r = acc.report(&classes).unwrap();
        for v in [r.stq, r.aq, r.sq] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!((r.stq - (r.aq * r.sq).sqrt()).abs() <= 1e-9);
    }
}
