use std::collections::BTreeMap;

use vpseg_core::dataset::ClassTable;
use vpseg_core::network::{Prediction, QueryRole};
use vpseg_core::tracker::{scripted_prediction, TrackEvent, TrackStatus, Tracker, TrackerConfig};

use super::peaked;

pub const W: usize = 8;
pub const H: usize = 8;
pub const LABELS: usize = 6;
pub const CAR: usize = 3;
pub const ROAD: usize = 2;
pub const NO_OBJECT: usize = 5;

/// Object `o` occupies rows `3o..3o+2`: 16 pixels, above the minimum area.
pub fn region(o: usize) -> Vec<f32> {
    (0..W * H).map(|i| if i / W / 3 == o && i / W % 3 < 2 { 0.99 } else { 0.01 }).collect()
}

/// A prediction for a world where `visible[o]` says whether object `o` is
/// in the frame. Track queries see their own object; one free query per
/// object detects it whenever it is visible; one stuff query covers the rest.
pub fn world(tracker: &Tracker, owner: &BTreeMap<u32, usize>, visible: &[bool]) -> Prediction {
    let mut q = Vec::new();
    for t in tracker.live_tracks() {
        let o = owner[&t.id];
        let probs = if visible[o] { peaked(LABELS, CAR, 0.9) } else { peaked(LABELS, NO_OBJECT, 0.9) };
        q.push((QueryRole::Track(t.id), probs, region(o)));
    }
    for (o, &v) in visible.iter().enumerate() {
        let probs = if v { peaked(LABELS, CAR, 0.95 - 0.01 * o as f32) } else { peaked(LABELS, NO_OBJECT, 0.9) };
        q.push((QueryRole::Free, probs, region(o)));
    }
    q.push((QueryRole::Free, peaked(LABELS, ROAD, 0.9), vec![0.6; W * H]));
    scripted_prediction(W, H, LABELS, &q)
}

/// Reference lifecycle of one object: the live id and its miss count.
#[derive(Default, Clone, Copy)]
struct Expected {
    id: Option<u32>,
    misses: u32,
}

pub fn run_patterns(patterns: &[Vec<bool>], m: u32) {
    let cfg = TrackerConfig { miss_budget: m, ..Default::default() };
    let mut tracker = Tracker::new(cfg, ClassTable::default()).unwrap();
    let frames = patterns.iter().map(Vec::len).max().unwrap_or(0);
    let mut owner: BTreeMap<u32, usize> = BTreeMap::new();
    let mut expected = vec![Expected::default(); patterns.len()];
    let mut next_id = 1u32;
    let mut all_born = Vec::new();

    for f in 0..frames {
        let visible: Vec<bool> = patterns.iter().map(|p| p.get(f).copied().unwrap_or(false)).collect();
        let out = tracker.step_prediction(&world(&tracker, &owner, &visible)).unwrap();

        // Reference transition.
        let mut want_events = Vec::new();
        let mut want_born = Vec::new();
        for (o, e) in expected.iter_mut().enumerate() {
            match e.id {
                Some(id) if visible[o] => {
                    e.misses = 0;
                    want_events.push((id, TrackEvent::Found));
                }
                Some(id) => {
                    e.misses += 1;
                    if e.misses == m {
                        want_events.push((id, TrackEvent::Terminated));
                        e.id = None;
                    } else {
                        want_events.push((id, TrackEvent::Missed { miss_count: e.misses }));
                    }
                }
                None if visible[o] => {
                    *e = Expected { id: Some(next_id), misses: 0 };
                    want_born.push((next_id, o));
                    next_id += 1;
                }
                None => {}
            }
        }
        want_events.sort_by_key(|e| e.0);
        assert_eq!(out.events, want_events, "frame {f}");
        assert_eq!(out.born, want_born.iter().map(|b| b.0).collect::<Vec<_>>(), "frame {f}");
        for &(id, o) in &want_born {
            owner.insert(id, o);
            // The new id is stamped on its object's pixels.
            let px = 3 * o * W;
            assert_eq!(out.panoptic.instance()[px], id);
        }
        all_born.extend(out.born.iter().copied());
        for (o, e) in expected.iter().enumerate() {
            if let Some(id) = e.id {
                let t = tracker.live_tracks().iter().find(|t| t.id == id).expect("live track");
                assert_eq!(t.miss_count, e.misses);
                assert_eq!(owner[&id], o);
            }
        }
        assert_eq!(tracker.live_tracks().len(), expected.iter().filter(|e| e.id.is_some()).count());
    }

    // Ids are handed out once, in increasing order.
    assert!(all_born.windows(2).all(|w| w[0] < w[1]));
    let ledger = tracker.ledger();
    assert_eq!(ledger.rows.len(), all_born.len());
    for t in tracker.terminated_tracks() {
        assert_eq!(t.status, TrackStatus::Terminated);
        assert_eq!(t.death, Some(t.last_seen + m as usize));
        assert!(tracker.live_tracks().iter().all(|l| l.id != t.id));
    }
}


/// Scripted lifecycle: seen, four misses, re-acquired, five misses
/// (terminated on the fifth), then seen again under a fresh id.
pub fn lifecycle_suite() {
    let mut p = vec![true, false, false, false, false, true];
    p.extend([false; 5]);
    p.push(true);
    let cfg = TrackerConfig::default();
    assert_eq!(cfg.miss_budget, 5);
    let mut tracker = Tracker::new(cfg, ClassTable::default()).unwrap();
    let mut owner = BTreeMap::new();
    let mut log = Vec::new();
    for &v in &p {
        let out = tracker.step_prediction(&world(&tracker, &owner, &[v])).unwrap();
        for &id in &out.born {
            owner.insert(id, 0);
        }
        log.push(out);
    }
    assert_eq!(log[0].born, vec![1]);
    assert_eq!(log[4].events, vec![(1, TrackEvent::Missed { miss_count: 4 })]);
    assert_eq!(log[5].events, vec![(1, TrackEvent::Found)]);
    assert!(log[5].born.is_empty());
    assert_eq!(log[9].events, vec![(1, TrackEvent::Missed { miss_count: 4 })]);
    assert_eq!(log[10].events, vec![(1, TrackEvent::Terminated)]);
    assert_eq!(log[11].born, vec![2]);
    let ledger = tracker.ledger();
    assert_eq!(ledger.rows[0].death, Some(10));
    assert_eq!(ledger.rows[1].birth, 11);

    let a = [1, 1, 0, 0, 0, 0, 0, 1, 1, 0, 1].map(|v| v == 1).to_vec();
    let b = [0, 1, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 1].map(|v| v == 1).to_vec();
    run_patterns(&[a, b], 5);
}
