use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpseg_core::dataset::{ClassTable, PanopticMap, VOID_SEMANTIC};
use vpseg_core::stq::{compute_aq, compute_sq, StqAccumulator};

use super::{naive_aq, naive_sq};

pub type Video = (Vec<PanopticMap>, Vec<PanopticMap>);

/// A random ground-truth pixel: stuff, one of up to three thing tracks, or
/// occasionally void.
fn gt_pixel(rng: &mut ChaCha8Rng, tracks: &[(u16, u32)]) -> (u16, u32) {
    match rng.random_range(0..10) {
        0 => (VOID_SEMANTIC, 0),
        1..=3 => (rng.random_range(0..3), 0),
        _ => tracks[rng.random_range(0..tracks.len())],
    }
}

/// Predictions reuse ground-truth ids most of the time so overlaps are
/// common, but also invent ids and classes, including void and unknown.
fn pred_pixel(rng: &mut ChaCha8Rng, gt: (u16, u32)) -> (u16, u32) {
    match rng.random_range(0..10) {
        0..=4 if gt.0 != VOID_SEMANTIC => gt,
        5 => (rng.random_range(0..3), 0),
        6 => (VOID_SEMANTIC, 0),
        7 => (rng.random_range(3..5), 0),
        _ => (rng.random_range(3..5), rng.random_range(1..5)),
    }
}

pub fn random_video(rng: &mut ChaCha8Rng) -> Video {
    let w = rng.random_range(1..=8);
    let h = rng.random_range(1..=8);
    let frames = rng.random_range(1..=4);
    let n_tracks = rng.random_range(1..=3);
    let tracks: Vec<(u16, u32)> =
        (0..n_tracks).map(|i| (rng.random_range(3..5), i as u32 + 1)).collect();
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for f in 0..frames {
        let mut g = PanopticMap::void(w, h);
        let mut p = PanopticMap::void(w, h);
        for i in 0..w * h {
            let gv = if f == 0 && i < tracks.len() { tracks[i] } else { gt_pixel(rng, &tracks) };
            let pv = pred_pixel(rng, gv);
            g.set_index(i, gv.0, gv.1);
            p.set_index(i, pv.0, pv.1);
        }
        gt.push(g);
        pred.push(p);
    }
    (pred, gt)
}


pub fn streaming(videos: &[Video], classes: &ClassTable) -> (f64, f64) {
    let mut acc = StqAccumulator::new();
    for (i, (p, g)) in videos.iter().enumerate() {
        acc.add_sequence(&format!("{i:03}"), p, g, classes).unwrap();
    }
    let r = acc.report(classes).unwrap();
    (r.aq, r.sq)
}

/// A 10-frame tube of constant area 4, predicted with perfect masks but
/// under id 1 for five frames and id 2 for the rest.
pub fn id_switch_video() -> Video {
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    for f in 0..10 {
        let mut g = PanopticMap::filled(4, 4, 0, 0);
        let mut p = PanopticMap::filled(4, 4, 0, 0);
        for (x, y) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            g.set(x, y, 3, 7);
            p.set(x, y, 3, if f < 5 { 1 } else { 2 });
        }
        gt.push(g);
        pred.push(p);
    }
    (pred, gt)
}

/// 200 random tiny videos against the brute-force oracle, exactly, plus the
/// id-switch fixture. Returns the fixture's AQ.
pub fn stq_suite() -> f64 {
    let classes = ClassTable::default();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..200 {
        let videos = [random_video(&mut rng)];
        let (aq, sq) = streaming(&videos, &classes);
        assert_eq!(aq, naive_aq(&videos, &classes));
        assert_eq!(sq, naive_sq(&videos, &classes));
        let (p, g) = &videos[0];
        assert_eq!(compute_aq(p, g, &classes).unwrap().0, aq);
        assert_eq!(compute_sq(p, g, &classes).unwrap().0, sq);
    }
    let videos = [id_switch_video()];
    let (aq, sq) = streaming(&videos, &classes);
    assert_eq!(aq, naive_aq(&videos, &classes));
    assert_eq!(aq, 0.5);
    assert_eq!(sq, 1.0);
    aq
}
