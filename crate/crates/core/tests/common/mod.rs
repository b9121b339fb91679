//! Oracles, fixtures and criterion-sized suites shared by the integration
//! tests and the acceptance runner. Oracles are written straight from the
//! definitions and share no code with the library.
#![allow(dead_code)]

pub mod grad;
pub mod lifecycle;
pub mod partition;
pub mod video;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpseg_core::dataset::{ClassTable, PanopticMap};
use vpseg_core::episode::sample_episode;
use vpseg_core::loss::hungarian;

/// Minimum assignment cost by enumerating every injection of the smaller
/// side into the larger one. Matched costs are summed in ascending row
/// order, as the solver reports them.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    let mut col_of = vec![usize::MAX; rows];
    let mut used = vec![false; cols];
    search(cost, 0, rows.min(cols), &mut col_of, &mut used, &mut best);
    best
}

fn search(
    cost: &[Vec<f64>],
    row: usize,
    need: usize,
    col_of: &mut [usize],
    used: &mut [bool],
    best: &mut f64,
) {
    let matched = col_of.iter().filter(|&&c| c != usize::MAX).count();
    if matched == need {
        let total: f64 = (0..cost.len())
            .filter(|&r| col_of[r] != usize::MAX)
            .map(|r| cost[r][col_of[r]])
            .sum();
        if total < *best {
            *best = total;
        }
        return;
    }
    if row == cost.len() || cost.len() - row < need - matched {
        return;
    }
    for c in 0..used.len() {
        if !used[c] {
            used[c] = true;
            col_of[row] = c;
            search(cost, row + 1, need, col_of, used, best);
            col_of[row] = usize::MAX;
            used[c] = false;
        }
    }
    // Leave this row unmatched when there are more rows than columns.
    search(cost, row + 1, need, col_of, used, best);
}

/// Per-definition SQ over all sequences: per-class IoU from joint counts,
/// averaged over classes present in ground truth.
pub fn naive_sq(videos: &[(Vec<PanopticMap>, Vec<PanopticMap>)], classes: &ClassTable) -> f64 {
    let mut ious = Vec::new();
    for info in classes.classes() {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for (pred, gt) in videos {
            for (p, g) in pred.iter().zip(gt) {
                for y in 0..g.height() {
                    for x in 0..g.width() {
                        let gs = g.get(x, y).0;
                        if classes.index_of(gs).is_none() {
                            continue;
                        }
                        let ps = p.get(x, y).0;
                        match (ps == info.id, gs == info.id) {
                            (true, true) => tp += 1,
                            (true, false) => fp += 1,
                            (false, true) => fn_ += 1,
                            (false, false) => {}
                        }
                    }
                }
            }
        }
        if tp + fn_ > 0 {
            ious.push(tp as f64 / (tp + fp + fn_) as f64);
        }
    }
    if ious.is_empty() {
        1.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

/// Per-definition AQ: each ground-truth thing tube `g` scores
/// `(1/|g|) * sum_p |p & g| * IoU(p, g)` over predicted tubes, and AQ is
/// the mean over tubes of every sequence, visited in sequence order.
pub fn naive_aq(videos: &[(Vec<PanopticMap>, Vec<PanopticMap>)], classes: &ClassTable) -> f64 {
    let mut scores = Vec::new();
    for (pred, gt) in videos {
        let in_g = |g: (u16, u32), f: usize, x: usize, y: usize| gt[f].get(x, y) == g;
        let in_p = |p: u32, f: usize, x: usize, y: usize| {
            let (ps, pi) = pred[f].get(x, y);
            let gs = gt[f].get(x, y).0;
            classes.is_thing(ps) && pi == p && classes.index_of(gs).is_some()
        };
        let mut gt_ids = BTreeSet::new();
        let mut pred_ids = BTreeSet::new();
        for f in 0..gt.len() {
            for y in 0..gt[f].height() {
                for x in 0..gt[f].width() {
                    let (gs, gi) = gt[f].get(x, y);
                    if classes.is_thing(gs) && gi > 0 {
                        gt_ids.insert((gs, gi));
                    }
                    let (ps, pi) = pred[f].get(x, y);
                    if classes.is_thing(ps) && pi > 0 && classes.index_of(gs).is_some() {
                        pred_ids.insert(pi);
                    }
                }
            }
        }
        for &g in &gt_ids {
            let count = |test: &dyn Fn(usize, usize, usize) -> bool| -> u64 {
                let mut n = 0;
                for f in 0..gt.len() {
                    for y in 0..gt[f].height() {
                        for x in 0..gt[f].width() {
                            if test(f, x, y) {
                                n += 1;
                            }
                        }
                    }
                }
                n
            };
            let size = count(&|f, x, y| in_g(g, f, x, y));
            let mut acc = 0.0f64;
            for &p in &pred_ids {
                let inter = count(&|f, x, y| in_g(g, f, x, y) && in_p(p, f, x, y));
                if inter == 0 {
                    continue;
                }
                let psize = count(&|f, x, y| in_p(p, f, x, y));
                let iou = inter as f64 / (psize + size - inter) as f64;
                acc += inter as f64 * iou;
            }
            scores.push(acc / size as f64);
        }
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// Class probabilities with `p` on `class` and the rest spread evenly.
pub fn peaked(labels: usize, class: usize, p: f32) -> Vec<f32> {
    let rest = (1.0 - p) / (labels - 1) as f32;
    (0..labels).map(|i| if i == class { p } else { rest }).collect()
}

/// Costs on a 1/1024 grid so that every partial sum is exact in f64 and
/// "equal" means bit-equal.
pub fn random_matrix(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let rows = rng.random_range(1..=7);
    let cols = rng.random_range(1..=7);
    let spread = [4, 100, 1 << 20][rng.random_range(0..3)];
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-spread..=spread) as f64 / 1024.0).collect())
        .collect()
}

pub fn check_assignment(cost: &[Vec<f64>]) {
    let m = hungarian(cost).unwrap();
    let rows = cost.len();
    let cols = cost[0].len();
    assert_eq!(m.pairs.len(), rows.min(cols));
    let mut seen_c = vec![false; cols];
    for w in m.pairs.windows(2) {
        assert!(w[0].0 < w[1].0);
    }
    for &(_, c) in &m.pairs {
        assert!(!seen_c[c]);
        seen_c[c] = true;
    }
    assert_eq!(m.unmatched_rows.len() + m.pairs.len(), rows);
    assert_eq!(m.unmatched_cols.len() + m.pairs.len(), cols);
    assert_eq!(m.cost, brute_force_assignment(cost), "cost matrix {cost:?}");
}

/// Chi-square critical value for 3 degrees of freedom at significance 0.01.
pub const CHI2_3_01: f64 = 11.345;

pub fn chi_square(counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let expected = n as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}


/// 1000 seeded matrices up to 7x7 against exhaustive search.
pub fn hungarian_suite() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        check_assignment(&random_matrix(&mut rng));
    }
    1000
}

/// 10,000 episode draws on a long sequence: ranges always hold and the
/// K and gap histograms pass chi-square at 0.01. Returns both statistics.
pub fn sampler_suite() -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(10_000);
    let mut k_counts = [0u64; 4];
    let mut gap_counts = [0u64; 4];
    for _ in 0..10_000 {
        let frames = sample_episode(200, &mut rng).unwrap();
        let k = frames.len();
        assert!((2..=5).contains(&k), "K = {k}");
        k_counts[k - 2] += 1;
        for w in frames.windows(2) {
            let gap = w[1] - w[0];
            assert!((1..=4).contains(&gap), "gap = {gap}");
            gap_counts[gap - 1] += 1;
        }
        assert!(*frames.last().unwrap() < 200);
    }
    let (ck, cg) = (chi_square(&k_counts), chi_square(&gap_counts));
    assert!(ck < CHI2_3_01, "K counts {k_counts:?} give chi2 {ck}");
    assert!(cg < CHI2_3_01, "gap counts {gap_counts:?} give chi2 {cg}");
    (ck, cg)
}
