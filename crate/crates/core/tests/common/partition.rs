use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vpseg_core::dataset::{ClassTable, Disappearance, PanopticMap, SyntheticConfig};
use rand::SeedableRng;
use vpseg_core::dataset::generate_synthetic_sequence;
use vpseg_core::episode::{build_episode, partition_sdt, sample_episode, track_key, TrackKey};

pub fn random_config(rng: &mut ChaCha8Rng) -> SyntheticConfig {
    let side = rng.random_range(12..=24);
    let instances = rng.random_range(1..=4);
    let frames = rng.random_range(8..=20);
    let disappearances = (0..rng.random_range(0..=3))
        .map(|_| Disappearance {
            instance: rng.random_range(1..=instances as u32),
            start: rng.random_range(0..frames),
            len: rng.random_range(1..=4),
        })
        .collect();
    SyntheticConfig {
        width: side,
        height: side,
        frames,
        sequences: 1,
        instances,
        min_size: 3,
        max_size: 6,
        disappearances,
        seed: rng.random(),
        ..Default::default()
    }
}

/// Identities visible in each frame of `maps`.
pub fn visible(maps: &[PanopticMap], classes: &ClassTable) -> Vec<BTreeSet<TrackKey>> {
    maps.iter()
        .map(|m| {
            m.semantic()
                .iter()
                .zip(m.instance())
                .filter(|(&s, &i)| classes.is_thing(s) && i > 0)
                .map(|(&s, &i)| track_key(s, i))
                .collect()
        })
        .collect()
}

pub fn check_episode(maps: &[PanopticMap], classes: &ClassTable) {
    let part = partition_sdt(maps, classes).unwrap();
    assert_eq!(part.frames.len(), maps.len());
    let vis = visible(maps, classes);

    for (t, (targets, map)) in part.frames.iter().zip(maps).enumerate() {
        // Every labelled pixel is covered by exactly one segment; void and
        // crowd pixels by none.
        let mut cover = vec![0u32; map.len()];
        for seg in targets.s.iter().chain(&targets.d).chain(&targets.t) {
            assert_eq!(seg.frame, t);
            assert_eq!(seg.mask.len(), map.len());
            for (i, &m) in seg.mask.iter().enumerate() {
                if m {
                    cover[i] += 1;
                    assert_eq!(map.semantic()[i], seg.semantic);
                    assert_eq!(map.instance()[i], seg.instance);
                }
            }
        }
        for (i, (&s, &inst)) in map.semantic().iter().zip(map.instance()).enumerate() {
            let labelled = classes.is_stuff(s) || (classes.is_thing(s) && inst > 0);
            assert_eq!(cover[i], labelled as u32, "frame {t} pixel {i}");
        }
        let area: usize = targets.s.iter().chain(&targets.d).chain(&targets.t).map(|s| s.area()).sum();
        assert_eq!(area, cover.iter().filter(|&&c| c == 1).count());
        assert!(targets.s.iter().all(|s| s.instance == 0 && classes.is_stuff(s.semantic)));
        assert!(targets.d.iter().chain(&targets.t).all(|s| s.instance > 0 && s.area() > 0));
        let s_classes: BTreeSet<u16> = targets.s.iter().map(|s| s.semantic).collect();
        assert_eq!(s_classes.len(), targets.s.len());
    }

    // Exactly one D per identity, at its earliest visible frame; every
    // later occurrence (including after a gap) is a T segment.
    let mut d_frame: BTreeMap<TrackKey, usize> = BTreeMap::new();
    for (t, targets) in part.frames.iter().enumerate() {
        for seg in &targets.d {
            assert!(d_frame.insert(seg.key(), t).is_none(), "second D for {}", seg.key());
        }
    }
    let all: BTreeSet<TrackKey> = vis.iter().flatten().copied().collect();
    assert_eq!(d_frame.keys().copied().collect::<BTreeSet<_>>(), all);
    for (&key, &t0) in &d_frame {
        let first = vis.iter().position(|v| v.contains(&key)).unwrap();
        assert_eq!(t0, first);
        for (t, v) in vis.iter().enumerate().skip(first + 1) {
            let in_t = part.frames[t].t.iter().any(|s| s.key() == key);
            assert_eq!(in_t, v.contains(&key), "identity {key} frame {t}");
        }
    }
}


/// 500 random synthetic episodes; returns how many identities reappeared
/// after a gap inside their episode.
pub fn partition_suite() -> usize {
    let classes = ClassTable::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut reappearances = 0;
    for _ in 0..500 {
        let cfg = random_config(&mut rng);
        let seq = generate_synthetic_sequence(&cfg, &classes, 0).unwrap();
        let frames = sample_episode(seq.len(), &mut rng).unwrap();
        let ep = build_episode(&seq, &frames).unwrap();
        let maps: Vec<PanopticMap> = frames.iter().map(|&f| seq.annotations[f].clone()).collect();
        assert_eq!(ep.partition, partition_sdt(&maps, &classes).unwrap());
        check_episode(&maps, &classes);

        let vis = visible(&maps, &classes);
        for key in vis.iter().flatten().collect::<BTreeSet<_>>() {
            let seen: Vec<bool> = vis.iter().map(|v| v.contains(key)).collect();
            let first = seen.iter().position(|&s| s).unwrap();
            let last = seen.iter().rposition(|&s| s).unwrap();
            if seen[first..=last].iter().any(|&s| !s) {
                reappearances += 1;
            }
        }
    }
    // The sampled configurations must actually exercise gaps.
    assert!(reappearances > 20, "only {reappearances} reappearances");
    reappearances
}
