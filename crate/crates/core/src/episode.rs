//! Training episodes: frame sampling and the stuff / detected / tracked
//! partition of an episode's ground truth.

use std::collections::{BTreeMap, BTreeSet};

use image::RgbImage;
use rand::Rng;

use crate::dataset::{ClassTable, PanopticMap, SequenceDataset};
use crate::kv::KvDoc;
use crate::{Error, Result};

pub const MIN_EPISODE_LEN: usize = 2;
pub const MAX_EPISODE_LEN: usize = 5;
pub const MIN_GAP: usize = 1;
pub const MAX_GAP: usize = 4;
/// Shortest sequence for which every episode length has a valid plan.
pub const MIN_SEQUENCE_LEN: usize = MAX_EPISODE_LEN;

const MAX_ATTEMPTS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodePlan {
    pub sequence: String,
    /// Strictly increasing frame indices; the episode length is `frames.len()`.
    pub frames: Vec<usize>,
}

impl EpisodePlan {
    pub fn k(&self) -> usize {
        self.frames.len()
    }

    pub fn validate(&self, sequence_len: usize) -> Result<()> {
        let k = self.k();
        if !(MIN_EPISODE_LEN..=MAX_EPISODE_LEN).contains(&k) {
            return Err(Error::Sampling(format!("episode length {k} outside [2, 5]")));
        }
        for w in self.frames.windows(2) {
            let gap = w[1].checked_sub(w[0]).unwrap_or(0);
            if !(MIN_GAP..=MAX_GAP).contains(&gap) {
                return Err(Error::Sampling(format!("frame gap {gap} outside [1, 4]")));
            }
        }
        if self.frames.last().is_some_and(|&f| f >= sequence_len) {
            return Err(Error::Sampling(format!(
                "frame {} beyond sequence of length {sequence_len}",
                self.frames[k - 1]
            )));
        }
        Ok(())
    }

    pub fn to_manifest(&self) -> String {
        let mut doc = KvDoc::new();
        doc.set("episode.sequence", &self.sequence);
        doc.set("episode.k", self.k());
        doc.set_list("episode.frames", &self.frames);
        doc.render()
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let doc = KvDoc::parse(text)?;
        let plan = EpisodePlan {
            sequence: doc.require("episode.sequence")?,
            frames: doc.get_list("episode.frames")?.unwrap_or_default(),
        };
        if doc.require::<usize>("episode.k")? != plan.k() {
            return Err(Error::Config("episode.k disagrees with episode.frames".into()));
        }
        Ok(plan)
    }
}

/// Samples K ~ U{2..5} and each gap ~ U{1..4}, then the first frame
/// uniformly over every position where the whole plan fits.
pub fn sample_episode<R: Rng + ?Sized>(sequence_len: usize, rng: &mut R) -> Result<Vec<usize>> {
    if sequence_len < MIN_SEQUENCE_LEN {
        return Err(Error::Sampling(format!(
            "sequence of {sequence_len} frames is shorter than the minimum {MIN_SEQUENCE_LEN}"
        )));
    }
    let k = rng.random_range(MIN_EPISODE_LEN..=MAX_EPISODE_LEN);
    sample_episode_with_len(sequence_len, k, rng)
}

/// As [`sample_episode`] with a fixed episode length. Gap draws that do not
/// fit the sequence are redrawn, so the gaps are uniform conditioned on fit.
pub fn sample_episode_with_len<R: Rng + ?Sized>(
    sequence_len: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if !(MIN_EPISODE_LEN..=MAX_EPISODE_LEN).contains(&k) || sequence_len < k {
        return Err(Error::Sampling(format!(
            "no episode of length {k} fits a sequence of {sequence_len} frames"
        )));
    }
    for _ in 0..MAX_ATTEMPTS {
        let gaps: Vec<usize> = (1..k).map(|_| rng.random_range(MIN_GAP..=MAX_GAP)).collect();
        let span: usize = gaps.iter().sum();
        if span >= sequence_len {
            continue;
        }
        let start = rng.random_range(0..sequence_len - span);
        let mut frames = Vec::with_capacity(k);
        frames.push(start);
        for g in gaps {
            frames.push(frames.last().copied().unwrap_or(0) + g);
        }
        return Ok(frames);
    }
    Err(Error::Sampling(format!("could not place {k} frames in {sequence_len}")))
}

/// Ground-truth identity of a thing segment, unique within a sequence.
pub type TrackKey = u32;

pub fn track_key(semantic: u16, instance: u32) -> TrackKey {
    ((semantic as u32) << 16) | (instance & 0xFFFF)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtSegment {
    /// Position within the episode.
    pub frame: usize,
    pub semantic: u16,
    /// 0 for stuff.
    pub instance: u32,
    pub mask: Vec<bool>,
}

impl GtSegment {
    pub fn key(&self) -> TrackKey {
        track_key(self.semantic, self.instance)
    }

    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn mask_f32(&self) -> Vec<f32> {
        self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }
}

/// Ground truth of one episode frame, split by role.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameTargets {
    /// Stuff segments, one per class present.
    pub s: Vec<GtSegment>,
    /// First episode occurrence of each thing instance.
    pub d: Vec<GtSegment>,
    /// Later occurrences of instances already in `d`.
    pub t: Vec<GtSegment>,
}

impl FrameTargets {
    /// S followed by D: the targets of the detection loss.
    pub fn detection_targets(&self) -> Vec<&GtSegment> {
        self.s.iter().chain(&self.d).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SdtPartition {
    pub frames: Vec<FrameTargets>,
}

/// Segments of one panoptic map: one per stuff class present and one per
/// thing instance. Void pixels and thing pixels without an instance id are
/// not part of any segment.
pub fn frame_segments(map: &PanopticMap, frame: usize, classes: &ClassTable) -> Result<Vec<GtSegment>> {
    let mut groups: BTreeMap<(u16, u32), Vec<bool>> = BTreeMap::new();
    for (i, (&s, &inst)) in map.semantic().iter().zip(map.instance()).enumerate() {
        let key = if classes.is_stuff(s) {
            if inst != 0 {
                return Err(Error::Integrity(format!(
                    "frame {frame}: instance {inst} on stuff class {s}"
                )));
            }
            (s, 0)
        } else if classes.is_thing(s) && inst > 0 {
            (s, inst)
        } else {
            continue;
        };
        groups.entry(key).or_insert_with(|| vec![false; map.len()])[i] = true;
    }
    Ok(groups
        .into_iter()
        .map(|((semantic, instance), mask)| GtSegment { frame, semantic, instance, mask })
        .collect())
}

/// Splits an episode's ground truth into S, D and T per frame.
pub fn partition_sdt(maps: &[PanopticMap], classes: &ClassTable) -> Result<SdtPartition> {
    let mut seen: BTreeSet<TrackKey> = BTreeSet::new();
    let mut frames = Vec::with_capacity(maps.len());
    for (t, map) in maps.iter().enumerate() {
        let mut targets = FrameTargets::default();
        for seg in frame_segments(map, t, classes)? {
            if seg.instance == 0 {
                targets.s.push(seg);
            } else if seen.insert(seg.key()) {
                targets.d.push(seg);
            } else {
                targets.t.push(seg);
            }
        }
        frames.push(targets);
    }
    Ok(SdtPartition { frames })
}

/// Frames of a sampled episode with its partitioned ground truth.
#[derive(Debug, Clone)]
pub struct Episode {
    pub plan: EpisodePlan,
    pub frames: Vec<RgbImage>,
    pub partition: SdtPartition,
}

impl Episode {
    pub fn k(&self) -> usize {
        self.frames.len()
    }
}

pub fn build_episode(seq: &SequenceDataset, frames: &[usize]) -> Result<Episode> {
    let plan = EpisodePlan { sequence: seq.name.clone(), frames: frames.to_vec() };
    if let Some(&bad) = frames.iter().find(|&&f| f >= seq.len()) {
        return Err(Error::Sampling(format!("frame {bad} beyond sequence {}", seq.name)));
    }
    let maps: Vec<PanopticMap> = frames.iter().map(|&f| seq.annotations[f].clone()).collect();
    Ok(Episode {
        plan,
        frames: frames.iter().map(|&f| seq.frames[f].clone()).collect(),
        partition: partition_sdt(&maps, &seq.classes)?,
    })
}
