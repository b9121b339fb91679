//! Segmentation and Tracking Quality.
//!
//! SQ is the mean per-class IoU with counts pooled over every frame of every
//! sequence. AQ scores each ground-truth thing tube `g` by
//! `sum_p |p ∩ g| * IoU(p, g) / |g|` over predicted tubes `p`, where tubes
//! span a whole sequence and intersections ignore class labels. STQ is the
//! geometric mean of the two. Ground-truth pixels whose class is not in the
//! table (void) are left out of every count.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::dataset::{ClassTable, PanopticMap};
use crate::{Error, Result};

/// Geometric mean of AQ and SQ.
pub fn compute_stq(aq: f64, sq: f64) -> Result<f64> {
    for (name, v) in [("aq", aq), ("sq", sq)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Range(format!("{name} = {v} is outside [0, 1]")));
        }
    }
    Ok((aq * sq).sqrt())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn iou(&self) -> Option<f64> {
        let denom = self.tp + self.fp + self.fn_;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }

    fn add(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Ground-truth tube identity within a sequence.
pub type GtTube = (u16, u32);

/// Integer counts for one sequence.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SequenceCounts {
    /// Indexed like the class table.
    pub confusion: Vec<Confusion>,
    pub gt_tubes: BTreeMap<GtTube, u64>,
    pub pred_tubes: BTreeMap<u32, u64>,
    pub intersections: BTreeMap<(GtTube, u32), u64>,
    pub evaluated_pixels: u64,
    pub void_pixels: u64,
    pub frames: usize,
}

impl SequenceCounts {
    pub fn new(classes: &ClassTable) -> Self {
        SequenceCounts { confusion: vec![Confusion::default(); classes.len()], ..Default::default() }
    }

    /// Adds one aligned frame.
    pub fn add_frame(&mut self, pred: &PanopticMap, gt: &PanopticMap, classes: &ClassTable) -> Result<()> {
        if !pred.same_size(gt) {
            return Err(Error::shape(
                "stq",
                format!(
                    "prediction {}x{} vs ground truth {}x{}",
                    pred.width(),
                    pred.height(),
                    gt.width(),
                    gt.height()
                ),
            ));
        }
        if self.confusion.len() != classes.len() {
            return Err(Error::shape("stq", "accumulator built for a different class table"));
        }
        self.frames += 1;
        let it = pred.semantic().iter().zip(pred.instance()).zip(gt.semantic().iter().zip(gt.instance()));
        for ((&ps, &pi), (&gs, &gi)) in it {
            let Some(gc) = classes.index_of(gs) else {
                self.void_pixels += 1;
                continue;
            };
            self.evaluated_pixels += 1;
            let pc = classes.index_of(ps);
            if pc == Some(gc) {
                self.confusion[gc].tp += 1;
            } else {
                self.confusion[gc].fn_ += 1;
                if let Some(pc) = pc {
                    self.confusion[pc].fp += 1;
                }
            }
            let g = (classes.info(gc).is_thing && gi > 0).then_some((gs, gi));
            let p = (pc.is_some_and(|c| classes.info(c).is_thing) && pi > 0).then_some(pi);
            if let Some(g) = g {
                *self.gt_tubes.entry(g).or_default() += 1;
            }
            if let Some(p) = p {
                *self.pred_tubes.entry(p).or_default() += 1;
            }
            if let (Some(g), Some(p)) = (g, p) {
                *self.intersections.entry((g, p)).or_default() += 1;
            }
        }
        Ok(())
    }

    /// Per-tube AQ in ascending tube order.
    pub fn tube_scores(&self) -> Vec<(GtTube, u64, f64)> {
        self.gt_tubes
            .iter()
            .map(|(&g, &size)| {
                let mut acc = 0.0f64;
                for (&(_, p), &inter) in self.intersections.range((g, 0)..=(g, u32::MAX)) {
                    let union = self.pred_tubes[&p] + size - inter;
                    acc += inter as f64 * (inter as f64 / union as f64);
                }
                (g, size, acc / size as f64)
            })
            .collect()
    }
}

/// Counts for any number of sequences, keyed by sequence name. Merging is
/// order-independent because the final reduction walks sequences by name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StqAccumulator {
    sequences: BTreeMap<String, SequenceCounts>,
}

impl StqAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a whole sequence. Names must be unique.
    pub fn add_sequence(
        &mut self,
        name: &str,
        pred: &[PanopticMap],
        gt: &[PanopticMap],
        classes: &ClassTable,
    ) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Alignment(format!(
                "sequence {name}: {} predicted frames, {} ground-truth frames",
                pred.len(),
                gt.len()
            )));
        }
        let mut counts = SequenceCounts::new(classes);
        for (p, g) in pred.iter().zip(gt) {
            counts.add_frame(p, g, classes)?;
        }
        self.insert(name, counts)
    }

    pub fn insert(&mut self, name: &str, counts: SequenceCounts) -> Result<()> {
        if self.sequences.contains_key(name) {
            return Err(Error::Contract(format!("sequence {name} evaluated twice")));
        }
        self.sequences.insert(name.to_string(), counts);
        Ok(())
    }

    pub fn merge(mut self, other: StqAccumulator) -> Result<Self> {
        for (name, counts) in other.sequences {
            self.insert(&name, counts)?;
        }
        Ok(self)
    }

    pub fn sequences(&self) -> impl Iterator<Item = (&str, &SequenceCounts)> {
        self.sequences.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn report(&self, classes: &ClassTable) -> Result<StqReport> {
        let mut confusion = vec![Confusion::default(); classes.len()];
        let mut tracks = Vec::new();
        let (mut evaluated, mut void, mut any_pred_tube) = (0, 0, false);
        for (name, counts) in &self.sequences {
            if counts.confusion.len() != classes.len() {
                return Err(Error::shape("stq", format!("sequence {name} used a different class table")));
            }
            for (c, o) in confusion.iter_mut().zip(&counts.confusion) {
                c.add(o);
            }
            for (tube, size, aq) in counts.tube_scores() {
                tracks.push(TrackScore { sequence: name.clone(), semantic: tube.0, instance: tube.1, size, aq });
            }
            any_pred_tube |= !counts.pred_tubes.is_empty();
            evaluated += counts.evaluated_pixels;
            void += counts.void_pixels;
        }
        let per_class: Vec<ClassScore> = classes
            .classes()
            .iter()
            .zip(&confusion)
            .map(|(info, c)| ClassScore {
                id: info.id,
                name: info.name.clone(),
                confusion: *c,
                present: c.tp + c.fn_ > 0,
            })
            .collect();
        let present: Vec<f64> =
            per_class.iter().filter(|c| c.present).filter_map(|c| c.confusion.iou()).collect();
        let sq = if present.is_empty() { 1.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        let aq = if tracks.is_empty() {
            if any_pred_tube { 0.0 } else { 1.0 }
        } else {
            tracks.iter().map(|t| t.aq).sum::<f64>() / tracks.len() as f64
        };
        let stq = compute_stq(aq.clamp(0.0, 1.0), sq.clamp(0.0, 1.0))?;
        Ok(StqReport { stq, aq, sq, per_class, per_track: tracks, evaluated_pixels: evaluated, void_pixels: void })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassScore {
    pub id: u16,
    pub name: String,
    pub confusion: Confusion,
    /// Whether the class occurs in the ground truth.
    pub present: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackScore {
    pub sequence: String,
    pub semantic: u16,
    pub instance: u32,
    pub size: u64,
    pub aq: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StqReport {
    pub stq: f64,
    pub aq: f64,
    pub sq: f64,
    pub per_class: Vec<ClassScore>,
    pub per_track: Vec<TrackScore>,
    pub evaluated_pixels: u64,
    pub void_pixels: u64,
}

impl StqReport {
    pub fn machine_line(&self) -> String {
        format!("STQ={} AQ={} SQ={}", self.stq, self.aq, self.sq)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.machine_line());
        let _ = writeln!(s, "pixels evaluated={} void={}", self.evaluated_pixels, self.void_pixels);
        let _ = writeln!(s, "\n# class_id name tp fp fn iou");
        for c in &self.per_class {
            let iou = match (c.present, c.confusion.iou()) {
                (true, Some(v)) => v.to_string(),
                _ => "-".to_string(),
            };
            let k = &c.confusion;
            let _ = writeln!(s, "{} {} {} {} {} {}", c.id, c.name, k.tp, k.fp, k.fn_, iou);
        }
        let _ = writeln!(s, "\n# sequence class_id instance pixels aq");
        for t in &self.per_track {
            let _ = writeln!(s, "{} {} {} {} {}", t.sequence, t.semantic, t.instance, t.size, t.aq);
        }
        s
    }
}

/// SQ and per-class IoU of one sequence.
pub fn compute_sq(pred: &[PanopticMap], gt: &[PanopticMap], classes: &ClassTable) -> Result<(f64, Vec<ClassScore>)> {
    let mut acc = StqAccumulator::new();
    acc.add_sequence("", pred, gt, classes)?;
    let r = acc.report(classes)?;
    Ok((r.sq, r.per_class))
}

/// AQ and per-tube scores of one sequence.
pub fn compute_aq(pred: &[PanopticMap], gt: &[PanopticMap], classes: &ClassTable) -> Result<(f64, Vec<TrackScore>)> {
    let mut acc = StqAccumulator::new();
    acc.add_sequence("", pred, gt, classes)?;
    let r = acc.report(classes)?;
    Ok((r.aq, r.per_track))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stq_table_rows() {
        assert!((compute_stq(0.5516, 0.6071).unwrap() - 0.5787).abs() < 5e-4);
        assert!((compute_stq(0.4555, 0.5981).unwrap() - 0.5219).abs() < 5e-4);
        assert_eq!(compute_stq(1.0, 1.0).unwrap(), 1.0);
        assert!(matches!(compute_stq(1.5, 0.5), Err(Error::Range(_))));
        assert!(matches!(compute_stq(f64::NAN, 0.5), Err(Error::Range(_))));
    }

    #[test]
    fn half_swapped_two_class_frame_is_one_third() {
        let classes = ClassTable::default();
        // gt: left half sky (0), right half road (2); prediction swaps half of each.
        let gt = PanopticMap::new(4, 1, vec![0, 0, 2, 2], vec![0; 4]).unwrap();
        let pred = PanopticMap::new(4, 1, vec![0, 2, 0, 2], vec![0; 4]).unwrap();
        let (sq, per) = compute_sq(&[pred], &[gt], &classes).unwrap();
        assert!((sq - 1.0 / 3.0).abs() < 1e-12);
        assert!(!per[1].present);
    }

    #[test]
    fn id_switch_halves_aq() {
        let classes = ClassTable::default();
        let mut gt = Vec::new();
        let mut pred = Vec::new();
        for t in 0..10u32 {
            gt.push(PanopticMap::new(2, 1, vec![3, 0], vec![1, 0]).unwrap());
            pred.push(PanopticMap::new(2, 1, vec![3, 0], vec![if t < 5 { 7 } else { 8 }, 0]).unwrap());
        }
        let (aq, tracks) = compute_aq(&pred, &gt, &classes).unwrap();
        assert_eq!(aq, 0.5);
        assert_eq!(tracks.len(), 1);
    }

    #[test]
    fn void_gt_is_ignored() {
        let classes = ClassTable::default();
        let gt = PanopticMap::new(2, 1, vec![255, 3], vec![0, 1]).unwrap();
        let pred = PanopticMap::new(2, 1, vec![3, 3], vec![1, 1]).unwrap();
        let mut acc = StqAccumulator::new();
        acc.add_sequence("a", &[pred], &[gt], &classes).unwrap();
        let r = acc.report(&classes).unwrap();
        assert_eq!((r.stq, r.aq, r.sq), (1.0, 1.0, 1.0));
        assert_eq!(r.machine_line(), "STQ=1 AQ=1 SQ=1");
        assert_eq!(r.void_pixels, 1);
    }

    #[test]
    fn misaligned_inputs() {
        let classes = ClassTable::default();
        let a = PanopticMap::void(2, 2);
        let b = PanopticMap::void(3, 2);
        let mut acc = StqAccumulator::new();
        assert!(matches!(acc.add_sequence("s", &[a.clone()], &[b], &classes), Err(Error::Shape { .. })));
        assert!(matches!(acc.add_sequence("t", &[a.clone(), a.clone()], &[a], &classes), Err(Error::Alignment(_))));
    }
}
