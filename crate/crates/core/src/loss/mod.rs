//! Set-prediction losses: per-pair mask-classification loss, the
//! detection loss over stuff and newly appearing things, the tracking loss
//! over propagated identities, and their weighted sum.

mod hungarian;

pub use hungarian::{hungarian, MatchResult};

use std::collections::BTreeSet;

use crate::dataset::ClassTable;
use crate::episode::{GtSegment, TrackKey};
use crate::kv::KvDoc;
use crate::tensor::{Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_sd: f32,
    pub lambda_t: f32,
    pub class: f32,
    pub dice: f32,
    pub mask_bce: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_sd: 0.3, lambda_t: 0.7, class: 1.0, dice: 1.0, mask_bce: 1.0 }
    }
}

impl LossWeights {
    pub const KEYS: &'static [&'static str] = &[
        "loss.lambda_sd",
        "loss.lambda_t",
        "loss.class",
        "loss.dice",
        "loss.mask_bce",
    ];

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_sd, self.lambda_t, self.class, self.dice, self.mask_bce];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let d = LossWeights::default();
        let w = LossWeights {
            lambda_sd: doc.get_or("loss.lambda_sd", d.lambda_sd)?,
            lambda_t: doc.get_or("loss.lambda_t", d.lambda_t)?,
            class: doc.get_or("loss.class", d.class)?,
            dice: doc.get_or("loss.dice", d.dice)?,
            mask_bce: doc.get_or("loss.mask_bce", d.mask_bce)?,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn write_kv(&self, doc: &mut KvDoc) {
        doc.set("loss.lambda_sd", self.lambda_sd);
        doc.set("loss.lambda_t", self.lambda_t);
        doc.set("loss.class", self.class);
        doc.set("loss.dice", self.dice);
        doc.set("loss.mask_bce", self.mask_bce);
    }
}

/// A ground-truth segment resolved to a class-head index.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub class: usize,
    pub key: TrackKey,
    pub mask: Vec<f32>,
}

impl Target {
    pub fn from_segment(seg: &GtSegment, classes: &ClassTable) -> Result<Self> {
        let class = classes.index_of(seg.semantic).ok_or_else(|| {
            Error::Integrity(format!("segment class {} not in class table", seg.semantic))
        })?;
        Ok(Target { class, key: seg.key(), mask: seg.mask_f32() })
    }
}

/// Tape handles for one frame: log-probabilities `[Q, C+1]` and mask
/// logits `[Q, P]`.
#[derive(Debug, Clone, Copy)]
pub struct FrameHeads {
    pub log_probs: Var,
    pub mask_logits: Var,
}

impl FrameHeads {
    pub fn new(tape: &mut Tape, class_logits: Var, mask_logits: Var) -> Result<Self> {
        Ok(FrameHeads { log_probs: tape.log_softmax(class_logits, 1)?, mask_logits })
    }

    fn labels(&self, tape: &Tape) -> usize {
        tape.shape(self.log_probs)[1]
    }

    fn pixels(&self, tape: &Tape) -> usize {
        tape.shape(self.mask_logits)[1]
    }
}

/// Weighted sum of the class negative log-likelihood, the dice loss on the
/// sigmoid mask and the mean pixelwise binary cross-entropy, for query `q`.
pub fn pair_loss(
    tape: &mut Tape,
    heads: FrameHeads,
    q: usize,
    target: &Target,
    w: &LossWeights,
) -> Result<Var> {
    let labels = heads.labels(tape);
    let pixels = heads.pixels(tape);
    if target.mask.len() != pixels {
        return Err(Error::shape(
            "pair_loss",
            format!("mask logits of {pixels} pixels vs target of {}", target.mask.len()),
        ));
    }
    if target.class + 1 >= labels {
        return Err(Error::shape(
            "pair_loss",
            format!("class {} outside {} labels", target.class, labels),
        ));
    }
    let nll = tape.pick(heads.log_probs, &[q * labels + target.class])?;
    let nll = tape.scale(nll, -1.0);
    let nll = tape.sum(nll);

    let logits = tape.gather_rows(heads.mask_logits, &[q])?;
    let probs = tape.sigmoid(logits);
    let gt = tape.constant(vec![1, pixels], target.mask.clone())?;
    let inter = tape.mul(probs, gt)?;
    let inter = tape.sum(inter);
    let numer = tape.scale(inter, 2.0);
    let psum = tape.sum(probs);
    let gsum = target.mask.iter().map(|&v| v as f64).sum::<f64>() as f32;
    let denom = tape.add_scalar(psum, gsum);
    let ratio = tape.div(numer, denom)?;
    let neg = tape.scale(ratio, -1.0);
    let dice = tape.add_scalar(neg, 1.0);

    let bce = tape.bce_with_logits(logits, &target.mask)?;
    let bce = tape.mean(bce);

    let a = tape.scale(nll, w.class);
    let b = tape.scale(dice, w.dice);
    let c = tape.scale(bce, w.mask_bce);
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

/// Negative log-probability of the no-object label for query `q`, scaled
/// by the classification weight.
pub fn no_object_loss(tape: &mut Tape, heads: FrameHeads, q: usize, w: &LossWeights) -> Result<Var> {
    let labels = heads.labels(tape);
    let p = tape.pick(heads.log_probs, &[q * labels + labels - 1])?;
    let p = tape.sum(p);
    Ok(tape.scale(p, -w.class))
}

/// Value-only copy of one frame's heads on a scratch tape, so costs use
/// exactly the same arithmetic as the differentiated loss.
fn scratch_heads(tape: &Tape, heads: FrameHeads) -> Result<(Tape, FrameHeads)> {
    let mut scratch = Tape::new();
    let lp = scratch.constant(tape.shape(heads.log_probs).to_vec(), tape.value(heads.log_probs).to_vec())?;
    let ml =
        scratch.constant(tape.shape(heads.mask_logits).to_vec(), tape.value(heads.mask_logits).to_vec())?;
    Ok((scratch, FrameHeads { log_probs: lp, mask_logits: ml }))
}

/// Matching cost of free query `free[i]` against `targets[j]`: the pair loss
/// minus the no-object loss that query would otherwise incur. With every
/// target matched, minimizing this sum minimizes the detection loss.
pub fn detection_costs(
    tape: &Tape,
    heads: FrameHeads,
    free: &[usize],
    targets: &[Target],
    w: &LossWeights,
) -> Result<Vec<Vec<f64>>> {
    let (mut scratch, sh) = scratch_heads(tape, heads)?;
    free.iter()
        .map(|&q| {
            let none = no_object_loss(&mut scratch, sh, q, w)?;
            let none = scratch.item(none) as f64;
            targets
                .iter()
                .map(|t| {
                    let v = pair_loss(&mut scratch, sh, q, t, w)?;
                    Ok(scratch.item(v) as f64 - none)
                })
                .collect()
        })
        .collect()
}

/// Hungarian assignment of free queries (rows) to detection targets (cols).
pub fn match_detection(
    tape: &Tape,
    heads: FrameHeads,
    free: &[usize],
    targets: &[Target],
    w: &LossWeights,
) -> Result<MatchResult> {
    if targets.len() > free.len() {
        return Err(Error::Capacity { targets: targets.len(), queries: free.len() });
    }
    if targets.is_empty() {
        return Ok(MatchResult {
            pairs: Vec::new(),
            unmatched_rows: (0..free.len()).collect(),
            unmatched_cols: Vec::new(),
            cost: 0.0,
        });
    }
    hungarian(&detection_costs(tape, heads, free, targets, w)?)
}

/// Sum of matched pair losses plus the no-object loss of every unmatched
/// free query, for a given assignment.
pub fn detection_loss_with_match(
    tape: &mut Tape,
    heads: FrameHeads,
    free: &[usize],
    targets: &[Target],
    matching: &MatchResult,
    w: &LossWeights,
) -> Result<Var> {
    if targets.len() > free.len() {
        return Err(Error::Capacity { targets: targets.len(), queries: free.len() });
    }
    let mut terms = Vec::with_capacity(free.len());
    for (row, &q) in free.iter().enumerate() {
        let term = match matching.col_of(row) {
            Some(col) => pair_loss(tape, heads, q, &targets[col], w)?,
            None => no_object_loss(tape, heads, q, w)?,
        };
        terms.push(term);
    }
    sum_scalars(tape, &terms)
}

/// Matches free queries to stuff and newly appearing thing targets and
/// returns the summed loss with the assignment.
pub fn detection_loss(
    tape: &mut Tape,
    heads: FrameHeads,
    free: &[usize],
    targets: &[Target],
    w: &LossWeights,
) -> Result<(Var, MatchResult)> {
    let matching = match_detection(tape, heads, free, targets, w)?;
    let loss = detection_loss_with_match(tape, heads, free, targets, &matching, w)?;
    Ok((loss, matching))
}

/// Each track query is scored against the target sharing its identity, or
/// against the no-object label when that identity is absent this frame.
pub fn tracking_loss(
    tape: &mut Tape,
    heads: FrameHeads,
    tracks: &[(usize, TrackKey)],
    targets: &[Target],
    w: &LossWeights,
) -> Result<Var> {
    let mut seen = BTreeSet::new();
    if let Some((_, dup)) = tracks.iter().find(|(_, k)| !seen.insert(*k)) {
        return Err(Error::Integrity(format!("duplicate track id {dup}")));
    }
    let mut terms = Vec::with_capacity(tracks.len());
    for &(q, key) in tracks {
        let term = match targets.iter().find(|t| t.key == key) {
            Some(t) => pair_loss(tape, heads, q, t, w)?,
            None => no_object_loss(tape, heads, q, w)?,
        };
        terms.push(term);
    }
    if let Some(orphan) = targets.iter().find(|t| !tracks.iter().any(|&(_, k)| k == t.key)) {
        return Err(Error::Integrity(format!("tracked target {} has no track query", orphan.key)));
    }
    sum_scalars(tape, &terms)
}

/// `lambda_sd * l_sd + lambda_t * l_t`.
pub fn total_loss(l_sd: f32, l_t: f32, w: &LossWeights) -> f32 {
    w.lambda_sd * l_sd + w.lambda_t * l_t
}

/// Tape form of [`total_loss`]; rounds identically.
pub fn total_loss_var(tape: &mut Tape, l_sd: Var, l_t: Var, w: &LossWeights) -> Result<Var> {
    let a = tape.scale(l_sd, w.lambda_sd);
    let b = tape.scale(l_t, w.lambda_t);
    tape.add(a, b)
}

/// Sum of scalar nodes in order; an empty list is a constant zero.
pub fn sum_scalars(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(tape.scalar(0.0));
    };
    rest.iter().try_fold(first, |acc, &t| tape.add(acc, t))
}
