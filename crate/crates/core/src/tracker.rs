//! Online inference: panoptic fusion, track births, propagation and
//! termination after a budget of consecutive misses.

use std::fmt::Write as _;

use image::RgbImage;

use crate::dataset::{ClassTable, PanopticMap, VOID_SEMANTIC};
use crate::kv::KvDoc;
use crate::network::{Network, Prediction, QueryRole, QuerySlot};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    /// Consecutive misses after which a track is terminated.
    pub miss_budget: u32,
    /// Minimum class confidence for a free query to start a track.
    pub det_threshold: f32,
    /// Minimum thing-class confidence for a track query to count as found.
    pub track_threshold: f32,
    /// Minimum mask area in pixels for a new detection.
    pub min_area: usize,
    /// Minimum per-pixel score for a pixel to be assigned at all.
    pub overlap_threshold: f32,
    /// A candidate whose mask IoU with a found track reaches this is a duplicate.
    pub spawn_iou: f32,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            miss_budget: 5,
            det_threshold: 0.5,
            track_threshold: 0.3,
            min_area: 8,
            overlap_threshold: 0.3,
            spawn_iou: 0.5,
        }
    }
}

impl TrackerConfig {
    pub const KEYS: &'static [&'static str] = &[
        "tracker.m",
        "tracker.det_threshold",
        "tracker.track_threshold",
        "tracker.min_area",
        "tracker.overlap_threshold",
        "tracker.spawn_iou",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.miss_budget == 0 {
            return Err(Error::Config("tracker.m must be at least 1".into()));
        }
        for (name, v) in [
            ("tracker.det_threshold", self.det_threshold),
            ("tracker.track_threshold", self.track_threshold),
            ("tracker.overlap_threshold", self.overlap_threshold),
            ("tracker.spawn_iou", self.spawn_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let d = TrackerConfig::default();
        let cfg = TrackerConfig {
            miss_budget: doc.get_or("tracker.m", d.miss_budget)?,
            det_threshold: doc.get_or("tracker.det_threshold", d.det_threshold)?,
            track_threshold: doc.get_or("tracker.track_threshold", d.track_threshold)?,
            min_area: doc.get_or("tracker.min_area", d.min_area)?,
            overlap_threshold: doc.get_or("tracker.overlap_threshold", d.overlap_threshold)?,
            spawn_iou: doc.get_or("tracker.spawn_iou", d.spawn_iou)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_kv(&self, doc: &mut KvDoc) {
        doc.set("tracker.m", self.miss_budget);
        doc.set("tracker.det_threshold", self.det_threshold);
        doc.set("tracker.track_threshold", self.track_threshold);
        doc.set("tracker.min_area", self.min_area);
        doc.set("tracker.overlap_threshold", self.overlap_threshold);
        doc.set("tracker.spawn_iou", self.spawn_iou);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Live,
    Terminated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub id: u32,
    pub embedding: Vec<f32>,
    pub semantic: u16,
    pub miss_count: u32,
    pub status: TrackStatus,
    pub birth: usize,
    /// Frame of termination.
    pub death: Option<usize>,
    /// Last frame the track was found in.
    pub last_seen: usize,
}

/// One query admitted to fusion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionEntry {
    pub query: usize,
    pub semantic: u16,
    /// Instance id to stamp; 0 for stuff.
    pub instance: u32,
    pub confidence: f32,
}

/// Per-pixel winner among `entries`, in entry order. A later entry only
/// takes a pixel with a strictly higher score, so earlier entries win ties.
/// Pixels whose best score is below `threshold` stay unassigned.
pub fn fuse_owners(pred: &Prediction, entries: &[FusionEntry], threshold: f32) -> Vec<Option<usize>> {
    let n = pred.width * pred.height;
    let mut best = vec![f32::NEG_INFINITY; n];
    let mut owner = vec![None; n];
    for (e, entry) in entries.iter().enumerate() {
        let logits = pred.mask_logits_row(entry.query);
        for (p, &l) in logits.iter().enumerate() {
            let score = entry.confidence * sigmoid(l);
            if score > best[p] {
                best[p] = score;
                owner[p] = Some(e);
            }
        }
    }
    for (p, o) in owner.iter_mut().enumerate() {
        if best[p] < threshold {
            *o = None;
        }
    }
    owner
}

fn render_owners(pred: &Prediction, entries: &[FusionEntry], owner: &[Option<usize>]) -> PanopticMap {
    let mut map = PanopticMap::void(pred.width, pred.height);
    for (p, o) in owner.iter().enumerate() {
        if let Some(e) = o {
            map.set_index(p, entries[*e].semantic, entries[*e].instance);
        }
    }
    map
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Highest-probability real class (never no-object) and its probability.
fn best_class(probs: &[f32], classes: &ClassTable, things_only: bool) -> Option<(usize, f32)> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &p) in probs[..classes.len()].iter().enumerate() {
        if things_only && !classes.info(i).is_thing {
            continue;
        }
        if best.is_none_or(|(_, b)| p > b) {
            best = Some((i, p));
        }
    }
    best
}

/// Fuses one prediction into a panoptic map without any thresholds on
/// births: track queries keep their ids, free thing queries receive
/// provisional ids after the largest track id in descending confidence
/// order, and stuff queries stamp instance 0.
pub fn fuse_panoptic(pred: &Prediction, classes: &ClassTable, cfg: &TrackerConfig) -> PanopticMap {
    let mut tracks = Vec::new();
    let mut free = Vec::new();
    for q in 0..pred.num_queries() {
        let probs = pred.class_probs(q);
        match pred.roles[q] {
            QueryRole::Track(id) => {
                if let Some((c, conf)) = best_class(&probs, classes, true) {
                    tracks.push(FusionEntry { query: q, semantic: classes.info(c).id, instance: id, confidence: conf });
                }
            }
            QueryRole::Free => {
                if let Some((c, conf)) = best_class(&probs, classes, false) {
                    free.push(FusionEntry { query: q, semantic: classes.info(c).id, instance: 0, confidence: conf });
                }
            }
        }
    }
    tracks.sort_by_key(|e| e.instance);
    sort_by_confidence(&mut free);
    let mut next = tracks.iter().map(|e| e.instance).max().unwrap_or(0) + 1;
    for e in &mut free {
        if classes.is_thing(e.semantic) {
            e.instance = next;
            next += 1;
        }
    }
    tracks.extend(free);
    let owner = fuse_owners(pred, &tracks, cfg.overlap_threshold);
    render_owners(pred, &tracks, &owner)
}

fn sort_by_confidence(entries: &mut [FusionEntry]) {
    entries.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.query.cmp(&b.query)));
}

fn raw_mask(pred: &Prediction, q: usize) -> Vec<bool> {
    pred.mask_logits_row(q).iter().map(|&l| l >= 0.0).collect()
}

fn iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// What happened to one track in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackEvent {
    Found,
    Missed { miss_count: u32 },
    Terminated,
}

/// Result of one tracker step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub panoptic: PanopticMap,
    /// `(track id, event)` for every track that was live on entry.
    pub events: Vec<(u32, TrackEvent)>,
    /// Ids born this frame, ascending.
    pub born: Vec<u32>,
}

/// State of one sequence.
#[derive(Debug, Clone)]
pub struct Tracker {
    config: TrackerConfig,
    classes: ClassTable,
    live: Vec<TrackState>,
    finished: Vec<TrackState>,
    next_id: u32,
    frame: usize,
}

impl Tracker {
    pub fn new(config: TrackerConfig, classes: ClassTable) -> Result<Self> {
        config.validate()?;
        Ok(Tracker { config, classes, live: Vec::new(), finished: Vec::new(), next_id: 1, frame: 0 })
    }

    /// Resumes from explicit state. Terminated tracks are a contract
    /// violation, as are ids at or above `next_id`.
    pub fn resume(
        config: TrackerConfig,
        classes: ClassTable,
        tracks: Vec<TrackState>,
        next_id: u32,
        frame: usize,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(t) = tracks.iter().find(|t| t.status != TrackStatus::Live) {
            return Err(Error::Contract(format!("track {} is terminated", t.id)));
        }
        if let Some(t) = tracks.iter().find(|t| t.id == 0 || t.id >= next_id) {
            return Err(Error::Contract(format!("track id {} not below next id {next_id}", t.id)));
        }
        let mut live = tracks;
        live.sort_by_key(|t| t.id);
        if live.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::Contract("duplicate track ids".into()));
        }
        Ok(Tracker { config, classes, live, finished: Vec::new(), next_id, frame })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn live_tracks(&self) -> &[TrackState] {
        &self.live
    }

    pub fn terminated_tracks(&self) -> &[TrackState] {
        &self.finished
    }

    /// Index of the next frame to be processed.
    pub fn frame_index(&self) -> usize {
        self.frame
    }

    /// Queries for the next frame: live tracks by ascending id, then the
    /// learned free queries.
    pub fn queries(&self, net: &Network) -> Vec<QuerySlot> {
        let mut q: Vec<QuerySlot> = self
            .live
            .iter()
            .map(|t| QuerySlot { embedding: t.embedding.clone(), role: QueryRole::Track(t.id) })
            .collect();
        q.extend(net.free_query_slots());
        q
    }

    /// Runs the network on `frame` and advances the state.
    pub fn step(&mut self, net: &Network, frame: &RgbImage) -> Result<StepOutput> {
        let pred = net.predict(frame, &self.queries(net))?;
        self.step_prediction(&pred)
    }

    /// Advances the state from a prediction whose leading queries are the
    /// live tracks in ascending id order, as produced by [`Tracker::queries`].
    pub fn step_prediction(&mut self, pred: &Prediction) -> Result<StepOutput> {
        let n_tracks = self.live.len();
        let expected: Vec<QueryRole> = self.live.iter().map(|t| QueryRole::Track(t.id)).collect();
        if pred.roles.len() < n_tracks
            || pred.roles[..n_tracks] != expected[..]
            || pred.roles[n_tracks..].iter().any(|r| *r != QueryRole::Free)
        {
            return Err(Error::Contract("prediction queries do not match live tracks".into()));
        }
        if pred.num_labels != self.classes.len() + 1 {
            return Err(Error::shape(
                "tracker",
                format!("{} labels for {} classes", pred.num_labels, self.classes.len()),
            ));
        }
        let cfg = &self.config;
        let classes = &self.classes;

        // Track queries: thing label and confidence.
        let mut track_entries = Vec::with_capacity(n_tracks);
        for (q, t) in self.live.iter().enumerate() {
            let (c, conf) = best_class(&pred.class_probs(q), classes, true)
                .ok_or_else(|| Error::Config("class table has no thing classes".into()))?;
            track_entries.push(FusionEntry { query: q, semantic: classes.info(c).id, instance: t.id, confidence: conf });
        }
        let confident: Vec<usize> =
            (0..n_tracks).filter(|&q| track_entries[q].confidence >= cfg.track_threshold).collect();
        let track_masks: Vec<Vec<bool>> = confident.iter().map(|&q| raw_mask(pred, q)).collect();

        // Free queries: stuff always enters fusion, things only as accepted candidates.
        let mut stuff = Vec::new();
        let mut candidates = Vec::new();
        for q in n_tracks..pred.num_queries() {
            let Some((c, conf)) = best_class(&pred.class_probs(q), classes, false) else { continue };
            let semantic = classes.info(c).id;
            let entry = FusionEntry { query: q, semantic, instance: 0, confidence: conf };
            if !classes.is_thing(semantic) {
                stuff.push(entry);
                continue;
            }
            if conf < cfg.det_threshold {
                continue;
            }
            let mask = raw_mask(pred, q);
            if mask.iter().filter(|&&m| m).count() < cfg.min_area {
                continue;
            }
            if track_masks.iter().any(|t| iou(&mask, t) >= cfg.spawn_iou as f64) {
                continue;
            }
            candidates.push(entry);
        }
        sort_by_confidence(&mut candidates);

        // Fuse, dropping undersized candidates until stable.
        let fused: Vec<FusionEntry> = confident.iter().map(|&q| track_entries[q]).collect();
        let (entries, owner) = loop {
            let mut entries = fused.clone();
            entries.extend(stuff.iter().copied());
            let first_candidate = entries.len();
            entries.extend(candidates.iter().copied());
            let owner = fuse_owners(pred, &entries, cfg.overlap_threshold);
            let mut area = vec![0usize; entries.len()];
            for e in owner.iter().flatten() {
                area[*e] += 1;
            }
            let before = candidates.len();
            let mut idx = first_candidate;
            candidates.retain(|_| {
                let keep = area[idx] >= cfg.min_area;
                idx += 1;
                keep
            });
            if candidates.len() == before {
                break (entries, owner);
            }
        };
        let mut area = vec![0usize; entries.len()];
        for e in owner.iter().flatten() {
            area[*e] += 1;
        }

        // Ids for surviving candidates, descending confidence.
        let mut entries = entries;
        let mut born = Vec::new();
        for e in entries.iter_mut().filter(|e| e.instance == 0 && classes.is_thing(e.semantic)) {
            e.instance = self.next_id;
            born.push((self.next_id, *e));
            self.next_id += 1;
        }
        let panoptic = render_owners(pred, &entries, &owner);

        let mut events = Vec::with_capacity(n_tracks);
        let frame = self.frame;
        let mut still_live = Vec::with_capacity(n_tracks + born.len());
        for (q, mut t) in std::mem::take(&mut self.live).into_iter().enumerate() {
            let found = confident
                .iter()
                .position(|&c| c == q)
                .is_some_and(|slot| area[slot] > 0);
            if found {
                t.embedding = pred.embedding(q).to_vec();
                t.semantic = track_entries[q].semantic;
                t.miss_count = 0;
                t.last_seen = frame;
                events.push((t.id, TrackEvent::Found));
                still_live.push(t);
            } else {
                t.miss_count += 1;
                if t.miss_count >= cfg.miss_budget {
                    t.status = TrackStatus::Terminated;
                    t.death = Some(frame);
                    events.push((t.id, TrackEvent::Terminated));
                    self.finished.push(t);
                } else {
                    events.push((t.id, TrackEvent::Missed { miss_count: t.miss_count }));
                    still_live.push(t);
                }
            }
        }
        for &(id, e) in &born {
            still_live.push(TrackState {
                id,
                embedding: pred.embedding(e.query).to_vec(),
                semantic: e.semantic,
                miss_count: 0,
                status: TrackStatus::Live,
                birth: frame,
                death: None,
                last_seen: frame,
            });
        }
        self.live = still_live;
        self.frame += 1;
        Ok(StepOutput { panoptic, events, born: born.iter().map(|b| b.0).collect() })
    }

    /// Every track seen so far, ordered by id.
    pub fn ledger(&self) -> TrackLedger {
        let mut rows: Vec<LedgerRow> = self
            .finished
            .iter()
            .chain(&self.live)
            .map(|t| LedgerRow { id: t.id, semantic: t.semantic, birth: t.birth, death: t.death })
            .collect();
        rows.sort_by_key(|r| r.id);
        TrackLedger { rows, frames: self.frame }
    }
}

/// Starts a sequence from a first-frame prediction made with free queries only.
pub fn start_sequence(
    pred: &Prediction,
    classes: &ClassTable,
    cfg: &TrackerConfig,
) -> Result<(Tracker, StepOutput)> {
    if pred.roles.iter().any(|r| *r != QueryRole::Free) {
        return Err(Error::Contract("first frame must use free queries only".into()));
    }
    let mut tracker = Tracker::new(cfg.clone(), classes.clone())?;
    let out = tracker.step_prediction(pred)?;
    Ok((tracker, out))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerRow {
    pub id: u32,
    pub semantic: u16,
    pub birth: usize,
    pub death: Option<usize>,
}

/// Per-sequence summary of track lifetimes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackLedger {
    pub rows: Vec<LedgerRow>,
    /// Number of frames processed.
    pub frames: usize,
}

impl TrackLedger {
    /// One line per track: `id class birth death`. Tracks still live at
    /// the end of the sequence report the last processed frame as death.
    pub fn render(&self, classes: &ClassTable) -> String {
        let mut s = String::from("# track_id class birth death\n");
        let last = self.frames.saturating_sub(1);
        for r in &self.rows {
            let name = classes
                .index_of(r.semantic)
                .map_or_else(|| r.semantic.to_string(), |i| classes.info(i).name.clone());
            let _ = writeln!(s, "{} {} {} {}", r.id, name, r.birth, r.death.unwrap_or(last));
        }
        s
    }
}

/// Runs the tracker over a whole sequence.
pub fn track_sequence(
    net: &Network,
    frames: &[RgbImage],
    classes: &ClassTable,
    cfg: &TrackerConfig,
) -> Result<(Vec<PanopticMap>, TrackLedger)> {
    let mut tracker = Tracker::new(cfg.clone(), classes.clone())?;
    let mut maps = Vec::with_capacity(frames.len());
    for frame in frames {
        maps.push(tracker.step(net, frame)?.panoptic);
    }
    Ok((maps, tracker.ledger()))
}

/// `true` if `map` only uses known classes, void, and instance ids on things.
pub fn is_valid_output(map: &PanopticMap, classes: &ClassTable) -> bool {
    map.semantic().iter().all(|&s| s == VOID_SEMANTIC || classes.index_of(s).is_some())
        && map.validate(classes).is_ok()
}

/// Builds a prediction from per-query `(role, class probabilities, mask
/// probabilities)`, for driving a tracker without a model. Embeddings are
/// one-dimensional and hold the query index.
pub fn scripted_prediction(
    w: usize,
    h: usize,
    labels: usize,
    queries: &[(QueryRole, Vec<f32>, Vec<f32>)],
) -> Prediction {
    let mut class_logits = Vec::new();
    let mut mask_logits = Vec::new();
    for (_, probs, mask) in queries {
        assert_eq!(probs.len(), labels);
        class_logits.extend(probs.iter().map(|p| p.max(1e-12).ln()));
        mask_logits.extend(mask.iter().map(|&m| {
            let m = m.clamp(1e-7, 1.0 - 1e-7);
            (m / (1.0 - m)).ln()
        }));
    }
    Prediction {
        roles: queries.iter().map(|q| q.0).collect(),
        class_logits,
        mask_logits,
        embeddings: (0..queries.len()).map(|i| i as f32).collect(),
        num_labels: labels,
        embed_dim: 1,
        width: w,
        height: h,
    }
}
