//! Run configuration and the train / infer / eval / synth / overlay entry
//! points shared by the CLI and the C ABI.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{self, IMAGES_DIR, PANOPTIC_DIR};
use crate::dataset::{generate_synthetic_dataset, ClassTable, PanopticMap, SequenceDataset, SyntheticConfig};
use crate::episode::{build_episode, sample_episode, MIN_SEQUENCE_LEN};
use crate::kv::KvDoc;
use crate::loss::LossWeights;
use crate::network::{ModelConfig, Network};
use crate::stq::{StqAccumulator, StqReport};
use crate::tracker::{track_sequence, TrackLedger, TrackerConfig};
use crate::training::{episode_gradients, Sgd};
use crate::{Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG_FILE: &str = "train.log";
pub const REPORT_FILE: &str = "report.txt";
pub const LEDGER_DIR: &str = "tracks";

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f32,
    pub momentum: f32,
    pub iterations: usize,
    /// Write an intermediate checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 1e-2, momentum: 0.9, iterations: 2000, checkpoint_every: 0 }
    }
}

impl OptimConfig {
    const KEYS: &'static [&'static str] =
        &["optim.lr", "optim.momentum", "optim.iterations", "optim.checkpoint_every"];

    fn from_kv(doc: &KvDoc) -> Result<Self> {
        let d = OptimConfig::default();
        let cfg = OptimConfig {
            lr: doc.get_or("optim.lr", d.lr)?,
            momentum: doc.get_or("optim.momentum", d.momentum)?,
            iterations: doc.get_or("optim.iterations", d.iterations)?,
            checkpoint_every: doc.get_or("optim.checkpoint_every", d.checkpoint_every)?,
        };
        if !(cfg.lr.is_finite() && cfg.lr > 0.0) {
            return Err(Error::Config(format!("optim.lr = {} must be positive", cfg.lr)));
        }
        if !(0.0..1.0).contains(&cfg.momentum) {
            return Err(Error::Config(format!("optim.momentum = {} is outside [0, 1)", cfg.momentum)));
        }
        Ok(cfg)
    }

    fn write_kv(&self, doc: &mut KvDoc) {
        doc.set("optim.lr", self.lr);
        doc.set("optim.momentum", self.momentum);
        doc.set("optim.iterations", self.iterations);
        doc.set("optim.checkpoint_every", self.checkpoint_every);
    }
}

/// Everything a run needs. Relative paths in a config file are resolved
/// against the file's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    /// `None` selects the built-in taxonomy.
    pub class_table: Option<PathBuf>,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub tracker: TrackerConfig,
    pub optim: OptimConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

const RUN_KEYS: &[&str] = &["dataset.root", "dataset.classes", "seed", "output.dir"];

impl RunConfig {
    /// Defaults around a dataset root, with the model sized for `classes`.
    pub fn new(dataset_root: impl Into<PathBuf>, output_dir: impl Into<PathBuf>, classes: &ClassTable) -> Self {
        RunConfig {
            dataset_root: dataset_root.into(),
            class_table: None,
            model: ModelConfig { num_classes: classes.len(), ..Default::default() },
            loss: LossWeights::default(),
            tracker: TrackerConfig::default(),
            optim: OptimConfig::default(),
            seed: 0,
            output_dir: output_dir.into(),
        }
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let doc = KvDoc::parse(text)?;
        let known: Vec<&str> = RUN_KEYS
            .iter()
            .chain(ModelConfig::KEYS)
            .chain(LossWeights::KEYS)
            .chain(TrackerConfig::KEYS)
            .chain(OptimConfig::KEYS)
            .copied()
            .collect();
        doc.reject_unknown(&known)?;
        let resolve = |p: String| {
            let p = PathBuf::from(p);
            if p.is_absolute() { p } else { base.join(p) }
        };
        let class_table = doc.get::<String>("dataset.classes")?.map(resolve);
        let classes = match &class_table {
            Some(p) => ClassTable::load(p)?,
            None => ClassTable::default(),
        };
        Ok(RunConfig {
            dataset_root: resolve(doc.require("dataset.root")?),
            class_table,
            model: ModelConfig::from_kv(&doc, classes.len())?,
            loss: LossWeights::from_kv(&doc)?,
            tracker: TrackerConfig::from_kv(&doc)?,
            optim: OptimConfig::from_kv(&doc)?,
            seed: doc.get_or("seed", 0)?,
            output_dir: resolve(doc.get_or("output.dir", "out".to_string())?),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn render(&self) -> String {
        let mut doc = KvDoc::new();
        doc.set("dataset.root", self.dataset_root.display());
        if let Some(c) = &self.class_table {
            doc.set("dataset.classes", c.display());
        }
        doc.set("seed", self.seed);
        doc.set("output.dir", self.output_dir.display());
        self.model.write_kv(&mut doc);
        self.loss.write_kv(&mut doc);
        self.tracker.write_kv(&mut doc);
        self.optim.write_kv(&mut doc);
        doc.render()
    }

    pub fn classes(&self) -> Result<ClassTable> {
        match &self.class_table {
            Some(p) => ClassTable::load(p),
            None => Ok(ClassTable::default()),
        }
    }

    /// Checks paths and cross-field consistency; no side effects.
    pub fn validate(&self) -> Result<ClassTable> {
        let classes = self.classes()?;
        if self.model.num_classes != classes.len() {
            return Err(Error::Config(format!(
                "model has {} classes, class table has {}",
                self.model.num_classes,
                classes.len()
            )));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.tracker.validate()?;
        if !self.dataset_root.join(IMAGES_DIR).is_dir() {
            return Err(Error::Config(format!(
                "dataset root {} has no {IMAGES_DIR}/ directory",
                self.dataset_root.display()
            )));
        }
        Ok(classes)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLogRecord {
    pub iteration: usize,
    pub k: usize,
    pub l_sd: f32,
    pub l_t: f32,
    pub l_total: f32,
    pub wall_secs: f64,
}

impl fmt::Display for TrainingLogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter={} k={} l_sd={} l_t={} l_total={} wall={:.3}",
            self.iteration, self.k, self.l_sd, self.l_t, self.l_total, self.wall_secs
        )
    }
}

impl TrainingLogRecord {
    pub fn parse(line: &str) -> Result<Self> {
        let mut rec = TrainingLogRecord { iteration: 0, k: 0, l_sd: 0.0, l_t: 0.0, l_total: 0.0, wall_secs: 0.0 };
        let bad = || Error::Format { source_name: "training log".into(), detail: format!("bad line {line:?}") };
        let mut seen = 0;
        for field in line.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(bad)?;
            match k {
                "iter" => rec.iteration = v.parse().map_err(|_| bad())?,
                "k" => rec.k = v.parse().map_err(|_| bad())?,
                "l_sd" => rec.l_sd = v.parse().map_err(|_| bad())?,
                "l_t" => rec.l_t = v.parse().map_err(|_| bad())?,
                "l_total" => rec.l_total = v.parse().map_err(|_| bad())?,
                "wall" => rec.wall_secs = v.parse().map_err(|_| bad())?,
                _ => return Err(bad()),
            }
            seen += 1;
        }
        if seen != 6 {
            return Err(bad());
        }
        Ok(rec)
    }
}

pub fn load_dataset(root: &Path, classes: &ClassTable) -> Result<Vec<SequenceDataset>> {
    let names = dataset::list_sequences(root, IMAGES_DIR)?;
    if names.is_empty() {
        return Err(Error::Config(format!("no sequences under {}", root.join(IMAGES_DIR).display())));
    }
    names.iter().map(|n| dataset::load_sequence(root, n, classes)).collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub log: Vec<TrainingLogRecord>,
    pub checkpoint: PathBuf,
}

/// Episode-wise training. Writes `checkpoint.bin` and `train.log` into the
/// output directory; identical configs give bit-identical checkpoints.
pub fn run_train(cfg: &RunConfig, mut on_record: impl FnMut(&TrainingLogRecord)) -> Result<TrainOutcome> {
    let classes = cfg.validate()?;
    let data = load_dataset(&cfg.dataset_root, &classes)?;
    if let Some(s) = data.iter().find(|s| s.frames.len() < MIN_SEQUENCE_LEN) {
        return Err(Error::Sampling(format!(
            "sequence {} has {} frames, training needs at least {MIN_SEQUENCE_LEN}",
            s.name,
            s.frames.len()
        )));
    }
    let mut net = Network::new(cfg.model.clone(), cfg.seed)?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let log_path = out.join(TRAIN_LOG_FILE);
    let mut log_file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_E915_0DE5);
    let mut opt = Sgd::new(cfg.optim.lr, cfg.optim.momentum);
    let mut log = Vec::with_capacity(cfg.optim.iterations);
    let start = Instant::now();
    for it in 1..=cfg.optim.iterations {
        let seq = &data[rng.random_range(0..data.len())];
        let frames = sample_episode(seq.frames.len(), &mut rng)?;
        let episode = build_episode(seq, &frames)?;
        net.params.zero_grads();
        let b = episode_gradients(&mut net, &episode, &classes, &cfg.loss)?;
        opt.step(&mut net.params);
        let rec = TrainingLogRecord {
            iteration: it,
            k: episode.k(),
            l_sd: b.l_sd,
            l_t: b.l_t,
            l_total: b.l_total,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        writeln!(log_file, "{rec}").map_err(|e| Error::io(&log_path, e))?;
        on_record(&rec);
        log.push(rec);
        if cfg.optim.checkpoint_every > 0 && it % cfg.optim.checkpoint_every == 0 {
            net.params.save(&ckpt)?;
        }
    }
    net.params.save(&ckpt)?;
    Ok(TrainOutcome { network: net, log, checkpoint: ckpt })
}

/// Builds the configured network and loads `checkpoint` into it.
pub fn load_network(cfg: &RunConfig, checkpoint: &Path) -> Result<Network> {
    let mut net = Network::new(cfg.model.clone(), cfg.seed)?;
    net.params.load_file(checkpoint)?;
    Ok(net)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferredSequence {
    pub name: String,
    pub maps: Vec<PanopticMap>,
    pub ledger: TrackLedger,
}

/// Tracks every sequence under `input_root/images/` and writes
/// `out/panoptic/<seq>/<frame>.png` and `out/tracks/<seq>.txt`.
pub fn run_infer(cfg: &RunConfig, checkpoint: &Path, input_root: &Path, out: &Path) -> Result<Vec<InferredSequence>> {
    let classes = cfg.classes()?;
    cfg.model.validate()?;
    cfg.tracker.validate()?;
    let net = load_network(cfg, checkpoint)?;
    let names = dataset::list_sequences(input_root, IMAGES_DIR)?;
    let mut inputs = Vec::with_capacity(names.len());
    for name in &names {
        let frames = dataset::load_frames(&input_root.join(IMAGES_DIR).join(name))?;
        if frames.is_empty() {
            return Err(Error::Config(format!("sequence {name} has no frames")));
        }
        inputs.push(frames);
    }
    let mut results = Vec::with_capacity(names.len());
    for (name, frames) in names.iter().zip(&inputs) {
        let (maps, ledger) = track_sequence(&net, frames, &classes, &cfg.tracker)?;
        let dir = out.join(PANOPTIC_DIR).join(name);
        for (i, m) in maps.iter().enumerate() {
            dataset::write_panoptic_png(&dataset::frame_path(&dir, i), m)?;
        }
        let ledger_dir = out.join(LEDGER_DIR);
        std::fs::create_dir_all(&ledger_dir).map_err(|e| Error::io(&ledger_dir, e))?;
        let path = ledger_dir.join(format!("{name}.txt"));
        std::fs::write(&path, ledger.render(&classes)).map_err(|e| Error::io(&path, e))?;
        results.push(InferredSequence { name: name.clone(), maps, ledger });
    }
    Ok(results)
}

/// Scores `pred_root/panoptic/*` against `gt_root/panoptic/*`. Writes
/// `report.txt` into `out` when given.
pub fn run_eval(pred_root: &Path, gt_root: &Path, classes: &ClassTable, out: Option<&Path>) -> Result<StqReport> {
    let gt_names = dataset::list_sequences(gt_root, PANOPTIC_DIR)?;
    let pred_names = dataset::list_sequences(pred_root, PANOPTIC_DIR)?;
    let mut problems = Vec::new();
    let mut pairs = Vec::new();
    for name in &gt_names {
        let gt = dataset::load_panoptic_dir(&gt_root.join(PANOPTIC_DIR).join(name))?;
        if !pred_names.contains(name) {
            problems.push(format!("{name} (missing prediction)"));
            continue;
        }
        let pred = dataset::load_panoptic_dir(&pred_root.join(PANOPTIC_DIR).join(name))?;
        if pred.len() != gt.len() {
            problems.push(format!("{name} ({} predicted vs {} ground-truth frames)", pred.len(), gt.len()));
            continue;
        }
        pairs.push((name, pred, gt));
    }
    for name in pred_names.iter().filter(|n| !gt_names.contains(n)) {
        problems.push(format!("{name} (no ground truth)"));
    }
    if !problems.is_empty() {
        return Err(Error::Alignment(format!("misaligned sequences: {}", problems.join(", "))));
    }
    let mut acc = StqAccumulator::new();
    for (name, pred, gt) in &pairs {
        acc.add_sequence(name, pred, gt, classes)?;
    }
    let report = acc.report(classes)?;
    if let Some(out) = out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join(REPORT_FILE);
        std::fs::write(&path, report.render()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

/// Writes a synthetic dataset and its manifest (`synth.cfg`) under `out`.
pub fn run_synth(cfg: &SyntheticConfig, classes: &ClassTable, out: &Path) -> Result<Vec<SequenceDataset>> {
    cfg.validate(classes)?;
    let data = generate_synthetic_dataset(cfg, classes)?;
    for seq in &data {
        dataset::write_sequence(out, seq)?;
    }
    let manifest = out.join("synth.cfg");
    std::fs::write(&manifest, cfg.to_kv().render()).map_err(|e| Error::io(&manifest, e))?;
    Ok(data)
}

/// Overlay color of a segment: hue from the class, spread per instance by
/// the golden ratio so nearby ids differ strongly.
pub fn segment_color(semantic: u16, instance: u32) -> Rgb<u8> {
    let mut h = (semantic as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    h ^= h >> 29;
    let base = (h % 1000) as f64 / 1000.0;
    let hue = (base + instance as f64 * 0.618_033_988_749_895).fract();
    let (s, v) = if instance == 0 { (0.55, 0.85) } else { (0.9, 1.0) };
    hsv_to_rgb(hue, s, v)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> Rgb<u8> {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    let c = |x: f64| (x * 255.0).round() as u8;
    Rgb([c(r), c(g), c(b)])
}

pub const OVERLAY_ALPHA: f32 = 0.5;

/// Blends segment colors over the frame; void pixels are left untouched.
pub fn render_overlay(frame: &RgbImage, map: &PanopticMap, classes: &ClassTable) -> Result<RgbImage> {
    if frame.width() as usize != map.width() || frame.height() as usize != map.height() {
        return Err(Error::shape(
            "render_overlay",
            format!("frame {}x{} vs map {}x{}", frame.width(), frame.height(), map.width(), map.height()),
        ));
    }
    let mut out = frame.clone();
    for (i, px) in out.pixels_mut().enumerate() {
        let (s, inst) = (map.semantic()[i], map.instance()[i]);
        if classes.index_of(s).is_none() {
            continue;
        }
        let c = segment_color(s, inst);
        for ch in 0..3 {
            let blended = (1.0 - OVERLAY_ALPHA) * px.0[ch] as f32 + OVERLAY_ALPHA * c.0[ch] as f32;
            px.0[ch] = blended.round() as u8;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn log_record_round_trips() {
        let r = TrainingLogRecord { iteration: 3, k: 4, l_sd: 1.25, l_t: 0.1, l_total: 0.445, wall_secs: 1.5 };
        let back = TrainingLogRecord::parse(&r.to_string()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn void_overlay_is_identity() {
        let mut frame = RgbImage::new(3, 2);
        frame.put_pixel(1, 1, Rgb([9, 8, 7]));
        let out = render_overlay(&frame, &PanopticMap::void(3, 2), &ClassTable::default()).unwrap();
        assert_eq!(out, frame);
        assert!(render_overlay(&frame, &PanopticMap::void(2, 2), &ClassTable::default()).is_err());
    }

    #[test]
    fn sixty_four_ids_get_distinct_colors() {
        for class in [3u16, 4] {
            let colors: HashSet<[u8; 3]> = (1..=64).map(|i| segment_color(class, i).0).collect();
            assert_eq!(colors.len(), 64);
        }
        assert_eq!(segment_color(3, 7), segment_color(3, 7));
    }

    #[test]
    fn config_parse_resolves_relative_paths_and_rejects_unknown_keys() {
        let cfg = RunConfig::parse("dataset.root = data\nseed = 3\nmodel.embed_dim = 16\n", Path::new("/x")).unwrap();
        assert_eq!(cfg.dataset_root, PathBuf::from("/x/data"));
        assert_eq!(cfg.output_dir, PathBuf::from("/x/out"));
        assert_eq!(cfg.model.embed_dim, 16);
        assert_eq!(cfg.seed, 3);
        let again = RunConfig::parse(&cfg.render(), Path::new("/")).unwrap();
        assert_eq!(again, cfg);
        assert!(matches!(RunConfig::parse("dataset.root = d\nbogus = 1\n", Path::new(".")), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("seed = 1\n", Path::new(".")), Err(Error::Config(_))));
    }
}
