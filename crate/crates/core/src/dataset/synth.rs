use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ClassTable, PanopticMap, SequenceDataset};
use crate::kv::KvDoc;
use crate::{Error, Result};

/// An instance (1-based id) hidden for `len` frames starting at `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Disappearance {
    pub instance: u32,
    pub start: usize,
    pub len: usize,
}

impl Disappearance {
    fn hides(&self, instance: u32, frame: usize) -> bool {
        self.instance == instance && frame >= self.start && frame < self.start + self.len
    }
}

/// Moving rectangles and circles over horizontal stuff bands.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub sequences: usize,
    pub instances: usize,
    /// Thing class of instance `i` is `instance_classes[i % len]`.
    pub instance_classes: Vec<u16>,
    /// Stuff classes painted as equal-height bands, top to bottom.
    pub stuff_classes: Vec<u16>,
    pub min_speed: f32,
    pub max_speed: f32,
    pub min_size: usize,
    pub max_size: usize,
    pub disappearances: Vec<Disappearance>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            width: 32,
            height: 32,
            frames: 20,
            sequences: 2,
            instances: 2,
            instance_classes: vec![3, 4],
            stuff_classes: vec![0, 1, 2],
            min_speed: 0.5,
            max_speed: 1.5,
            min_size: 7,
            max_size: 10,
            disappearances: Vec::new(),
            seed: 42,
        }
    }
}

const KEYS: &[&str] = &[
    "synth.width",
    "synth.height",
    "synth.frames",
    "synth.sequences",
    "synth.instances",
    "synth.instance_classes",
    "synth.stuff_classes",
    "synth.min_speed",
    "synth.max_speed",
    "synth.min_size",
    "synth.max_size",
    "synth.disappear",
    "synth.seed",
];

impl SyntheticConfig {
    pub fn validate(&self, classes: &ClassTable) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.frames < 1 {
            return cfg_err("synthetic frame count must be at least 1".into());
        }
        if self.width == 0 || self.height == 0 {
            return cfg_err("synthetic image size must be positive".into());
        }
        if self.stuff_classes.is_empty() {
            return cfg_err("at least one stuff class is required".into());
        }
        if let Some(s) = self.stuff_classes.iter().find(|&&s| !classes.is_stuff(s)) {
            return cfg_err(format!("class {s} is not a stuff class"));
        }
        if self.instances > 0 && self.instance_classes.is_empty() {
            return cfg_err("instances require at least one instance class".into());
        }
        if let Some(c) = self.instance_classes.iter().find(|&&c| !classes.is_thing(c)) {
            return cfg_err(format!("class {c} is not a thing class"));
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return cfg_err(format!("invalid size range {}..={}", self.min_size, self.max_size));
        }
        if self.instances > 0 && self.max_size > self.width.min(self.height) {
            return cfg_err(format!(
                "instances up to {} px do not fit a {}x{} image",
                self.max_size, self.width, self.height
            ));
        }
        if !(self.min_speed >= 0.0 && self.min_speed <= self.max_speed) {
            return cfg_err(format!("invalid speed range {}..{}", self.min_speed, self.max_speed));
        }
        if let Some(d) = self
            .disappearances
            .iter()
            .find(|d| d.instance == 0 || d.instance as usize > self.instances)
        {
            return cfg_err(format!("disappearance names unknown instance {}", d.instance));
        }
        Ok(())
    }

    /// Manifest recording every field, seed included.
    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("synth.width", self.width);
        doc.set("synth.height", self.height);
        doc.set("synth.frames", self.frames);
        doc.set("synth.sequences", self.sequences);
        doc.set("synth.instances", self.instances);
        doc.set_list("synth.instance_classes", &self.instance_classes);
        doc.set_list("synth.stuff_classes", &self.stuff_classes);
        doc.set("synth.min_speed", self.min_speed);
        doc.set("synth.max_speed", self.max_speed);
        doc.set("synth.min_size", self.min_size);
        doc.set("synth.max_size", self.max_size);
        let spans: Vec<String> = self
            .disappearances
            .iter()
            .map(|d| format!("{}:{}:{}", d.instance, d.start, d.len))
            .collect();
        doc.set_list("synth.disappear", &spans);
        doc.set("synth.seed", self.seed);
        doc
    }

    /// Reads `synth.*` keys, falling back to defaults for absent ones.
    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let d = SyntheticConfig::default();
        let disappearances = match doc.get_list::<String>("synth.disappear")? {
            None => d.disappearances.clone(),
            Some(items) => items
                .iter()
                .map(|item| {
                    let parts: Vec<&str> = item.split(':').collect();
                    let bad = || Error::Config(format!("synth.disappear: bad span {item:?}"));
                    let [i, s, l] = parts[..] else { return Err(bad()) };
                    Ok(Disappearance {
                        instance: i.parse().map_err(|_| bad())?,
                        start: s.parse().map_err(|_| bad())?,
                        len: l.parse().map_err(|_| bad())?,
                    })
                })
                .collect::<Result<_>>()?,
        };
        Ok(SyntheticConfig {
            width: doc.get_or("synth.width", d.width)?,
            height: doc.get_or("synth.height", d.height)?,
            frames: doc.get_or("synth.frames", d.frames)?,
            sequences: doc.get_or("synth.sequences", d.sequences)?,
            instances: doc.get_or("synth.instances", d.instances)?,
            instance_classes: doc.get_list("synth.instance_classes")?.unwrap_or(d.instance_classes),
            stuff_classes: doc.get_list("synth.stuff_classes")?.unwrap_or(d.stuff_classes),
            min_speed: doc.get_or("synth.min_speed", d.min_speed)?,
            max_speed: doc.get_or("synth.max_speed", d.max_speed)?,
            min_size: doc.get_or("synth.min_size", d.min_size)?,
            max_size: doc.get_or("synth.max_size", d.max_size)?,
            disappearances,
            seed: doc.get_or("synth.seed", d.seed)?,
        })
    }

    pub fn known_keys() -> &'static [&'static str] {
        KEYS
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect { half_w: f32, half_h: f32 },
    Circle { radius: f32 },
}

#[derive(Debug, Clone)]
struct Mover {
    id: u32,
    class: u16,
    color: [u8; 3],
    shape: Shape,
    cx: f32,
    cy: f32,
    vx: f32,
    vy: f32,
}

impl Mover {
    fn half_extent(&self) -> (f32, f32) {
        match self.shape {
            Shape::Rect { half_w, half_h } => (half_w, half_h),
            Shape::Circle { radius } => (radius, radius),
        }
    }

    fn covers(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
        match self.shape {
            Shape::Rect { half_w, half_h } => {
                px >= self.cx - half_w && px < self.cx + half_w && py >= self.cy - half_h
                    && py < self.cy + half_h
            }
            Shape::Circle { radius } => {
                let (dx, dy) = (px - self.cx, py - self.cy);
                dx * dx + dy * dy <= radius * radius
            }
        }
    }

    /// Linear motion, reflecting off the image border.
    fn advance(&mut self, width: f32, height: f32) {
        let (hw, hh) = self.half_extent();
        self.cx += self.vx;
        self.cy += self.vy;
        if self.cx - hw < 0.0 {
            self.cx = 2.0 * hw - self.cx;
            self.vx = -self.vx;
        } else if self.cx + hw > width {
            self.cx = 2.0 * (width - hw) - self.cx;
            self.vx = -self.vx;
        }
        if self.cy - hh < 0.0 {
            self.cy = 2.0 * hh - self.cy;
            self.vy = -self.vy;
        } else if self.cy + hh > height {
            self.cy = 2.0 * (height - hh) - self.cy;
            self.vy = -self.vy;
        }
    }
}

const STUFF_COLORS: [[u8; 3]; 6] = [
    [70, 130, 180],
    [70, 70, 70],
    [128, 64, 128],
    [107, 142, 35],
    [244, 35, 232],
    [152, 251, 152],
];

const THING_COLORS: [[u8; 3]; 4] = [[0, 0, 142], [220, 20, 60], [255, 200, 0], [0, 200, 200]];

fn thing_color(class_slot: usize, instance_slot: usize) -> [u8; 3] {
    let base = THING_COLORS[class_slot % THING_COLORS.len()];
    let shift = ((instance_slot * 45) % 135) as u8;
    [base[0].saturating_sub(shift / 2), base[1].saturating_add(shift), base[2]]
}

/// Generates sequence `index` of the dataset described by `cfg`.
pub fn generate_synthetic_sequence(
    cfg: &SyntheticConfig,
    classes: &ClassTable,
    index: usize,
) -> Result<SequenceDataset> {
    cfg.validate(classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(index as u64));
    let (w, h) = (cfg.width, cfg.height);
    let band = |y: usize| cfg.stuff_classes[y * cfg.stuff_classes.len() / h];
    let things = classes.thing_ids();

    let mut movers: Vec<Mover> = (0..cfg.instances)
        .map(|i| {
            let class = cfg.instance_classes[i % cfg.instance_classes.len()];
            let class_slot = things.iter().position(|&t| t == class).unwrap_or(0);
            let size = |rng: &mut ChaCha8Rng| rng.random_range(cfg.min_size..=cfg.max_size) as f32;
            let shape = if rng.random_bool(0.5) {
                Shape::Rect { half_w: size(&mut rng) / 2.0, half_h: size(&mut rng) / 2.0 }
            } else {
                Shape::Circle { radius: size(&mut rng) / 2.0 }
            };
            let (hw, hh) = match shape {
                Shape::Rect { half_w, half_h } => (half_w, half_h),
                Shape::Circle { radius } => (radius, radius),
            };
            let cx = rng.random_range(hw..=(w as f32 - hw));
            let cy = rng.random_range(hh..=(h as f32 - hh));
            let speed = if cfg.max_speed > cfg.min_speed {
                rng.random_range(cfg.min_speed..cfg.max_speed)
            } else {
                cfg.min_speed
            };
            let angle = rng.random_range(0.0..std::f32::consts::TAU);
            Mover {
                id: i as u32 + 1,
                class,
                color: thing_color(class_slot, i),
                shape,
                cx,
                cy,
                vx: speed * angle.cos(),
                vy: speed * angle.sin(),
            }
        })
        .collect();

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut annotations = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let mut img = RgbImage::new(w as u32, h as u32);
        let mut map = PanopticMap::filled(w, h, 0, 0);
        for y in 0..h {
            let stuff = band(y);
            let slot = cfg.stuff_classes.iter().position(|&s| s == stuff).unwrap_or(0);
            for x in 0..w {
                img.put_pixel(x as u32, y as u32, Rgb(STUFF_COLORS[slot % STUFF_COLORS.len()]));
                map.set(x, y, stuff, 0);
            }
        }
        for m in &movers {
            if cfg.disappearances.iter().any(|d| d.hides(m.id, t)) {
                continue;
            }
            for y in 0..h {
                for x in 0..w {
                    if m.covers(x, y) {
                        img.put_pixel(x as u32, y as u32, Rgb(m.color));
                        map.set(x, y, m.class, m.id);
                    }
                }
            }
        }
        frames.push(img);
        annotations.push(map);
        for m in &mut movers {
            m.advance(w as f32, h as f32);
        }
    }
    SequenceDataset::new(format!("{index:04}"), frames, annotations, classes.clone())
}

pub fn generate_synthetic_dataset(
    cfg: &SyntheticConfig,
    classes: &ClassTable,
) -> Result<Vec<SequenceDataset>> {
    (0..cfg.sequences.max(1))
        .map(|i| generate_synthetic_sequence(cfg, classes, i))
        .collect()
}
