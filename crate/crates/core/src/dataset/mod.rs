//! STEP-style panoptic annotations, sequence loading and synthetic videos.
//!
//! Annotations are 3-channel PNGs where R holds the semantic class and
//! `G * 256 + B` holds the instance id. Sequences live under
//! `<root>/images/<seq>/<frame:06d>.png` and
//! `<root>/panoptic/<seq>/<frame:06d>.png`.

mod codec;
mod synth;

pub use codec::{
    decode_panoptic, decode_panoptic_file, encode_panoptic, list_sequences, load_frames,
    load_panoptic_dir, load_sequence, read_rgb_png, write_panoptic_png, write_rgb_png,
    write_sequence, frame_path, IMAGES_DIR, PANOPTIC_DIR,
};
pub use synth::{generate_synthetic_dataset, generate_synthetic_sequence, Disappearance, SyntheticConfig};

use std::collections::BTreeSet;
use std::path::Path;

use image::RgbImage;

use crate::{Error, Result};

/// Semantic id of void / ignored pixels.
pub const VOID_SEMANTIC: u16 = 255;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassInfo {
    pub id: u16,
    pub name: String,
    pub is_thing: bool,
}

/// Ordered class taxonomy. The position of a class in the table is its
/// index in the network's class head; index `len()` is the no-object label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTable {
    classes: Vec<ClassInfo>,
}

impl Default for ClassTable {
    /// Synthetic taxonomy: three stuff classes, two thing classes.
    fn default() -> Self {
        let mk = |id, name: &str, is_thing| ClassInfo { id, name: name.to_string(), is_thing };
        ClassTable {
            classes: vec![
                mk(0, "sky", false),
                mk(1, "building", false),
                mk(2, "road", false),
                mk(3, "car", true),
                mk(4, "person", true),
            ],
        }
    }
}

impl ClassTable {
    pub fn new(classes: Vec<ClassInfo>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Config("class table is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for c in &classes {
            if c.id >= VOID_SEMANTIC {
                return Err(Error::Config(format!("class id {} is reserved for void", c.id)));
            }
            if !seen.insert(c.id) {
                return Err(Error::Config(format!("duplicate class id {}", c.id)));
            }
        }
        Ok(ClassTable { classes })
    }

    /// Parses `id,name,is_thing` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut classes = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::Config(format!("class table line {}: {line:?}", lineno + 1));
            let [id, name, thing] = fields[..] else { return Err(bad()) };
            let is_thing = match thing {
                "1" | "true" | "thing" => true,
                "0" | "false" | "stuff" => false,
                _ => return Err(bad()),
            };
            classes.push(ClassInfo {
                id: id.parse().map_err(|_| bad())?,
                name: name.to_string(),
                is_thing,
            });
        }
        ClassTable::new(classes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ClassTable::parse(&text)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("# id,name,is_thing\n");
        for c in &self.classes {
            out.push_str(&format!("{},{},{}\n", c.id, c.name, u8::from(c.is_thing)));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    /// Head index of a semantic id, `None` for void or unknown ids.
    pub fn index_of(&self, semantic: u16) -> Option<usize> {
        self.classes.iter().position(|c| c.id == semantic)
    }

    pub fn info(&self, index: usize) -> &ClassInfo {
        &self.classes[index]
    }

    pub fn is_thing(&self, semantic: u16) -> bool {
        self.classes.iter().any(|c| c.id == semantic && c.is_thing)
    }

    pub fn is_stuff(&self, semantic: u16) -> bool {
        self.classes.iter().any(|c| c.id == semantic && !c.is_thing)
    }

    pub fn thing_ids(&self) -> Vec<u16> {
        self.classes.iter().filter(|c| c.is_thing).map(|c| c.id).collect()
    }

    pub fn stuff_ids(&self) -> Vec<u16> {
        self.classes.iter().filter(|c| !c.is_thing).map(|c| c.id).collect()
    }
}

/// Per-pixel `(semantic_id, instance_id)` grid for one frame, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PanopticMap {
    width: usize,
    height: usize,
    semantic: Vec<u16>,
    instance: Vec<u32>,
}

impl PanopticMap {
    pub fn new(width: usize, height: usize, semantic: Vec<u16>, instance: Vec<u32>) -> Result<Self> {
        let n = width * height;
        if semantic.len() != n || instance.len() != n {
            return Err(Error::shape(
                "panoptic_map",
                format!(
                    "{width}x{height} map with {} semantic and {} instance values",
                    semantic.len(),
                    instance.len()
                ),
            ));
        }
        Ok(PanopticMap { width, height, semantic, instance })
    }

    pub fn filled(width: usize, height: usize, semantic: u16, instance: u32) -> Self {
        let n = width * height;
        PanopticMap { width, height, semantic: vec![semantic; n], instance: vec![instance; n] }
    }

    pub fn void(width: usize, height: usize) -> Self {
        Self::filled(width, height, VOID_SEMANTIC, 0)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.semantic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.semantic.is_empty()
    }

    pub fn semantic(&self) -> &[u16] {
        &self.semantic
    }

    pub fn instance(&self) -> &[u32] {
        &self.instance
    }

    pub fn get(&self, x: usize, y: usize) -> (u16, u32) {
        let i = y * self.width + x;
        (self.semantic[i], self.instance[i])
    }

    pub fn set(&mut self, x: usize, y: usize, semantic: u16, instance: u32) {
        let i = y * self.width + x;
        self.semantic[i] = semantic;
        self.instance[i] = instance;
    }

    pub fn set_index(&mut self, i: usize, semantic: u16, instance: u32) {
        self.semantic[i] = semantic;
        self.instance[i] = instance;
    }

    pub fn same_size(&self, other: &PanopticMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Checks that instance ids appear only on thing classes.
    pub fn validate(&self, classes: &ClassTable) -> Result<()> {
        for (i, (&s, &inst)) in self.semantic.iter().zip(&self.instance).enumerate() {
            if inst > 0 && !classes.is_thing(s) {
                return Err(Error::Integrity(format!(
                    "pixel ({}, {}) has instance {inst} on non-thing class {s}",
                    i % self.width,
                    i / self.width
                )));
            }
        }
        Ok(())
    }

    /// Distinct positive instance ids, ascending.
    pub fn instance_ids(&self) -> BTreeSet<u32> {
        self.instance.iter().copied().filter(|&i| i > 0).collect()
    }
}

/// One video: frames with aligned annotations and the class taxonomy.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub name: String,
    pub frames: Vec<RgbImage>,
    pub annotations: Vec<PanopticMap>,
    pub classes: ClassTable,
}

impl SequenceDataset {
    pub fn new(
        name: impl Into<String>,
        frames: Vec<RgbImage>,
        annotations: Vec<PanopticMap>,
        classes: ClassTable,
    ) -> Result<Self> {
        let name = name.into();
        if frames.len() != annotations.len() {
            return Err(Error::Alignment(format!(
                "sequence {name}: {} frames but {} annotations",
                frames.len(),
                annotations.len()
            )));
        }
        for (i, (f, a)) in frames.iter().zip(&annotations).enumerate() {
            if f.width() as usize != a.width() || f.height() as usize != a.height() {
                return Err(Error::Alignment(format!(
                    "sequence {name} frame {i}: image {}x{} vs annotation {}x{}",
                    f.width(),
                    f.height(),
                    a.width(),
                    a.height()
                )));
            }
        }
        Ok(SequenceDataset { name, frames, annotations, classes })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}
