use std::path::{Path, PathBuf};

use image::{ColorType, ImageReader, Rgb, RgbImage};

use super::{ClassTable, PanopticMap, SequenceDataset};
use crate::{Error, Result};

pub const IMAGES_DIR: &str = "images";
pub const PANOPTIC_DIR: &str = "panoptic";

/// R = semantic class, instance = G * 256 + B.
pub fn decode_panoptic(image: &RgbImage) -> PanopticMap {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut semantic = Vec::with_capacity(w * h);
    let mut instance = Vec::with_capacity(w * h);
    for Rgb([r, g, b]) in image.pixels() {
        semantic.push(*r as u16);
        instance.push(*g as u32 * 256 + *b as u32);
    }
    PanopticMap { width: w, height: h, semantic, instance }
}

pub fn encode_panoptic(map: &PanopticMap) -> Result<RgbImage> {
    let mut img = RgbImage::new(map.width() as u32, map.height() as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let (s, inst) = (map.semantic()[i], map.instance()[i]);
        if s > 255 || inst > 65535 {
            return Err(Error::Range(format!(
                "pixel {i}: semantic {s} (max 255) / instance {inst} (max 65535)"
            )));
        }
        *px = Rgb([s as u8, (inst / 256) as u8, (inst % 256) as u8]);
    }
    Ok(img)
}

/// Reads an 8-bit 3-channel PNG; any other layout is a format error.
pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let format_err = |detail: String| Error::Format {
        source_name: path.display().to_string(),
        detail,
    };
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| format_err(e.to_string()))?;
    if img.color() != ColorType::Rgb8 {
        return Err(format_err(format!("expected 8-bit RGB, found {:?}", img.color())));
    }
    Ok(img.into_rgb8())
}

pub fn decode_panoptic_file(path: &Path) -> Result<PanopticMap> {
    read_rgb_png(path).map(|img| decode_panoptic(&img))
}

pub fn write_rgb_png(path: &Path, image: &RgbImage) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    image.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Format {
        source_name: path.display().to_string(),
        detail: e.to_string(),
    })
}

pub fn write_panoptic_png(path: &Path, map: &PanopticMap) -> Result<()> {
    write_rgb_png(path, &encode_panoptic(map)?)
}

fn frame_file(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{index:06}.png"))
}

/// PNG files of a directory ordered by the numeric frame index in their
/// file stem, independent of directory iteration order.
fn indexed_pngs(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let index = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::Format {
                source_name: path.display().to_string(),
                detail: "file name is not a frame index".into(),
            })?;
        files.push((index, path));
    }
    files.sort_by_key(|(i, _)| *i);
    Ok(files)
}

pub fn load_frames(dir: &Path) -> Result<Vec<RgbImage>> {
    indexed_pngs(dir)?.iter().map(|(_, p)| read_rgb_png(p)).collect()
}

pub fn load_panoptic_dir(dir: &Path) -> Result<Vec<PanopticMap>> {
    indexed_pngs(dir)?.iter().map(|(_, p)| decode_panoptic_file(p)).collect()
}

/// Sequence names present under `<root>/<sub>/`, sorted.
pub fn list_sequences(root: &Path, sub: &str) -> Result<Vec<String>> {
    let dir = root.join(sub);
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        if entry.path().is_dir() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

pub fn load_sequence(root: &Path, name: &str, classes: &ClassTable) -> Result<SequenceDataset> {
    let frames = load_frames(&root.join(IMAGES_DIR).join(name))?;
    let annotations = load_panoptic_dir(&root.join(PANOPTIC_DIR).join(name))?;
    for a in &annotations {
        a.validate(classes)?;
    }
    SequenceDataset::new(name, frames, annotations, classes.clone())
}

pub fn write_sequence(root: &Path, seq: &SequenceDataset) -> Result<()> {
    let img_dir = root.join(IMAGES_DIR).join(&seq.name);
    let pan_dir = root.join(PANOPTIC_DIR).join(&seq.name);
    for (i, (frame, ann)) in seq.frames.iter().zip(&seq.annotations).enumerate() {
        write_rgb_png(&frame_file(&img_dir, i), frame)?;
        write_panoptic_png(&frame_file(&pan_dir, i), ann)?;
    }
    Ok(())
}

/// `<dir>/<index:06>.png`.
pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    frame_file(dir, index)
}
