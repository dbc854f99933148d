//! `SCN1` scene datasets and P6 pixmap export.
//!
//! Layout (all integers u32 LE unless noted): magic `SCN1`, kind (u8: 0 source,
//! 1 target), count, height, width, channels; then per sample: label (u8),
//! box count (u8), boxes as `x y w h` (u8 each), and `height·width·channels`
//! f32 LE pixels in `[0, 1]`. Nothing may follow the last sample.

use std::fs;
use std::io::Write;
use std::path::Path;

use ditune_core::scene::{
    BBox, SceneSample, CHANNELS, IMAGE_LEN, IMAGE_SIZE, MAX_VEHICLES, SOURCE_CLASSES, TARGET_CONDITIONS,
};

use crate::error::{format_err, io_err, CliError, Result};

pub const MAGIC: &[u8; 4] = b"SCN1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    Source,
    Target,
}

impl DataKind {
    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "source" => Ok(DataKind::Source),
            "target" => Ok(DataKind::Target),
            other => Err(format!("unknown kind {other:?} (expected source|target)")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DataKind::Source => "source",
            DataKind::Target => "target",
        }
    }

    fn labels(self) -> usize {
        match self {
            DataKind::Source => SOURCE_CLASSES,
            DataKind::Target => TARGET_CONDITIONS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: DataKind,
    pub samples: Vec<SceneSample>,
}

pub fn encode(ds: &Dataset) -> Vec<u8> {
    let mut buf = MAGIC.to_vec();
    buf.push(ds.kind as u8);
    for v in [ds.samples.len(), IMAGE_SIZE, IMAGE_SIZE, CHANNELS] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for s in &ds.samples {
        buf.push(s.label);
        buf.push(s.boxes.len() as u8);
        for b in &s.boxes {
            buf.extend_from_slice(&[b.x, b.y, b.w, b.h]);
        }
        s.image.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    }
    buf
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Dataset, String> {
    let mut pos = 0;
    let mut take = |n: usize| -> std::result::Result<&[u8], String> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| format!("truncated at byte {pos}"))?;
        pos += n;
        Ok(s)
    };
    if take(4).map_err(|_| "not a dataset: file too short")? != MAGIC {
        return Err("unknown magic (expected SCN1)".into());
    }
    let kind = match take(1)?[0] {
        0 => DataKind::Source,
        1 => DataKind::Target,
        k => return Err(format!("unknown dataset kind byte {k}")),
    };
    let mut header = [0usize; 4];
    for h in &mut header {
        *h = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    }
    let [count, height, width, channels] = header;
    if (height, width, channels) != (IMAGE_SIZE, IMAGE_SIZE, CHANNELS) {
        return Err(format!(
            "image extents {height}x{width}x{channels}, expected {IMAGE_SIZE}x{IMAGE_SIZE}x{CHANNELS}"
        ));
    }
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let head = take(2)?;
        let (label, nboxes) = (head[0], head[1] as usize);
        if label as usize >= kind.labels() {
            return Err(format!(
                "sample {i}: label {label} out of range for {} data",
                kind.name()
            ));
        }
        let max_boxes = if kind == DataKind::Source { 0 } else { MAX_VEHICLES };
        if nboxes > max_boxes {
            return Err(format!("sample {i}: {nboxes} boxes (at most {max_boxes})"));
        }
        let boxes: Vec<BBox> = take(4 * nboxes)?
            .chunks_exact(4)
            .map(|b| BBox {
                x: b[0],
                y: b[1],
                w: b[2],
                h: b[3],
            })
            .collect();
        let image: Vec<f32> = take(4 * IMAGE_LEN)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(v) = image.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(format!("sample {i}: pixel value {v} outside [0, 1]"));
        }
        let s = SceneSample { image, label, boxes };
        s.validate().map_err(|e| format!("sample {i}: {e}"))?;
        samples.push(s);
    }
    if pos != bytes.len() {
        return Err(format!("{} trailing bytes after the last sample", bytes.len() - pos));
    }
    Ok(Dataset { kind, samples })
}

pub fn save(path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(path, encode(ds)).map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes).map_err(|d| format_err(path, d))
}

/// Loads and insists on the given kind.
pub fn load_kind(path: &Path, kind: DataKind) -> Result<Vec<SceneSample>> {
    let ds = load(path)?;
    if ds.kind != kind {
        return Err(format_err(
            path,
            format!("expected {} data, found {}", kind.name(), ds.kind.name()),
        ));
    }
    Ok(ds.samples)
}

/// Binary P6 pixmap, max value 255, from `[0, 1]` RGB.
pub fn ppm_bytes(image: &[f32], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(image.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write_ppm(path: &Path, image: &[f32]) -> Result<()> {
    if image.len() != IMAGE_LEN {
        return Err(CliError::Format {
            path: path.into(),
            detail: format!("image has {} values", image.len()),
        });
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&ppm_bytes(image, IMAGE_SIZE, IMAGE_SIZE))
        .map_err(io_err(path))
}
