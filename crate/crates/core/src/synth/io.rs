//! On-disk scan format: one directory per scan with a 16-bit PGM image,
//! boundary CSV, one 8-bit PGM per lesion channel and a JSON sidecar.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{GraymapHeader, PnmEncoder, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

use super::{AnnotationMode, LabeledScan};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::topology::TopologySchema;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanMeta {
    pub index: usize,
    pub seed: u64,
    pub mode: AnnotationMode,
    pub schema: String,
    pub height: usize,
    pub width: usize,
    pub lesions: Vec<String>,
    #[serde(default)]
    pub flags: Vec<String>,
}

fn write_pgm(path: &Path, w: usize, h: usize, bytes: &[u8], color: ExtendedColorType) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let maxwhite = if color == ExtendedColorType::L16 { 65535 } else { 255 };
    let header = GraymapHeader { encoding: SampleEncoding::Binary, height: h as u32, width: w as u32, maxwhite };
    PnmEncoder::new(BufWriter::new(file))
        .with_header(header.into())
        .write_image(bytes, w as u32, h as u32, color)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Writes `[H, W]` values in `[0, 1]` as a 16-bit binary PGM.
pub fn write_pgm16(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .flat_map(|v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_ne_bytes())
        .collect();
    write_pgm(path, w, h, &bytes, ExtendedColorType::L16)
}

/// Writes `[H, W]` values in `[0, 1]` as an 8-bit binary PGM.
pub fn write_pgm8(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let bytes: Vec<u8> = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    write_pgm(path, w, h, &bytes, ExtendedColorType::L8)
}

fn read_gray(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::validation(format!("{}: {other}", path.display())),
    })?;
    let g = img.to_luma16();
    let (w, h) = (g.width() as usize, g.height() as usize);
    Ok(Tensor::new(vec![h, w], g.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect())?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn boundaries_csv(b: &Tensor) -> String {
    let w = b.shape()[1];
    let mut out = String::new();
    for row in b.data().chunks(w) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

fn parse_boundaries(text: &str, path: &Path) -> Result<Tensor> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::validation(format!("{} line {}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    let w = rows.first().map(Vec::len).unwrap_or(0);
    if w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(Error::validation(format!("{}: ragged or empty boundary table", path.display())));
    }
    Ok(Tensor::new(vec![rows.len(), w], rows.concat())?)
}

/// Writes one scan into `dir` (created if needed).
pub fn save_scan(dir: &Path, scan: &LabeledScan, index: usize, schema: &TopologySchema) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_pgm16(&dir.join("image.pgm"), &scan.image)?;
    write_text(&dir.join("boundaries.csv"), &boundaries_csv(&scan.boundaries))?;
    for (k, name) in schema.lesion_names.iter().enumerate() {
        write_pgm8(&dir.join(format!("lesion_{name}.pgm")), &scan.lesions.index_first(k))?;
    }
    let meta = ScanMeta {
        index,
        seed: scan.seed,
        mode: scan.mode,
        schema: schema.name.clone(),
        height: scan.height(),
        width: scan.width(),
        lesions: schema.lesion_names.clone(),
        flags: scan.flags.clone(),
    };
    write_text(&dir.join("meta.json"), &serde_json::to_string_pretty(&meta)?)
}

pub fn load_scan(dir: &Path) -> Result<(LabeledScan, ScanMeta)> {
    let meta: ScanMeta = serde_json::from_str(&read_text(&dir.join("meta.json"))?)?;
    let image = read_gray(&dir.join("image.pgm"))?;
    if image.shape() != [meta.height, meta.width] {
        return Err(Error::validation(format!("{}: image size disagrees with metadata", dir.display())));
    }
    let bpath = dir.join("boundaries.csv");
    let boundaries = parse_boundaries(&read_text(&bpath)?, &bpath)?;
    if boundaries.shape()[1] != meta.width {
        return Err(Error::validation(format!("{}: boundary width disagrees with image", bpath.display())));
    }
    let mut channels = Vec::with_capacity(meta.lesions.len());
    for name in &meta.lesions {
        let m = read_gray(&dir.join(format!("lesion_{name}.pgm")))?;
        channels.push(m.map(|v| if v > 0.5 { 1.0 } else { 0.0 }));
    }
    let lesions = Tensor::stack(&channels)?;
    let scan = LabeledScan { image, boundaries, lesions, mode: meta.mode, seed: meta.seed, flags: meta.flags.clone() };
    Ok((scan, meta))
}

fn scan_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("scan_{index:05}"))
}

/// Writes `schema.json` and every scan under `root`.
pub fn save_dataset(root: &Path, scans: &[LabeledScan], schema: &TopologySchema) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    schema.save(root.join("schema.json"))?;
    for (i, s) in scans.iter().enumerate() {
        save_scan(&scan_dir(root, i), s, i, schema)?;
    }
    Ok(())
}

/// Reads a dataset written by [`save_dataset`], in index order.
pub fn load_dataset(root: &Path) -> Result<(TopologySchema, Vec<LabeledScan>)> {
    let schema = TopologySchema::load(root.join("schema.json"))?;
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("scan_")))
        .collect();
    dirs.sort();
    let mut scans = Vec::with_capacity(dirs.len());
    for d in dirs {
        let (scan, meta) = load_scan(&d)?;
        if meta.lesions != schema.lesion_names {
            return Err(Error::validation(format!("{}: lesion channels disagree with schema", d.display())));
        }
        scans.push(scan);
    }
    Ok((schema, scans))
}
