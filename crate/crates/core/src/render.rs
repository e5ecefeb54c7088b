//! Scan overlays: boundary polylines in white, lesions tinted by type.

use std::path::Path;

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::synth::LabeledScan;

pub const BOUNDARY: [u8; 3] = [255, 255, 255];
const FALLBACK: [[u8; 3]; 3] = [[0, 200, 255], [255, 0, 255], [255, 255, 0]];

/// Tint for a lesion type: SRF green, IRF red, PED orange.
pub fn lesion_color(name: &str, index: usize) -> [u8; 3] {
    match name.to_ascii_uppercase().as_str() {
        "SRF" => [0, 255, 0],
        "IRF" => [255, 0, 0],
        "PED" => [255, 165, 0],
        _ => FALLBACK[index % FALLBACK.len()],
    }
}

/// Pixels along each surface, joining neighbouring columns.
fn boundary_pixels(scan: &LabeledScan) -> Vec<(usize, usize)> {
    let (h, w) = (scan.height(), scan.width());
    let s = scan.boundaries.shape()[0];
    let mut out = Vec::new();
    for b in 0..s {
        for c in 0..w {
            let y0 = scan.boundaries.at(&[b, c]);
            let y1 = if c + 1 < w { scan.boundaries.at(&[b, c + 1]) } else { y0 };
            let steps = ((y1 - y0).abs().ceil() as usize).max(1);
            for t in 0..=steps {
                let f = t as f64 / steps as f64;
                let y = (y0 + f * (y1 - y0)).round();
                let x = if f > 0.5 && c + 1 < w { c + 1 } else { c };
                if y >= 0.0 && (y as usize) < h {
                    out.push((x, y as usize));
                }
            }
        }
    }
    out
}

/// RGB overlay; lesion tints are blended at 50 % over the grayscale image.
pub fn overlay_rgb(scan: &LabeledScan, lesion_names: &[String]) -> RgbImage {
    let (h, w) = (scan.height(), scan.width());
    let mut img = RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let v = (scan.image.at(&[r, c]).clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(c as u32, r as u32, Rgb([v, v, v]));
        }
    }
    let k = scan.lesions.shape()[0];
    for (i, name) in lesion_names.iter().enumerate().take(k) {
        let col = lesion_color(name, i);
        for r in 0..h {
            for c in 0..w {
                if scan.lesions.at(&[i, r, c]) > 0.5 {
                    let p = img.get_pixel_mut(c as u32, r as u32);
                    for ch in 0..3 {
                        p.0[ch] = ((p.0[ch] as u16 + col[ch] as u16) / 2) as u8;
                    }
                }
            }
        }
    }
    for (x, y) in boundary_pixels(scan) {
        img.put_pixel(x as u32, y as u32, Rgb(BOUNDARY));
    }
    img
}

/// Grayscale variant: lesions at mid-gray, boundaries white.
pub fn overlay_gray(scan: &LabeledScan) -> GrayImage {
    let (h, w) = (scan.height(), scan.width());
    let mut img = GrayImage::new(w as u32, h as u32);
    let k = scan.lesions.shape()[0];
    for r in 0..h {
        for c in 0..w {
            let lesion = (0..k).any(|i| scan.lesions.at(&[i, r, c]) > 0.5);
            let v = if lesion { 128 } else { (scan.image.at(&[r, c]).clamp(0.0, 1.0) * 255.0).round() as u8 };
            img.put_pixel(c as u32, r as u32, Luma([v]));
        }
    }
    for (x, y) in boundary_pixels(scan) {
        img.put_pixel(x as u32, y as u32, Luma([255]));
    }
    img
}

/// Writes a PNG (RGB) or PGM (gray) overlay, chosen by extension.
pub fn save_overlay(path: &Path, scan: &LabeledScan, lesion_names: &[String]) -> Result<()> {
    let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
    let res = match ext.as_deref() {
        Some("png") => overlay_rgb(scan, lesion_names).save_with_format(path, ImageFormat::Png),
        Some("pgm") => overlay_gray(scan).save_with_format(path, ImageFormat::Pnm),
        _ => return Err(Error::validation(format!("{}: output must end in .png or .pgm", path.display()))),
    };
    res.map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scan_with, SceneConfig};
    use crate::topology::TopologySchema;

    #[test]
    fn boundaries_white_lesions_tinted() {
        let schema = TopologySchema::retina_default();
        let scan = generate_scan_with(3, &SceneConfig::default(), &schema, Some(true)).unwrap();
        let img = overlay_rgb(&scan, &schema.lesion_names);
        let c = 10;
        let y = scan.boundaries.at(&[0, c]).round() as u32;
        assert_eq!(img.get_pixel(c as u32, y).0, BOUNDARY);
        let (k, r, col) = (0..3)
            .flat_map(|k| (0..64).flat_map(move |r| (0..64).map(move |c| (k, r, c))))
            .find(|&(k, r, c)| scan.lesions.at(&[k, r, c]) > 0.5 && !boundary_pixels(&scan).contains(&(c, r)))
            .expect("scan has a lesion");
        let p = img.get_pixel(col as u32, r as u32).0;
        let tint = lesion_color(&schema.lesion_names[k], k);
        let dominant = (0..3).max_by_key(|&i| tint[i]).unwrap();
        assert!(p[dominant] >= 127);
    }

    #[test]
    fn unknown_extension_rejected() {
        let schema = TopologySchema::retina_default();
        let scan = generate_scan_with(3, &SceneConfig::default(), &schema, Some(false)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(save_overlay(&dir.path().join("x.bmp"), &scan, &schema.lesion_names), Err(Error::Validation(_))));
        save_overlay(&dir.path().join("x.png"), &scan, &schema.lesion_names).unwrap();
        save_overlay(&dir.path().join("x.pgm"), &scan, &schema.lesion_names).unwrap();
    }
}
