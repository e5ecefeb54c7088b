//! Spatial (affine) and style (intensity) transforms of scans.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::LabeledScan;
use crate::tensor::Tensor;
use crate::topology::{admissible_region, binarized_layers, rectify_values, TopologySchema};

/// Affine parameters. Translation is in normalized units (image width = 2);
/// `scale_x` is relative (`1 + scale_x`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpatialParams {
    pub rotation: f64,
    pub shear_x: f64,
    pub shear_y: f64,
    pub translate_x: f64,
    pub scale_x: f64,
}

impl SpatialParams {
    pub const ROTATION: f64 = 0.2;
    pub const SHEAR: f64 = 0.2;
    pub const TRANSLATE_X: f64 = 0.3;
    pub const SCALE_X: f64 = 0.1;

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        SpatialParams {
            rotation: rng.random_range(-Self::ROTATION..=Self::ROTATION),
            shear_x: rng.random_range(-Self::SHEAR..=Self::SHEAR),
            shear_y: rng.random_range(-Self::SHEAR..=Self::SHEAR),
            translate_x: rng.random_range(-Self::TRANSLATE_X..=Self::TRANSLATE_X),
            scale_x: rng.random_range(-Self::SCALE_X..=Self::SCALE_X),
        }
    }

    /// Linear part, acting on centered pixel coordinates `(x, y)`.
    fn matrix(&self) -> [[f64; 2]; 2] {
        let (c, s) = (self.rotation.cos(), self.rotation.sin());
        let sh = [[1.0, self.shear_x], [self.shear_y, 1.0]];
        let sc = [[1.0 + self.scale_x, 0.0], [0.0, 1.0]];
        let rot = [[c, -s], [s, c]];
        mat_mul(rot, mat_mul(sh, sc))
    }
}

fn mat_mul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut o = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            o[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    o
}

fn bilinear(img: &Tensor, x: f64, y: f64) -> f64 {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let d = img.data();
    let top = d[y0 * w + x0] * (1.0 - fx) + d[y0 * w + x1] * fx;
    let bot = d[y1 * w + x0] * (1.0 - fx) + d[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Applies `params` to image (bilinear, edge-clamped), lesion masks
/// (nearest) and boundaries (curves mapped and resampled per column).
/// Lesion pixels that end up outside their admissible layers are cleared.
pub fn apply_spatial(scan: &LabeledScan, params: &SpatialParams, schema: &TopologySchema) -> LabeledScan {
    let (h, w) = (scan.height(), scan.width());
    let (cx, cy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
    let a = params.matrix();
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
    let tx = params.translate_x * w as f64 / 2.0;
    let source = |r: usize, c: usize| {
        let (u, v) = (c as f64 - cx - tx, r as f64 - cy);
        (inv[0][0] * u + inv[0][1] * v + cx, inv[1][0] * u + inv[1][1] * v + cy)
    };

    let image = Tensor::from_fn(vec![h, w], |i| {
        let (x, y) = source(i[0], i[1]);
        bilinear(&scan.image, x, y)
    });

    let k = scan.lesions.shape()[0];
    let mut lesions = Tensor::zeros(vec![k, h, w]);
    for r in 0..h {
        for c in 0..w {
            let (x, y) = source(r, c);
            let (xr, yr) = (x.round(), y.round());
            if xr < 0.0 || yr < 0.0 || xr >= w as f64 || yr >= h as f64 {
                continue;
            }
            for ch in 0..k {
                let v = scan.lesions.at(&[ch, yr as usize, xr as usize]);
                lesions.set(&[ch, r, c], v);
            }
        }
    }

    let s = scan.boundaries.shape()[0];
    let mut bounds = Tensor::zeros(vec![s, w]);
    for b in 0..s {
        let mut pts: Vec<(f64, f64)> = (0..w)
            .map(|x| {
                let (u, v) = (x as f64 - cx, scan.boundaries.at(&[b, x]) - cy);
                (a[0][0] * u + a[0][1] * v + cx + tx, a[1][0] * u + a[1][1] * v + cy)
            })
            .collect();
        pts.sort_by(|p, q| p.0.partial_cmp(&q.0).expect("finite"));
        for c in 0..w {
            let xc = c as f64;
            let y = match pts.iter().position(|p| p.0 >= xc) {
                Some(0) => pts[0].1,
                None => pts[w - 1].1,
                Some(j) => {
                    let (p, q) = (pts[j - 1], pts[j]);
                    let t = if q.0 > p.0 { (xc - p.0) / (q.0 - p.0) } else { 0.0 };
                    p.1 + t * (q.1 - p.1)
                }
            };
            bounds.set(&[b, c], y.clamp(0.0, (h - 1) as f64));
        }
    }
    let bounds = rectify_values(&bounds);

    let layers = binarized_layers(&bounds, h);
    for ch in 0..k {
        let region = admissible_region(&layers, schema, ch);
        for (j, inside) in region.iter().enumerate() {
            if !inside {
                lesions.data_mut()[ch * h * w + j] = 0.0;
            }
        }
    }

    LabeledScan {
        image,
        boundaries: bounds,
        lesions,
        mode: scan.mode,
        seed: scan.seed,
        flags: scan.flags.clone(),
    }
}

/// Samples affine parameters from `seed` and applies them.
pub fn apply_spatial_transform(scan: &LabeledScan, seed: u64, schema: &TopologySchema) -> (LabeledScan, SpatialParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = SpatialParams::sample(&mut rng);
    (apply_spatial(scan, &p, schema), p)
}

/// Probabilities and ranges of the intensity transforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StyleAugConfig {
    pub p_noise: f64,
    pub noise_sigma: f64,
    pub p_rician: f64,
    pub rician_sigma: f64,
    pub p_smooth: f64,
    pub smooth_sigma: (f64, f64),
    pub p_sharpen: f64,
    pub sharpen_sigma: (f64, f64),
    pub sharpen_sigma2: f64,
    pub sharpen_alpha: (f64, f64),
    pub p_contrast: f64,
    /// Range of `|ln gamma|` for the power-law contrast change.
    pub contrast_log_gamma: (f64, f64),
}

impl Default for StyleAugConfig {
    fn default() -> Self {
        StyleAugConfig {
            p_noise: 0.1,
            noise_sigma: 0.1,
            p_rician: 0.1,
            rician_sigma: 1.0,
            p_smooth: 0.1,
            smooth_sigma: (0.25, 1.5),
            p_sharpen: 0.1,
            sharpen_sigma: (0.5, 1.0),
            sharpen_sigma2: 0.5,
            sharpen_alpha: (0.5, 2.0),
            p_contrast: 0.0,
            contrast_log_gamma: (0.3, 0.7),
        }
    }
}

impl StyleAugConfig {
    /// Stronger settings for triplet copies: contrast always changes and
    /// noise and blur are frequent.
    pub fn triplet() -> Self {
        StyleAugConfig {
            p_noise: 0.5,
            noise_sigma: 0.1,
            p_rician: 0.0,
            p_smooth: 0.5,
            p_sharpen: 0.2,
            p_contrast: 1.0,
            ..Default::default()
        }
    }

    /// Every transform disabled.
    pub fn none() -> Self {
        StyleAugConfig { p_noise: 0.0, p_rician: 0.0, p_smooth: 0.0, p_sharpen: 0.0, p_contrast: 0.0, ..Default::default() }
    }
}

/// Drawn style transform; `None` fields were not applied.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub gamma: Option<f64>,
    pub smooth: Option<(f64, f64)>,
    /// `(sigma_x, sigma_y, sigma2, alpha)`: `b1 + alpha (b1 - blur(b1, sigma2))`.
    pub sharpen: Option<(f64, f64, f64, f64)>,
    pub noise_std: Option<f64>,
    pub rician_std: Option<f64>,
}

impl StyleParams {
    pub fn sample<R: Rng>(rng: &mut R, cfg: &StyleAugConfig) -> Self {
        let mut hit = |p: f64| rng.random::<f64>() < p;
        let contrast = hit(cfg.p_contrast);
        let smooth = hit(cfg.p_smooth);
        let sharpen = hit(cfg.p_sharpen);
        let noise = hit(cfg.p_noise);
        let rician = hit(cfg.p_rician);
        let mut range = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let gamma = contrast.then(|| {
            let g = range(cfg.contrast_log_gamma.0, cfg.contrast_log_gamma.1);
            let sign = if range(0.0, 1.0) < 0.5 { -1.0 } else { 1.0 };
            (sign * g).exp()
        });
        let smooth = smooth.then(|| (range(cfg.smooth_sigma.0, cfg.smooth_sigma.1), range(cfg.smooth_sigma.0, cfg.smooth_sigma.1)));
        let sharpen = sharpen.then(|| {
            (
                range(cfg.sharpen_sigma.0, cfg.sharpen_sigma.1),
                range(cfg.sharpen_sigma.0, cfg.sharpen_sigma.1),
                cfg.sharpen_sigma2,
                range(cfg.sharpen_alpha.0, cfg.sharpen_alpha.1),
            )
        });
        let noise_std = noise.then(|| range(0.0, cfg.noise_sigma));
        let rician_std = rician.then(|| range(0.0, cfg.rician_sigma));
        StyleParams { gamma, smooth, sharpen, noise_std, rician_std }
    }

    pub fn is_identity(&self) -> bool {
        *self == StyleParams::default()
    }
}

fn kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with replicated borders; `sx` along columns.
pub fn gaussian_blur(img: &Tensor, sx: f64, sy: f64) -> Tensor {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let (kx, ky) = (kernel(sx), kernel(sy));
    let (rx, ry) = ((kx.len() / 2) as isize, (ky.len() / 2) as isize);
    let d = img.data();
    let tmp = Tensor::from_fn(vec![h, w], |i| {
        kx.iter()
            .enumerate()
            .map(|(j, kv)| {
                let c = (i[1] as isize + j as isize - rx).clamp(0, w as isize - 1) as usize;
                kv * d[i[0] * w + c]
            })
            .sum()
    });
    let t = tmp.data();
    Tensor::from_fn(vec![h, w], |i| {
        ky.iter()
            .enumerate()
            .map(|(j, kv)| {
                let r = (i[0] as isize + j as isize - ry).clamp(0, h as isize - 1) as usize;
                kv * t[r * w + i[1]]
            })
            .sum()
    })
}

/// Applies the drawn transforms: contrast, smoothing, sharpening, Gaussian
/// then Rician noise; the result is clamped to `[0, 1]`.
pub fn apply_style(image: &Tensor, params: &StyleParams, rng: &mut impl Rng) -> Tensor {
    let mut img = image.clone();
    if let Some(g) = params.gamma {
        img = img.map(|v| v.max(0.0).powf(g));
    }
    if let Some((sx, sy)) = params.smooth {
        img = gaussian_blur(&img, sx, sy);
    }
    if let Some((sx, sy, s2, alpha)) = params.sharpen {
        let b1 = gaussian_blur(&img, sx, sy);
        let b2 = gaussian_blur(&b1, s2, s2);
        img = Tensor::new(
            image.shape().to_vec(),
            b1.data().iter().zip(b2.data()).map(|(a, b)| a + alpha * (a - b)).collect(),
        )
        .expect("same shape");
    }
    if let Some(std) = params.noise_std.filter(|&s| s > 0.0) {
        let n = Normal::new(0.0, std).expect("std");
        img.data_mut().iter_mut().for_each(|v| *v += n.sample(rng));
    }
    if let Some(std) = params.rician_std.filter(|&s| s > 0.0) {
        let n = Normal::new(0.0, std).expect("std");
        img.data_mut().iter_mut().for_each(|v| {
            let (a, b) = (*v + n.sample(rng), n.sample(rng));
            *v = (a * a + b * b).sqrt();
        });
    }
    img.map(|v| v.clamp(0.0, 1.0))
}

/// Samples a style transform from `seed` and applies it to the image only.
pub fn apply_style_transform(scan: &LabeledScan, seed: u64, cfg: &StyleAugConfig) -> (LabeledScan, StyleParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = StyleParams::sample(&mut rng, cfg);
    let mut out = scan.clone();
    if !p.is_identity() {
        out.image = apply_style(&scan.image, &p, &mut rng);
    }
    (out, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scan_with, SceneConfig};
    use crate::topology::audit;

    fn scan(seed: u64) -> LabeledScan {
        generate_scan_with(seed, &SceneConfig::default(), &TopologySchema::retina_default(), Some(true)).unwrap()
    }

    #[test]
    fn identity_spatial_is_noop() {
        let schema = TopologySchema::retina_default();
        let s = scan(3);
        let out = apply_spatial(&s, &SpatialParams::identity(), &schema);
        assert!(out.image.data().iter().zip(s.image.data()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(out.lesions, s.lesions);
        assert!(out.boundaries.data().iter().zip(s.boundaries.data()).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn x_translation_shifts_columns() {
        let schema = TopologySchema::retina_default();
        let s = scan(4);
        // 4 pixel shift on a 64-wide image
        let p = SpatialParams { translate_x: 8.0 / 64.0, ..Default::default() };
        let out = apply_spatial(&s, &p, &schema);
        for b in 0..5 {
            for c in 4..64 {
                assert!((out.boundaries.at(&[b, c]) - s.boundaries.at(&[b, c - 4])).abs() < 1e-9);
            }
        }
        assert_eq!(out.image.at(&[30, 40]), s.image.at(&[30, 36]));
    }

    #[test]
    fn sampled_ranges_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = StyleAugConfig { p_smooth: 1.0, ..Default::default() };
        for _ in 0..1000 {
            let p = SpatialParams::sample(&mut rng);
            assert!(p.rotation.abs() <= 0.2 && p.shear_x.abs() <= 0.2 && p.translate_x.abs() <= 0.3);
            let st = StyleParams::sample(&mut rng, &cfg);
            let (sx, sy) = st.smooth.unwrap();
            assert!((0.25..=1.5).contains(&sx) && (0.25..=1.5).contains(&sy));
        }
    }

    #[test]
    fn spatial_output_stays_valid() {
        let schema = TopologySchema::retina_default();
        for seed in 0..20 {
            let (out, _) = apply_spatial_transform(&scan(seed), seed + 100, &schema);
            assert!(audit(&out.boundaries, &out.lesions, &schema).is_clean());
        }
    }

    #[test]
    fn style_keeps_annotations() {
        let s = scan(5);
        let none = apply_style_transform(&s, 1, &StyleAugConfig::none()).0;
        assert_eq!(none, s);
        let (out, p) = apply_style_transform(&s, 2, &StyleAugConfig::triplet());
        assert!(p.gamma.is_some());
        assert_ne!(out.image, s.image);
        assert_eq!((&out.boundaries, &out.lesions), (&s.boundaries, &s.lesions));
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Tensor::full(vec![8, 8], 0.4);
        let b = gaussian_blur(&img, 1.0, 0.5);
        assert!(b.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
    }
}
