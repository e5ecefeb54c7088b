//! Procedural OCT-like B-scans with exact ground truth.
//!
//! Surfaces are smooth random curves. Lesions are smooth bumps placed in an
//! admissible layer; each one lifts every surface above its layer's floor by
//! its height profile, so fluid visibly deforms the anatomy above it.

mod io;
mod transform;

pub use io::{load_dataset, load_scan, save_dataset, save_scan, write_pgm16, write_pgm8, ScanMeta};
pub use transform::{
    apply_spatial, apply_spatial_transform, apply_style, apply_style_transform, gaussian_blur, SpatialParams, StyleAugConfig, StyleParams,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;
use crate::topology::{admissible_region, binarized_layers, TopologySchema};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationMode {
    Full,
    LayersOnly,
    LesionsOnly,
    Unlabeled,
}

impl AnnotationMode {
    pub fn has_layers(self) -> bool {
        matches!(self, AnnotationMode::Full | AnnotationMode::LayersOnly)
    }

    pub fn has_lesions(self) -> bool {
        matches!(self, AnnotationMode::Full | AnnotationMode::LesionsOnly)
    }
}

/// How annotation modes are assigned across a generated set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelPolicy {
    Full,
    /// Lesion-free scans get layer labels, lesioned scans get lesion labels.
    Partial,
    Unlabeled,
}

impl LabelPolicy {
    pub fn mode_for(self, has_lesion: bool) -> AnnotationMode {
        match self {
            LabelPolicy::Full => AnnotationMode::Full,
            LabelPolicy::Unlabeled => AnnotationMode::Unlabeled,
            LabelPolicy::Partial if has_lesion => AnnotationMode::LesionsOnly,
            LabelPolicy::Partial => AnnotationMode::LayersOnly,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Mean row of each surface, top to bottom.
    pub surface_depths: Vec<f64>,
    /// Per-scan uniform jitter of each surface depth (rows).
    pub depth_jitter: f64,
    /// Amplitude of the shared low-frequency curve (rows).
    pub curve_amplitude: f64,
    /// Amplitude of each surface's own undulation (rows).
    pub wobble_amplitude: f64,
    /// Intensities above the first surface, in each layer, below the last.
    pub layer_intensity: Vec<f64>,
    pub lesion_intensity: Vec<f64>,
    pub lesion_probability: f64,
    pub max_lesions: usize,
    pub lesion_half_width: (f64, f64),
    pub lesion_height: (f64, f64),
    /// Empty rows kept between a lesion and its layer's floor, per lesion.
    pub lesion_gap: Vec<f64>,
    pub gain: (f64, f64),
    pub offset: (f64, f64),
    pub speckle: f64,
    pub axial_um: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            surface_depths: vec![20.0, 29.0, 38.0, 45.0, 52.0],
            depth_jitter: 1.0,
            curve_amplitude: 3.0,
            wobble_amplitude: 0.6,
            layer_intensity: vec![0.05, 0.6, 0.3, 0.5, 0.9, 0.35],
            lesion_intensity: vec![0.1, 0.12, 0.18],
            lesion_probability: 0.5,
            max_lesions: 2,
            lesion_half_width: (6.0, 12.0),
            lesion_height: (3.0, 6.0),
            lesion_gap: vec![1.0, 1.0, 0.0],
            gain: (0.85, 1.15),
            offset: (-0.05, 0.05),
            speckle: 0.05,
            axial_um: 3.9,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self, schema: &TopologySchema) -> Result<()> {
        let s = schema.surfaces();
        let k = schema.lesions();
        let bad = |m: String| Err(Error::validation(m));
        if self.surface_depths.len() != s {
            return bad(format!("{} surface depths for {s} surfaces", self.surface_depths.len()));
        }
        if self.layer_intensity.len() != s + 1 {
            return bad(format!("need {} layer intensities, got {}", s + 1, self.layer_intensity.len()));
        }
        if self.lesion_intensity.len() != k || self.lesion_gap.len() != k {
            return bad(format!("need {k} lesion intensities and gaps"));
        }
        let all = self.layer_intensity.iter().chain(&self.lesion_intensity);
        if all.clone().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("intensities must lie in [0, 1]".into());
        }
        for (i, pair) in self.layer_intensity.windows(2).enumerate() {
            if (pair[1] - pair[0]).abs() < 0.1 {
                return bad(format!("layers {i} and {} differ by less than 0.1 in intensity", i + 1));
            }
        }
        for pair in self.surface_depths.windows(2) {
            if pair[1] - pair[0] < 2.0 * self.depth_jitter + 2.0 * self.wobble_amplitude + 2.0 {
                return bad("surface depths too close for the jitter and wobble settings".into());
            }
        }
        let top = self.surface_depths[0] - self.depth_jitter - self.curve_amplitude - self.wobble_amplitude
            - self.max_lesions as f64 * self.lesion_height.1;
        let bottom = self.surface_depths[s - 1] + self.depth_jitter + self.curve_amplitude + self.wobble_amplitude;
        if top < 1.0 || bottom > self.height as f64 - 2.0 {
            return bad("surfaces can leave the image".into());
        }
        if self.lesion_half_width.0 <= 0.0
            || self.lesion_half_width.0 > self.lesion_half_width.1
            || self.lesion_height.0 <= 0.0
            || self.lesion_height.0 > self.lesion_height.1
        {
            return bad("lesion size ranges must be positive and ordered".into());
        }
        if !(0.0..=1.0).contains(&self.lesion_probability) || self.speckle < 0.0 || self.axial_um <= 0.0 {
            return bad("probability, speckle or resolution out of range".into());
        }
        Ok(())
    }
}

/// A generated scan: image `[H, W]`, boundaries `[S, W]` and binary lesion
/// masks `[K, H, W]` (no background channel).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScan {
    pub image: Tensor,
    pub boundaries: Tensor,
    pub lesions: Tensor,
    pub mode: AnnotationMode,
    pub seed: u64,
    /// Notes such as dropped lesion placements.
    pub flags: Vec<String>,
}

impl LabeledScan {
    pub fn has_lesion(&self) -> bool {
        self.lesions.data().iter().any(|&v| v > 0.5)
    }

    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    /// Lesion masks with a background channel appended, `[K+1, H, W]`.
    pub fn lesion_channels(&self) -> Tensor {
        let (k, h, w) = (self.lesions.shape()[0], self.height(), self.width());
        let mut data = self.lesions.data().to_vec();
        for j in 0..h * w {
            let any = (0..k).any(|c| self.lesions.data()[c * h * w + j] > 0.5);
            data.push(if any { 0.0 } else { 1.0 });
        }
        Tensor::new(vec![k + 1, h, w], data).expect("channel stack")
    }
}

/// Independent per-index seed derived from a master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Lesion {
    kind: usize,
    layer: usize,
    profile: Vec<f64>,
}

fn bump(width: usize, center: f64, half: f64, height: f64) -> Vec<f64> {
    (0..width)
        .map(|x| {
            let t = (x as f64 - center) / half;
            if t.abs() < 1.0 {
                height * (std::f64::consts::FRAC_PI_2 * t).cos().powi(2)
            } else {
                0.0
            }
        })
        .collect()
}

/// Index of the region containing row position `y`: 0 above the first
/// surface, `s + 1` below surface `s`.
fn region_of(y: f64, col: &[f64]) -> usize {
    col.iter().take_while(|&&p| y >= p).count()
}

/// Generates one scan. `lesion_override` forces (`Some(true)`) or forbids
/// (`Some(false)`) lesions instead of drawing with `lesion_probability`.
pub fn generate_scan_with(
    seed: u64,
    config: &SceneConfig,
    schema: &TopologySchema,
    lesion_override: Option<bool>,
) -> Result<LabeledScan> {
    config.validate(schema)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, s, k) = (config.height, config.width, schema.surfaces(), schema.lesions());
    let two_pi = std::f64::consts::TAU;

    // shared curve: one or two slow waves plus tilt
    let phase: f64 = rng.random_range(0.0..two_pi);
    let freq: f64 = rng.random_range(0.5..1.5);
    let amp = config.curve_amplitude * rng.random_range(0.3..1.0);
    let tilt: f64 = rng.random_range(-1.0..1.0) * config.curve_amplitude * 0.5;
    let shared: Vec<f64> = (0..w)
        .map(|x| {
            let u = x as f64 / w as f64;
            amp * (two_pi * freq * u + phase).sin() + tilt * (u - 0.5)
        })
        .collect();
    let mut bounds = vec![vec![0.0; w]; s];
    for (b, row) in bounds.iter_mut().enumerate() {
        let depth = config.surface_depths[b] + rng.random_range(-1.0..=1.0) * config.depth_jitter;
        let ph: f64 = rng.random_range(0.0..two_pi);
        let f: f64 = rng.random_range(1.0..2.5);
        let a = config.wobble_amplitude * rng.random_range(0.0..=1.0);
        for (x, v) in row.iter_mut().enumerate() {
            *v = depth + shared[x] + a * (two_pi * f * x as f64 / w as f64 + ph).sin();
        }
    }

    let mut flags = Vec::new();
    let lesioned = lesion_override.unwrap_or_else(|| rng.random_bool(config.lesion_probability));
    let mut lesions: Vec<Lesion> = Vec::new();
    if lesioned && config.max_lesions > 0 {
        let count = rng.random_range(1..=config.max_lesions.min(k));
        let mut kinds: Vec<usize> = (0..k).collect();
        for i in 0..count {
            let j = rng.random_range(i..k);
            kinds.swap(i, j);
        }
        for &kind in &kinds[..count] {
            let admissible = &schema.admissible[kind];
            let layer = admissible[rng.random_range(0..admissible.len())];
            let half = rng.random_range(config.lesion_half_width.0..=config.lesion_half_width.1);
            let height = rng.random_range(config.lesion_height.0..=config.lesion_height.1);
            let center = rng.random_range(half * 0.5..w as f64 - half * 0.5);
            let profile = bump(w, center, half, height);
            // lift the layer's roof and everything above it
            for row in bounds.iter_mut().take(layer + 1) {
                for (v, d) in row.iter_mut().zip(&profile) {
                    *v -= d;
                }
            }
            lesions.push(Lesion { kind, layer, profile });
        }
    }
    if bounds[0].iter().any(|&p| p < 0.5) {
        return Err(Error::validation(format!("scan {seed}: lifted surface left the image")));
    }

    let boundaries = Tensor::new(vec![s, w], bounds.concat())?;
    let layers_bin = binarized_layers(&boundaries, h);
    let mut mask = Tensor::zeros(vec![k, h, w]);
    for les in &lesions {
        let region = admissible_region(&layers_bin, schema, les.kind);
        let gap = config.lesion_gap[les.kind];
        let mut placed = 0usize;
        for x in 0..w {
            if les.profile[x] <= 0.0 {
                continue;
            }
            let floor = bounds[les.layer + 1][x] - gap;
            let top = floor - les.profile[x];
            for r in 0..h {
                let y = r as f64;
                if y >= top && y < floor && region[r * w + x] {
                    mask.set(&[les.kind, r, x], 1.0);
                    placed += 1;
                }
            }
        }
        if placed == 0 {
            flags.push(format!("lesion_dropped:{}", schema.lesion_names[les.kind]));
        }
    }

    // supersampled piecewise-constant fill
    let gain = rng.random_range(config.gain.0..=config.gain.1);
    let offset = rng.random_range(config.offset.0..=config.offset.1);
    let speckle = Normal::new(0.0, config.speckle.max(f64::MIN_POSITIVE)).expect("std");
    const SUB: [f64; 4] = [-0.375, -0.125, 0.125, 0.375];
    let mut image = Tensor::zeros(vec![h, w]);
    for x in 0..w {
        let col: Vec<f64> = (0..s).map(|b| bounds[b][x]).collect();
        for r in 0..h {
            let lesion_here = (0..k).find(|&c| mask.at(&[c, r, x]) > 0.5);
            let base = match lesion_here {
                Some(c) => config.lesion_intensity[c],
                None => {
                    SUB.iter()
                        .map(|d| config.layer_intensity[region_of(r as f64 + d, &col)])
                        .sum::<f64>()
                        / SUB.len() as f64
                }
            };
            let noise = if config.speckle > 0.0 { speckle.sample(&mut rng) } else { 0.0 };
            let v = (gain * base + offset) * (1.0 + noise);
            image.set(&[r, x], v.clamp(0.0, 1.0));
        }
    }

    Ok(LabeledScan { image, boundaries, lesions: mask, mode: AnnotationMode::Full, seed, flags })
}

pub fn generate_scan(seed: u64, config: &SceneConfig, schema: &TopologySchema) -> Result<LabeledScan> {
    generate_scan_with(seed, config, schema, None)
}

/// Generates `count` scans from `master_seed` in parallel; scan `i` uses
/// `derive_seed(master_seed, i)` so the result is order-independent.
pub fn generate_dataset(
    master_seed: u64,
    count: usize,
    config: &SceneConfig,
    schema: &TopologySchema,
    policy: LabelPolicy,
    lesion_override: Option<bool>,
) -> Result<Vec<LabeledScan>> {
    config.validate(schema)?;
    par::map_indexed(count, |i| {
        let mut scan = generate_scan_with(derive_seed(master_seed, i as u64), config, schema, lesion_override)?;
        scan.mode = policy.mode_for(scan.has_lesion());
        Ok(scan)
    })
    .into_iter()
    .collect()
}
