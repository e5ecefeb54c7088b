//! Desk-scale network: a small U-Net with a boundary head and a lesion head,
//! a variational style encoder and a FiLM-conditioned decoder.

mod optim;
mod params;

pub use optim::{clip_global_norm, Optimizer, OptimizerConfig};
pub use params::{Checkpoint, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::topology::{
    correct_lesions, expected_boundary, rectify_boundaries, surfaces_to_masks, BoundaryProbMap, BoundarySet,
    LayerMasks, LesionMasks, TopologySchema,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Channel width per U-Net stage; stage count is the length.
    pub widths: Vec<usize>,
    pub surfaces: usize,
    pub lesions: usize,
    pub style_dim: usize,
    pub style_widths: Vec<usize>,
    pub film_stages: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 64,
            width: 64,
            widths: vec![16, 32, 64],
            surfaces: 5,
            lesions: 3,
            style_dim: 8,
            style_widths: vec![8, 16, 16],
            film_stages: 4,
        }
    }
}

impl ModelConfig {
    pub fn for_schema(schema: &TopologySchema, height: usize, width: usize) -> Self {
        ModelConfig {
            height,
            width,
            surfaces: schema.surfaces(),
            lesions: schema.lesions(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.widths.len();
        if stages == 0 || self.style_widths.is_empty() {
            return Err(Error::validation("model needs at least one stage"));
        }
        let f = 1usize << (stages - 1);
        if self.height % f != 0 || self.width % f != 0 {
            return Err(Error::validation(format!(
                "input {}x{} not divisible by {f} for {stages} stages",
                self.height, self.width
            )));
        }
        let sf = 1usize << (self.style_widths.len() - 1);
        if self.height % sf != 0 || self.width % sf != 0 {
            return Err(Error::validation("input size not divisible for the style encoder"));
        }
        if self.surfaces < 2 || self.lesions < 1 {
            return Err(Error::validation("need at least 2 surfaces and 1 lesion"));
        }
        if self.style_dim == 0 || self.film_stages == 0 {
            return Err(Error::validation("style dimension and FiLM stages must be positive"));
        }
        Ok(())
    }

    /// Number of spatial-factor channels: layer maps plus lesions.
    pub fn factor_channels(&self) -> usize {
        self.surfaces - 1 + self.lesions
    }
}

/// Parameters bound into one graph.
pub struct Bound<'a> {
    store: &'a ParamStore,
    pub vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn get(&self, name: &str) -> Var {
        self.vars[self.store.id(name).unwrap_or_else(|| panic!("no parameter {name}"))]
    }
}

pub struct AnatomyOutput {
    pub probs: BoundaryProbMap,
    /// Channel-softmax lesion probabilities `[K+1, H, W]`.
    pub lesion_probs: Var,
    /// Rounded lesion masks.
    pub lesion_bin: Var,
}

pub struct EngineOutput {
    pub raw: BoundarySet,
    pub rectified: BoundarySet,
    pub layers: LayerMasks,
    pub raw_lesions: LesionMasks,
    pub corrected: LesionMasks,
}

pub struct StyleFactors {
    pub mu: Var,
    pub logvar: Var,
    pub omega: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn conv_param(p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c_in: usize, c_out: usize, k: usize) {
    p.add_he(&format!("{name}.w"), vec![c_out, c_in, k, k], c_in * k * k, rng);
    p.add(format!("{name}.b"), Tensor::zeros(vec![c_out]));
}

fn dense_param(p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, n_in: usize, n_out: usize, std: f64) {
    let n = Normal::new(0.0, std.max(f64::MIN_POSITIVE)).expect("std");
    let w = (0..n_in * n_out).map(|_| if std == 0.0 { 0.0 } else { n.sample(rng) }).collect();
    p.add(format!("{name}.w"), Tensor::new(vec![n_in, n_out], w).expect("shape"));
    p.add(format!("{name}.b"), Tensor::zeros(vec![1, n_out]));
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let w = &config.widths;
        // two input channels: intensity and normalized row coordinate
        let mut c_in = 2;
        for (i, &c) in w.iter().enumerate() {
            conv_param(&mut p, &mut rng, &format!("enc{i}.a"), c_in, c, 3);
            conv_param(&mut p, &mut rng, &format!("enc{i}.b"), c, c, 3);
            c_in = c;
        }
        for i in (0..w.len() - 1).rev() {
            conv_param(&mut p, &mut rng, &format!("dec{i}.a"), c_in + w[i], w[i], 3);
            conv_param(&mut p, &mut rng, &format!("dec{i}.b"), w[i], w[i], 3);
            c_in = w[i];
        }
        conv_param(&mut p, &mut rng, "head_b", w[0], config.surfaces, 3);
        conv_param(&mut p, &mut rng, "head_l", w[0], config.lesions + 1, 3);

        let mut c_in = 1 + config.factor_channels();
        for (i, &c) in config.style_widths.iter().enumerate() {
            conv_param(&mut p, &mut rng, &format!("style{i}"), c_in, c, 3);
            c_in = c;
        }
        let d = config.style_dim;
        dense_param(&mut p, &mut rng, "style_mu", c_in, d, 0.1 / (c_in as f64).sqrt());
        dense_param(&mut p, &mut rng, "style_logvar", c_in, d, 0.0);

        let f = config.factor_channels();
        for s in 0..config.film_stages {
            let id = Tensor::from_fn(vec![f, f, 3, 3], |i| {
                if i[0] == i[1] && i[2] == 1 && i[3] == 1 {
                    1.0
                } else {
                    0.0
                }
            });
            p.add(format!("film{s}.conv"), id);
            dense_param(&mut p, &mut rng, &format!("film{s}.gamma"), d, f, 0.0);
            dense_param(&mut p, &mut rng, &format!("film{s}.beta"), d, f, 0.0);
        }
        p.add("film_out", Tensor::full(vec![1, f, 1, 1], 1.0));
        Ok(Model { config, params: p })
    }

    pub fn bind<'a>(&'a self, g: &mut Graph) -> Bound<'a> {
        Bound { store: &self.params, vars: self.params.bind(g) }
    }

    /// Binds parameters as constants (inference, no gradient tape for them).
    pub fn bind_frozen<'a>(&'a self, g: &mut Graph) -> Bound<'a> {
        let vars = self.params.values().iter().map(|t| g.constant(t.clone())).collect();
        Bound { store: &self.params, vars }
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let want = [self.config.height, self.config.width];
        if image.shape() != want {
            return Err(Error::validation(format!(
                "image shape {:?} does not match model input {want:?}",
                image.shape()
            )));
        }
        Ok(())
    }

    fn conv(g: &mut Graph, b: &Bound, name: &str, x: Var, relu: bool) -> Result<Var> {
        let w = b.get(&format!("{name}.w"));
        let bias = b.get(&format!("{name}.b"));
        let k = g.shape(w)[2];
        let y = g.conv2d(x, w, Some(bias), k / 2)?;
        Ok(if relu { g.relu(y)? } else { y })
    }

    /// Backbone plus both heads on one `[H, W]` image.
    pub fn forward_anatomy(&self, g: &mut Graph, b: &Bound, image: &Tensor) -> Result<AnatomyOutput> {
        self.check_image(image)?;
        let (h, w) = (self.config.height, self.config.width);
        let coord = Tensor::from_fn(vec![1, h, w], |i| i[1] as f64 / (h - 1).max(1) as f64);
        let img = g.constant(image.reshape(vec![1, h, w])?);
        let coord = g.constant(coord);
        let mut x = g.concat(&[img, coord], 0)?;
        let stages = self.config.widths.len();
        let mut skips = Vec::with_capacity(stages);
        for i in 0..stages {
            if i > 0 {
                x = g.avg_pool2(x)?;
            }
            x = Self::conv(g, b, &format!("enc{i}.a"), x, true)?;
            x = Self::conv(g, b, &format!("enc{i}.b"), x, true)?;
            skips.push(x);
        }
        for i in (0..stages - 1).rev() {
            let up = g.upsample2(x)?;
            x = g.concat(&[up, skips[i]], 0)?;
            x = Self::conv(g, b, &format!("dec{i}.a"), x, true)?;
            x = Self::conv(g, b, &format!("dec{i}.b"), x, true)?;
        }
        let logits_b = Self::conv(g, b, "head_b", x, false)?;
        let probs = g.softmax(logits_b, 1)?;
        let logits_l = Self::conv(g, b, "head_l", x, false)?;
        let lesion_probs = g.softmax(logits_l, 0)?;
        let lesion_bin = g.round_ste(lesion_probs)?;
        Ok(AnatomyOutput { probs: BoundaryProbMap(probs), lesion_probs, lesion_bin })
    }

    /// Expected positions, rectification, layer maps and lesion correction.
    pub fn topology_pass(
        &self,
        g: &mut Graph,
        out: &AnatomyOutput,
        schema: &TopologySchema,
        binarize_layers: bool,
    ) -> Result<EngineOutput> {
        let raw = expected_boundary(g, out.probs)?;
        let rectified = rectify_boundaries(g, raw)?;
        let layers = surfaces_to_masks(g, rectified, self.config.height, binarize_layers)?;
        let raw_lesions = LesionMasks { values: out.lesion_bin, channels: schema.lesion_channels(), corrected: false };
        let corrected = correct_lesions(g, &raw_lesions, &layers, schema)?;
        Ok(EngineOutput { raw, rectified, layers, raw_lesions, corrected })
    }

    /// Style factors from the image and its spatial factors `[F, H, W]`.
    /// `noise` (length `style_dim`) enables reparameterized sampling;
    /// without it, `omega == mu`.
    pub fn encode_style(&self, g: &mut Graph, b: &Bound, image: &Tensor, factors: Var, noise: Option<&[f64]>) -> Result<StyleFactors> {
        self.check_image(image)?;
        let (h, w) = (self.config.height, self.config.width);
        let img = g.constant(image.reshape(vec![1, h, w])?);
        let mut x = g.concat(&[img, factors], 0)?;
        for i in 0..self.config.style_widths.len() {
            if i > 0 {
                x = g.avg_pool2(x)?;
            }
            x = Self::conv(g, b, &format!("style{i}"), x, true)?;
        }
        let c = g.shape(x)[0];
        let pooled = g.mean_axis(x, 2)?;
        let pooled = g.mean_axis(pooled, 1)?;
        let row = g.reshape(pooled, &[1, c])?;
        let dense = |g: &mut Graph, name: &str| -> Result<Var> {
            let m = g.matmul(row, b.get(&format!("{name}.w")))?;
            Ok(g.add(m, b.get(&format!("{name}.b")))?)
        };
        let mu = dense(g, "style_mu")?;
        let logvar = dense(g, "style_logvar")?;
        let d = self.config.style_dim;
        let mu = g.reshape(mu, &[d])?;
        let logvar = g.reshape(logvar, &[d])?;
        let omega = match noise {
            Some(xi) => {
                let half = g.scale(logvar, 0.5)?;
                let std = g.exp(half)?;
                let xi = g.constant(Tensor::vector(xi));
                let e = g.mul(std, xi)?;
                g.add(mu, e)?
            }
            None => mu,
        };
        Ok(StyleFactors { mu, logvar, omega })
    }

    /// FiLM decoder: four identity-initialized convolutions over the factor
    /// stack, each followed by a per-channel scale `1 + gamma(omega)` and an
    /// offset `beta(omega)` applied on the channel's factor support, then a
    /// channel-weighted sum.
    pub fn decode(&self, g: &mut Graph, b: &Bound, factors: Var, omega: Var) -> Result<Var> {
        let f = self.config.factor_channels();
        let (h, w) = (self.config.height, self.config.width);
        if g.shape(factors) != [f, h, w] {
            return Err(Error::validation(format!(
                "factor stack {:?} does not match [{f}, {h}, {w}]",
                g.shape(factors)
            )));
        }
        let d = self.config.style_dim;
        let row = g.reshape(omega, &[1, d])?;
        let mut x = factors;
        for s in 0..self.config.film_stages {
            let z = g.conv2d(x, b.get(&format!("film{s}.conv")), None, 1)?;
            let gm = g.matmul(row, b.get(&format!("film{s}.gamma.w")))?;
            let gm = g.add(gm, b.get(&format!("film{s}.gamma.b")))?;
            let gm = g.reshape(gm, &[f, 1, 1])?;
            let scale = g.add_scalar(gm, 1.0)?;
            let bt = g.matmul(row, b.get(&format!("film{s}.beta.w")))?;
            let bt = g.add(bt, b.get(&format!("film{s}.beta.b")))?;
            let bt = g.reshape(bt, &[f, 1, 1])?;
            let y = g.mul(z, scale)?;
            let off = g.mul(factors, bt)?;
            let y = g.add(y, off)?;
            x = g.relu(y)?;
        }
        let out = g.conv2d(x, b.get("film_out"), None, 0)?;
        Ok(g.reshape(out, &[h, w])?)
    }

    pub fn checkpoint(&self, seed: u64, step: u64) -> Checkpoint {
        Checkpoint {
            config: serde_json::to_value(&self.config).expect("config serializes"),
            seed,
            step,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(ck.config.clone())?;
        let mut m = Model::new(config, ck.seed)?;
        ck.restore_into(&mut m.params)?;
        Ok(m)
    }
}

/// Stacks the layer maps and corrected lesion channels (background dropped)
/// into the spatial-factor tensor `[S-1+K, H, W]`.
pub fn spatial_factors(g: &mut Graph, layers: &LayerMasks, corrected: &LesionMasks, lesions: usize) -> Result<Var> {
    let les = g.slice(corrected.values, 0, 0, lesions)?;
    Ok(g.concat(&[layers.layers, les], 0)?)
}
