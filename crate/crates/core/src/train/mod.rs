//! Training loop with annotation-mode gating and SoftAdapt weighting,
//! evaluation, ablation arms and the direct-logit overfit harness.

mod ablation;
mod metrics;
mod overfit;

pub use ablation::{ablation_csv, run_ablation_suite, Arm, ArmResult};
pub use metrics::{DiceAccumulator, MadAccumulator, MetricsReport};
pub use overfit::{overfit_direct, OverfitConfig, OverfitReport};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    estimate_kappa, gaussian_target, loss_bc, loss_dice, loss_kl_boundary, loss_l1_boundary, loss_lp, loss_rec,
    loss_to, loss_triplet_anatomy, loss_triplet_style, loss_zkl, CurvatureBounds, DICE_SMOOTH,
};
use crate::model::{clip_global_norm, spatial_factors, Bound, Model, ModelConfig, Optimizer, OptimizerConfig};
use crate::par;
use crate::softadapt::SoftAdapt;
use crate::synth::{
    apply_spatial_transform, apply_style_transform, derive_seed, generate_dataset, LabelPolicy, LabeledScan, SceneConfig,
    StyleAugConfig,
};
use crate::tensor::{Graph, Tensor, Var};
use crate::topology::{audit, retina_region, surfaces_to_masks, AuditReport, LesionMasks, TopologySchema};

/// Individually weighted loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Kl,
    L1,
    Dice,
    To,
    Bc,
    Lp,
    Zkl,
    Rec,
    Triplet,
}

impl Component {
    pub const ALL: [Component; 9] = [
        Component::Kl,
        Component::L1,
        Component::Dice,
        Component::To,
        Component::Bc,
        Component::Lp,
        Component::Zkl,
        Component::Rec,
        Component::Triplet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Kl => "kl",
            Component::L1 => "l1",
            Component::Dice => "dice",
            Component::To => "to",
            Component::Bc => "bc",
            Component::Lp => "lp",
            Component::Zkl => "zkl",
            Component::Rec => "rec",
            Component::Triplet => "triplet",
        }
    }

    /// `"sup"`, `"prior"` or the component's own name.
    pub fn group(self) -> &'static str {
        match self {
            Component::Kl | Component::L1 | Component::Dice => "sup",
            Component::To | Component::Bc | Component::Lp => "prior",
            c => c.name(),
        }
    }

    pub fn is_supervised(self) -> bool {
        self.group() == "sup"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSwitches {
    pub kl: bool,
    pub l1: bool,
    pub dice: bool,
    pub to: bool,
    pub bc: bool,
    pub lp: bool,
    pub zkl: bool,
    pub rec: bool,
    pub triplet: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        LossSwitches { kl: true, l1: true, dice: true, to: true, bc: true, lp: true, zkl: true, rec: true, triplet: false }
    }
}

impl LossSwitches {
    pub fn enabled(&self, c: Component) -> bool {
        match c {
            Component::Kl => self.kl,
            Component::L1 => self.l1,
            Component::Dice => self.dice,
            Component::To => self.to,
            Component::Bc => self.bc,
            Component::Lp => self.lp,
            Component::Zkl => self.zkl,
            Component::Rec => self.rec,
            Component::Triplet => self.triplet,
        }
    }

    pub fn set(&mut self, c: Component, on: bool) {
        let slot = match c {
            Component::Kl => &mut self.kl,
            Component::L1 => &mut self.l1,
            Component::Dice => &mut self.dice,
            Component::To => &mut self.to,
            Component::Bc => &mut self.bc,
            Component::Lp => &mut self.lp,
            Component::Zkl => &mut self.zkl,
            Component::Rec => &mut self.rec,
            Component::Triplet => &mut self.triplet,
        };
        *slot = on;
    }

    pub fn active(&self) -> Vec<Component> {
        Component::ALL.into_iter().filter(|&c| self.enabled(c)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    /// Master seed of the generated splits.
    pub data_seed: u64,
    /// Training seeds (initialization, batch order, sampling noise).
    pub seeds: Vec<u64>,
    pub scene: SceneConfig,
    pub train_count: usize,
    pub unlabeled_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub label_policy: LabelPolicy,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub widths: Vec<usize>,
    pub style_widths: Vec<usize>,
    pub style_dim: usize,
    pub losses: LossSwitches,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    /// Stops early after this many steps when set.
    pub max_steps: Option<usize>,
    pub clip_norm: f64,
    pub beta: f64,
    pub window: usize,
    pub loss_weighted: bool,
    pub delta: usize,
    pub sigma: f64,
    pub l1_squared: bool,
    pub triplet_literal: bool,
    /// Soft instead of binarized layer maps inside the lesion-position loss.
    pub soft_lp_layers: bool,
    pub spatial_augment: bool,
    pub style_augment: StyleAugConfig,
    pub triplet_style: StyleAugConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "desk".into(),
            data_seed: 2024,
            seeds: vec![1, 2, 3, 4, 5],
            scene: SceneConfig::default(),
            train_count: 200,
            unlabeled_count: 100,
            val_count: 50,
            test_count: 50,
            label_policy: LabelPolicy::Partial,
            batch_labeled: 8,
            batch_unlabeled: 8,
            widths: vec![16, 32, 64],
            style_widths: vec![8, 16, 16],
            style_dim: 8,
            losses: LossSwitches::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 4,
            max_steps: None,
            clip_norm: 2.0,
            beta: crate::softadapt::DEFAULT_BETA,
            window: crate::softadapt::DEFAULT_WINDOW,
            loss_weighted: true,
            delta: crate::losses::DEFAULT_DELTA,
            sigma: crate::losses::DEFAULT_SIGMA,
            l1_squared: false,
            triplet_literal: false,
            soft_lp_layers: false,
            spatial_augment: true,
            style_augment: StyleAugConfig::default(),
            triplet_style: StyleAugConfig::triplet(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_config(&self, schema: &TopologySchema) -> ModelConfig {
        ModelConfig {
            widths: self.widths.clone(),
            style_widths: self.style_widths.clone(),
            style_dim: self.style_dim,
            ..ModelConfig::for_schema(schema, self.scene.height, self.scene.width)
        }
    }

    pub fn validate(&self, schema: &TopologySchema) -> Result<()> {
        self.scene.validate(schema)?;
        self.model_config(schema).validate()?;
        if self.batch_labeled + self.batch_unlabeled == 0 {
            return Err(Error::validation("batch must contain at least one scan"));
        }
        if self.clip_norm <= 0.0 || self.sigma <= 0.0 || self.beta < 0.0 || self.window == 0 {
            return Err(Error::validation("clip_norm, sigma and window must be positive, beta non-negative"));
        }
        if self.losses.active().is_empty() {
            return Err(Error::validation("no loss enabled"));
        }
        if self.losses.bc && self.delta >= self.scene.width {
            return Err(Error::validation(format!("delta {} must be below the width {}", self.delta, self.scene.width)));
        }
        Ok(())
    }

    /// Checks against the data actually handed to `train`.
    fn validate_for(&self, labeled: &[LabeledScan]) -> Result<()> {
        let has_labels = labeled.iter().any(|s| s.mode.has_layers() || s.mode.has_lesions());
        let sup = [Component::Kl, Component::L1, Component::Dice].iter().any(|&c| self.losses.enabled(c));
        if has_labels && !sup {
            return Err(Error::validation("labeled data present but every supervised loss is disabled"));
        }
        if has_labels && self.batch_labeled == 0 {
            return Err(Error::validation("labeled data present but batch_labeled is 0"));
        }
        Ok(())
    }
}

/// Generated splits of one experiment.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: Vec<LabeledScan>,
    pub unlabeled: Vec<LabeledScan>,
    pub val: Vec<LabeledScan>,
    pub test: Vec<LabeledScan>,
}

impl ExperimentData {
    pub fn generate(cfg: &ExperimentConfig, schema: &TopologySchema) -> Result<Self> {
        let split = |i: u64, n: usize, policy| generate_dataset(derive_seed(cfg.data_seed, i), n, &cfg.scene, schema, policy, None);
        Ok(ExperimentData {
            train: split(0, cfg.train_count, cfg.label_policy)?,
            unlabeled: split(1, cfg.unlabeled_count, LabelPolicy::Unlabeled)?,
            val: split(2, cfg.val_count, LabelPolicy::Full)?,
            test: split(3, cfg.test_count, LabelPolicy::Full)?,
        })
    }
}

/// One row of the loss/weight series.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeriesRow {
    pub step: usize,
    pub component: String,
    pub value: f64,
    pub weight: f64,
}

pub fn series_csv(rows: &[SeriesRow]) -> String {
    let mut out = String::from("step,component,value,weight\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.component, r.value, r.weight));
    }
    out
}

/// Result of one training run.
pub struct TrainOutcome {
    /// Parameters of the best validation checkpoint.
    pub model: Model,
    pub best_step: usize,
    pub best_score: f64,
    pub steps: usize,
    pub series: Vec<SeriesRow>,
    pub validation: Vec<(usize, MetricsReport, f64)>,
    /// Digest of every batch's scan indices, for comparing arms.
    pub order_digest: u64,
}

/// Fixed per-run inputs shared by every sample of a step.
struct StepContext<'a> {
    cfg: &'a ExperimentConfig,
    schema: &'a TopologySchema,
    kappa: Option<&'a CurvatureBounds>,
    /// Weight divided by active-sample count, per component.
    scale: [f64; 9],
}

fn slot(c: Component) -> usize {
    Component::ALL.iter().position(|&x| x == c).expect("listed")
}

/// Components whose reference this scan carries, among the enabled ones.
pub fn gated_components(switches: &LossSwitches, scan: &LabeledScan) -> Vec<Component> {
    switches
        .active()
        .into_iter()
        .filter(|c| match c {
            Component::Kl | Component::L1 => scan.mode.has_layers(),
            Component::Dice => scan.mode.has_lesions(),
            _ => true,
        })
        .collect()
}

struct Branch {
    rectified: Var,
    corrected: Var,
    omega: Var,
}

/// Anatomy, engine and style encoder on one image (no sampling noise).
fn triplet_branch(model: &Model, g: &mut Graph, b: &Bound, image: &Tensor, schema: &TopologySchema) -> Result<Branch> {
    let out = model.forward_anatomy(g, b, image)?;
    let eng = model.topology_pass(g, &out, schema, true)?;
    let f = spatial_factors(g, &eng.layers, &eng.corrected, schema.lesions())?;
    let st = model.encode_style(g, b, image, f, None)?;
    Ok(Branch { rectified: eng.rectified.0, corrected: eng.corrected.values, omega: st.mu })
}

/// Builds every gated loss for one scan. Returns the weighted sample total
/// and the raw component values.
fn sample_losses(
    model: &Model,
    g: &mut Graph,
    b: &Bound,
    scan: &LabeledScan,
    ctx: &StepContext,
    sample_seed: u64,
) -> Result<(Option<Var>, Vec<(Component, f64)>)> {
    let cfg = ctx.cfg;
    let schema = ctx.schema;
    let h = model.config.height;
    let mut scan = scan.clone();
    if cfg.spatial_augment {
        scan = apply_spatial_transform(&scan, derive_seed(sample_seed, 1), schema).0;
    }
    scan = apply_style_transform(&scan, derive_seed(sample_seed, 2), &cfg.style_augment).0;
    let gated = gated_components(&cfg.losses, &scan);
    let on = |c: Component| gated.contains(&c);

    let out = model.forward_anatomy(g, b, &scan.image)?;
    let eng = model.topology_pass(g, &out, schema, true)?;
    let mut terms: Vec<(Component, Var)> = Vec::new();
    if on(Component::Kl) {
        let target = gaussian_target(&scan.boundaries, h, cfg.sigma);
        terms.push((Component::Kl, loss_kl_boundary(g, out.probs, &target)?));
    }
    if on(Component::L1) {
        terms.push((Component::L1, loss_l1_boundary(g, eng.rectified, &scan.boundaries, cfg.l1_squared)?));
    }
    if on(Component::Dice) {
        let reference = g.constant(scan.lesion_channels());
        terms.push((Component::Dice, loss_dice(g, &eng.corrected, reference, schema.lesions(), DICE_SMOOTH)?));
    }
    if on(Component::To) {
        terms.push((Component::To, loss_to(g, eng.raw)?));
    }
    if on(Component::Bc) {
        let kappa = ctx.kappa.ok_or_else(|| Error::validation("curvature bounds unavailable without layer labels"))?;
        terms.push((Component::Bc, loss_bc(g, eng.raw, kappa)?));
    }
    if on(Component::Lp) {
        let soft = LesionMasks { values: out.lesion_probs, channels: schema.lesion_channels(), corrected: false };
        let layers = if cfg.soft_lp_layers { surfaces_to_masks(g, eng.rectified, h, false)? } else { eng.layers };
        terms.push((Component::Lp, loss_lp(g, &soft, &layers, schema)?));
    }
    if on(Component::Zkl) || on(Component::Rec) {
        let factors = spatial_factors(g, &eng.layers, &eng.corrected, schema.lesions())?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sample_seed, 3));
        let xi: Vec<f64> = (0..model.config.style_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let style = model.encode_style(g, b, &scan.image, factors, Some(&xi))?;
        if on(Component::Zkl) {
            terms.push((Component::Zkl, loss_zkl(g, style.mu, style.logvar)?));
        }
        if on(Component::Rec) {
            let recon = model.decode(g, b, factors, style.omega)?;
            let region = retina_region(g.value(eng.rectified.0), h);
            let (l, empty) = loss_rec(g, &scan.image, recon, &region)?;
            if empty {
                log::debug!("empty retina region in reconstruction loss (scan seed {})", scan.seed);
            }
            terms.push((Component::Rec, l));
        }
    }
    if on(Component::Triplet) {
        let anchor = triplet_branch(model, g, b, &scan.image, schema)?;
        let affine = apply_spatial_transform(&scan, derive_seed(sample_seed, 4), schema).0;
        let affine = triplet_branch(model, g, b, &affine.image, schema)?;
        let styled = apply_style_transform(&scan, derive_seed(sample_seed, 5), &cfg.triplet_style).0;
        let styled = triplet_branch(model, g, b, &styled.image, schema)?;
        let ts = loss_triplet_style(g, anchor.omega, affine.omega, styled.omega, cfg.triplet_literal)?;
        let ta = loss_triplet_anatomy(
            g,
            [anchor.rectified, affine.rectified, styled.rectified],
            [anchor.corrected, affine.corrected, styled.corrected],
            schema.lesions(),
        )?;
        terms.push((Component::Triplet, g.add(ts, ta)?));
    }

    let mut values = Vec::with_capacity(terms.len());
    let mut total: Option<Var> = None;
    for (c, v) in terms {
        let x = g.value(v).item();
        if !x.is_finite() {
            return Err(Error::NonFiniteLoss(c.name().into()));
        }
        values.push((c, x));
        let w = g.scale(v, ctx.scale[slot(c)])?;
        total = Some(match total {
            Some(t) => g.add(t, w)?,
            None => w,
        });
    }
    Ok((total, values))
}

/// Loss values and parameter gradients of one batch. Samples run on
/// separate graphs; gradients are summed in batch order.
pub struct BatchResult {
    pub grads: Vec<Tensor>,
    /// Mean value per component over the samples where it was active.
    pub values: Vec<Option<f64>>,
    pub total: f64,
}

fn run_batch(model: &Model, batch: &[(&LabeledScan, u64)], ctx: &StepContext) -> Result<BatchResult> {
    let per: Vec<Result<(Vec<Tensor>, Vec<(Component, f64)>, f64)>> = par::map_slice(batch, |(scan, seed)| {
        let mut g = Graph::new();
        let b = model.bind(&mut g);
        let (total, values) = sample_losses(model, &mut g, &b, scan, ctx, *seed)?;
        match total {
            Some(t) => {
                let tv = g.value(t).item();
                g.backward(t)?;
                Ok((model.params.grads(&g, &b.vars), values, tv))
            }
            None => Ok((model.params.zeros_like(), values, 0.0)),
        }
    });
    let mut grads = model.params.zeros_like();
    let mut sums = [0.0; 9];
    let mut counts = [0usize; 9];
    let mut total = 0.0;
    for r in per {
        let (gs, values, tv) = r?;
        for (acc, gi) in grads.iter_mut().zip(gs) {
            acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, x)| *a += x);
        }
        for (c, v) in values {
            sums[slot(c)] += v;
            counts[slot(c)] += 1;
        }
        total += tv;
    }
    let values = (0..9).map(|i| (counts[i] > 0).then(|| sums[i] / counts[i] as f64)).collect();
    Ok(BatchResult { grads, values, total })
}

/// Applies the gating rules only, with unit weights, and returns the
/// batch's total loss and gradients. Used to audit gating.
pub fn batch_gradients(model: &Model, cfg: &ExperimentConfig, schema: &TopologySchema, batch: &[LabeledScan], seed: u64) -> Result<BatchResult> {
    let refs: Vec<&LabeledScan> = batch.iter().collect();
    let kappa = kappa_from(&refs, cfg, schema)?;
    let ctx = StepContext { cfg, schema, kappa: kappa.as_ref(), scale: [1.0; 9] };
    let items: Vec<(&LabeledScan, u64)> = batch.iter().enumerate().map(|(i, s)| (s, derive_seed(seed, i as u64))).collect();
    run_batch(model, &items, &ctx)
}

fn kappa_from(scans: &[&LabeledScan], cfg: &ExperimentConfig, schema: &TopologySchema) -> Result<Option<CurvatureBounds>> {
    let refs: Vec<Tensor> = scans.iter().filter(|s| s.mode.has_layers()).map(|s| s.boundaries.clone()).collect();
    if refs.is_empty() || !cfg.losses.bc {
        return Ok(None);
    }
    Ok(Some(estimate_kappa(&refs, &schema.surface_names, cfg.delta)?))
}

fn fold_digest(mut d: u64, x: u64) -> u64 {
    for byte in x.to_le_bytes() {
        d ^= byte as u64;
        d = d.wrapping_mul(0x0000_0100_0000_01B3);
    }
    d
}

/// Trains from scratch with `seed`. `labeled` scans contribute according to
/// their annotation mode; `unlabeled` fill the unlabeled half of each batch.
pub fn train(
    cfg: &ExperimentConfig,
    schema: &TopologySchema,
    labeled: &[LabeledScan],
    unlabeled: &[LabeledScan],
    val: &[LabeledScan],
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate(schema)?;
    cfg.validate_for(labeled)?;
    let labeled: Vec<&LabeledScan> = labeled.iter().collect();
    let mut pool_u: Vec<&LabeledScan> = unlabeled.iter().collect();
    // unlabeled-mode scans in the labeled list also feed the unlabeled half
    let (lab, unl): (Vec<&LabeledScan>, Vec<&LabeledScan>) =
        labeled.into_iter().partition(|s| s.mode.has_layers() || s.mode.has_lesions());
    pool_u.extend(unl);
    let kappa = kappa_from(&lab, cfg, schema)?;
    if cfg.losses.bc && kappa.is_none() {
        log::warn!("no layer-labeled scans: curvature prior disabled");
    }
    let mut switches = cfg.losses.clone();
    if kappa.is_none() {
        switches.bc = false;
    }
    let run_cfg = ExperimentConfig { losses: switches.clone(), ..cfg.clone() };

    let mut model = Model::new(cfg.model_config(schema), seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, model.params.values());
    let active = switches.active();
    let mut adapt = SoftAdapt::new(active.iter().map(|c| c.name().to_string()).collect(), cfg.beta, cfg.window);
    adapt.loss_weighted = cfg.loss_weighted;
    let mut last = vec![0.0; active.len()];

    let bl = if lab.is_empty() { 0 } else { cfg.batch_labeled };
    let bu = if pool_u.is_empty() { 0 } else { cfg.batch_unlabeled };
    if bl + bu == 0 {
        return Err(Error::validation("no training scans"));
    }
    let steps_per_epoch = if bl > 0 { lab.len().div_ceil(bl) } else { pool_u.len().div_ceil(bu) };
    let total_steps = cfg.max_steps.map_or(steps_per_epoch * cfg.epochs, |m| m.min(steps_per_epoch * cfg.epochs));

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xDA7A));
    let mut order_l: Vec<usize> = (0..lab.len()).collect();
    let mut order_u: Vec<usize> = (0..pool_u.len()).collect();
    let mut cursor_u = pool_u.len();
    let mut digest = 0xCBF2_9CE4_8422_2325u64;

    let mut series = Vec::new();
    let mut validation = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut mad_ref: Option<f64> = None;
    let axial = cfg.scene.axial_um;

    for step in 0..total_steps {
        let pos = step % steps_per_epoch;
        if pos == 0 && bl > 0 {
            order_l.shuffle(&mut rng);
        }
        let mut batch: Vec<(&LabeledScan, u64)> = Vec::with_capacity(bl + bu);
        let mut ids = Vec::new();
        if bl > 0 {
            for &i in order_l.iter().skip(pos * bl).take(bl) {
                batch.push((lab[i], 0));
                ids.push(i as u64);
            }
        }
        for _ in 0..bu {
            if cursor_u == pool_u.len() {
                order_u.shuffle(&mut rng);
                cursor_u = 0;
            }
            batch.push((pool_u[order_u[cursor_u]], 0));
            ids.push((1u64 << 32) | order_u[cursor_u] as u64);
            cursor_u += 1;
        }
        for (j, item) in batch.iter_mut().enumerate() {
            item.1 = derive_seed(derive_seed(seed, step as u64 + 1), j as u64);
        }
        for &id in &ids {
            digest = fold_digest(digest, id);
        }

        let weights = adapt.weights();
        let mut counts = [0usize; 9];
        for (s, _) in &batch {
            for c in gated_components(&switches, s) {
                counts[slot(c)] += 1;
            }
        }
        let mut scale = [0.0; 9];
        for (c, w) in active.iter().zip(&weights) {
            let n = counts[slot(*c)];
            if n > 0 {
                scale[slot(*c)] = w / n as f64;
            }
        }
        let ctx = StepContext { cfg: &run_cfg, schema, kappa: kappa.as_ref(), scale };
        let mut res = run_batch(&model, &batch, &ctx)?;
        if !res.total.is_finite() {
            return Err(Error::NonFiniteLoss("total".into()));
        }
        for (i, c) in active.iter().enumerate() {
            if let Some(v) = res.values[slot(*c)] {
                last[i] = v;
            }
            series.push(SeriesRow { step, component: c.name().into(), value: last[i], weight: weights[i] });
        }
        for group in ["sup", "prior"] {
            let members: Vec<usize> = (0..active.len()).filter(|&i| active[i].group() == group).collect();
            if !members.is_empty() {
                series.push(SeriesRow {
                    step,
                    component: format!("group:{group}"),
                    value: members.iter().map(|&i| last[i]).sum(),
                    weight: members.iter().map(|&i| weights[i]).sum(),
                });
            }
        }
        adapt.record(&last);
        let norm = clip_global_norm(&mut res.grads, cfg.clip_norm);
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss("gradient".into()));
        }
        opt.step(model.params.values_mut(), &res.grads);
        log::debug!("step {step} total {:.5} grad-norm {norm:.4}", res.total);

        let end_of_epoch = pos + 1 == steps_per_epoch || step + 1 == total_steps;
        if end_of_epoch && !val.is_empty() {
            let (report, _) = evaluate(&model, val, schema, axial)?;
            let mad_px = report.mad_total_um / axial;
            let r = *mad_ref.get_or_insert(mad_px.max(1e-9));
            let score = mad_px / r + (1.0 - report.dice_smoothed_total);
            log::info!(
                "step {} val MAD {:.3} um, Dice {:.3}, score {score:.4}",
                step + 1,
                report.mad_total_um,
                report.dice_smoothed_total
            );
            validation.push((step + 1, report, score));
            if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
                best = Some((score, step + 1, model.params.values().to_vec()));
            }
        }
    }
    let (best_score, best_step) = match best {
        Some((score, st, values)) => {
            model.params.values_mut().clone_from_slice(&values);
            (score, st)
        }
        None => (f64::NAN, total_steps),
    };
    Ok(TrainOutcome { model, best_step, best_score, steps: total_steps, series, validation, order_digest: digest })
}

/// Post-engine outputs for one scan.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Rectified positions `[S, W]`.
    pub boundaries: Tensor,
    /// Pre-rectification positions `[S, W]`.
    pub raw_boundaries: Tensor,
    /// Corrected binary lesion masks `[K+1, H, W]`, background last.
    pub lesions: Tensor,
}

pub fn predict(model: &Model, image: &Tensor, schema: &TopologySchema) -> Result<Prediction> {
    let mut g = Graph::new();
    let b = model.bind_frozen(&mut g);
    let out = model.forward_anatomy(&mut g, &b, image)?;
    let eng = model.topology_pass(&mut g, &out, schema, true)?;
    Ok(Prediction {
        boundaries: g.value(eng.rectified.0).clone(),
        raw_boundaries: g.value(eng.raw.0).clone(),
        lesions: g.value(eng.corrected.values).clone(),
    })
}

/// Style mean `μ` of an image at inference.
pub fn style_code(model: &Model, image: &Tensor, schema: &TopologySchema) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let b = model.bind_frozen(&mut g);
    let br = triplet_branch(model, &mut g, &b, image, schema)?;
    Ok(g.value(br.omega).data().to_vec())
}

/// Metrics of `model` on `scans`, plus the predictions in scan order.
pub fn evaluate(model: &Model, scans: &[LabeledScan], schema: &TopologySchema, axial_um: f64) -> Result<(MetricsReport, Vec<Prediction>)> {
    let preds: Vec<Result<Prediction>> = par::map_slice(scans, |s| predict(model, &s.image, schema));
    let preds: Vec<Prediction> = preds.into_iter().collect::<Result<_>>()?;
    Ok((score_predictions(&preds, scans, schema, axial_um), preds))
}

/// Metrics of given predictions against the scans' ground truth.
pub fn score_predictions(preds: &[Prediction], scans: &[LabeledScan], schema: &TopologySchema, axial_um: f64) -> MetricsReport {
    let mut mad = MadAccumulator::new(schema.surfaces());
    let mut dice = DiceAccumulator::new(schema.lesions());
    let mut report = AuditReport::default();
    for (p, s) in preds.iter().zip(scans) {
        mad.add(&p.boundaries, &s.boundaries);
        dice.add(&p.lesions, &s.lesions);
        report.merge(audit(&p.boundaries, &p.lesions, schema));
    }
    MetricsReport::from_parts(
        schema.surface_names.clone(),
        schema.lesion_names.clone(),
        scans.len(),
        &mad,
        &dice,
        &report,
        axial_um,
        DICE_SMOOTH,
    )
}
