//! Single-scan overfit with the network replaced by free logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    estimate_kappa, gaussian_target, loss_bc, loss_dice, loss_kl_boundary, loss_l1_boundary, loss_lp, loss_to,
    CurvatureBounds, DICE_SMOOTH,
};
use crate::model::{Optimizer, OptimizerConfig};
use crate::synth::LabeledScan;
use crate::tensor::{Graph, Tensor};
use crate::topology::{correct_lesions, expected_boundary, rectify_boundaries, surfaces_to_masks, LesionMasks, TopologySchema};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverfitConfig {
    pub steps: usize,
    pub lr: f64,
    /// Adam denominator floor; the per-pixel prior gradients are tiny.
    pub eps: f64,
    /// Short second-moment memory so logits saturated early can still move.
    pub beta2: f64,
    pub sigma: f64,
    pub delta: usize,
    pub seed: u64,
}

impl Default for OverfitConfig {
    fn default() -> Self {
        OverfitConfig { steps: 500, lr: 0.05, eps: 1e-16, beta2: 0.9, sigma: 0.5, delta: 15, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitReport {
    pub steps: usize,
    /// Values at the final logits.
    pub loss_to: f64,
    pub loss_lp: f64,
    pub total: f64,
    /// Total loss before each update.
    pub history: Vec<f64>,
}

struct Terms {
    total: f64,
    to: f64,
    lp: f64,
    grads: Vec<Tensor>,
}

fn objective(
    logits: &[Tensor],
    scan: &LabeledScan,
    schema: &TopologySchema,
    target: &Tensor,
    kappa: &CurvatureBounds,
) -> Result<Terms> {
    let h = scan.height();
    let mut g = Graph::new();
    let bl = g.param(logits[0].clone());
    let ll = g.param(logits[1].clone());
    let probs = crate::topology::BoundaryProbMap(g.softmax(bl, 1)?);
    let raw = expected_boundary(&mut g, probs)?;
    let rect = rectify_boundaries(&mut g, raw)?;
    let layers = surfaces_to_masks(&mut g, rect, h, true)?;
    let lesion_probs = g.softmax(ll, 0)?;
    let bin = g.round_ste(lesion_probs)?;
    let channels = schema.lesion_channels();
    let raw_l = LesionMasks { values: bin, channels: channels.clone(), corrected: false };
    let corrected = correct_lesions(&mut g, &raw_l, &layers, schema)?;
    let soft = LesionMasks { values: lesion_probs, channels, corrected: false };

    let reference = g.constant(scan.lesion_channels());
    let parts = [
        loss_kl_boundary(&mut g, probs, target)?,
        loss_l1_boundary(&mut g, rect, &scan.boundaries, false)?,
        loss_dice(&mut g, &corrected, reference, schema.lesions(), DICE_SMOOTH)?,
        loss_to(&mut g, raw)?,
        loss_bc(&mut g, raw, kappa)?,
        loss_lp(&mut g, &soft, &layers, schema)?,
    ];
    let to = g.value(parts[3]).item();
    let lp = g.value(parts[5]).item();
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = g.add(total, p)?;
    }
    let tv = g.value(total).item();
    if !tv.is_finite() {
        return Err(Error::NonFiniteLoss("overfit total".into()));
    }
    g.backward(total)?;
    let grads = [bl, ll].iter().map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v).to_vec()))).collect();
    Ok(Terms { total: tv, to, lp, grads })
}

/// Optimizes free boundary and lesion logits on one scan with every
/// supervised and prior loss at unit weight.
pub fn overfit_direct(scan: &LabeledScan, schema: &TopologySchema, cfg: &OverfitConfig) -> Result<OverfitReport> {
    let (h, w) = (scan.height(), scan.width());
    let s = schema.surfaces();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = Normal::new(0.0, 0.01).expect("valid std");
    let mut logits = vec![
        Tensor::from_fn(vec![s, h, w], |_| n.sample(&mut rng)),
        Tensor::zeros(vec![schema.lesions() + 1, h, w]),
    ];
    let target = gaussian_target(&scan.boundaries, h, cfg.sigma);
    let kappa = estimate_kappa(std::slice::from_ref(&scan.boundaries), &schema.surface_names, cfg.delta)?;
    let mut opt = Optimizer::new(OptimizerConfig::Adam { lr: cfg.lr, beta1: 0.9, beta2: cfg.beta2, eps: cfg.eps }, &logits);
    let mut history = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let t = objective(&logits, scan, schema, &target, &kappa)?;
        history.push(t.total);
        opt.step(&mut logits, &t.grads);
    }
    let t = objective(&logits, scan, schema, &target, &kappa)?;
    Ok(OverfitReport { steps: cfg.steps, loss_to: t.to, loss_lp: t.lp, total: t.total, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scan_with, SceneConfig};

    #[test]
    fn short_overfit_reduces_loss() {
        let schema = TopologySchema::retina_default();
        let scan = generate_scan_with(5, &SceneConfig::default(), &schema, Some(true)).unwrap();
        let r = overfit_direct(&scan, &schema, &OverfitConfig { steps: 40, ..Default::default() }).unwrap();
        assert!(r.total < r.history[0]);
    }
}
