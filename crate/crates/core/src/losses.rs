//! Training objectives: anatomical priors on raw predictions, supervised
//! losses on corrected predictions, reconstruction, style-KL and triplet
//! terms. Every loss returns a scalar graph node.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::topology::{admissible_sum, BoundaryProbMap, BoundarySet, LayerMasks, LesionMasks, TopologySchema};

/// Floor on the log argument of the lesion-position penalty.
pub const LP_EPSILON: f64 = 1e-7;
/// Floor on predicted probabilities inside the boundary KL term.
pub const KL_EPSILON: f64 = 1e-12;
/// Dice smoothing, in pixels.
pub const DICE_SMOOTH: f64 = 1.0;
pub const DEFAULT_DELTA: usize = 15;
pub const DEFAULT_SIGMA: f64 = 0.5;
pub const KAPPA_QUANTILE: f64 = 0.999;

/// Mean-over-width sum of ordering violations `relu(p[s] - p[s+1])`.
pub fn loss_to(g: &mut Graph, raw: BoundarySet) -> Result<Var> {
    let (s, w) = (g.shape(raw.0)[0], g.shape(raw.0)[1]);
    let upper = g.slice(raw.0, 0, 0, s - 1)?;
    let lower = g.slice(raw.0, 0, 1, s)?;
    let d = g.sub(upper, lower)?;
    let v = g.relu(d)?;
    let total = g.sum(v)?;
    Ok(g.scale(total, 1.0 / w as f64)?)
}

/// Per-surface curvature limits for column offsets `delta / 2` apart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureBounds {
    pub delta: usize,
    /// Surface name to limit, in surface order.
    pub kappa: Vec<(String, f64)>,
}

impl CurvatureBounds {
    pub fn values(&self) -> Vec<f64> {
        self.kappa.iter().map(|(_, k)| *k).collect()
    }

    pub fn to_json(&self) -> String {
        let map: serde_json::Map<String, serde_json::Value> = self
            .kappa
            .iter()
            .map(|(n, k)| (n.clone(), serde_json::json!(k)))
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({ "delta": self.delta, "kappa": map }))
            .expect("bounds serialize")
    }

    /// Parses the JSON form; surface order is taken from `surfaces`.
    pub fn from_json(text: &str, surfaces: &[String]) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let delta = v["delta"]
            .as_u64()
            .ok_or_else(|| Error::validation("curvature bounds need integer delta"))? as usize;
        let mut kappa = Vec::with_capacity(surfaces.len());
        for s in surfaces {
            let k = v["kappa"][s]
                .as_f64()
                .ok_or_else(|| Error::validation(format!("no curvature bound for surface {s}")))?;
            if k < 0.0 {
                return Err(Error::validation(format!("negative curvature bound for {s}")));
            }
            kappa.push((s.clone(), k));
        }
        Ok(CurvatureBounds { delta, kappa })
    }
}

/// Absolute second differences `|-p[i-h] + 2p[i] - p[i+h]| / delta` of one
/// surface row, `h = delta / 2`.
pub fn second_differences(row: &[f64], delta: usize) -> Vec<f64> {
    let h = delta / 2;
    if h == 0 || row.len() <= 2 * h {
        return Vec::new();
    }
    (h..row.len() - h)
        .map(|i| (-row[i - h] + 2.0 * row[i] - row[i + h]).abs() / delta as f64)
        .collect()
}

/// Linear-interpolation quantile of an unsorted sample.
pub fn quantile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite sample"));
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// Curvature limit per surface: the 0.999 quantile of reference second
/// differences over every valid column of every annotated scan.
pub fn estimate_kappa(references: &[Tensor], surface_names: &[String], delta: usize) -> Result<CurvatureBounds> {
    let mut kappa = Vec::with_capacity(surface_names.len());
    for (s, name) in surface_names.iter().enumerate() {
        let mut sample = Vec::new();
        for r in references {
            let w = r.shape()[1];
            sample.extend(second_differences(&r.data()[s * w..(s + 1) * w], delta));
        }
        if sample.is_empty() {
            return Err(Error::validation(format!("no annotated columns for surface {name}")));
        }
        kappa.push((name.clone(), quantile(&mut sample, KAPPA_QUANTILE)));
    }
    Ok(CurvatureBounds { delta, kappa })
}

/// Width-normalized hinge on second differences exceeding `kappa`.
pub fn loss_bc(g: &mut Graph, raw: BoundarySet, bounds: &CurvatureBounds) -> Result<Var> {
    let (s, w) = (g.shape(raw.0)[0], g.shape(raw.0)[1]);
    let h = bounds.delta / 2;
    if w <= 2 * h || bounds.kappa.len() != s {
        return Err(Error::validation(format!(
            "curvature loss needs W > delta and one bound per surface (W={w}, delta={}, bounds={}, S={s})",
            bounds.delta,
            bounds.kappa.len()
        )));
    }
    let left = g.slice(raw.0, 1, 0, w - 2 * h)?;
    let mid = g.slice(raw.0, 1, h, w - h)?;
    let right = g.slice(raw.0, 1, 2 * h, w)?;
    let mid2 = g.scale(mid, 2.0)?;
    let a = g.sub(mid2, left)?;
    let sd = g.sub(a, right)?;
    let sd = g.abs(sd)?;
    let sd = g.scale(sd, 1.0 / bounds.delta as f64)?;
    let kappa = g.constant(Tensor::new(vec![s, 1], bounds.values())?);
    let excess = g.sub(sd, kappa)?;
    let excess = g.relu(excess)?;
    let total = g.sum(excess)?;
    Ok(g.scale(total, 1.0 / w as f64)?)
}

/// Penalty `-log(1 - L[k] (1 - Σ M[l in S_k]))` averaged over pixels and
/// summed over lesions, on uncorrected lesion probabilities.
pub fn loss_lp(g: &mut Graph, lesions: &LesionMasks, layers: &LayerMasks, schema: &TopologySchema) -> Result<Var> {
    let shape = g.shape(lesions.values).to_vec();
    let (h, w) = (shape[1], shape[2]);
    let mut total: Option<Var> = None;
    for k in 0..schema.lesions() {
        let c = lesions
            .channels
            .iter()
            .position(|n| *n == schema.lesion_names[k])
            .ok_or_else(|| Error::validation(format!("lesion channel {} missing", schema.lesion_names[k])))?;
        let lk = g.slice(lesions.values, 0, c, c + 1)?;
        let lk = g.reshape(lk, &[h, w])?;
        let region = admissible_sum(g, layers, schema, k)?;
        let outside = g.neg(region)?;
        let outside = g.add_scalar(outside, 1.0)?;
        let prod = g.mul(lk, outside)?;
        let arg = g.neg(prod)?;
        let arg = g.add_scalar(arg, 1.0)?;
        let arg = g.clamp(arg, LP_EPSILON, f64::INFINITY)?;
        let nll = g.log(arg)?;
        let s = g.sum(nll)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = total.expect("schema has lesions");
    Ok(g.scale(total, -1.0 / (h * w) as f64)?)
}

/// Discretized Gaussian targets `[S, H, W]` around reference positions,
/// renormalized per column.
pub fn gaussian_target(reference: &Tensor, h: usize, sigma: f64) -> Tensor {
    let (s, w) = (reference.shape()[0], reference.shape()[1]);
    let mut t = Tensor::zeros(vec![s, h, w]);
    for b in 0..s {
        for i in 0..w {
            let mu = reference.data()[b * w + i];
            let dens: Vec<f64> = (0..h)
                .map(|r| (-0.5 * ((r as f64 - mu) / sigma).powi(2)).exp())
                .collect();
            let z: f64 = dens.iter().sum();
            for (r, d) in dens.iter().enumerate() {
                let v = if z > 0.0 {
                    d / z
                } else if r == (mu.round().clamp(0.0, (h - 1) as f64)) as usize {
                    1.0
                } else {
                    0.0
                };
                t.data_mut()[(b * h + r) * w + i] = v;
            }
        }
    }
    t
}

/// Mean over surface columns of `Σ_r T ln(T / P)`, with `0 ln 0 = 0`.
pub fn loss_kl_boundary(g: &mut Graph, probs: BoundaryProbMap, target: &Tensor) -> Result<Var> {
    let shape = g.shape(probs.0).to_vec();
    if shape != target.shape() {
        return Err(Error::from(crate::error::TensorError::ShapeMismatch {
            op: "loss_kl_boundary",
            lhs: shape,
            rhs: target.shape().to_vec(),
        }));
    }
    let columns = (shape[0] * shape[2]) as f64;
    let entropy_part: f64 = target
        .data()
        .iter()
        .filter(|&&t| t > 0.0)
        .map(|&t| t * t.ln())
        .sum();
    let p = g.clamp(probs.0, KL_EPSILON, f64::INFINITY)?;
    let lp = g.log(p)?;
    let tv = g.constant(target.clone());
    let cross = g.mul(tv, lp)?;
    let cross = g.sum(cross)?;
    let neg = g.neg(cross)?;
    let kl = g.add_scalar(neg, entropy_part)?;
    Ok(g.scale(kl, 1.0 / columns)?)
}

/// Boundary regression loss: mean absolute (or squared) deviation.
pub fn loss_l1_boundary(g: &mut Graph, pred: BoundarySet, reference: &Tensor, squared: bool) -> Result<Var> {
    let r = g.constant(reference.clone());
    if squared {
        return Ok(g.mse(pred.0, r)?);
    }
    if g.shape(pred.0) != reference.shape() {
        return Err(Error::from(crate::error::TensorError::ShapeMismatch {
            op: "loss_l1_boundary",
            lhs: g.shape(pred.0).to_vec(),
            rhs: reference.shape().to_vec(),
        }));
    }
    let d = g.sub(pred.0, r)?;
    let d = g.abs(d)?;
    Ok(g.mean(d)?)
}

/// Soft Dice loss of one channel pair: `1 - (2Σpq + s)/(Σp + Σq + s)`.
pub fn dice_loss_pair(g: &mut Graph, p: Var, q: Var, smooth: f64) -> Result<Var> {
    let pq = g.mul(p, q)?;
    let inter = g.sum(pq)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, smooth)?;
    let sp = g.sum(p)?;
    let sq = g.sum(q)?;
    let den = g.add(sp, sq)?;
    let den = g.add_scalar(den, smooth)?;
    let ratio = if g.value(den).item() == 0.0 {
        // both empty with zero smoothing: perfect agreement
        let one = g.constant(Tensor::scalar(1.0));
        let zero = g.scale(inter, 0.0)?;
        g.add(one, zero)?
    } else {
        g.div(num, den)?
    };
    let neg = g.neg(ratio)?;
    Ok(g.add_scalar(neg, 1.0)?)
}

/// Mean Dice loss over lesion channels (background excluded).
pub fn loss_dice(g: &mut Graph, pred: &LesionMasks, reference: Var, lesion_count: usize, smooth: f64) -> Result<Var> {
    let shape = g.shape(pred.values).to_vec();
    let rshape = g.shape(reference).to_vec();
    if rshape[1..] != shape[1..] || rshape[0] < lesion_count || shape[0] < lesion_count {
        return Err(Error::from(crate::error::TensorError::ShapeMismatch {
            op: "loss_dice",
            lhs: shape,
            rhs: rshape,
        }));
    }
    let mut total: Option<Var> = None;
    for k in 0..lesion_count {
        let p = g.slice(pred.values, 0, k, k + 1)?;
        let q = g.slice(reference, 0, k, k + 1)?;
        let d = dice_loss_pair(g, p, q, smooth)?;
        total = Some(match total {
            Some(t) => g.add(t, d)?,
            None => d,
        });
    }
    Ok(g.scale(total.expect("at least one lesion"), 1.0 / lesion_count as f64)?)
}

/// Masked mean absolute error. Returns the loss and whether the region was
/// empty (in which case the loss is a zero constant).
pub fn loss_rec(g: &mut Graph, original: &Tensor, reconstruction: Var, region: &Tensor) -> Result<(Var, bool)> {
    let count = region.sum();
    if count <= 0.0 {
        let z = g.scale(reconstruction, 0.0)?;
        let z = g.sum(z)?;
        return Ok((z, true));
    }
    let o = g.constant(original.clone());
    let m = g.constant(region.clone());
    let d = g.sub(reconstruction, o)?;
    let d = g.abs(d)?;
    let d = g.mul(d, m)?;
    let s = g.sum(d)?;
    Ok((g.scale(s, 1.0 / count)?, false))
}

/// KL of a diagonal Gaussian from N(0, 1), averaged over dimensions.
pub fn loss_zkl(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    let m2 = g.square(mu)?;
    let v = g.exp(logvar)?;
    let a = g.add(m2, v)?;
    let a = g.sub(a, logvar)?;
    let a = g.add_scalar(a, -1.0)?;
    let m = g.mean(a)?;
    Ok(g.scale(m, 0.5)?)
}

/// Style triplet: penalizes a style-transformed copy whose style factor is
/// more similar to the anchor than the spatially transformed copy's. With
/// `literal`, the operands are swapped.
pub fn loss_triplet_style(g: &mut Graph, anchor: Var, affine: Var, styled: Var, literal: bool) -> Result<Var> {
    let sim_a = g.cosine_similarity(anchor, affine)?;
    let sim_s = g.cosine_similarity(anchor, styled)?;
    let d = if literal { g.sub(sim_a, sim_s)? } else { g.sub(sim_s, sim_a)? };
    Ok(g.relu(d)?)
}

/// Anatomy triplet: style transforms must move spatial factors less than
/// affine transforms do.
#[allow(clippy::too_many_arguments)]
pub fn loss_triplet_anatomy(
    g: &mut Graph,
    bounds: [Var; 3],
    lesions: [Var; 3],
    lesion_count: usize,
) -> Result<Var> {
    let [p, pa, ps] = bounds;
    let [l, la, ls] = lesions;
    let mse_s = g.mse(p, ps)?;
    let mse_a = g.mse(p, pa)?;
    let d1 = g.sub(mse_s, mse_a)?;
    let d1 = g.relu(d1)?;
    let masks = |v: Var| LesionMasks {
        values: v,
        channels: Vec::new(),
        corrected: true,
    };
    let dl_s = loss_dice(g, &masks(ls), l, lesion_count, DICE_SMOOTH)?;
    let dl_a = loss_dice(g, &masks(la), l, lesion_count, DICE_SMOOTH)?;
    let d2 = g.sub(dl_s, dl_a)?;
    let d2 = g.relu(d2)?;
    Ok(g.add(d1, d2)?)
}
