//! Boundary regression, layer rectification, surface-to-mask conversion and
//! lesion confinement.
//!
//! Conventions: row index grows with depth, surface index grows with depth
//! (surface 0 is the ILM, surface `S-1` is the BM). Layer `s` lies between
//! surfaces `s` and `s+1`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::sigmoid;
use crate::tensor::{Graph, Tensor, Var};

/// Allowed deviation of a probability column from unit mass.
pub const COLUMN_SUM_TOLERANCE: f64 = 1e-4;

/// Admissible-layer sets per lesion type plus the surface ordering.
#[derive(Clone, Debug, PartialEq)]
pub struct TopologySchema {
    pub name: String,
    pub surface_names: Vec<String>,
    pub layer_names: Vec<String>,
    pub lesion_names: Vec<String>,
    /// For each lesion, the sorted layer indices that may contain it.
    pub admissible: Vec<Vec<usize>>,
}

/// On-disk form of a [`TopologySchema`].
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SchemaDocument {
    pub name: String,
    pub surfaces: Vec<String>,
    /// Optional layer names (one per adjacent surface pair); defaults to
    /// `"{upper}-{lower}"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<String>>,
    pub lesions: Vec<LesionEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LesionEntry {
    pub name: String,
    pub layers: Vec<String>,
}

impl TopologySchema {
    pub fn from_document(doc: &SchemaDocument) -> Result<Self> {
        let s = doc.surfaces.len();
        if s < 2 {
            return Err(Error::validation("schema needs at least two surfaces"));
        }
        let layer_names = match &doc.layers {
            Some(l) if l.len() != s - 1 => {
                return Err(Error::validation(format!(
                    "schema lists {} layers for {} surfaces",
                    l.len(),
                    s
                )))
            }
            Some(l) => l.clone(),
            None => doc
                .surfaces
                .windows(2)
                .map(|w| format!("{}-{}", w[0], w[1]))
                .collect(),
        };
        if doc.lesions.is_empty() {
            return Err(Error::validation("schema needs at least one lesion type"));
        }
        let by_name: HashMap<&str, usize> = layer_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let mut admissible = Vec::with_capacity(doc.lesions.len());
        for lesion in &doc.lesions {
            let mut idx = Vec::with_capacity(lesion.layers.len());
            for l in &lesion.layers {
                let i = *by_name.get(l.as_str()).ok_or_else(|| {
                    Error::validation(format!("lesion {} names unknown layer {l}", lesion.name))
                })?;
                idx.push(i);
            }
            idx.sort_unstable();
            idx.dedup();
            if idx.is_empty() {
                return Err(Error::validation(format!(
                    "lesion {} has an empty admissible set",
                    lesion.name
                )));
            }
            admissible.push(idx);
        }
        Ok(TopologySchema {
            name: doc.name.clone(),
            surface_names: doc.surfaces.clone(),
            layer_names,
            lesion_names: doc.lesions.iter().map(|l| l.name.clone()).collect(),
            admissible,
        })
    }

    pub fn to_document(&self) -> SchemaDocument {
        SchemaDocument {
            name: self.name.clone(),
            surfaces: self.surface_names.clone(),
            layers: Some(self.layer_names.clone()),
            lesions: self
                .lesion_names
                .iter()
                .zip(&self.admissible)
                .map(|(n, a)| LesionEntry {
                    name: n.clone(),
                    layers: a.iter().map(|&i| self.layer_names[i].clone()).collect(),
                })
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SchemaDocument = serde_json::from_str(text)?;
        Self::from_document(&doc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("schema serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))
    }

    /// Five surfaces (ILM, IPL, ELM, RPE, BM) and three lesion types:
    /// intraretinal fluid in the two inner layers, subretinal fluid between
    /// ELM and RPE, and pigment-epithelium detachment between RPE and BM.
    pub fn retina_default() -> Self {
        let doc = SchemaDocument {
            name: "retina5".into(),
            surfaces: ["ILM", "IPL", "ELM", "RPE", "BM"].map(String::from).to_vec(),
            layers: Some(
                ["inner_retina", "outer_nuclear", "photoreceptor", "rpe_bruch"]
                    .map(String::from)
                    .to_vec(),
            ),
            lesions: vec![
                LesionEntry {
                    name: "IRF".into(),
                    layers: vec!["inner_retina".into(), "outer_nuclear".into()],
                },
                LesionEntry {
                    name: "SRF".into(),
                    layers: vec!["photoreceptor".into()],
                },
                LesionEntry {
                    name: "PED".into(),
                    layers: vec!["rpe_bruch".into()],
                },
            ],
        };
        Self::from_document(&doc).expect("default schema is valid")
    }

    pub fn surfaces(&self) -> usize {
        self.surface_names.len()
    }

    pub fn layers(&self) -> usize {
        self.layer_names.len()
    }

    pub fn lesions(&self) -> usize {
        self.lesion_names.len()
    }

    pub fn lesion_index(&self, name: &str) -> Result<usize> {
        self.lesion_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::validation(format!("lesion {name} not in schema {}", self.name)))
    }

    /// Channel names of a lesion tensor: one per lesion plus `background`.
    pub fn lesion_channels(&self) -> Vec<String> {
        let mut c = self.lesion_names.clone();
        c.push(BACKGROUND.into());
        c
    }
}

pub const BACKGROUND: &str = "background";

/// Column-normalized boundary probabilities, `[S, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct BoundaryProbMap(pub Var);

/// Boundary row positions, `[S, W]`.
#[derive(Clone, Copy, Debug)]
pub struct BoundarySet(pub Var);

/// Surface maps `C` (`[S, H, W]`) and layer maps `M` (`[S-1, H, W]`).
#[derive(Clone, Copy, Debug)]
pub struct LayerMasks {
    pub surfaces: Var,
    pub layers: Var,
    pub binarized: bool,
}

/// Lesion channels `[K+1, H, W]`, background last, with channel names.
#[derive(Clone, Debug)]
pub struct LesionMasks {
    pub values: Var,
    pub channels: Vec<String>,
    pub corrected: bool,
}

/// Row counter `A[r][j] = r`, stored as `[1, H, 1]` so it broadcasts over
/// surfaces and columns.
pub fn row_counter(h: usize) -> Tensor {
    Tensor::new(vec![1, h, 1], (0..h).map(|r| r as f64).collect()).expect("row counter")
}

/// Expected row of each column's probability mass.
pub fn expected_boundary(g: &mut Graph, probs: BoundaryProbMap) -> Result<BoundarySet> {
    let shape = g.shape(probs.0).to_vec();
    if shape.len() != 3 {
        return Err(Error::validation(format!(
            "boundary probabilities must be [S, H, W], got {shape:?}"
        )));
    }
    let (s, h, w) = (shape[0], shape[1], shape[2]);
    let data = g.value(probs.0).data();
    for b in 0..s {
        for i in 0..w {
            let total: f64 = (0..h).map(|r| data[(b * h + r) * w + i]).sum();
            if (total - 1.0).abs() > COLUMN_SUM_TOLERANCE {
                return Err(Error::validation(format!(
                    "column {i} of surface {b} sums to {total}"
                )));
            }
        }
    }
    let rows = g.constant(row_counter(h));
    let weighted = g.mul(probs.0, rows)?;
    Ok(BoundarySet(g.sum_axis(weighted, 1)?))
}

/// Enforces `p[b] <= p[b+1]` bottom-up: the deepest surface is kept and each
/// shallower one is pulled above its already rectified lower neighbour.
pub fn rectify_boundaries(g: &mut Graph, raw: BoundarySet) -> Result<BoundarySet> {
    let s = g.shape(raw.0)[0];
    let w = g.shape(raw.0)[1];
    let mut rows: Vec<Var> = Vec::with_capacity(s);
    let mut below = g.slice(raw.0, 0, s - 1, s)?;
    rows.push(below);
    for b in (0..s - 1).rev() {
        let cur = g.slice(raw.0, 0, b, b + 1)?;
        // min(cur, below) equals below - |below - cur|_+ but is exact in floating point
        let fixed = g.minimum(cur, below)?;
        rows.push(fixed);
        below = fixed;
    }
    rows.reverse();
    let out = g.concat(&rows, 0)?;
    debug_assert_eq!(g.shape(out), &[s, w]);
    Ok(BoundarySet(out))
}

/// `C[b] = sigmoid(A - p[b])`, `M[s] = C[s] - C[s+1]`; with `binarize`, the
/// layer maps are rounded forward and passed straight through backward.
pub fn surfaces_to_masks(
    g: &mut Graph,
    rectified: BoundarySet,
    h: usize,
    binarize: bool,
) -> Result<LayerMasks> {
    let shape = g.shape(rectified.0).to_vec();
    let (s, w) = (shape[0], shape[1]);
    let p = g.reshape(rectified.0, &[s, 1, w])?;
    let rows = g.constant(row_counter(h));
    let diff = g.sub(rows, p)?;
    let surfaces = g.sigmoid(diff)?;
    let upper = g.slice(surfaces, 0, 0, s - 1)?;
    let lower = g.slice(surfaces, 0, 1, s)?;
    let mut layers = g.sub(upper, lower)?;
    if binarize {
        layers = g.round_ste(layers)?;
    }
    Ok(LayerMasks {
        surfaces,
        layers,
        binarized: binarize,
    })
}

/// Sum of the admissible layer maps of lesion `k`, `[H, W]`.
pub fn admissible_sum(g: &mut Graph, layers: &LayerMasks, schema: &TopologySchema, k: usize) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &l in &schema.admissible[k] {
        let m = g.slice(layers.layers, 0, l, l + 1)?;
        acc = Some(match acc {
            Some(a) => g.add(a, m)?,
            None => m,
        });
    }
    let acc = acc.expect("admissible sets are nonempty");
    let shape = g.shape(acc)[1..].to_vec();
    Ok(g.reshape(acc, &shape)?)
}

/// `L̂[k] = L[k] * Σ_{l in S_k} M[l]` per lesion; background passes through.
pub fn correct_lesions(
    g: &mut Graph,
    raw: &LesionMasks,
    layers: &LayerMasks,
    schema: &TopologySchema,
) -> Result<LesionMasks> {
    let shape = g.shape(raw.values).to_vec();
    let lshape = g.shape(layers.layers).to_vec();
    if shape.len() != 3 || shape[1..] != lshape[1..] {
        return Err(Error::validation(format!(
            "lesion masks {shape:?} and layer maps {lshape:?} disagree on H x W"
        )));
    }
    if raw.channels.len() != shape[0] {
        return Err(Error::validation("lesion channel names do not match tensor"));
    }
    let mut parts = Vec::with_capacity(shape[0]);
    for (c, name) in raw.channels.iter().enumerate() {
        let ch = g.slice(raw.values, 0, c, c + 1)?;
        if name == BACKGROUND {
            parts.push(ch);
            continue;
        }
        let k = schema.lesion_index(name)?;
        let region = admissible_sum(g, layers, schema, k)?;
        parts.push(g.mul(ch, region)?);
    }
    Ok(LesionMasks {
        values: g.concat(&parts, 0)?,
        channels: raw.channels.clone(),
        corrected: true,
    })
}

// ---------------------------------------------------------------------------
// Plain-value helpers used by evaluation, data generation and the auditor.

/// Bottom-up rectification on plain values, `[S, W]`.
pub fn rectify_values(raw: &Tensor) -> Tensor {
    let (s, w) = (raw.shape()[0], raw.shape()[1]);
    let mut out = raw.clone();
    for b in (0..s - 1).rev() {
        for i in 0..w {
            let below = out.data()[(b + 1) * w + i];
            let cur = raw.data()[b * w + i];
            out.data_mut()[b * w + i] = if cur < below { cur } else { below };
        }
    }
    out
}

/// Binarized layer maps `[S-1, H, W]` of plain boundary positions, computed
/// exactly as the engine's forward pass does.
pub fn binarized_layers(boundaries: &Tensor, h: usize) -> Tensor {
    let (s, w) = (boundaries.shape()[0], boundaries.shape()[1]);
    let p = boundaries.data();
    Tensor::from_fn(vec![s - 1, h, w], |i| {
        let (l, r, c) = (i[0], i[1] as f64, i[2]);
        (sigmoid(r - p[l * w + c]) - sigmoid(r - p[(l + 1) * w + c])).round()
    })
}

/// Binarized region between the first and last surface, `[H, W]`.
pub fn retina_region(boundaries: &Tensor, h: usize) -> Tensor {
    let (s, w) = (boundaries.shape()[0], boundaries.shape()[1]);
    let p = boundaries.data();
    Tensor::from_fn(vec![h, w], |i| {
        let (r, c) = (i[0] as f64, i[1]);
        (sigmoid(r - p[c]) - sigmoid(r - p[(s - 1) * w + c])).round()
    })
}

/// Admissible region of lesion `k` from binarized layer maps, `[H, W]`.
pub fn admissible_region(layers_bin: &Tensor, schema: &TopologySchema, k: usize) -> Vec<bool> {
    let hw = layers_bin.numel() / layers_bin.shape()[0];
    (0..hw)
        .map(|j| schema.admissible[k].iter().any(|&l| layers_bin.data()[l * hw + j] > 0.5))
        .collect()
}

/// Outcome of a topology audit.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AuditReport {
    pub ordering_violations: usize,
    pub confinement_violations: usize,
    pub first_violation: Option<Violation>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Violation {
    Ordering { surface: usize, column: usize },
    Confinement { lesion: String, row: usize, column: usize },
}

impl AuditReport {
    pub fn total(&self) -> usize {
        self.ordering_violations + self.confinement_violations
    }

    pub fn is_clean(&self) -> bool {
        self.total() == 0
    }

    pub fn merge(&mut self, other: AuditReport) {
        self.ordering_violations += other.ordering_violations;
        self.confinement_violations += other.confinement_violations;
        if self.first_violation.is_none() {
            self.first_violation = other.first_violation;
        }
    }
}

/// Checks strict surface ordering and lesion confinement of binarized
/// lesion channels `[K(+1), H, W]` against the layers implied by `boundaries`.
pub fn audit(boundaries: &Tensor, lesions: &Tensor, schema: &TopologySchema) -> AuditReport {
    let mut report = AuditReport::default();
    let (s, w) = (boundaries.shape()[0], boundaries.shape()[1]);
    let p = boundaries.data();
    for b in 0..s - 1 {
        for i in 0..w {
            if p[b * w + i] > p[(b + 1) * w + i] {
                report.ordering_violations += 1;
                report
                    .first_violation
                    .get_or_insert(Violation::Ordering { surface: b, column: i });
            }
        }
    }
    let h = lesions.shape()[1];
    let layers = binarized_layers(boundaries, h);
    for k in 0..schema.lesions() {
        let region = admissible_region(&layers, schema, k);
        for (j, &inside) in region.iter().enumerate() {
            if !inside && lesions.data()[k * h * w + j] > 0.5 {
                report.confinement_violations += 1;
                report.first_violation.get_or_insert(Violation::Confinement {
                    lesion: schema.lesion_names[k].clone(),
                    row: j / w,
                    column: j % w,
                });
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn boundary(g: &mut Graph, rows: &[&[f64]]) -> BoundarySet {
        let w = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        BoundarySet(g.constant(Tensor::new(vec![rows.len(), w], data).unwrap()))
    }

    fn column_probs(col: &[f64]) -> Tensor {
        Tensor::new(vec![1, col.len(), 1], col.to_vec()).unwrap()
    }

    #[test]
    fn expected_boundary_examples() {
        for (col, want) in [
            (vec![0.0, 0.0, 1.0, 0.0], 2.0),
            (vec![0.25; 4], 1.5),
            (vec![0.25, 0.0, 0.0, 0.0, 0.75], 3.0),
        ] {
            let mut g = Graph::new();
            let p = g.constant(column_probs(&col));
            let e = expected_boundary(&mut g, BoundaryProbMap(p)).unwrap();
            assert_abs_diff_eq!(g.value(e.0).item(), want, epsilon = 1e-12);
        }
    }

    #[test]
    fn expected_boundary_rejects_unnormalized_columns() {
        let mut g = Graph::new();
        let p = g.constant(column_probs(&[0.5, 0.6]));
        assert!(expected_boundary(&mut g, BoundaryProbMap(p)).is_err());
    }

    #[test]
    fn rectify_examples() {
        for (raw, want) in [
            (vec![3.0, 5.0], vec![3.0, 5.0]),
            (vec![7.0, 5.0], vec![5.0, 5.0]),
            (vec![3.0, 5.0, 1.0], vec![1.0, 1.0, 1.0]),
        ] {
            let mut g = Graph::new();
            let rows: Vec<&[f64]> = raw.chunks(1).collect();
            let b = boundary(&mut g, &rows);
            let r = rectify_boundaries(&mut g, b).unwrap();
            assert_eq!(g.value(r.0).data(), want.as_slice());
            let t = Tensor::new(vec![raw.len(), 1], raw.clone()).unwrap();
            assert_eq!(rectify_values(&t).data(), want.as_slice());
        }
    }

    #[test]
    fn sigmoid_column_and_layer_values() {
        let mut g = Graph::new();
        let b = boundary(&mut g, &[&[1.5], &[1.5]]);
        let m = surfaces_to_masks(&mut g, b, 4, false).unwrap();
        let c = g.value(m.surfaces).data()[..4].to_vec();
        for (got, want) in c.iter().zip([0.1824, 0.3775, 0.6225, 0.8176]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-4);
        }
        // equal surfaces -> zero-thickness layer
        assert!(g.value(m.layers).data().iter().all(|&v| v == 0.0));

        let mut g = Graph::new();
        let b = boundary(&mut g, &[&[0.5], &[2.5]]);
        let m = surfaces_to_masks(&mut g, b, 4, false).unwrap();
        assert_abs_diff_eq!(g.value(m.layers).data()[1], 0.4401, epsilon = 1e-4);
    }

    #[test]
    fn lesion_correction_examples() {
        let schema = TopologySchema::retina_default();
        let mut g = Graph::new();
        // PED admissible only in the last layer; column 0 has it, column 1 does not.
        let b = boundary(&mut g, &[&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0], &[0.5, 3.5], &[3.5, 3.5]]);
        let layers = surfaces_to_masks(&mut g, b, 4, true).unwrap();
        let lesions = Tensor::from_fn(vec![4, 4, 2], |i| if i[0] == 2 { 1.0 } else { 0.0 });
        let raw = LesionMasks {
            values: g.constant(lesions),
            channels: schema.lesion_channels(),
            corrected: false,
        };
        let fixed = correct_lesions(&mut g, &raw, &layers, &schema).unwrap();
        let v = g.value(fixed.values);
        assert_eq!(v.at(&[2, 1, 0]), 1.0);
        assert_eq!(v.at(&[2, 1, 1]), 0.0);

        // soft case: 0.8 * 0.5
        let mut g = Graph::new();
        let l = g.constant(Tensor::scalar(0.8));
        let m = g.constant(Tensor::scalar(0.5));
        let p = g.mul(l, m).unwrap();
        assert_abs_diff_eq!(g.value(p).item(), 0.4, epsilon = 1e-12);
    }

    #[test]
    fn unknown_lesion_channel_rejected() {
        let schema = TopologySchema::retina_default();
        let mut g = Graph::new();
        let zero: &[f64] = &[0.0];
        let b = boundary(&mut g, &[zero; 5]);
        let layers = surfaces_to_masks(&mut g, b, 2, true).unwrap();
        let raw = LesionMasks {
            values: g.constant(Tensor::zeros(vec![2, 2, 1])),
            channels: vec!["SHRM".into(), BACKGROUND.into()],
            corrected: false,
        };
        let err = correct_lesions(&mut g, &raw, &layers, &schema).unwrap_err();
        assert!(err.to_string().contains("SHRM"));
    }

    #[test]
    fn schema_json_roundtrip_and_validation() {
        let s = TopologySchema::retina_default();
        assert_eq!(TopologySchema::from_json(&s.to_json()).unwrap(), s);
        let bad = r#"{"name":"x","surfaces":["A","B"],"lesions":[{"name":"L","layers":["nope"]}]}"#;
        assert!(TopologySchema::from_json(bad).is_err());
        let empty = r#"{"name":"x","surfaces":["A","B"],"lesions":[{"name":"L","layers":[]}]}"#;
        assert!(TopologySchema::from_json(empty).is_err());
        let ok = r#"{"name":"x","surfaces":["A","B","C"],"lesions":[{"name":"L","layers":["B-C"]}]}"#;
        assert_eq!(TopologySchema::from_json(ok).unwrap().admissible, vec![vec![1]]);
    }

    #[test]
    fn audit_reports_first_violation() {
        let schema = TopologySchema::retina_default();
        let b = Tensor::new(vec![5, 1], vec![0.5, 1.5, 2.5, 3.5, 5.5]).unwrap();
        let mut lesions = Tensor::zeros(vec![4, 7, 1]);
        assert!(audit(&b, &lesions, &schema).is_clean());
        lesions.set(&[2, 0, 0], 1.0);
        let r = audit(&b, &lesions, &schema);
        assert_eq!(r.confinement_violations, 1);
        assert_eq!(
            r.first_violation,
            Some(Violation::Confinement { lesion: "PED".into(), row: 0, column: 0 })
        );
        let bad = Tensor::new(vec![5, 1], vec![0.5, 1.5, 4.0, 3.5, 5.5]).unwrap();
        assert_eq!(audit(&bad, &Tensor::zeros(vec![4, 7, 1]), &schema).ordering_violations, 1);
    }
}
