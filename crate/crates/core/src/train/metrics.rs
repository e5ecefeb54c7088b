//! Boundary MAD and volume-wise Dice.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::topology::AuditReport;

/// Running sums for boundary error, one slot per surface.
#[derive(Clone, Debug, Default)]
pub struct MadAccumulator {
    sums: Vec<f64>,
    counts: Vec<usize>,
}

impl MadAccumulator {
    pub fn new(surfaces: usize) -> Self {
        MadAccumulator { sums: vec![0.0; surfaces], counts: vec![0; surfaces] }
    }

    /// Adds `|pred - reference|` for every column of two `[S, W]` tables.
    pub fn add(&mut self, pred: &Tensor, reference: &Tensor) {
        assert_eq!(pred.shape(), reference.shape(), "boundary tables differ in shape");
        let w = pred.shape()[1];
        for (i, (p, r)) in pred.data().iter().zip(reference.data()).enumerate() {
            self.sums[i / w] += (p - r).abs();
            self.counts[i / w] += 1;
        }
    }

    pub fn merge(&mut self, other: &MadAccumulator) {
        for s in 0..self.sums.len() {
            self.sums[s] += other.sums[s];
            self.counts[s] += other.counts[s];
        }
    }

    /// Per-surface and overall mean absolute distance, scaled by `unit`.
    pub fn finish(&self, unit: f64) -> (Vec<f64>, f64) {
        let per: Vec<f64> = self
            .sums
            .iter()
            .zip(&self.counts)
            .map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 * unit })
            .collect();
        let n: usize = self.counts.iter().sum();
        let total = if n == 0 { 0.0 } else { self.sums.iter().sum::<f64>() / n as f64 * unit };
        (per, total)
    }
}

/// Intersections and sizes summed over every scan of a group.
#[derive(Clone, Debug, Default)]
pub struct DiceAccumulator {
    pub intersection: Vec<f64>,
    pub pred: Vec<f64>,
    pub reference: Vec<f64>,
}

impl DiceAccumulator {
    pub fn new(lesions: usize) -> Self {
        DiceAccumulator { intersection: vec![0.0; lesions], pred: vec![0.0; lesions], reference: vec![0.0; lesions] }
    }

    /// Adds binary masks `[K(+1), H, W]`; only the first `K` channels count.
    pub fn add(&mut self, pred: &Tensor, reference: &Tensor) {
        let k = self.intersection.len();
        let hw = pred.shape()[1] * pred.shape()[2];
        assert!(reference.shape()[1] * reference.shape()[2] == hw, "mask sizes differ");
        for c in 0..k {
            let p = &pred.data()[c * hw..(c + 1) * hw];
            let r = &reference.data()[c * hw..(c + 1) * hw];
            for (&a, &b) in p.iter().zip(r) {
                let (a, b) = ((a > 0.5) as u8 as f64, (b > 0.5) as u8 as f64);
                self.intersection[c] += a * b;
                self.pred[c] += a;
                self.reference[c] += b;
            }
        }
    }

    pub fn merge(&mut self, other: &DiceAccumulator) {
        for c in 0..self.intersection.len() {
            self.intersection[c] += other.intersection[c];
            self.pred[c] += other.pred[c];
            self.reference[c] += other.reference[c];
        }
    }

    /// Per-channel Dice with smoothing `s`; `s == 0` maps 0/0 to 1.
    pub fn finish(&self, s: f64) -> Vec<f64> {
        (0..self.intersection.len())
            .map(|c| {
                let den = self.pred[c] + self.reference[c] + s;
                if den == 0.0 {
                    1.0
                } else {
                    (2.0 * self.intersection[c] + s) / den
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scans: usize,
    pub surface_names: Vec<String>,
    pub lesion_names: Vec<String>,
    pub mad_um: Vec<f64>,
    pub mad_total_um: f64,
    pub dice: Vec<f64>,
    pub dice_total: f64,
    pub dice_smoothed: Vec<f64>,
    pub dice_smoothed_total: f64,
    pub ordering_violations: usize,
    pub confinement_violations: usize,
}

impl MetricsReport {
    pub fn from_parts(
        surface_names: Vec<String>,
        lesion_names: Vec<String>,
        scans: usize,
        mad: &MadAccumulator,
        dice: &DiceAccumulator,
        audit: &AuditReport,
        axial_um: f64,
        smooth: f64,
    ) -> Self {
        let (mad_um, mad_total_um) = mad.finish(axial_um);
        let raw = dice.finish(0.0);
        let smoothed = dice.finish(smooth);
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        MetricsReport {
            scans,
            surface_names,
            lesion_names,
            mad_um,
            mad_total_um,
            dice_total: mean(&raw),
            dice: raw,
            dice_smoothed_total: mean(&smoothed),
            dice_smoothed: smoothed,
            ordering_violations: audit.ordering_violations,
            confinement_violations: audit.confinement_violations,
        }
    }

    pub fn violations(&self) -> usize {
        self.ordering_violations + self.confinement_violations
    }

    /// `metric,name,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,name,value\n");
        for (n, v) in self.surface_names.iter().zip(&self.mad_um) {
            out.push_str(&format!("mad_um,{n},{v}\n"));
        }
        out.push_str(&format!("mad_um,total,{}\n", self.mad_total_um));
        for (n, v) in self.lesion_names.iter().zip(&self.dice) {
            out.push_str(&format!("dice,{n},{v}\n"));
        }
        out.push_str(&format!("dice,total,{}\n", self.dice_total));
        for (n, v) in self.lesion_names.iter().zip(&self.dice_smoothed) {
            out.push_str(&format!("dice_smoothed,{n},{v}\n"));
        }
        out.push_str(&format!("dice_smoothed,total,{}\n", self.dice_smoothed_total));
        out.push_str(&format!("violations,ordering,{}\n", self.ordering_violations));
        out.push_str(&format!("violations,confinement,{}\n", self.confinement_violations));
        out.push_str(&format!("scans,all,{}\n", self.scans));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_two_pixel_error() {
        let r = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 5.0, 6.0, 7.0]).unwrap();
        let p = r.map(|v| v + 2.0);
        let mut m = MadAccumulator::new(2);
        m.add(&p, &r);
        let (per, total) = m.finish(3.9);
        assert!((total - 7.8).abs() < 1e-12);
        assert!(per.iter().all(|v| (v - 7.8).abs() < 1e-12));
    }

    #[test]
    fn emptied_channel() {
        let r = Tensor::from_fn(vec![2, 2, 2], |i| if i[0] == 0 || i[1] == 0 { 1.0 } else { 0.0 });
        let mut p = r.clone();
        for j in 0..4 {
            p.data_mut()[j] = 0.0;
        }
        let mut d = DiceAccumulator::new(2);
        d.add(&p, &r);
        assert_eq!(d.finish(0.0), vec![0.0, 1.0]);
        let s = d.finish(1.0);
        assert!((s[0] - 1.0 / 5.0).abs() < 1e-12);
    }
}
