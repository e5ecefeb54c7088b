//! Central finite-difference verification of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::TensorError;

/// Finite-difference checker configuration.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Sample points whose non-smooth arguments come closer than this to a
    /// kink are rejected (and resampled by [`GradCheck::check_sampled`]).
    pub kink_margin: f64,
    /// Lower bound on the denominator of the relative error, so that
    /// vanishing gradients are compared absolutely.
    pub scale_floor: f64,
    pub max_resamples: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            epsilon: 1e-5,
            tolerance: 1e-4,
            kink_margin: 1e-3,
            scale_floor: 1e-3,
            max_resamples: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error per input tensor.
    pub max_rel_error: Vec<f64>,
    pub resamples: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < self.tolerance
    }
}

/// Fixed projection weights used to reduce non-scalar outputs.
fn projection(n: usize) -> Tensor {
    Tensor::new(
        vec![n],
        (0..n).map(|j| 0.5 + 0.5 * ((j as f64) * 0.731 + 0.3).sin()).collect(),
    )
    .expect("projection length")
}

fn scalarize(g: &mut Graph, out: Var) -> Result<Var, TensorError> {
    let n = g.value(out).numel();
    if n == 1 {
        return g.reshape(out, &[]);
    }
    let flat = g.reshape(out, &[n])?;
    let w = g.constant(projection(n));
    let p = g.mul(flat, w)?;
    g.sum(p)
}

impl GradCheck {
    fn evaluate<F>(&self, f: &F, inputs: &[Tensor]) -> Result<(f64, f64), TensorError>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let s = scalarize(&mut g, out)?;
        Ok((g.value(s).item(), g.min_kink_distance()))
    }

    /// Checks `f` at exactly `inputs`. Fails with `Invalid` when the point
    /// sits within `kink_margin` of a non-smooth primitive's kink.
    pub fn check<F>(&self, f: F, inputs: &[Tensor]) -> Result<GradCheckReport, TensorError>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.min_kink_distance() < self.kink_margin {
            return Err(TensorError::Invalid {
                op: "grad_check",
                reason: format!(
                    "sample point within {} of a kink",
                    g.min_kink_distance()
                ),
            });
        }
        let s = scalarize(&mut g, out)?;
        g.backward(s)?;

        let mut max_rel_error = Vec::with_capacity(inputs.len());
        for (k, v) in vars.iter().enumerate() {
            let analytic = g
                .grad(*v)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
            let mut worst = 0.0f64;
            let mut probe = inputs.to_vec();
            for j in 0..inputs[k].numel() {
                let x0 = inputs[k].data()[j];
                probe[k].data_mut()[j] = x0 + self.epsilon;
                let (fp, _) = self.evaluate(&f, &probe)?;
                probe[k].data_mut()[j] = x0 - self.epsilon;
                let (fm, _) = self.evaluate(&f, &probe)?;
                probe[k].data_mut()[j] = x0;
                let numeric = (fp - fm) / (2.0 * self.epsilon);
                let a = analytic[j];
                let denom = a.abs().max(numeric.abs()).max(self.scale_floor);
                worst = worst.max((a - numeric).abs() / denom);
            }
            max_rel_error.push(worst);
        }
        Ok(GradCheckReport {
            max_rel_error,
            resamples: 0,
            tolerance: self.tolerance,
        })
    }

    /// Draws inputs from `sample` until a kink-free point is found, then checks.
    pub fn check_sampled<F, S>(&self, f: F, mut sample: S) -> Result<GradCheckReport, TensorError>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
        S: FnMut() -> Vec<Tensor>,
    {
        for attempt in 0..=self.max_resamples {
            let inputs = sample();
            let (_, kink) = self.evaluate(&f, &inputs)?;
            if kink < self.kink_margin {
                continue;
            }
            let mut report = self.check(&f, &inputs)?;
            report.resamples = attempt;
            return Ok(report);
        }
        Err(TensorError::Invalid {
            op: "grad_check",
            reason: format!("no kink-free sample in {} attempts", self.max_resamples + 1),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_op_is_exact() {
        let gc = GradCheck::default();
        let r = gc
            .check(|g, v| g.scale(v[0], 3.0), &[Tensor::scalar(2.0)])
            .unwrap();
        assert!(r.worst() < 1e-9, "{r:?}");
    }

    #[test]
    fn sigmoid_at_one() {
        let gc = GradCheck::default();
        let r = gc.check(|g, v| g.sigmoid(v[0]), &[Tensor::scalar(1.0)]).unwrap();
        assert!(r.worst() < 1e-6, "{r:?}");
    }

    #[test]
    fn kink_points_are_rejected_and_resampled() {
        let gc = GradCheck::default();
        assert!(gc.check(|g, v| g.relu(v[0]), &[Tensor::scalar(0.0)]).is_err());
        let mut calls = 0;
        let r = gc
            .check_sampled(
                |g, v| g.relu(v[0]),
                || {
                    calls += 1;
                    vec![Tensor::scalar(if calls < 3 { 1e-6 } else { 0.7 })]
                },
            )
            .unwrap();
        assert_eq!(r.resamples, 2);
        assert!(r.passed());
    }
}
