//! Adaptive loss weighting from the recent rate of change of each component.

use std::collections::VecDeque;

pub const DEFAULT_WINDOW: usize = 10;
pub const DEFAULT_BETA: f64 = 0.1;
pub const RATE_EPSILON: f64 = 1e-8;

/// Softmax of `beta * rates`, scaled by `magnitudes` (if given) and
/// renormalized to sum to the number of components.
pub fn weights_from_rates(rates: &[f64], magnitudes: Option<&[f64]>, beta: f64) -> Vec<f64> {
    let n = rates.len();
    if n == 0 {
        return Vec::new();
    }
    let m = rates.iter().map(|r| beta * r).fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = rates.iter().map(|r| (beta * r - m).exp()).collect();
    if let Some(mag) = magnitudes {
        let total: f64 = mag.iter().sum();
        if total > 0.0 {
            for (wi, &f) in w.iter_mut().zip(mag) {
                // floor keeps weights strictly positive when a component is exactly 0
                *wi *= (f / total).max(RATE_EPSILON);
            }
        }
    }
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x * n as f64 / s).collect()
}

/// Average first difference over a window, normalized by `Σ|s| + eps`.
pub fn normalized_rates(histories: &[&[f64]]) -> Vec<f64> {
    let raw: Vec<f64> = histories
        .iter()
        .map(|h| {
            let d: f64 = h.windows(2).map(|p| p[1] - p[0]).sum();
            d / (h.len() - 1) as f64
        })
        .collect();
    let norm: f64 = raw.iter().map(|r| r.abs()).sum::<f64>() + RATE_EPSILON;
    raw.iter().map(|r| r / norm).collect()
}

/// Per-component rolling history plus weight computation.
#[derive(Clone, Debug)]
pub struct SoftAdapt {
    pub names: Vec<String>,
    pub beta: f64,
    pub window: usize,
    pub loss_weighted: bool,
    history: Vec<VecDeque<f64>>,
}

impl SoftAdapt {
    pub fn new(names: Vec<String>, beta: f64, window: usize) -> Self {
        let history = vec![VecDeque::with_capacity(window + 1); names.len()];
        SoftAdapt { names, beta, window, loss_weighted: true, history }
    }

    /// Appends one observation per component (same order as `names`).
    pub fn record(&mut self, values: &[f64]) {
        debug_assert_eq!(values.len(), self.history.len());
        for (h, &v) in self.history.iter_mut().zip(values) {
            h.push_back(v);
            if h.len() > self.window + 1 {
                h.pop_front();
            }
        }
    }

    pub fn ready(&self) -> bool {
        self.history.iter().all(|h| h.len() > self.window)
    }

    /// Current weights; uniform until every window is full.
    pub fn weights(&self) -> Vec<f64> {
        let n = self.names.len();
        if !self.ready() {
            return vec![1.0; n];
        }
        let hist: Vec<Vec<f64>> = self.history.iter().map(|h| h.iter().copied().collect()).collect();
        let refs: Vec<&[f64]> = hist.iter().map(|h| h.as_slice()).collect();
        let rates = normalized_rates(&refs);
        let mags: Vec<f64> = hist.iter().map(|h| *h.last().expect("filled")).collect();
        weights_from_rates(&rates, self.loss_weighted.then_some(mags.as_slice()), self.beta)
    }
}
