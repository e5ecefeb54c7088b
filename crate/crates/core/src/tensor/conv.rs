//! Direct 2-D convolution kernels (stride 1, symmetric zero padding).
//!
//! Layouts: input `[C_in, H, W]`, weight `[C_out, C_in, K, K]`, output
//! `[C_out, H + 2p - K + 1, W + 2p - K + 1]`. Parallelism is over output
//! planes (forward, weight grad) or input planes (input grad); each plane is
//! accumulated by one thread in a fixed order.

use crate::par;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    fn is_3x3_same(&self) -> bool {
        self.k == 3 && self.pad == 1 && self.w >= 2
    }

    /// Range of output columns `x` for which `x + kx - pad` lands in the input.
    fn x_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.out_w());
        (lo, hi.max(lo))
    }
}

pub(crate) fn forward(d: ConvDims, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    if d.is_3x3_same() {
        return forward3(d, input, weight, bias);
    }
    let (oh, ow) = (d.out_h(), d.out_w());
    let plane = oh * ow;
    let mut out = vec![0.0; d.c_out * plane];
    par::for_each_chunk_mut(&mut out, plane, |co, acc| {
        if let Some(b) = bias {
            acc.iter_mut().for_each(|v| *v = b[co]);
        }
        // row-outer order keeps the destination row hot in cache
        for y in 0..oh {
            let dst_row = &mut acc[y * ow..(y + 1) * ow];
            for ci in 0..d.c_in {
                let src = &input[ci * d.h * d.w..(ci + 1) * d.h * d.w];
                for ky in 0..d.k {
                    let iy = y + ky;
                    if iy < d.pad || iy - d.pad >= d.h {
                        continue;
                    }
                    let row = &src[(iy - d.pad) * d.w..(iy - d.pad + 1) * d.w];
                    for kx in 0..d.k {
                        let wv = weight[((co * d.c_in + ci) * d.k + ky) * d.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = d.x_range(kx);
                        let s = &row[x0 + kx - d.pad..x1 + kx - d.pad];
                        for (o, &v) in dst_row[x0..x1].iter_mut().zip(s) {
                            *o += wv * v;
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn backward_input(d: ConvDims, grad_out: &[f64], weight: &[f64]) -> Vec<f64> {
    if d.is_3x3_same() {
        return backward_input3(d, grad_out, weight);
    }
    let (oh, ow) = (d.out_h(), d.out_w());
    let plane = d.h * d.w;
    let mut gin = vec![0.0; d.c_in * plane];
    par::for_each_chunk_mut(&mut gin, plane, |ci, acc| {
        for iy in 0..d.h {
            let dst_row = &mut acc[iy * d.w..(iy + 1) * d.w];
            for co in 0..d.c_out {
                let g = &grad_out[co * oh * ow..(co + 1) * oh * ow];
                for ky in 0..d.k {
                    // output row y reads input row iy when y + ky - pad == iy
                    let y = iy + d.pad;
                    if y < ky || y - ky >= oh {
                        continue;
                    }
                    let y = y - ky;
                    let grow = &g[y * ow..(y + 1) * ow];
                    for kx in 0..d.k {
                        let wv = weight[((co * d.c_in + ci) * d.k + ky) * d.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = d.x_range(kx);
                        let dst = &mut dst_row[x0 + kx - d.pad..x1 + kx - d.pad];
                        for (o, &v) in dst.iter_mut().zip(&grow[x0..x1]) {
                            *o += wv * v;
                        }
                    }
                }
            }
        }
    });
    gin
}

pub(crate) fn backward_weight(d: ConvDims, grad_out: &[f64], input: &[f64]) -> Vec<f64> {
    if d.is_3x3_same() {
        return backward_weight3(d, grad_out, input);
    }
    let (oh, ow) = (d.out_h(), d.out_w());
    let per_out = d.c_in * d.k * d.k;
    let mut gw = vec![0.0; d.c_out * per_out];
    par::for_each_chunk_mut(&mut gw, per_out, |co, acc| {
        let g = &grad_out[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..d.c_in {
            let src = &input[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            let taps = &mut acc[ci * d.k * d.k..(ci + 1) * d.k * d.k];
            for y in 0..oh {
                let gg = &g[y * ow..(y + 1) * ow];
                for ky in 0..d.k {
                    let iy = y + ky;
                    if iy < d.pad || iy - d.pad >= d.h {
                        continue;
                    }
                    let row = &src[(iy - d.pad) * d.w..(iy - d.pad + 1) * d.w];
                    for kx in 0..d.k {
                        let (x0, x1) = d.x_range(kx);
                        let s = &row[x0 + kx - d.pad..x1 + kx - d.pad];
                        taps[ky * d.k + kx] += dot(&gg[x0..x1], s);
                    }
                }
            }
        }
    });
    gw
}

/// Dot product with four independent accumulators so it vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

pub(crate) fn backward_bias(d: ConvDims, grad_out: &[f64]) -> Vec<f64> {
    let plane = d.out_h() * d.out_w();
    (0..d.c_out)
        .map(|co| grad_out[co * plane..(co + 1) * plane].iter().sum())
        .collect()
}

// ---------------------------------------------------------------------------
// 3x3, pad 1: all nine taps of one input plane are applied per output row.

/// `dst[x] += Σ_ky Σ_kx w[ky][kx] * rows[ky][x + kx - 1]`, zero outside.
#[inline]
fn row9(dst: &mut [f64], rows: [Option<&[f64]>; 3], w: &[f64]) {
    let n = dst.len();
    if let [Some(r0), Some(r1), Some(r2)] = rows {
        for (ky, r) in [r0, r1, r2].into_iter().enumerate() {
            dst[0] += w[ky * 3 + 1] * r[0] + w[ky * 3 + 2] * r[1];
            dst[n - 1] += w[ky * 3] * r[n - 2] + w[ky * 3 + 1] * r[n - 1];
        }
        let inner = &mut dst[1..n - 1];
        let m = inner.len();
        let (a0, b0, c0) = (&r0[..m], &r0[1..m + 1], &r0[2..m + 2]);
        let (a1, b1, c1) = (&r1[..m], &r1[1..m + 1], &r1[2..m + 2]);
        let (a2, b2, c2) = (&r2[..m], &r2[1..m + 1], &r2[2..m + 2]);
        for i in 0..m {
            inner[i] += w[0] * a0[i] + w[1] * b0[i] + w[2] * c0[i]
                + w[3] * a1[i] + w[4] * b1[i] + w[5] * c1[i]
                + w[6] * a2[i] + w[7] * b2[i] + w[8] * c2[i];
        }
        return;
    }
    for (ky, row) in rows.iter().enumerate() {
        let Some(r) = row else { continue };
        let (w0, w1, w2) = (w[ky * 3], w[ky * 3 + 1], w[ky * 3 + 2]);
        dst[0] += w1 * r[0] + w2 * r[1];
        dst[n - 1] += w0 * r[n - 2] + w1 * r[n - 1];
        let inner = &mut dst[1..n - 1];
        let (a, b, c) = (&r[..n - 2], &r[1..n - 1], &r[2..]);
        for i in 0..inner.len() {
            inner[i] += w0 * a[i] + w1 * b[i] + w2 * c[i];
        }
    }
}

fn three_rows(plane: &[f64], y: usize, h: usize, w: usize) -> [Option<&[f64]>; 3] {
    let row = |r: usize| &plane[r * w..(r + 1) * w];
    [
        (y > 0).then(|| row(y - 1)),
        Some(row(y)),
        (y + 1 < h).then(|| row(y + 1)),
    ]
}

fn forward3(d: ConvDims, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (h, w) = (d.h, d.w);
    let plane = h * w;
    let mut out = vec![0.0; d.c_out * plane];
    par::for_each_chunk_mut(&mut out, plane, |co, acc| {
        if let Some(b) = bias {
            acc.iter_mut().for_each(|v| *v = b[co]);
        }
        for y in 0..h {
            let dst = &mut acc[y * w..(y + 1) * w];
            for ci in 0..d.c_in {
                let src = &input[ci * plane..(ci + 1) * plane];
                let wk = &weight[(co * d.c_in + ci) * 9..(co * d.c_in + ci + 1) * 9];
                row9(dst, three_rows(src, y, h, w), wk);
            }
        }
    });
    out
}

fn backward_input3(d: ConvDims, grad_out: &[f64], weight: &[f64]) -> Vec<f64> {
    let (h, w) = (d.h, d.w);
    let plane = h * w;
    let mut gin = vec![0.0; d.c_in * plane];
    par::for_each_chunk_mut(&mut gin, plane, |ci, acc| {
        let mut flipped = [0.0; 9];
        for y in 0..h {
            let dst = &mut acc[y * w..(y + 1) * w];
            for co in 0..d.c_out {
                let g = &grad_out[co * plane..(co + 1) * plane];
                let wk = &weight[(co * d.c_in + ci) * 9..(co * d.c_in + ci + 1) * 9];
                for (j, f) in flipped.iter_mut().enumerate() {
                    *f = wk[8 - j];
                }
                row9(dst, three_rows(g, y, h, w), &flipped);
            }
        }
    });
    gin
}

fn backward_weight3(d: ConvDims, grad_out: &[f64], input: &[f64]) -> Vec<f64> {
    let (h, w) = (d.h, d.w);
    let plane = h * w;
    let mut gw = vec![0.0; d.c_out * d.c_in * 9];
    par::for_each_chunk_mut(&mut gw, d.c_in * 9, |co, acc| {
        let g = &grad_out[co * plane..(co + 1) * plane];
        for ci in 0..d.c_in {
            let src = &input[ci * plane..(ci + 1) * plane];
            let mut taps = [0.0; 9];
            for y in 0..h {
                let gg = &g[y * w..(y + 1) * w];
                for (ky, row) in three_rows(src, y, h, w).iter().enumerate() {
                    let Some(r) = row else { continue };
                    // kx = 0 reads r[x - 1], kx = 2 reads r[x + 1]
                    taps[ky * 3] += dot(&gg[1..], &r[..w - 1]);
                    taps[ky * 3 + 1] += dot(gg, r);
                    taps[ky * 3 + 2] += dot(&gg[..w - 1], &r[1..]);
                }
            }
            acc[ci * 9..(ci + 1) * 9].copy_from_slice(&taps);
        }
    });
    gw
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(d: ConvDims, input: &[f64], weight: &[f64]) -> Vec<f64> {
        let (oh, ow) = (d.out_h(), d.out_w());
        let mut out = vec![0.0; d.c_out * oh * ow];
        for co in 0..d.c_out {
            for y in 0..oh {
                for x in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..d.c_in {
                        for ky in 0..d.k {
                            for kx in 0..d.k {
                                let iy = y as isize + ky as isize - d.pad as isize;
                                let ix = x as isize + kx as isize - d.pad as isize;
                                if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                    continue;
                                }
                                s += weight[((co * d.c_in + ci) * d.k + ky) * d.k + kx]
                                    * input[(ci * d.h + iy as usize) * d.w + ix as usize];
                            }
                        }
                    }
                    out[(co * oh + y) * ow + x] = s;
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_loops() {
        for &(k, pad, w) in &[(3, 1, 5), (3, 1, 2), (3, 0, 5), (1, 0, 5), (5, 2, 5)] {
            let d = ConvDims { c_in: 2, c_out: 3, h: 6, w, k, pad };
            let input: Vec<f64> = (0..d.c_in * d.h * d.w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let weight: Vec<f64> = (0..d.c_out * d.c_in * k * k).map(|i| ((i * 3) % 5) as f64 * 0.25 - 0.5).collect();
            let fast = forward(d, &input, &weight, None);
            let slow = naive(d, &input, &weight);
            assert!(fast.iter().zip(&slow).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn backward_kernels_are_adjoint() {
        for &(k, pad, w) in &[(3, 1, 7), (3, 1, 2), (3, 0, 7), (1, 0, 7), (5, 2, 7)] {
            let d = ConvDims { c_in: 2, c_out: 3, h: 6, w, k, pad };
            let x: Vec<f64> = (0..d.c_in * d.h * d.w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let wt: Vec<f64> = (0..d.c_out * d.c_in * k * k).map(|i| ((i * 3) % 5) as f64 * 0.25 - 0.5).collect();
            let g: Vec<f64> = (0..d.c_out * d.out_h() * d.out_w()).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
            let y = naive(d, &x, &wt);
            let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
            let gx = backward_input(d, &g, &wt);
            let gw = backward_weight(d, &g, &x);
            let via_x: f64 = gx.iter().zip(&x).map(|(a, b)| a * b).sum();
            let via_w: f64 = gw.iter().zip(&wt).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-9, "{lhs} {via_x}");
            assert!((lhs - via_w).abs() < 1e-9, "{lhs} {via_w}");
        }
    }
}
