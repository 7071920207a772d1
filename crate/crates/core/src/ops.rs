//! Channel-first (`[channels, height, width]`) linear image kernels shared by
//! the observation model and the autograd graph, each with its adjoint.

use crate::autograd::Scalar;

/// Catmull-Rom cubic convolution kernel (a = -0.5).
fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Four-tap bicubic interpolation along one axis, half-pixel aligned,
/// edge-replicated.
#[derive(Debug, Clone)]
pub(crate) struct CubicAxis {
    taps: Vec<[(usize, f64); 4]>,
}

impl CubicAxis {
    pub(crate) fn new(input_len: usize, factor: usize) -> Self {
        let out_len = input_len * factor;
        let last = input_len as isize - 1;
        let taps = (0..out_len)
            .map(|o| {
                let src = (o as f64 + 0.5) / factor as f64 - 0.5;
                let base = src.floor();
                let frac = src - base;
                let base = base as isize;
                let mut t = [(0usize, 0.0f64); 4];
                for (j, slot) in t.iter_mut().enumerate() {
                    let offset = j as isize - 1;
                    let idx = (base + offset).clamp(0, last) as usize;
                    *slot = (idx, cubic_weight(frac - offset as f64));
                }
                t
            })
            .collect();
        Self { taps }
    }

    fn out_len(&self) -> usize {
        self.taps.len()
    }
}

/// Bicubic upsampling of a `[c, h, w]` buffer by `factor`.
pub(crate) fn upsample<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, factor: usize) -> Vec<T> {
    let rows = CubicAxis::new(h, factor);
    let cols = CubicAxis::new(w, factor);
    let (ho, wo) = (rows.out_len(), cols.out_len());
    let mut tmp = vec![T::zero(); c * h * wo];
    for ch in 0..c {
        for r in 0..h {
            let src = &x[(ch * h + r) * w..(ch * h + r + 1) * w];
            let dst = &mut tmp[(ch * h + r) * wo..(ch * h + r + 1) * wo];
            for (d, taps) in dst.iter_mut().zip(&cols.taps) {
                let mut acc = T::zero();
                for &(i, wt) in taps {
                    acc = acc + T::c(wt) * src[i];
                }
                *d = acc;
            }
        }
    }
    let mut out = vec![T::zero(); c * ho * wo];
    for ch in 0..c {
        for (ro, taps) in rows.taps.iter().enumerate() {
            let dst_off = (ch * ho + ro) * wo;
            for &(i, wt) in taps {
                let wt = T::c(wt);
                let src_off = (ch * h + i) * wo;
                for col in 0..wo {
                    out[dst_off + col] = out[dst_off + col] + wt * tmp[src_off + col];
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample`]: maps a `[c, h*factor, w*factor]` gradient back to `[c, h, w]`.
pub(crate) fn upsample_adjoint<T: Scalar>(
    g: &[T],
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<T> {
    let rows = CubicAxis::new(h, factor);
    let cols = CubicAxis::new(w, factor);
    let (ho, wo) = (rows.out_len(), cols.out_len());
    let mut tmp = vec![T::zero(); c * h * wo];
    for ch in 0..c {
        for (ro, taps) in rows.taps.iter().enumerate() {
            let src_off = (ch * ho + ro) * wo;
            for &(i, wt) in taps {
                let wt = T::c(wt);
                let dst_off = (ch * h + i) * wo;
                for col in 0..wo {
                    tmp[dst_off + col] = tmp[dst_off + col] + wt * g[src_off + col];
                }
            }
        }
    }
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for r in 0..h {
            let src = &tmp[(ch * h + r) * wo..(ch * h + r + 1) * wo];
            let dst = &mut out[(ch * h + r) * w..(ch * h + r + 1) * w];
            for (gv, taps) in src.iter().zip(&cols.taps) {
                for &(i, wt) in taps {
                    dst[i] = dst[i] + T::c(wt) * *gv;
                }
            }
        }
    }
    out
}

/// Block-mean downsampling of `[c, h, w]` by `factor` (dims must divide).
pub(crate) fn downsample<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, factor: usize) -> Vec<T> {
    let (ho, wo) = (h / factor, w / factor);
    let norm = T::c(1.0 / (factor * factor) as f64);
    let mut out = vec![T::zero(); c * ho * wo];
    for ch in 0..c {
        for r in 0..h {
            let ro = r / factor;
            let src = &x[(ch * h + r) * w..(ch * h + r + 1) * w];
            let dst = &mut out[(ch * ho + ro) * wo..(ch * ho + ro + 1) * wo];
            for (col, v) in src.iter().enumerate() {
                dst[col / factor] = dst[col / factor] + *v;
            }
        }
    }
    out.iter_mut().for_each(|v| *v = *v * norm);
    out
}

pub(crate) fn downsample_adjoint<T: Scalar>(
    g: &[T],
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<T> {
    let (ho, wo) = (h / factor, w / factor);
    let norm = T::c(1.0 / (factor * factor) as f64);
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for r in 0..h {
            let ro = r / factor;
            for col in 0..w {
                out[(ch * h + r) * w + col] = g[(ch * ho + ro) * wo + col / factor] * norm;
            }
        }
    }
    out
}

pub(crate) const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub(crate) const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

#[inline]
fn clamp_idx(i: usize, d: usize, n: usize) -> usize {
    (i + d).saturating_sub(1).min(n - 1)
}

/// 3x3 correlation with replicate padding, per channel.
pub(crate) fn filter3_replicate<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kernel: &[[f64; 3]; 3],
) -> Vec<T> {
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for r in 0..h {
            for col in 0..w {
                let mut acc = T::zero();
                for (dy, krow) in kernel.iter().enumerate() {
                    let rr = clamp_idx(r, dy, h);
                    for (dx, &k) in krow.iter().enumerate() {
                        if k != 0.0 {
                            acc = acc + T::c(k) * src[rr * w + clamp_idx(col, dx, w)];
                        }
                    }
                }
                out[ch * h * w + r * w + col] = acc;
            }
        }
    }
    out
}

pub(crate) fn filter3_replicate_adjoint<T: Scalar>(
    g: &[T],
    c: usize,
    h: usize,
    w: usize,
    kernel: &[[f64; 3]; 3],
) -> Vec<T> {
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for r in 0..h {
            for col in 0..w {
                let gv = g[base + r * w + col];
                for (dy, krow) in kernel.iter().enumerate() {
                    let rr = clamp_idx(r, dy, h);
                    for (dx, &k) in krow.iter().enumerate() {
                        if k != 0.0 {
                            let idx = base + rr * w + clamp_idx(col, dx, w);
                            out[idx] = out[idx] + T::c(k) * gv;
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>() - 0.5).collect()
    }

    #[test]
    fn cubic_weights_partition_unity() {
        for f in [2usize, 3, 4] {
            let axis = CubicAxis::new(7, f);
            for t in &axis.taps {
                let s: f64 = t.iter().map(|p| p.1).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    // <A x, y> == <x, A^T y> for every linear kernel.
    #[test]
    fn adjoints_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c, h, w, s) = (2, 4, 6, 2);
        let x = rand_vec(c * h * w, &mut rng);
        let y = rand_vec(c * h * w * s * s, &mut rng);
        let lhs = dot(&upsample(&x, c, h, w, s), &y);
        let rhs = dot(&x, &upsample_adjoint(&y, c, h, w, s));
        assert!((lhs - rhs).abs() < 1e-10);

        let xh = rand_vec(c * h * s * w * s, &mut rng);
        let yl = rand_vec(c * h * w, &mut rng);
        let lhs = dot(&downsample(&xh, c, h * s, w * s, s), &yl);
        let rhs = dot(&xh, &downsample_adjoint(&yl, c, h * s, w * s, s));
        assert!((lhs - rhs).abs() < 1e-10);

        for k in [&SOBEL_X, &SOBEL_Y] {
            let yy = rand_vec(c * h * w, &mut rng);
            let lhs = dot(&filter3_replicate(&x, c, h, w, k), &yy);
            let rhs = dot(&x, &filter3_replicate_adjoint(&yy, c, h, w, k));
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
