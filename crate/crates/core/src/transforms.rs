//! Image-space transforms used by attacks and training-time augmentation.
//!
//! All functions work on `[N, C, H, W]` batches.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

fn dims(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::invalid(format!("expected an NCHW batch, got {:?}", x.shape()))),
    }
}

/// A linear pixel remapping: output pixel `i` copies input pixel `map[i]`,
/// or is `fill` when `None`. Applied identically to every image and channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Resample {
    pub h: usize,
    pub w: usize,
    pub map: Vec<Option<usize>>,
    pub fill: f64,
}

impl Resample {
    pub fn identity(h: usize, w: usize) -> Self {
        Resample {
            h,
            w,
            map: (0..h * w).map(Some).collect(),
            fill: 0.0,
        }
    }

    /// Nearest-neighbour resize to `size x size`, placed at `(top, left)`
    /// inside an `h x w` canvas filled with `fill`.
    pub fn resize_pad(h: usize, w: usize, size: usize, top: usize, left: usize, fill: f64) -> Self {
        let mut map = vec![None; h * w];
        for i in 0..size.min(h - top) {
            let si = (i * h) / size;
            for j in 0..size.min(w - left) {
                let sj = (j * w) / size;
                map[(top + i) * w + left + j] = Some(si * w + sj);
            }
        }
        Resample { h, w, map, fill }
    }

    /// Random resize to a side in `[lo * h, h]` then random padding back to
    /// `h x w`.
    pub fn random_resize_pad(h: usize, w: usize, lo: f64, rng: &mut Rng) -> Self {
        let min = ((lo * h as f64).floor() as usize).clamp(1, h);
        let size = rng.random_range(min..=h);
        let top = rng.random_range(0..=h - size);
        let left = rng.random_range(0..=w - size);
        Self::resize_pad(h, w, size, top, left, 0.0)
    }

    /// Integer translation with edge replication.
    pub fn shift(h: usize, w: usize, dy: isize, dx: isize) -> Self {
        let mut map = Vec::with_capacity(h * w);
        for i in 0..h as isize {
            let si = (i - dy).clamp(0, h as isize - 1) as usize;
            for j in 0..w as isize {
                let sj = (j - dx).clamp(0, w as isize - 1) as usize;
                map.push(Some(si * w + sj));
            }
        }
        Resample { h, w, map, fill: 0.0 }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = dims(x)?;
        if (h, w) != (self.h, self.w) {
            return Err(Error::invalid("resample geometry does not match the batch"));
        }
        let plane = h * w;
        let mut out = Tensor::zeros(x.shape());
        for (src, dst) in x.data().chunks(plane).zip(out.data_mut().chunks_mut(plane)) {
            for (d, m) in dst.iter_mut().zip(&self.map) {
                *d = m.map_or(self.fill, |s| src[s]);
            }
        }
        Ok(out)
    }

    /// Transpose of [`apply`](Self::apply) (ignoring the constant fill).
    pub fn adjoint(&self, g: &Tensor) -> Result<Tensor> {
        let plane = self.h * self.w;
        let mut out = Tensor::zeros(g.shape());
        for (src, dst) in g.data().chunks(plane).zip(out.data_mut().chunks_mut(plane)) {
            for (v, m) in src.iter().zip(&self.map) {
                if let Some(s) = m {
                    dst[*s] += v;
                }
            }
        }
        Ok(out)
    }
}

/// Square tent kernel `k x k` (odd `k`), normalized to sum 1.
pub fn tent_kernel(k: usize) -> Result<Vec<f64>> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::invalid(format!("kernel size must be odd, got {k}")));
    }
    let r = (k / 2) as f64;
    let line: Vec<f64> = (0..k).map(|i| r + 1.0 - (i as f64 - r).abs()).collect();
    let mut kern: Vec<f64> = line.iter().flat_map(|a| line.iter().map(move |b| a * b)).collect();
    let s: f64 = kern.iter().sum();
    kern.iter_mut().for_each(|v| *v /= s);
    Ok(kern)
}

/// Same-size per-channel convolution with a `k x k` kernel, zero padded.
pub fn smooth(x: &Tensor, kernel: &[f64], k: usize) -> Result<Tensor> {
    let (_, _, h, w) = dims(x)?;
    if kernel.len() != k * k {
        return Err(Error::invalid("kernel length does not match its size"));
    }
    if k == 1 {
        return Ok(x.map(|v| v * kernel[0]));
    }
    let r = (k / 2) as isize;
    let plane = h * w;
    let mut out = Tensor::zeros(x.shape());
    for (src, dst) in x.data().chunks(plane).zip(out.data_mut().chunks_mut(plane)) {
        for i in 0..h as isize {
            for j in 0..w as isize {
                let mut acc = 0.0;
                for a in 0..k as isize {
                    let si = i + a - r;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for b in 0..k as isize {
                        let sj = j + b - r;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        acc += kernel[(a * k as isize + b) as usize] * src[si as usize * w + sj as usize];
                    }
                }
                dst[i as usize * w + j as usize] = acc;
            }
        }
    }
    Ok(out)
}

/// 3x3 box blur with edge replication.
pub fn box_blur(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = dims(x)?;
    let plane = h * w;
    let mut out = Tensor::zeros(x.shape());
    for (src, dst) in x.data().chunks(plane).zip(out.data_mut().chunks_mut(plane)) {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for di in [-1isize, 0, 1] {
                    let si = (i as isize + di).clamp(0, h as isize - 1) as usize;
                    for dj in [-1isize, 0, 1] {
                        let sj = (j as isize + dj).clamp(0, w as isize - 1) as usize;
                        acc += src[si * w + sj];
                    }
                }
                dst[i * w + j] = acc / 9.0;
            }
        }
    }
    Ok(out)
}

/// Pastes a random rectangle of image `perm[i]` into image `i`. Returns the
/// mixed batch and, per row, the fraction of pixels taken from the partner.
pub fn patch_mix(x: &Tensor, perm: &[usize], rng: &mut Rng) -> Result<(Tensor, Vec<f64>)> {
    let (n, c, h, w) = dims(x)?;
    if perm.len() != n {
        return Err(Error::invalid("permutation length differs from the batch"));
    }
    let img = c * h * w;
    let mut out = x.clone();
    let mut lam = Vec::with_capacity(n);
    for (i, &p) in perm.iter().enumerate() {
        let ph = rng.random_range(h / 4..=h / 2).max(1);
        let pw = rng.random_range(w / 4..=w / 2).max(1);
        let top = rng.random_range(0..=h - ph);
        let left = rng.random_range(0..=w - pw);
        for ch in 0..c {
            for r in top..top + ph {
                let row = ch * h * w + r * w;
                let (a, b) = (row + left, row + left + pw);
                let src = x.data()[p * img + a..p * img + b].to_vec();
                out.data_mut()[i * img + a..i * img + b].copy_from_slice(&src);
            }
        }
        lam.push(if p == i { 0.0 } else { (ph * pw) as f64 / (h * w) as f64 });
    }
    Ok((out, lam))
}

/// Translates row `i` by `shifts[i]` with edge replication.
pub fn shift_rows(x: &Tensor, shifts: &[(isize, isize)]) -> Result<Tensor> {
    let (n, _, h, w) = dims(x)?;
    if shifts.len() != n {
        return Err(Error::invalid("one shift per row is required"));
    }
    let plane = h * w;
    let mut out = x.clone();
    for (i, &(dy, dx)) in shifts.iter().enumerate() {
        if (dy, dx) == (0, 0) {
            continue;
        }
        let r = Resample::shift(h, w, dy, dx);
        let src = x.row(i);
        for (s, d) in src.chunks(plane).zip(out.row_mut(i).chunks_mut(plane)) {
            for (v, m) in d.iter_mut().zip(&r.map) {
                *v = m.map_or(r.fill, |k| s[k]);
            }
        }
    }
    Ok(out)
}

/// Uniform shifts in `[-max, max]^2`.
pub fn random_shifts(n: usize, max: usize, rng: &mut Rng) -> Vec<(isize, isize)> {
    let m = max as i64;
    (0..n)
        .map(|_| (rng.random_range(-m..=m) as isize, rng.random_range(-m..=m) as isize))
        .collect()
}

/// Projects `x` onto the l-inf ball of radius `eps` around `center`, then
/// clips to `[0, 1]`.
pub fn project_linf(x: &mut Tensor, center: &Tensor, eps: f64) {
    for (v, &c) in x.data_mut().iter_mut().zip(center.data()) {
        *v = v.clamp(c - eps, c + eps).clamp(0.0, 1.0);
    }
}

/// Projects every row of `x` onto the l2 ball of radius `eps` around the
/// matching row of `center`, then clips to `[0, 1]`.
pub fn project_l2(x: &mut Tensor, center: &Tensor, eps: f64) {
    for i in 0..x.rows() {
        let c = center.row(i);
        let row = x.row_mut(i);
        let norm = row.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if norm > eps {
            let s = eps / norm;
            for (a, b) in row.iter_mut().zip(c) {
                *a = b + (*a - b) * s;
            }
        }
        for a in row.iter_mut() {
            *a = a.clamp(0.0, 1.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn ramp(n: usize, c: usize, h: usize, w: usize) -> Tensor {
        let len = n * c * h * w;
        Tensor::new(vec![n, c, h, w], (0..len).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn tent_kernel_values() {
        let k = tent_kernel(5).unwrap();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        // 1D profile [1,2,3,2,1] / 9, so the centre is 9/81.
        assert!((k[12] - 9.0 / 81.0).abs() < 1e-15);
        assert!((k[0] - 1.0 / 81.0).abs() < 1e-15);
        assert!(tent_kernel(4).is_err());
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = ramp(2, 1, 6, 6);
        let k = tent_kernel(1).unwrap();
        assert_eq!(smooth(&x, &k, 1).unwrap(), x);
    }

    #[test]
    fn smooth_is_self_adjoint_for_symmetric_kernels() {
        let x = ramp(1, 2, 7, 7);
        let y = ramp(1, 2, 7, 7).map(|v| v * v - 0.2);
        let k = tent_kernel(5).unwrap();
        let lhs: f64 = smooth(&x, &k, 5).unwrap().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(smooth(&y, &k, 5).unwrap().data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn full_size_resize_is_identity() {
        let x = ramp(2, 1, 8, 8);
        let r = Resample::resize_pad(8, 8, 8, 0, 0, 0.0);
        assert_eq!(r, Resample::identity(8, 8));
        assert_eq!(r.apply(&x).unwrap(), x);
    }

    #[test]
    fn shift_moves_pixels() {
        let x = ramp(1, 1, 4, 4);
        let y = Resample::shift(4, 4, 1, 0).apply(&x).unwrap();
        assert_eq!(y.data()[4..8], x.data()[0..4]);
        assert_eq!(y.data()[0..4], x.data()[0..4]);
    }

    #[test]
    fn patch_mix_with_identity_permutation_is_noop() {
        let x = ramp(3, 1, 8, 8);
        let (y, lam) = patch_mix(&x, &[0, 1, 2], &mut rng::rng(0)).unwrap();
        assert_eq!(y, x);
        assert_eq!(lam, vec![0.0; 3]);
    }

    #[test]
    fn box_blur_keeps_constants() {
        let x = Tensor::full(&[1, 1, 5, 5], 0.4);
        assert!(box_blur(&x).unwrap().max_abs_diff(&x) < 1e-15);
    }

    proptest! {
        #[test]
        fn resample_adjoint(seed in any::<u64>()) {
            let mut r = rng::rng(seed);
            let t = Resample::random_resize_pad(9, 9, 0.6, &mut r);
            let x = ramp(2, 2, 9, 9);
            let g = ramp(2, 2, 9, 9).map(|v| v.cos());
            let lhs: f64 = t.apply(&x).unwrap().data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(t.adjoint(&g).unwrap().data()).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn projections_are_feasible(seed in any::<u64>(), eps in 0.0f64..0.5) {
            let mut r = rng::rng(seed);
            let c = Tensor::new(vec![3, 1, 4, 4], (0..48).map(|_| r.random::<f64>()).collect()).unwrap();
            let mut x = Tensor::new(vec![3, 1, 4, 4], (0..48).map(|_| r.random::<f64>() * 2.0 - 0.5).collect()).unwrap();
            let mut y = x.clone();
            project_linf(&mut x, &c, eps);
            prop_assert!(x.max_abs_diff(&c) <= eps + 1e-12);
            prop_assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
            project_l2(&mut y, &c, eps);
            for i in 0..3 {
                let n: f64 = y.row(i).iter().zip(c.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                prop_assert!(n <= eps + 1e-12);
            }
        }
    }
}
