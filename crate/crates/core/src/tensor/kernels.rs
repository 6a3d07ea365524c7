//! Slice-level numeric kernels shared by the tape's forward and backward rules.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::Scalar;

/// `out += a · b` with `a: [m×k]`, `b: [k×n]`.
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` with `a: [m×k]`, `b: [n×k]`.
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s = s + x * y;
            }
            out[i * n + j] = out[i * n + j] + s;
        }
    }
}

/// `out += aᵀ · b` with `a: [k×m]`, `b: [k×n]`.
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Geometry of a same-padded, stride-1 convolution over `[batch, h, w, c_in]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_out: usize,
}

impl ConvGeom {
    fn taps(&self) -> impl Iterator<Item = (usize, usize, usize, usize, usize, usize)> + '_ {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        (0..self.batch).flat_map(move |b| {
            (0..self.h).flat_map(move |y| {
                (0..self.w).flat_map(move |x| {
                    (0..self.kh).flat_map(move |ky| {
                        (0..self.kw).filter_map(move |kx| {
                            let iy = (y + ky).checked_sub(ph)?;
                            let ix = (x + kx).checked_sub(pw)?;
                            (iy < self.h && ix < self.w).then_some((b, y, x, ky, kx, iy * self.w + ix))
                        })
                    })
                })
            })
        })
    }
}

pub fn conv2d_forward<T: Scalar>(x: &[T], k: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.h * g.w * g.c_out];
    let plane = g.h * g.w;
    for (b, y, xx, ky, kx, src) in g.taps() {
        let xin = &x[(b * plane + src) * g.c_in..(b * plane + src + 1) * g.c_in];
        let o = (b * plane + y * g.w + xx) * g.c_out;
        let orow = &mut out[o..o + g.c_out];
        for (ci, &xv) in xin.iter().enumerate() {
            if xv == T::zero() {
                continue;
            }
            let kbase = ((ky * g.kw + kx) * g.c_in + ci) * g.c_out;
            for (ov, &kv) in orow.iter_mut().zip(&k[kbase..kbase + g.c_out]) {
                *ov = *ov + xv * kv;
            }
        }
    }
    out
}

/// Gradients of a same-padded convolution with respect to input and kernel.
pub fn conv2d_backward<T: Scalar>(x: &[T], k: &[T], grad: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); k.len()];
    let plane = g.h * g.w;
    for (b, y, xx, ky, kx, src) in g.taps() {
        let o = (b * plane + y * g.w + xx) * g.c_out;
        let gout = &grad[o..o + g.c_out];
        let xi = (b * plane + src) * g.c_in;
        for ci in 0..g.c_in {
            let kbase = ((ky * g.kw + kx) * g.c_in + ci) * g.c_out;
            let krow = &k[kbase..kbase + g.c_out];
            let xv = x[xi + ci];
            let mut acc = T::zero();
            for ((&gv, &kv), dkv) in gout.iter().zip(krow).zip(dk[kbase..kbase + g.c_out].iter_mut()) {
                acc = acc + gv * kv;
                *dkv = *dkv + gv * xv;
            }
            dx[xi + ci] = dx[xi + ci] + acc;
        }
    }
    (dx, dk)
}

/// Circular convolution of two equal-length real sequences via the discrete Fourier transform.
pub fn circular_convolve<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    spectral_product(a, b, false)
}

/// Circular cross-correlation `out[i] = Σ_k a[k]·b[(k − i) mod d]`.
///
/// This is the adjoint of [`circular_convolve`] with respect to its first argument.
pub fn circular_correlate<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    spectral_product(a, b, true)
}

fn spectral_product<T: Scalar>(a: &[T], b: &[T], conjugate_b: bool) -> Vec<T> {
    let d = a.len();
    debug_assert_eq!(d, b.len());
    let mut planner = FftPlanner::<T>::new();
    let fwd = planner.plan_fft_forward(d);
    let inv = planner.plan_fft_inverse(d);
    let mut fa: Vec<Complex<T>> = a.iter().map(|&v| Complex::new(v, T::zero())).collect();
    let mut fb: Vec<Complex<T>> = b.iter().map(|&v| Complex::new(v, T::zero())).collect();
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x = if conjugate_b { *x * y.conj() } else { *x * *y };
    }
    inv.process(&mut fa);
    let scale = T::one() / T::of(d as f64);
    fa.into_iter().map(|c| c.re * scale).collect()
}

/// Row-wise numerically stabilised softmax over the last axis of width `n`.
pub fn softmax_rows<T: Scalar>(x: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(n) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut z = T::zero();
        for &v in row {
            let e = (v - m).exp();
            z = z + e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e = *e / z);
    }
    out
}

/// Row-wise log-softmax over the last axis of width `n`.
pub fn log_softmax_rows<T: Scalar>(x: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(n) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn gemm_variants_match_naive_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (m, k, n) = (3, 4, 5);
        let a = random(&mut rng, m * k);
        let b = random(&mut rng, k * n);
        let naive: Vec<f64> = (0..m * n).map(|ij| (0..k).map(|p| a[ij / n * k + p] * b[p * n + ij % n]).sum()).collect();
        let mut out = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut out, m, k, n);
        let close = |x: &[f64]| x.iter().zip(&naive).all(|(p, q)| (p - q).abs() < 1e-12);
        assert!(close(&out));
        let bt: Vec<f64> = (0..n * k).map(|jp| b[jp % k * n + jp / k]).collect();
        let mut out = vec![0.0; m * n];
        gemm_nt(&a, &bt, &mut out, m, k, n);
        assert!(close(&out));
        let at: Vec<f64> = (0..k * m).map(|pi| a[pi % m * k + pi / m]).collect();
        let mut out = vec![0.0; m * n];
        gemm_tn(&at, &b, &mut out, m, k, n);
        assert!(close(&out));
    }

    #[test]
    fn gemm_accumulates_into_output() {
        let mut out = vec![1.0, 2.0];
        gemm_nn(&[2.0], &[3.0, 4.0], &mut out, 1, 1, 2);
        assert_eq!(out, vec![7.0, 10.0]);
    }

    #[test]
    fn fft_convolution_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for d in [2, 4, 8, 16, 64] {
            let a = random(&mut rng, d);
            let b = random(&mut rng, d);
            let conv = circular_convolve(&a, &b);
            let corr = circular_correlate(&a, &b);
            for i in 0..d {
                let direct: f64 = (0..d).map(|k| a[k] * b[(i + d - k) % d]).sum();
                let cross: f64 = (0..d).map(|k| a[k] * b[(k + d - i) % d]).sum();
                assert!((conv[i] - direct).abs() < 1e-6);
                assert!((corr[i] - cross).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn convolution_with_unit_impulse_is_identity() {
        let a = vec![0.5f32, -1.0, 2.0, 0.25];
        let conv = circular_convolve(&a, &[1.0, 0.0, 0.0, 0.0]);
        assert!(conv.iter().zip(&a).all(|(x, y)| (x - y).abs() < 1e-5));
    }

    #[test]
    fn conv_with_centred_delta_kernel_copies_input() {
        let g = ConvGeom { batch: 1, h: 3, w: 2, c_in: 2, kh: 3, kw: 3, c_out: 2 };
        let x: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let mut k = vec![0.0; 3 * 3 * 2 * 2];
        for c in 0..2 {
            k[((1 * 3 + 1) * 2 + c) * 2 + c] = 1.0;
        }
        assert_eq!(conv2d_forward(&x, &k, &g), x);
    }

    #[test]
    fn softmax_and_log_softmax_agree() {
        let x: Vec<f64> = vec![1000.0, 1001.0, -5.0, 0.0, 0.0, 0.0];
        let p: Vec<f64> = softmax_rows(&x, 3);
        let lp: Vec<f64> = log_softmax_rows(&x, 3);
        for (a, b) in p.iter().zip(&lp) {
            assert!((a.ln().max(-700.0) - b.max(-700.0)).abs() < 1e-9);
        }
        assert!((p[3] - 1.0 / 3.0).abs() < 1e-15);
    }
}
