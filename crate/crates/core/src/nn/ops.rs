//! Dense kernels with explicit backward passes. Activations are row-major
//! `rows × features` buffers; spatial tensors are `N × N × C` flattened to
//! `N² × C`.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::real::{gemm, MatMut, MatRef};
use crate::Real;

/// `y = x W (+ b)` for `x: rows × fin`, `W: fin × fout`.
pub fn linear<T: Real>(x: &[T], rows: usize, fin: usize, w: &[T], b: Option<&[T]>, fout: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * fout];
    if let Some(b) = b {
        for row in y.chunks_exact_mut(fout) {
            row.copy_from_slice(&b[..fout]);
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    gemm(
        T::one(),
        MatRef::new(x, rows, fin),
        MatRef::new(w, fin, fout),
        beta,
        MatMut::new(&mut y, rows, fout),
    );
    y
}

/// Accumulates `dW += xᵀ dy`, `db += Σ dy`, `dx += dy Wᵀ` for whichever
/// outputs are requested.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    x: &[T],
    rows: usize,
    fin: usize,
    w: &[T],
    dy: &[T],
    fout: usize,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    dx: Option<&mut [T]>,
) {
    if let Some(dw) = dw {
        gemm(
            T::one(),
            MatRef::new(x, rows, fin).t(),
            MatRef::new(dy, rows, fout),
            T::one(),
            MatMut::new(dw, fin, fout),
        );
    }
    if let Some(db) = db {
        for row in dy.chunks_exact(fout) {
            for (g, v) in db.iter_mut().zip(row) {
                *g += *v;
            }
        }
    }
    if let Some(dx) = dx {
        gemm(
            T::one(),
            MatRef::new(dy, rows, fout),
            MatRef::new(w, fin, fout).t(),
            T::one(),
            MatMut::new(dx, rows, fin),
        );
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Parameter-free layer norm over the feature axis. Returns the normalized
/// output and the per-row reciprocal standard deviation.
pub fn layer_norm<T: Real>(x: &[T], rows: usize, d: usize) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); rows * d];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = T::one() / T::lit(d as f64);
    let eps = T::lit(LN_EPS);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let s = T::one() / (var + eps).sqrt();
        rstd[r] = s;
        for (o, &v) in y[r * d..(r + 1) * d].iter_mut().zip(xr) {
            *o = (v - mean) * s;
        }
    }
    (y, rstd)
}

/// Accumulates the layer-norm input gradient into `dx`.
pub fn layer_norm_backward<T: Real>(dy: &[T], y: &[T], rstd: &[T], rows: usize, d: usize, dx: &mut [T]) {
    let inv_d = T::one() / T::lit(d as f64);
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let yr = &y[r * d..(r + 1) * d];
        let mean_dy = dyr.iter().copied().sum::<T>() * inv_d;
        let mean_dyy = dyr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
        for ((o, &g), &yv) in dx[r * d..(r + 1) * d].iter_mut().zip(dyr).zip(yr) {
            *o += rstd[r] * (g - mean_dy - yv * mean_dyy);
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// `dx += dy ⊙ silu'(x)`.
pub fn silu_backward<T: Real>(x: &[T], dy: &[T], dx: &mut [T]) {
    for ((o, &g), &v) in dx.iter_mut().zip(dy).zip(x) {
        let s = sigmoid(v);
        *o += g * s * (T::one() + v * (T::one() - s));
    }
}

/// Row-wise softmax in place.
pub fn softmax_rows<T: Real>(x: &mut [T], cols: usize) {
    for row in x.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// 3×3 same-padding patches of an `n × n × c` map: `n² × 9c`, patch order
/// `(dy, dx, channel)`.
pub fn im2col3<T: Real>(x: &[T], n: usize, c: usize) -> Vec<T> {
    let k = 9 * c;
    let mut col = vec![T::zero(); n * n * k];
    for y in 0..n {
        for x0 in 0..n {
            let dst = &mut col[(y * n + x0) * k..(y * n + x0 + 1) * k];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= n as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = x0 as isize + kx as isize - 1;
                    if sx < 0 || sx >= n as isize {
                        continue;
                    }
                    let src = (sy as usize * n + sx as usize) * c;
                    let off = (ky * 3 + kx) * c;
                    dst[off..off + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col3`]: scatters patch gradients back, accumulating into `dx`.
pub fn col2im3<T: Real>(dcol: &[T], n: usize, c: usize, dx: &mut [T]) {
    let k = 9 * c;
    for y in 0..n {
        for x0 in 0..n {
            let src = &dcol[(y * n + x0) * k..(y * n + x0 + 1) * k];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= n as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = x0 as isize + kx as isize - 1;
                    if sx < 0 || sx >= n as isize {
                        continue;
                    }
                    let dst = (sy as usize * n + sx as usize) * c;
                    let off = (ky * 3 + kx) * c;
                    for (d, &g) in dx[dst..dst + c].iter_mut().zip(&src[off..off + c]) {
                        *d += g;
                    }
                }
            }
        }
    }
}

/// Sinusoidal embedding of a timestep, `dim` even.
pub fn timestep_embedding<T: Real>(t: usize, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = Float::exp(-Float::ln(10000f64) * i as f64 / half as f64);
        let arg = t as f64 * freq;
        out[i] = T::lit(Float::sin(arg));
        out[half + i] = T::lit(Float::cos(arg));
    }
    out
}

pub fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn rand_vec(n: usize, seed: &mut u64) -> Vec<f64> {
        (0..n).map(|_| lcg(seed)).collect()
    }

    /// Central-difference check of `d(Σ r ⊙ f(x))/dx`.
    fn check_grad(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], r: &[f64], analytic: &[f64]) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            xp[i] += h;
            let mut xm = x.to_vec();
            xm[i] -= h;
            let fp: f64 = f(&xp).iter().zip(r).map(|(a, b)| a * b).sum();
            let fm: f64 = f(&xm).iter().zip(r).map(|(a, b)| a * b).sum();
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(err < 1e-5, "grad mismatch at {i}: fd {fd} analytic {}", analytic[i]);
        }
    }

    #[test]
    fn layer_norm_gradient() {
        let mut s = 3;
        let (rows, d) = (3, 5);
        let x = rand_vec(rows * d, &mut s);
        let r = rand_vec(rows * d, &mut s);
        let (y, rstd) = layer_norm(&x, rows, d);
        let mut dx = vec![0.0; rows * d];
        layer_norm_backward(&r, &y, &rstd, rows, d, &mut dx);
        check_grad(|x| layer_norm(x, rows, d).0, &x, &r, &dx);
    }

    #[test]
    fn silu_gradient() {
        let mut s = 5;
        let x = rand_vec(7, &mut s);
        let r = rand_vec(7, &mut s);
        let mut dx = vec![0.0; 7];
        silu_backward(&x, &r, &mut dx);
        check_grad(|x| silu(x), &x, &r, &dx);
    }

    #[test]
    fn conv_patches_adjoint() {
        // <im2col(x), g> == <x, col2im(g)>
        let mut s = 9;
        let (n, c) = (4, 3);
        let x = rand_vec(n * n * c, &mut s);
        let g = rand_vec(n * n * 9 * c, &mut s);
        let lhs: f64 = im2col3(&x, n, c).iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; n * n * c];
        col2im3(&g, n, c, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn linear_gradients() {
        let mut s = 11;
        let (rows, fin, fout) = (4, 3, 2);
        let x = rand_vec(rows * fin, &mut s);
        let w = rand_vec(fin * fout, &mut s);
        let b = rand_vec(fout, &mut s);
        let r = rand_vec(rows * fout, &mut s);
        let (mut dw, mut db, mut dx) = (vec![0.0; fin * fout], vec![0.0; fout], vec![0.0; rows * fin]);
        linear_backward(&x, rows, fin, &w, &r, fout, Some(&mut dw), Some(&mut db), Some(&mut dx));
        check_grad(|x| linear(x, rows, fin, &w, Some(&b), fout), &x, &r, &dx);
        check_grad(|w| linear(&x, rows, fin, w, Some(&b), fout), &w, &r, &dw);
        check_grad(|b| linear(&x, rows, fin, &w, Some(b), fout), &b, &r, &db);
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut v = vec![1.0f64, 2.0, 3.0, -1000.0, 0.0, 1000.0];
        softmax_rows(&mut v, 3);
        assert!((v[0..3].iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(v[5], 1.0);
    }
}
