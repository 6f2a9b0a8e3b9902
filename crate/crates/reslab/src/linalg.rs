//! Small numerical kernels shared by the physics modules.

use crate::C64;
use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

pub(crate) const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

pub(crate) fn norm(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Bilinear pairing `Σ u_i v_i` with a real left factor.
pub(crate) fn dot_real(u: &[f64], v: &[C64]) -> C64 {
    u.iter().zip(v).map(|(a, b)| b * a).sum()
}

pub(crate) fn to_complex(v: &[f64]) -> Vec<C64> {
    v.iter().map(|&x| C64::new(x, 0.0)).collect()
}

/// LU factorization of a banded matrix without pivoting.
///
/// Safe for the shifted operators used here: `A - z` with `Im z ≠ 0` and `I + iαH`
/// have a definite Hermitian or anti-Hermitian part.
#[derive(Debug, Clone)]
pub(crate) struct BandLu {
    n: usize,
    p: usize,
    /// Row-major band storage, `a[i][j]` at `i * (2p + 1) + (j + p - i)`.
    data: Vec<C64>,
    min_pivot: f64,
    max_entry: f64,
}

impl BandLu {
    pub fn factor(n: usize, p: usize, entry: impl Fn(usize, usize) -> C64) -> Self {
        let w = 2 * p + 1;
        let mut data = vec![ZERO; n * w];
        let mut max_entry = 0.0f64;
        for i in 0..n {
            for j in i.saturating_sub(p)..(i + p + 1).min(n) {
                let v = entry(i, j);
                max_entry = max_entry.max(v.norm());
                data[i * w + j + p - i] = v;
            }
        }
        let mut min_pivot = f64::INFINITY;
        for k in 0..n {
            let pivot = data[k * w + p];
            min_pivot = min_pivot.min(pivot.norm());
            if pivot == ZERO {
                break;
            }
            let inv = pivot.inv();
            for i in k + 1..(k + p + 1).min(n) {
                let l = data[i * w + k + p - i] * inv;
                data[i * w + k + p - i] = l;
                for j in k + 1..(k + p + 1).min(n) {
                    let u = data[k * w + j + p - k];
                    data[i * w + j + p - i] -= l * u;
                }
            }
        }
        Self { n, p, data, min_pivot, max_entry }
    }

    /// Crude condition indicator `max|a_ij| / min|pivot|`.
    pub fn condition_estimate(&self) -> f64 {
        if self.min_pivot == 0.0 {
            f64::INFINITY
        } else {
            self.max_entry / self.min_pivot
        }
    }

    pub fn solve_in_place(&self, b: &mut [C64]) {
        let (n, p, w) = (self.n, self.p, 2 * self.p + 1);
        for i in 0..n {
            let mut acc = b[i];
            for k in i.saturating_sub(p)..i {
                acc -= self.data[i * w + k + p - i] * b[k];
            }
            b[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = b[i];
            for j in i + 1..(i + p + 1).min(n) {
                acc -= self.data[i * w + j + p - i] * b[j];
            }
            b[i] = acc / self.data[i * w + p];
        }
    }
}

/// Crank-Nicolson (Cayley) stepper `(I + iαH) φ' = (I - iαH) φ` for a real symmetric
/// pentadiagonal `H`, `α = dt/2`. Vectors are in the banded ordering of `H`.
#[derive(Debug, Clone)]
pub(crate) struct PentaCayley {
    n: usize,
    alpha: f64,
    h0: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    l1: Vec<C64>,
    l2: Vec<C64>,
    u1: Vec<C64>,
    u2: Vec<C64>,
    uinv: Vec<C64>,
}

impl PentaCayley {
    /// `entry(i, j)` must vanish for `|i - j| > 2` and be symmetric.
    pub fn new(n: usize, dt: f64, entry: impl Fn(usize, usize) -> f64) -> Self {
        let alpha = dt / 2.0;
        let h0: Vec<f64> = (0..n).map(|i| entry(i, i)).collect();
        let h1: Vec<f64> = (0..n).map(|i| if i + 1 < n { entry(i, i + 1) } else { 0.0 }).collect();
        let h2: Vec<f64> = (0..n).map(|i| if i + 2 < n { entry(i, i + 2) } else { 0.0 }).collect();
        let ia = C64::new(0.0, alpha);
        let lu = BandLu::factor(n, 2, |i, j| {
            let h = match i.abs_diff(j) {
                0 => h0[i],
                1 => h1[i.min(j)],
                2 => h2[i.min(j)],
                _ => 0.0,
            };
            let d = if i == j { 1.0 } else { 0.0 };
            C64::new(d, 0.0) + ia * h
        });
        let w = 5;
        let mut l1 = vec![ZERO; n];
        let mut l2 = vec![ZERO; n];
        let mut u1 = vec![ZERO; n];
        let mut u2 = vec![ZERO; n];
        let mut uinv = vec![ZERO; n];
        for i in 0..n {
            if i >= 1 {
                l1[i] = lu.data[i * w + 1];
            }
            if i >= 2 {
                l2[i] = lu.data[i * w];
            }
            uinv[i] = lu.data[i * w + 2].inv();
            if i + 1 < n {
                u1[i] = lu.data[i * w + 3];
            }
            if i + 2 < n {
                u2[i] = lu.data[i * w + 4];
            }
        }
        Self { n, alpha, h0, h1, h2, l1, l2, u1, u2, uinv }
    }

    /// Advances `v` by one step. `scratch` is resized as needed.
    pub fn step(&self, v: &mut [C64], scratch: &mut Vec<C64>) {
        let n = self.n;
        scratch.resize(n, ZERO);
        let a = self.alpha;
        let y = &mut scratch[..];
        let (h0, h1, h2) = (&self.h0[..n], &self.h1[..n], &self.h2[..n]);
        let (l1, l2) = (&self.l1[..n], &self.l2[..n]);
        // rhs = (I - iαH) v fused with the forward sweep.
        for i in 0..n {
            let mut hv = v[i] * h0[i];
            if i + 1 < n {
                hv += v[i + 1] * h1[i];
            }
            if i + 2 < n {
                hv += v[i + 2] * h2[i];
            }
            if i >= 1 {
                hv += v[i - 1] * h1[i - 1];
            }
            if i >= 2 {
                hv += v[i - 2] * h2[i - 2];
            }
            let mut r = v[i] + C64::new(hv.im * a, -hv.re * a);
            if i >= 1 {
                r -= l1[i] * y[i - 1];
            }
            if i >= 2 {
                r -= l2[i] * y[i - 2];
            }
            y[i] = flush(r);
        }
        let (u1, u2, uinv) = (&self.u1[..n], &self.u2[..n], &self.uinv[..n]);
        for i in (0..n).rev() {
            let mut r = y[i];
            if i + 1 < n {
                r -= u1[i] * v[i + 1];
            }
            if i + 2 < n {
                r -= u2[i] * v[i + 2];
            }
            v[i] = flush(r * uinv[i]);
        }
    }
}

/// Entries this small are dropped: the implicit solve spreads exponentially small tails
/// over the whole box and subnormal arithmetic on them would dominate the step cost.
const FLUSH_BELOW: f64 = 1e-200;

#[inline]
fn flush(z: C64) -> C64 {
    if z.re.abs() + z.im.abs() < FLUSH_BELOW {
        ZERO
    } else {
        z
    }
}

/// Eigen-decomposition of a real symmetric matrix, ascending eigenvalues.
pub(crate) fn sym_eigen(m: &Mat<f64>) -> Result<(Vec<f64>, Mat<f64>), String> {
    let eig = m.self_adjoint_eigen(Side::Lower).map_err(|e| format!("{e:?}"))?;
    let s = eig.S().column_vector();
    let values = (0..s.nrows()).map(|i| s[i]).collect();
    Ok((values, eig.U().to_owned()))
}

/// Solves a small dense complex system with partial pivoting.
pub(crate) fn solve_dense(a: &Mat<C64>, b: &Mat<C64>) -> Mat<C64> {
    a.partial_piv_lu().solve(b)
}

/// 2-norm condition estimate of a small dense complex matrix via its inverse.
pub(crate) fn condition_dense(a: &Mat<C64>) -> f64 {
    let n = a.nrows();
    let id = Mat::<C64>::from_fn(n, n, |i, j| if i == j { C64::new(1.0, 0.0) } else { ZERO });
    let inv = solve_dense(a, &id);
    let fro = |m: &Mat<C64>| -> f64 {
        let mut s = 0.0;
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                s += m[(i, j)].norm_sqr();
            }
        }
        s.sqrt()
    };
    let c = fro(a) * fro(&inv);
    if c.is_finite() {
        c
    } else {
        f64::INFINITY
    }
}

/// Applies a symmetric Toeplitz matrix with first column `c` by circulant embedding.
pub(crate) struct ToeplitzConv {
    n: usize,
    len: usize,
    kernel_hat: Vec<C64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl ToeplitzConv {
    pub fn new(column: &[C64]) -> Self {
        let n = column.len();
        let len = (2 * n).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(len);
        let inv = planner.plan_fft_inverse(len);
        let mut k = vec![ZERO; len];
        k[..n].copy_from_slice(column);
        for d in 1..n {
            k[len - d] = column[d];
        }
        fwd.process(&mut k);
        Self { n, len, kernel_hat: k, fwd, inv }
    }

    pub fn apply(&self, v: &[C64]) -> Vec<C64> {
        let mut buf = vec![ZERO; self.len];
        buf[..self.n].copy_from_slice(v);
        self.fwd.process(&mut buf);
        let scale = 1.0 / self.len as f64;
        for (b, k) in buf.iter_mut().zip(&self.kernel_hat) {
            *b *= k * scale;
        }
        self.inv.process(&mut buf);
        buf.truncate(self.n);
        buf
    }
}

/// Neville extrapolation of `ys(xs)` to `x = 0`.
///
/// Returns the value and the change from dropping the sample farthest from zero.
pub fn extrapolate_to_zero(xs: &[f64], ys: &[C64]) -> (C64, f64) {
    assert_eq!(xs.len(), ys.len());
    assert!(!xs.is_empty());
    let neville = |xs: &[f64], ys: &[C64]| -> C64 {
        let mut p = ys.to_vec();
        let m = xs.len();
        for k in 1..m {
            for i in 0..m - k {
                let (xi, xk) = (xs[i], xs[i + k]);
                p[i] = (p[i + 1] * xi - p[i] * xk) / (xi - xk);
            }
        }
        p[0]
    };
    let full = neville(xs, ys);
    if xs.len() == 1 {
        return (full, f64::INFINITY);
    }
    let far = xs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let (mut xr, mut yr) = (xs.to_vec(), ys.to_vec());
    xr.remove(far);
    yr.remove(far);
    let reduced = neville(&xr, &yr);
    (full, (full - reduced).norm())
}

/// Ordinary least-squares line `y ≈ slope * x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual.
    pub rms: f64,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Option<LineFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rms = (x.iter().zip(y).map(|(a, b)| (b - slope * a - intercept).powi(2)).sum::<f64>() / n as f64).sqrt();
    Some(LineFit { slope, intercept, rms })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_lu_matches_dense_solve() {
        let n = 40;
        let p = 2;
        let entry = |i: usize, j: usize| -> C64 {
            if i == j {
                C64::new(4.0 + i as f64 * 0.1, 0.7)
            } else if i.abs_diff(j) <= p {
                C64::new(-1.0 / (1 + i + j) as f64, 0.0)
            } else {
                ZERO
            }
        };
        let lu = BandLu::factor(n, p, entry);
        let mut b: Vec<C64> = (0..n).map(|k| C64::new((k as f64).cos(), k as f64 * 0.01)).collect();
        let b0 = b.clone();
        lu.solve_in_place(&mut b);
        for i in 0..n {
            let mut r = ZERO;
            for j in 0..n {
                r += entry(i, j) * b[j];
            }
            assert!((r - b0[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn toeplitz_matches_direct_product() {
        let c: Vec<C64> = (0..17).map(|d| C64::new(1.0 / (1.0 + d as f64), 0.3 * d as f64)).collect();
        let v: Vec<C64> = (0..17).map(|k| C64::new(k as f64, -1.0)).collect();
        let fast = ToeplitzConv::new(&c).apply(&v);
        for i in 0..17usize {
            let direct: C64 = (0..17usize).map(|j| c[i.abs_diff(j)] * v[j]).sum();
            assert!((direct - fast[i]).norm() < 1e-10);
        }
    }

    #[test]
    fn neville_is_exact_on_polynomials() {
        let xs = [0.4, 0.2, 0.1, 0.05];
        let ys: Vec<C64> = xs.iter().map(|x| C64::new(2.0 - 3.0 * x + x * x * x, x * x)).collect();
        let (v, _) = extrapolate_to_zero(&xs, &ys);
        assert!((v - C64::new(2.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn line_fit_recovers_slope() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.0).collect();
        let f = fit_line(&x, &y).unwrap();
        assert!((f.slope - 3.0).abs() < 1e-12 && (f.intercept + 1.0).abs() < 1e-12);
    }
}
