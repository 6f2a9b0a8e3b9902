//! Eigenpairs, spectral projectors, resolvent solves, weighted local decay,
//! coupling norms and boundary Hölder estimates.

use crate::linalg::{self, norm, BandLu, PentaCayley, ToeplitzConv, ZERO};
use crate::model::{apply_weight, bump, interleave, deinterleave, BlockOperator, CutoffSpec, Grid, ModelError, SymTridiag, TwoChannel};
use crate::{fit_line, C64};
use faer::Mat;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("eigenpair did not converge: residual {residual:.3e}")]
    NonConvergence { residual: f64 },
    #[error("hypothesis violated: {0}")]
    Hypothesis(String),
    #[error("ill-conditioned shifted solve: condition estimate {condition:.3e}")]
    IllConditioned { condition: f64 },
    #[error("observation window ends at t = {requested:.3} beyond the reflection horizon t = {horizon:.3}")]
    WindowTruncated { horizon: f64, requested: f64 },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("insufficient resolution: {0}")]
    Resolution(String),
    #[error("evaluation failed: {0}")]
    Evaluation(String),
}

/// Lowest `k` eigenpairs of a symmetric tridiagonal matrix by Sturm bisection
/// and inverse iteration, ascending.
pub fn eigenpairs(block: &SymTridiag, k: usize) -> Result<Vec<(f64, Vec<f64>)>, SpectralError> {
    let n = block.len();
    if k == 0 || k > n {
        return Err(SpectralError::Degenerate(format!("requested {k} eigenpairs of a {n} x {n} block")));
    }
    let (lo, hi) = gershgorin(block);
    let scale = lo.abs().max(hi.abs()).max(1.0);
    let mut out: Vec<(f64, Vec<f64>)> = Vec::with_capacity(k);
    for idx in 0..k {
        let (mut a, mut b) = (lo, hi);
        while b - a > 4.0 * f64::EPSILON * scale {
            let m = 0.5 * (a + b);
            if m <= a || m >= b {
                break;
            }
            if sturm_count(block, m) > idx {
                b = m;
            } else {
                a = m;
            }
        }
        let lambda = 0.5 * (a + b);
        let v = inverse_iteration(block, lambda, scale, &out)?;
        out.push((lambda, v));
    }
    Ok(out)
}

fn gershgorin(t: &SymTridiag) -> (f64, f64) {
    let n = t.len();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let r = if i > 0 { t.off[i - 1].abs() } else { 0.0 } + if i + 1 < n { t.off[i].abs() } else { 0.0 };
        lo = lo.min(t.diag[i] - r);
        hi = hi.max(t.diag[i] + r);
    }
    (lo, hi)
}

/// Number of eigenvalues strictly below `x`.
fn sturm_count(t: &SymTridiag, x: f64) -> usize {
    let mut count = 0;
    let mut d = 1.0;
    for i in 0..t.len() {
        let b2 = if i > 0 { t.off[i - 1] * t.off[i - 1] } else { 0.0 };
        d = t.diag[i] - x - if i > 0 { b2 / d } else { 0.0 };
        if d == 0.0 {
            d = -f64::EPSILON * (t.diag[i].abs() + x.abs()).max(1.0);
        }
        if d < 0.0 {
            count += 1;
        }
    }
    count
}

fn inverse_iteration(
    t: &SymTridiag,
    lambda: f64,
    scale: f64,
    previous: &[(f64, Vec<f64>)],
) -> Result<Vec<f64>, SpectralError> {
    let n = t.len();
    let lu = PivotedTridiag::factor(t, lambda, f64::EPSILON * scale);
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 7919) % 13) as f64 / 13.0).collect();
    let cluster: Vec<&Vec<f64>> =
        previous.iter().filter(|(l, _)| (l - lambda).abs() <= 1e-8 * scale).map(|(_, u)| u).collect();
    for _ in 0..3 {
        lu.solve_in_place(&mut v);
        for u in &cluster {
            let c: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (r, a) in v.iter_mut().zip(u.iter()) {
                *r -= c * a;
            }
        }
        let nr = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(nr > 0.0 && nr.is_finite()) {
            return Err(SpectralError::NonConvergence { residual: f64::INFINITY });
        }
        v.iter_mut().for_each(|x| *x /= nr);
    }
    // Fix the sign so the first significant component is positive.
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-8) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    let tv = t.apply(&linalg::to_complex(&v));
    let residual = tv.iter().zip(&v).map(|(a, b)| (a.re - lambda * b).powi(2)).sum::<f64>().sqrt();
    if residual > 1e-9 * scale {
        return Err(SpectralError::NonConvergence { residual });
    }
    Ok(v)
}

/// Tridiagonal LU of `T - shift` with partial pivoting.
struct PivotedTridiag {
    dl: Vec<f64>,
    d: Vec<f64>,
    du: Vec<f64>,
    du2: Vec<f64>,
    swapped: Vec<bool>,
}

impl PivotedTridiag {
    fn factor(t: &SymTridiag, shift: f64, tiny: f64) -> Self {
        let n = t.len();
        let mut dl = t.off.clone();
        let mut d: Vec<f64> = t.diag.iter().map(|x| x - shift).collect();
        let mut du = t.off.clone();
        let mut du2 = vec![0.0; n.saturating_sub(2)];
        let mut swapped = vec![false; n.saturating_sub(1)];
        for i in 0..n.saturating_sub(1) {
            if d[i].abs() >= dl[i].abs() {
                if d[i] == 0.0 {
                    d[i] = tiny;
                }
                let f = dl[i] / d[i];
                dl[i] = f;
                d[i + 1] -= f * du[i];
            } else {
                let f = d[i] / dl[i];
                d[i] = dl[i];
                dl[i] = f;
                let tmp = du[i];
                du[i] = d[i + 1];
                d[i + 1] = tmp - f * d[i + 1];
                if i + 2 < n {
                    du2[i] = du[i + 1];
                    du[i + 1] *= -f;
                }
                swapped[i] = true;
            }
        }
        if d[n - 1] == 0.0 {
            d[n - 1] = tiny;
        }
        Self { dl, d, du, du2, swapped }
    }

    fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.d.len();
        for i in 0..n.saturating_sub(1) {
            if self.swapped[i] {
                let tmp = b[i];
                b[i] = b[i + 1];
                b[i + 1] = tmp - self.dl[i] * b[i];
            } else {
                b[i + 1] -= self.dl[i] * b[i];
            }
        }
        for i in (0..n).rev() {
            let mut r = b[i];
            if i + 1 < n {
                r -= self.du[i] * b[i + 1];
            }
            if i + 2 < n {
                r -= self.du2[i] * b[i + 2];
            }
            b[i] = r / self.d[i];
        }
    }
}

/// Cutoff family built around the window `Δ = [a, b]`.
///
/// * `g_window` is `g_Δ`.
/// * The continuum projector symbol is one on `[θa + m, b/θ - m]` and vanishes
///   outside `(θa, b/θ)`.
/// * `g_isolate` is zero on the support of `g_Δ` and one wherever the continuum
///   symbol is below one, so `g_Δ g_isolate = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cutoffs {
    pub window: CutoffSpec,
    pub theta: f64,
    pub far_margin: f64,
}

impl Cutoffs {
    pub fn new(window: CutoffSpec, theta: f64, far_margin: f64) -> Result<Self, SpectralError> {
        let c = Self { window, theta, far_margin };
        if !(theta > 0.0 && theta < 1.0) {
            return Err(SpectralError::Hypothesis(format!("theta must lie in (0, 1), got {theta}")));
        }
        let (lo, hi) = c.continuum_core();
        let (slo, shi) = c.window.support();
        if !(far_margin > 0.0 && lo < slo && hi > shi) {
            return Err(SpectralError::Hypothesis(format!(
                "continuum core [{lo}, {hi}] must strictly contain the window support [{slo}, {shi}]"
            )));
        }
        Ok(c)
    }

    fn continuum_core(&self) -> (f64, f64) {
        (self.theta * self.window.a + self.far_margin, self.window.b / self.theta - self.far_margin)
    }

    pub fn g_window(&self, x: f64) -> f64 {
        self.window.eval(x)
    }

    /// Symbol of the continuum projector on the free channel.
    pub fn continuum_symbol(&self, x: f64) -> f64 {
        let (lo, hi) = self.continuum_core();
        bump(lo, hi, self.far_margin, self.far_margin, x)
    }

    /// Symbol of the far-field cutoff `g_{Δ*}`, equal to `1 - continuum_symbol`.
    pub fn g_far(&self, x: f64) -> f64 {
        1.0 - self.continuum_symbol(x)
    }

    /// Isolating cutoff: zero on the support of `g_Δ`, one on the support of `g_far`.
    pub fn g_isolate(&self, x: f64) -> f64 {
        let (lo, hi) = self.continuum_core();
        let (slo, shi) = self.window.support();
        1.0 - bump(slo, shi, slo - lo, hi - shi, x)
    }

    /// Closed support of the continuum symbol.
    pub fn continuum_support(&self) -> (f64, f64) {
        (self.theta * self.window.a, self.window.b / self.theta)
    }
}

/// Orthogonal projection onto a continuum built from a spectral symbol.
pub trait ContinuumProjector {
    /// Applies the projector to a two-channel vector.
    fn project(&self, v: &[C64]) -> Vec<C64>;
}

/// Spectral data of `H0` on the box: full eigenbases of both channel blocks.
#[derive(Debug, Clone)]
pub struct SpectralModel {
    pub cutoffs: Cutoffs,
    pub n_embed: usize,
    pub lambda0: f64,
    /// Embedded eigenvector as a two-channel vector (zero on the free channel).
    pub psi0: Vec<f64>,
    free_values: Vec<f64>,
    free_vectors: Mat<f64>,
    osc_values: Vec<f64>,
    osc_vectors: Mat<f64>,
    band_index: Vec<usize>,
    band_vectors: Mat<f64>,
    band_energies: Vec<f64>,
    band_symbols: Vec<f64>,
}

impl SpectralModel {
    pub fn build(model: &TwoChannel, cutoffs: Cutoffs, n_embed: usize) -> Result<Self, SpectralError> {
        let n = model.channel_len();
        let (free_values, free_vectors) =
            linalg::sym_eigen(&model.free().to_dense()).map_err(SpectralError::Evaluation)?;
        let (osc_values, mut osc_vectors) =
            linalg::sym_eigen(&model.oscillator().to_dense()).map_err(SpectralError::Evaluation)?;
        if n_embed >= n {
            return Err(SpectralError::Degenerate(format!("embedded index {n_embed} exceeds the box")));
        }
        for k in 0..n {
            let first = (0..n).map(|i| osc_vectors[(i, k)]).find(|x| x.abs() > 1e-8).unwrap_or(1.0);
            if first < 0.0 {
                for i in 0..n {
                    osc_vectors[(i, k)] = -osc_vectors[(i, k)];
                }
            }
        }
        let lambda0 = osc_values[n_embed];
        let win = &cutoffs.window;
        if !(lambda0 > win.a && lambda0 < win.b) {
            return Err(SpectralError::Hypothesis(format!(
                "embedded eigenvalue {lambda0:.6} lies outside the window [{}, {}]",
                win.a, win.b
            )));
        }
        let (slo, shi) = win.support();
        if let Some(e) = osc_values.iter().enumerate().find(|&(k, e)| k != n_embed && *e >= slo && *e <= shi) {
            return Err(SpectralError::Hypothesis(format!(
                "oscillator level {:.6} falls inside the window support",
                e.1
            )));
        }
        let top = 4.0 / (model.grid().spacing() * model.grid().spacing());
        let (clo, chi) = cutoffs.continuum_support();
        if clo <= 0.0 || chi >= top {
            return Err(SpectralError::Hypothesis(format!(
                "continuum cutoff [{clo}, {chi}] touches a threshold of the free band [0, {top}]"
            )));
        }
        let psi0: Vec<f64> = (0..2 * n).map(|i| if i < n { 0.0 } else { osc_vectors[(i - n, n_embed)] }).collect();
        let band_index: Vec<usize> = (0..n).filter(|&k| cutoffs.continuum_symbol(free_values[k]) > 0.0).collect();
        let band_vectors = Mat::from_fn(n, band_index.len(), |i, j| free_vectors[(i, band_index[j])]);
        let band_energies: Vec<f64> = band_index.iter().map(|&k| free_values[k]).collect();
        let band_symbols: Vec<f64> = band_energies.iter().map(|&e| cutoffs.continuum_symbol(e)).collect();
        Ok(Self {
            cutoffs,
            n_embed,
            lambda0,
            psi0,
            free_values,
            free_vectors,
            osc_values,
            osc_vectors,
            band_index,
            band_vectors,
            band_energies,
            band_symbols,
        })
    }

    pub fn channel_len(&self) -> usize {
        self.free_values.len()
    }

    pub fn free_spectrum(&self) -> (&[f64], &Mat<f64>) {
        (&self.free_values, &self.free_vectors)
    }

    pub fn oscillator_spectrum(&self) -> (&[f64], &Mat<f64>) {
        (&self.osc_values, &self.osc_vectors)
    }

    /// Free-channel modes where the continuum symbol is nonzero:
    /// energies, symbol values and the `n × n_c` matrix of modes.
    pub fn band(&self) -> (&[f64], &[f64], &Mat<f64>) {
        (&self.band_energies, &self.band_symbols, &self.band_vectors)
    }

    pub fn band_indices(&self) -> &[usize] {
        &self.band_index
    }

    /// `f(H0) v` through the channel eigenbases.
    pub fn apply_function(&self, f: impl Fn(f64) -> f64, v: &[C64]) -> Vec<C64> {
        let n = self.channel_len();
        let mut out = vec![ZERO; 2 * n];
        for (ch, (vals, vecs)) in [(&self.free_values, &self.free_vectors), (&self.osc_values, &self.osc_vectors)]
            .into_iter()
            .enumerate()
        {
            let off = ch * n;
            for k in 0..n {
                let w = f(vals[k]);
                if w == 0.0 {
                    continue;
                }
                let mut c = ZERO;
                for i in 0..n {
                    c += v[off + i] * vecs[(i, k)];
                }
                let c = c * w;
                for i in 0..n {
                    out[off + i] += c * vecs[(i, k)];
                }
            }
        }
        out
    }

    /// Dense `f(H0)` in channel-major ordering.
    pub fn function_matrix(&self, f: impl Fn(f64) -> f64) -> Mat<f64> {
        let n = self.channel_len();
        let mut out = Mat::<f64>::zeros(2 * n, 2 * n);
        for (ch, (vals, vecs)) in [(&self.free_values, &self.free_vectors), (&self.osc_values, &self.osc_vectors)]
            .into_iter()
            .enumerate()
        {
            let off = ch * n;
            let cols: Vec<usize> = (0..n).filter(|&k| f(vals[k]) != 0.0).collect();
            let scaled = Mat::from_fn(n, cols.len(), |i, j| vecs[(i, cols[j])] * f(vals[cols[j]]));
            let basis = Mat::from_fn(n, cols.len(), |i, j| vecs[(i, cols[j])]);
            let block = &scaled * basis.transpose();
            for j in 0..n {
                for i in 0..n {
                    out[(off + i, off + j)] = block[(i, j)];
                }
            }
        }
        out
    }

    /// Projection onto the embedded eigenvector.
    pub fn apply_p0(&self, v: &[C64]) -> Vec<C64> {
        let c = linalg::dot_real(&self.psi0, v);
        self.psi0.iter().map(|&p| c * p).collect()
    }

    /// Remaining point spectrum of the oscillator plus `g_far(H0)` on the free channel.
    pub fn apply_p1(&self, v: &[C64]) -> Vec<C64> {
        let n = self.channel_len();
        let mut out = vec![ZERO; 2 * n];
        for k in 0..n {
            let w = self.cutoffs.g_far(self.free_values[k]);
            if w != 0.0 {
                let c: C64 = (0..n).map(|i| v[i] * self.free_vectors[(i, k)]).sum::<C64>() * w;
                for i in 0..n {
                    out[i] += c * self.free_vectors[(i, k)];
                }
            }
            if k != self.n_embed {
                let c: C64 = (0..n).map(|i| v[n + i] * self.osc_vectors[(i, k)]).sum();
                for i in 0..n {
                    out[n + i] += c * self.osc_vectors[(i, k)];
                }
            }
        }
        out
    }

    /// `I - P0 - P1`, computed literally.
    pub fn apply_pc(&self, v: &[C64]) -> Vec<C64> {
        let p0 = self.apply_p0(v);
        let p1 = self.apply_p1(v);
        v.iter().zip(p0).zip(p1).map(|((a, b), c)| a - b - c).collect()
    }
}

impl ContinuumProjector for SpectralModel {
    /// Band form of the continuum projector: `V diag(s) Vᵀ` on the free channel.
    fn project(&self, v: &[C64]) -> Vec<C64> {
        let n = self.channel_len();
        let mut out = vec![ZERO; 2 * n];
        for j in 0..self.band_energies.len() {
            let c: C64 = (0..n).map(|i| v[i] * self.band_vectors[(i, j)]).sum::<C64>() * self.band_symbols[j];
            for i in 0..n {
                out[i] += c * self.band_vectors[(i, j)];
            }
        }
        out
    }
}

/// First column of the Toeplitz matrix `f(T∞)` restricted to `n` lattice sites,
/// where `T∞` is the second difference on the infinite lattice with spacing `h`.
pub fn lattice_symbol_column(h: f64, n: usize, f: impl Fn(f64) -> C64) -> Vec<C64> {
    let k_len = (4 * n).next_power_of_two().max(1 << 15);
    let mut buf: Vec<C64> = (0..k_len)
        .map(|j| {
            let k = 2.0 * PI * j as f64 / (k_len as f64 * h);
            f((2.0 - 2.0 * (k * h).cos()) / (h * h))
        })
        .collect();
    let mut planner = rustfft::FftPlanner::new();
    planner.plan_fft_inverse(k_len).process(&mut buf);
    buf.truncate(n);
    let inv = 1.0 / k_len as f64;
    buf.iter_mut().for_each(|z| *z *= inv);
    buf
}

/// Continuum projector on an arbitrary box from the lattice symbol: `s(T∞)` on the
/// free channel, zero on the oscillator channel.
pub struct LatticeProjector {
    n: usize,
    conv: ToeplitzConv,
}

impl LatticeProjector {
    pub fn new(grid: &Grid, cutoffs: &Cutoffs) -> Self {
        let column = lattice_symbol_column(grid.spacing(), grid.points(), |e| C64::new(cutoffs.continuum_symbol(e), 0.0));
        Self { n: grid.points(), conv: ToeplitzConv::new(&column) }
    }

    /// Applies the projector to a single free-channel vector.
    pub fn project_free(&self, v: &[C64]) -> Vec<C64> {
        self.conv.apply(v)
    }
}

impl ContinuumProjector for LatticeProjector {
    fn project(&self, v: &[C64]) -> Vec<C64> {
        let mut out = self.conv.apply(&v[..self.n]);
        out.resize(2 * self.n, ZERO);
        out
    }
}

/// Solves `(A - z) u = f` for a banded two-channel operator.
pub fn resolvent_solve(op: &BlockOperator, z: C64, f: &[C64]) -> Result<Vec<C64>, SpectralError> {
    if !op.is_banded() {
        return Err(SpectralError::Degenerate("operator has a dense block".into()));
    }
    let d = op.dim();
    if f.len() != d {
        return Err(ModelError::Dimension { expected: d, got: f.len() }.into());
    }
    let lu = BandLu::factor(d, 2, |i, j| {
        let a = C64::new(op.interleaved_entry(i, j), 0.0);
        if i == j {
            a - z
        } else {
            a
        }
    });
    finish_solve(&lu, f, |u| {
        let mut r = op.apply(u);
        for (ri, ui) in r.iter_mut().zip(u) {
            *ri -= z * ui;
        }
        r
    }, true)
}

/// Solves `(T - z) u = f` for a single tridiagonal block.
pub fn resolvent_solve_block(t: &SymTridiag, z: C64, f: &[C64]) -> Result<Vec<C64>, SpectralError> {
    let n = t.len();
    if f.len() != n {
        return Err(ModelError::Dimension { expected: n, got: f.len() }.into());
    }
    let lu = BandLu::factor(n, 1, |i, j| {
        if i == j {
            C64::new(t.diag[i], 0.0) - z
        } else {
            C64::new(t.off[i.min(j)], 0.0)
        }
    });
    finish_solve(&lu, f, |u| {
        let mut r = t.apply(u);
        for (ri, ui) in r.iter_mut().zip(u) {
            *ri -= z * ui;
        }
        r
    }, false)
}

fn finish_solve(
    lu: &BandLu,
    f: &[C64],
    residual_op: impl Fn(&[C64]) -> Vec<C64>,
    interleaved: bool,
) -> Result<Vec<C64>, SpectralError> {
    let condition = lu.condition_estimate();
    if !condition.is_finite() || condition > 1e13 {
        return Err(SpectralError::IllConditioned { condition });
    }
    let mut u = if interleaved { interleave(f) } else { f.to_vec() };
    lu.solve_in_place(&mut u);
    let u = if interleaved { deinterleave(&u) } else { u };
    let r = residual_op(&u);
    let rn: f64 = r.iter().zip(f).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
    if rn > 1e-10 * norm(f).max(f64::MIN_POSITIVE) {
        return Err(SpectralError::IllConditioned { condition });
    }
    Ok(u)
}

/// Weighted norms `‖<x>^{-σ} e^{-itA} v‖` sampled at `times`, propagated by Cayley
/// steps of size `dt`. Times are rounded to the step grid.
pub fn weighted_norm_series(
    op: &BlockOperator,
    grid: &Grid,
    v: &[C64],
    sigma: f64,
    times: &[f64],
    dt: f64,
) -> Result<Vec<f64>, SpectralError> {
    if !op.is_banded() {
        return Err(SpectralError::Degenerate("operator has a dense block".into()));
    }
    if !(dt > 0.0) || times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|t| *t < 0.0) {
        return Err(SpectralError::Degenerate("times must be non-negative and increasing, dt positive".into()));
    }
    let stepper = PentaCayley::new(op.dim(), dt, |i, j| op.interleaved_entry(i, j));
    let mut state = interleave(v);
    let mut scratch = Vec::new();
    let mut step = 0usize;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let target = (t / dt).round() as usize;
        while step < target {
            stepper.step(&mut state, &mut scratch);
            step += 1;
        }
        let mut w = deinterleave(&state);
        apply_weight(grid, -sigma, &mut w);
        out.push(norm(&w));
    }
    Ok(out)
}

/// Measured local decay `‖<x>^{-σ} e^{-itH0} P f‖ ≈ C t^{-rate}`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularityEstimate {
    pub rate: f64,
    pub prefactor: f64,
    pub fit_rms: f64,
    pub times: Vec<f64>,
    pub norms: Vec<f64>,
    /// Time at which boundary reflections first reach the support region.
    pub horizon: f64,
}

/// Propagates the continuum part of `f` under `op` and fits the local decay rate.
///
/// `max_speed` bounds the group velocity of the projected data; it sets the
/// reflection horizon `(2L - R) / max_speed` with `R` the support radius.
#[allow(clippy::too_many_arguments)]
pub fn local_decay_fit(
    op: &BlockOperator,
    grid: &Grid,
    projector: &dyn ContinuumProjector,
    sigma: f64,
    f: &[C64],
    times: &[f64],
    dt: f64,
    max_speed: f64,
) -> Result<RegularityEstimate, SpectralError> {
    let g = projector.project(f);
    let gn = norm(&g);
    if gn <= 1e-12 * norm(f).max(f64::MIN_POSITIVE) {
        return Err(SpectralError::Degenerate("input has no continuum component".into()));
    }
    if times.len() < 2 || times[0] <= 0.0 {
        return Err(SpectralError::Degenerate("need at least two positive observation times".into()));
    }
    let n = grid.points();
    let peak = g.iter().fold(0.0f64, |m, z| m.max(z.norm()));
    let radius = (0..2 * n)
        .filter(|&i| g[i].norm() > 1e-8 * peak)
        .map(|i| grid.nodes()[i % n].abs())
        .fold(0.0f64, f64::max);
    let horizon = (2.0 * grid.half_width() - radius) / max_speed;
    let requested = *times.last().unwrap_or(&0.0);
    if requested > horizon {
        return Err(SpectralError::WindowTruncated { horizon, requested });
    }
    let norms = weighted_norm_series(op, grid, &g, sigma, times, dt)?;
    let lx: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let ly: Vec<f64> = norms.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
    let fit = fit_line(&lx, &ly).ok_or_else(|| SpectralError::Degenerate("decay fit failed".into()))?;
    Ok(RegularityEstimate {
        rate: -fit.slope,
        prefactor: fit.intercept.exp(),
        fit_rms: fit.rms,
        times: times.to_vec(),
        norms,
        horizon,
    })
}

/// Operator 2-norm of a real-linear map by power iteration on `MᵀM`.
pub fn operator_norm(
    dim: usize,
    apply: impl Fn(&[C64]) -> Result<Vec<C64>, SpectralError>,
    apply_transpose: impl Fn(&[C64]) -> Result<Vec<C64>, SpectralError>,
) -> Result<f64, SpectralError> {
    let mut v: Vec<C64> = (0..dim).map(|i| C64::new(1.0 + 0.5 * ((i * 31) % 17) as f64 / 17.0, 0.0)).collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|z| *z /= nv);
    let mut estimate = 0.0;
    for _ in 0..1000 {
        let w = apply_transpose(&apply(&v)?)?;
        let nw = norm(&w);
        if nw == 0.0 {
            return Ok(0.0);
        }
        let next = nw.sqrt();
        v = w.into_iter().map(|z| z / nw).collect();
        if (next - estimate).abs() <= 1e-9 * next {
            return Ok(next);
        }
        estimate = next;
    }
    Ok(estimate)
}

/// Components of the coupling norm `|||W|||`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripleNorm {
    /// `‖<x>^{2σ} W g_Δ(H0)‖`
    pub weighted_cutoff: f64,
    /// `‖<x>^{σ} W g_Δ(H0) <x>^{σ}‖`
    pub sandwiched_cutoff: f64,
    /// `‖<x>^{σ} W (H0 - c)^{-1} <x>^{-σ}‖`
    pub resolvent: f64,
    /// `‖<x>^{σ} W (H0 - c)^{-1} <x>^{σ}‖`
    pub resolvent_two_sided: f64,
}

impl TripleNorm {
    pub fn total(&self) -> f64 {
        self.weighted_cutoff + self.sandwiched_cutoff + self.resolvent
    }
}

/// Evaluates the weighted coupling norms from explicitly composed operators.
///
/// `shift` must lie below the spectrum of `H0`.
pub fn triple_norm_w(
    model: &TwoChannel,
    spectral: &SpectralModel,
    sigma: f64,
    shift: f64,
) -> Result<TripleNorm, SpectralError> {
    let bottom = spectral.free_values[0].min(spectral.osc_values[0]);
    if shift >= bottom - 1e-6 {
        return Err(SpectralError::Hypothesis(format!(
            "shift {shift} is not below the spectrum (bottom {bottom:.6})"
        )));
    }
    let grid = model.grid();
    let dim = 2 * grid.points();
    let w = model.w();
    let h0 = model.h0();
    let z = C64::new(shift, 0.0);
    let weigh = |p: f64, v: &[C64]| {
        let mut u = v.to_vec();
        apply_weight(grid, p, &mut u);
        u
    };
    let g = |v: &[C64]| spectral.apply_function(|e| spectral.cutoffs.g_window(e), v);
    let res = |v: &[C64]| resolvent_solve(h0, z, v);
    let weighted_cutoff = operator_norm(
        dim,
        |v| Ok(weigh(2.0 * sigma, &w.apply(&g(v)))),
        |u| Ok(g(&w.apply(&weigh(2.0 * sigma, u)))),
    )?;
    let sandwiched_cutoff = operator_norm(
        dim,
        |v| Ok(weigh(sigma, &w.apply(&g(&weigh(sigma, v))))),
        |u| Ok(weigh(sigma, &g(&w.apply(&weigh(sigma, u))))),
    )?;
    let resolvent = operator_norm(
        dim,
        |v| Ok(weigh(sigma, &w.apply(&res(&weigh(-sigma, v))?))),
        |u| Ok(weigh(-sigma, &res(&w.apply(&weigh(sigma, u)))?)),
    )?;
    let resolvent_two_sided = operator_norm(
        dim,
        |v| Ok(weigh(sigma, &w.apply(&res(&weigh(sigma, v))?))),
        |u| Ok(weigh(sigma, &res(&w.apply(&weigh(sigma, u)))?)),
    )?;
    Ok(TripleNorm { weighted_cutoff, sandwiched_cutoff, resolvent, resolvent_two_sided })
}

/// Hölder exponent of a boundary value from increments at shrinking spacings.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaEstimate {
    pub eta: f64,
    /// The measured slope reached the cap.
    pub saturated: bool,
    pub raw_slope: f64,
    pub spacings: Vec<f64>,
    pub increments: Vec<f64>,
}

/// Estimates `η` from `max(|F(s±δ) - F(s)|)` over the given spacings.
///
/// Spacings below `resolution_floor` cannot be resolved by the box and are rejected.
pub fn estimate_eta_boundary<E: std::fmt::Display>(
    mut boundary: impl FnMut(f64) -> Result<C64, E>,
    center: f64,
    spacings: &[f64],
    resolution_floor: f64,
    cap: f64,
) -> Result<EtaEstimate, SpectralError> {
    if spacings.len() < 2 {
        return Err(SpectralError::Degenerate("need at least two spacings".into()));
    }
    if let Some(d) = spacings.iter().find(|&&d| d < resolution_floor) {
        return Err(SpectralError::Resolution(format!(
            "spacing {d:.3e} is below the resolution floor {resolution_floor:.3e}"
        )));
    }
    let eval = |b: &mut dyn FnMut(f64) -> Result<C64, E>, s: f64| b(s).map_err(|e| SpectralError::Evaluation(e.to_string()));
    let f0 = eval(&mut boundary, center)?;
    let mut increments = Vec::with_capacity(spacings.len());
    for &d in spacings {
        let up = (eval(&mut boundary, center + d)? - f0).norm();
        let down = (eval(&mut boundary, center - d)? - f0).norm();
        increments.push(up.max(down));
    }
    if increments.iter().any(|&v| v <= 0.0) {
        return Err(SpectralError::Degenerate("boundary value is locally constant".into()));
    }
    let lx: Vec<f64> = spacings.iter().map(|d| d.ln()).collect();
    let ly: Vec<f64> = increments.iter().map(|d| d.ln()).collect();
    let fit = fit_line(&lx, &ly).ok_or_else(|| SpectralError::Degenerate("Hölder fit failed".into()))?;
    let saturated = fit.slope >= cap;
    Ok(EtaEstimate { eta: fit.slope.min(cap), saturated, raw_slope: fit.slope, spacings: spacings.to_vec(), increments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Coupling, CutoffKind};

    fn cutoffs() -> Cutoffs {
        Cutoffs::new(CutoffSpec::new(0.5, 1.5, 0.05, CutoffKind::SmoothBump).unwrap(), 0.8, 0.025).unwrap()
    }

    fn small() -> (TwoChannel, SpectralModel) {
        let grid = Grid::new(16.0, 128).unwrap();
        let m = TwoChannel::build(&grid, Coupling::default(), 0.1, 1e-10, 1e-8).unwrap();
        let s = SpectralModel::build(&m, cutoffs(), 0).unwrap();
        (m, s)
    }

    #[test]
    fn bisection_matches_dense_and_hermite_levels() {
        let grid = Grid::new(8.0, 256).unwrap();
        let osc = crate::model::oscillator(&grid, 1e-10).unwrap();
        let pairs = eigenpairs(&osc, 4).unwrap();
        let (dense, _) = linalg::sym_eigen(&osc.to_dense()).unwrap();
        for (k, (l, v)) in pairs.iter().enumerate() {
            assert!((l - dense[k]).abs() < 1e-9);
            let h = grid.spacing();
            assert!((l - (2 * k + 1) as f64).abs() < h * h * ((k + 1) * (k + 1)) as f64);
            let r = osc.apply(&linalg::to_complex(v));
            let res: f64 = r.iter().zip(v).map(|(a, b)| (a.re - l * b).powi(2)).sum::<f64>().sqrt();
            assert!(res < 1e-8);
        }
        // ground state: positive Gaussian, h² convergence.
        let h = grid.spacing();
        let e0 = pairs[0].0;
        assert!((e0 - 1.0).abs() < 0.1 * h * h);
    }

    #[test]
    fn free_block_levels_are_sine_modes() {
        let grid = Grid::new(8.0, 64).unwrap();
        let t = crate::model::free_laplacian(&grid);
        let pairs = eigenpairs(&t, 3).unwrap();
        let h = grid.spacing();
        for (k, (l, _)) in pairs.iter().enumerate() {
            let theta = PI * (k + 1) as f64 / (grid.points() + 1) as f64;
            assert!((l - (2.0 - 2.0 * theta.cos()) / (h * h)).abs() < 1e-10);
        }
    }

    #[test]
    fn projectors_resolve_identity() {
        let (_, s) = small();
        let n = s.channel_len();
        let v: Vec<C64> = (0..2 * n).map(|i| C64::new((0.3 * i as f64).sin(), (0.1 * i as f64).cos())).collect();
        let p0 = s.apply_p0(&v);
        let p1 = s.apply_p1(&v);
        let pc = s.apply_pc(&v);
        let banded = s.project(&v);
        for i in 0..2 * n {
            assert!((p0[i] + p1[i] + pc[i] - v[i]).norm() < 1e-12);
            assert!((pc[i] - banded[i]).norm() < 1e-10);
        }
        let psi: Vec<C64> = linalg::to_complex(&s.psi0);
        let p0psi = s.apply_p0(&psi);
        assert!(p0psi.iter().zip(&psi).all(|(a, b)| (a - b).norm() < 1e-12));
        assert!(norm(&s.apply_pc(&psi)) < 1e-12);
        // P0 P_c = 0
        assert!(norm(&s.apply_p0(&pc)) < 1e-12);
    }

    #[test]
    fn embedded_level_outside_window_is_rejected() {
        let grid = Grid::new(16.0, 128).unwrap();
        let m = TwoChannel::build(&grid, Coupling::default(), 0.1, 1e-10, 1e-8).unwrap();
        assert!(matches!(SpectralModel::build(&m, cutoffs(), 1), Err(SpectralError::Hypothesis(_))));
    }

    #[test]
    fn cutoff_family_is_consistent() {
        let c = cutoffs();
        for k in 0..400 {
            let e = -0.5 + 0.01 * k as f64;
            let gi = c.g_isolate(e);
            if c.g_far(e) > 0.0 {
                assert!((gi - 1.0).abs() < 1e-15, "g_isolate must be one on far support at {e}");
            }
            if c.g_window(e) > 0.0 {
                assert_eq!(gi, 0.0);
            }
            if (0.5..=1.5).contains(&e) {
                assert_eq!(c.continuum_symbol(e), 1.0);
            }
            if (0.5..=1.5).contains(&e) {
                assert_eq!(gi, 0.0);
            }
        }
    }

    #[test]
    fn lattice_projector_acts_as_its_symbol_on_narrow_packets() {
        let grid = Grid::new(200.0, 1600).unwrap();
        let lp = LatticeProjector::new(&grid, &cutoffs());
        let x = grid.nodes();
        let packet = |k0: f64| -> Vec<C64> {
            x.iter().map(|&y| C64::from_polar((-(y * y) / (2.0 * 400.0)).exp(), k0 * y)).collect()
        };
        let inside = packet(1.0);
        let out = lp.project_free(&inside);
        let diff: Vec<C64> = out.iter().zip(&inside).map(|(a, b)| a - b).collect();
        assert!(norm(&diff) < 1e-6 * norm(&inside));
        let outside = packet(0.3);
        assert!(norm(&lp.project_free(&outside)) < 1e-6 * norm(&outside));
    }

    #[test]
    fn resolvent_solve_has_small_residual_and_rejects_real_spectrum_hits() {
        let (m, _) = small();
        let f: Vec<C64> = (0..m.h().dim()).map(|i| C64::new(1.0 / (1.0 + i as f64), 0.0)).collect();
        let u = resolvent_solve(m.h(), C64::new(1.0, 0.01), &f).unwrap();
        let r = m.h().apply(&u);
        let res: f64 = r.iter().zip(&u).zip(&f).map(|((a, b), c)| (a - C64::new(1.0, 0.01) * b - c).norm_sqr()).sum::<f64>().sqrt();
        assert!(res < 1e-10 * norm(&f));
        // exact eigenvalue of the free block: singular shifted solve.
        let t = m.free();
        let (vals, _) = linalg::sym_eigen(&t.to_dense()).unwrap();
        let g: Vec<C64> = (0..t.len()).map(|i| C64::new((i as f64).sin(), 0.0)).collect();
        assert!(resolvent_solve_block(t, C64::new(vals[10], 0.0), &g).is_err());
    }

    #[test]
    fn eigenstate_does_not_decay_and_window_is_checked() {
        let (m, s) = small();
        let psi = linalg::to_complex(&s.psi0);
        let times = [1.0, 2.0, 4.0];
        let norms = weighted_norm_series(m.h0(), m.grid(), &psi, 2.0, &times, 0.01).unwrap();
        assert!((norms[0] - norms[2]).abs() < 1e-8);
        assert!(matches!(
            local_decay_fit(m.h0(), m.grid(), &s, 2.0, &psi, &times, 0.01, 3.0),
            Err(SpectralError::Degenerate(_))
        ));
        let n = s.channel_len();
        let x = m.grid().nodes();
        let packet: Vec<C64> = (0..2 * n)
            .map(|i| if i < n { C64::from_polar((-(x[i] * x[i]) / 8.0).exp(), x[i]) } else { ZERO })
            .collect();
        assert!(matches!(
            local_decay_fit(m.h0(), m.grid(), &s, 2.0, &packet, &[5.0, 40.0], 0.01, 3.0),
            Err(SpectralError::WindowTruncated { .. })
        ));
    }

    #[test]
    fn synthetic_square_root_boundary_gives_half() {
        let f = |s: f64| -> Result<C64, String> { Ok((C64::new(0.0, s - 1.0)).sqrt()) };
        let spacings = [0.04, 0.02, 0.01, 0.005];
        let est = estimate_eta_boundary(f, 1.0, &spacings, 1e-3, 1.0).unwrap();
        assert!((est.eta - 0.5).abs() < 0.1);
        assert!(estimate_eta_boundary(f, 1.0, &spacings, 0.01, 1.0).is_err());
        let smooth = |s: f64| -> Result<C64, String> { Ok(C64::new(s.sin(), 0.0)) };
        let est = estimate_eta_boundary(smooth, 1.0, &spacings, 1e-3, 1.0).unwrap();
        assert!(est.saturated && est.eta == 1.0);
    }

    #[test]
    fn triple_norm_scales_linearly_with_amplitude() {
        let grid = Grid::new(16.0, 128).unwrap();
        let m1 = TwoChannel::build(&grid, Coupling { amplitude: 1.0, width: 1.0 }, 0.1, 1e-10, 1e-8).unwrap();
        let m2 = TwoChannel::build(&grid, Coupling { amplitude: 2.0, width: 1.0 }, 0.1, 1e-10, 1e-8).unwrap();
        let s = SpectralModel::build(&m1, cutoffs(), 0).unwrap();
        let a = triple_norm_w(&m1, &s, 2.0, -1.0).unwrap();
        let b = triple_norm_w(&m2, &s, 2.0, -1.0).unwrap();
        assert!(a.total().is_finite() && a.total() > 0.0);
        assert!((b.total() / a.total() - 2.0).abs() < 1e-6);
        assert!(triple_norm_w(&m1, &s, 2.0, 0.5).is_err());
    }
}
