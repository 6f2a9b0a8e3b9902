//! The reduced coupling `C = εW g̃_Δ(H)`, the function `F(ε, p)` of the amplitude
//! equation, its boundary values and continuation across the cut, the frequency
//! shift `s₀`, the width `Γ` and the resonance pole.
//!
//! Conventions: the amplitude obeys `p â + iω â + ε²F(p) â = a(0)` after Laplace
//! transform, so poles solve `p + iω + ε²F(p) = 0` and `Re F` at the boundary is the
//! decay rate divided by `ε²`.

use crate::fgr::{level_spacing, FgrError, Ladder, LadderValue};
use crate::linalg::{self, condition_dense, solve_dense, to_complex, ToeplitzConv, ZERO};
use crate::model::TwoChannel;
use crate::spectral::{SpectralError, SpectralModel};
use crate::C64;
use faer::Mat;
use rustfft::{Fft, FftPlanner};
use std::f64::consts::PI;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResonanceError {
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Fgr(#[from] FgrError),
    #[error("perturbation too large: ‖g(H) g_I(H0)‖ = {norm:.3e} exceeds 1/2")]
    PerturbationTooLarge { norm: f64 },
    #[error("near the cut: reduced system condition number {condition:.3e}")]
    NearCut { condition: f64 },
    #[error("point {p} is outside the half-plane Re p > 0")]
    NotInHalfPlane { p: C64 },
    #[error("branch point: {0}")]
    BranchPoint(String),
    #[error("continuation unavailable: {0}")]
    OutsideNeighborhood(String),
    #[error("no root of the shift equation: {0}")]
    NoRoot(String),
    #[error("coupling strength is zero; no resonance")]
    ZeroCoupling,
    #[error("golden-rule condition fails: Γ = {gamma:.3e}")]
    FgrViolation { gamma: f64 },
    #[error("no pole inside the contour (winding {winding:.3})")]
    NoPole { winding: f64 },
    #[error("{count} poles inside the contour")]
    Multiplicity { count: i64 },
    #[error("winding quadrature unresolved: residual {residual:.3}")]
    Quadrature { residual: f64 },
    #[error("Newton refinement failed: |G| = {residual:.3e} after {iterations} steps")]
    Newton { residual: f64, iterations: usize },
}

/// Eigen-decomposition of the full Hamiltonian `H` on the box.
#[derive(Debug, Clone)]
pub struct FullSpectrum {
    pub values: Vec<f64>,
    pub vectors: Mat<f64>,
}

impl FullSpectrum {
    pub fn compute(model: &TwoChannel) -> Result<Self, ResonanceError> {
        let (values, vectors) =
            linalg::sym_eigen(&model.h().to_dense()).map_err(|e| SpectralError::Evaluation(e))?;
        Ok(Self { values, vectors })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Low-rank form of `B`, `g̃_Δ(H)` and `C = εW g̃_Δ(H)`.
///
/// With `g(H) = U D Uᵀ` over the eigenpairs of `H` in the support of `g_Δ` and
/// `Π = 1 - g_I(H0)`, one has `g̃ = B g(H) Π = Y Zᵀ` where `Y = B U D` and
/// `Z = Π U`; `C = X Zᵀ` with `X = εW Y`.
#[derive(Debug, Clone)]
pub struct ReducedCoupling {
    pub eps: f64,
    pub lambda0: f64,
    /// `ω₁ = λ0 + ⟨ψ0, C ψ0⟩`.
    pub omega1: f64,
    /// `ω`, the unperturbed level the reduced equation rotates with.
    pub omega: f64,
    /// `‖g_Δ(H) g_I(H0)‖`.
    pub cutoff_product_norm: f64,
    pub psi0: Vec<f64>,
    ub: Mat<f64>,
    /// `Xᵀ' = D Uᵀ g_I(H0)`, stored transposed as `g_I(H0) U D`.
    gud: Mat<f64>,
    minv: Mat<f64>,
    y: Mat<f64>,
    z: Mat<f64>,
    x: Mat<f64>,
    psi0_x: Vec<f64>,
    z_psi0: Vec<f64>,
}

fn mat_vec(m: &Mat<f64>, v: &[C64]) -> Vec<C64> {
    let mut out = vec![ZERO; m.nrows()];
    for j in 0..m.ncols() {
        let vj = v[j];
        for i in 0..m.nrows() {
            out[i] += vj * m[(i, j)];
        }
    }
    out
}

fn mat_t_vec(m: &Mat<f64>, v: &[C64]) -> Vec<C64> {
    (0..m.ncols()).map(|j| (0..m.nrows()).map(|i| v[i] * m[(i, j)]).sum()).collect()
}

impl ReducedCoupling {
    pub fn build(
        model: &TwoChannel,
        spectral: &SpectralModel,
        full: &FullSpectrum,
    ) -> Result<Self, ResonanceError> {
        let dim = full.dim();
        let eps = model.eps();
        let cut = &spectral.cutoffs;
        let cols: Vec<usize> = (0..dim).filter(|&k| cut.g_window(full.values[k]) > 0.0).collect();
        let r = cols.len();
        let ub = Mat::from_fn(dim, r, |i, j| full.vectors[(i, cols[j])]);
        let d: Vec<f64> = cols.iter().map(|&k| cut.g_window(full.values[k])).collect();
        let mut z = Mat::<f64>::zeros(dim, r);
        let mut gud = Mat::<f64>::zeros(dim, r);
        for j in 0..r {
            let col: Vec<C64> = (0..dim).map(|i| C64::new(ub[(i, j)], 0.0)).collect();
            let low = spectral.apply_function(|e| 1.0 - cut.g_isolate(e), &col);
            for i in 0..dim {
                z[(i, j)] = low[i].re;
                gud[(i, j)] = (ub[(i, j)] - low[i].re) * d[j];
            }
        }
        let gram = gud.transpose() * &gud;
        let (gvals, _) = linalg::sym_eigen(&gram).map_err(SpectralError::Evaluation)?;
        let cutoff_product_norm = gvals.last().copied().unwrap_or(0.0).max(0.0).sqrt();
        if cutoff_product_norm > 0.5 {
            return Err(ResonanceError::PerturbationTooLarge { norm: cutoff_product_norm });
        }
        // (I - U X')^{-1} U = U (I_r - X' U)^{-1}
        let xu = gud.transpose() * &ub;
        let small = Mat::<C64>::from_fn(r, r, |i, j| C64::new(if i == j { 1.0 } else { 0.0 } - xu[(i, j)], 0.0));
        let id = Mat::<C64>::from_fn(r, r, |i, j| if i == j { C64::new(1.0, 0.0) } else { ZERO });
        let inv = solve_dense(&small, &id);
        let minv = Mat::from_fn(r, r, |i, j| inv[(i, j)].re);
        let md = Mat::from_fn(r, r, |i, j| minv[(i, j)] * d[j]);
        let y = &ub * &md;
        let w = model.coupling();
        let n = model.channel_len();
        let x = Mat::from_fn(dim, r, |i, j| {
            if i < n {
                eps * w[i] * y[(n + i, j)]
            } else {
                eps * w[i - n] * y[(i - n, j)]
            }
        });
        let psi0 = spectral.psi0.clone();
        let psi0_x: Vec<f64> = (0..r).map(|j| (0..dim).map(|i| psi0[i] * x[(i, j)]).sum()).collect();
        let z_psi0: Vec<f64> = (0..r).map(|j| (0..dim).map(|i| psi0[i] * z[(i, j)]).sum()).collect();
        let c_pp: f64 = psi0_x.iter().zip(&z_psi0).map(|(a, b)| a * b).sum();
        let lambda0 = spectral.lambda0;
        Ok(Self {
            eps,
            lambda0,
            omega1: lambda0 + c_pp,
            omega: lambda0,
            cutoff_product_norm,
            psi0,
            ub,
            gud,
            minv,
            y,
            z,
            x,
            psi0_x,
            z_psi0,
        })
    }

    pub fn rank(&self) -> usize {
        self.z.ncols()
    }

    pub fn dim(&self) -> usize {
        self.z.nrows()
    }

    /// `g̃_Δ(H) v`.
    pub fn gtilde_apply(&self, v: &[C64]) -> Vec<C64> {
        mat_vec(&self.y, &mat_t_vec(&self.z, v))
    }

    /// `C v = εW g̃_Δ(H) v`.
    pub fn coupling_apply(&self, v: &[C64]) -> Vec<C64> {
        mat_vec(&self.x, &mat_t_vec(&self.z, v))
    }

    /// `B v = v + U (I_r - X'U)^{-1} X' v`.
    pub fn b_apply(&self, v: &[C64]) -> Vec<C64> {
        let xv = mat_t_vec(&self.gud, v);
        let m = mat_vec(&self.minv, &xv);
        let u = mat_vec(&self.ub, &m);
        v.iter().zip(u).map(|(a, b)| a + b).collect()
    }

    /// Dense `g̃_Δ(H)`.
    pub fn gtilde_matrix(&self) -> Mat<f64> {
        &self.y * self.z.transpose()
    }

    pub fn x(&self) -> &Mat<f64> {
        &self.x
    }

    pub fn z(&self) -> &Mat<f64> {
        &self.z
    }

    /// `ψ0ᵀ X`.
    pub fn psi0_x(&self) -> &[f64] {
        &self.psi0_x
    }

    /// `Zᵀ ψ0`.
    pub fn z_psi0(&self) -> &[f64] {
        &self.z_psi0
    }

    /// `g̃_Δ(H) ψ0`.
    pub fn dressed_state(&self) -> Vec<C64> {
        self.gtilde_apply(&to_complex(&self.psi0))
    }
}

/// The reduced coupling expressed in continuum band coordinates of the free channel.
#[derive(Debug, Clone)]
pub struct BandCoupling {
    pub energies: Vec<f64>,
    pub symbols: Vec<f64>,
    /// Free-channel band modes, `n × n_c`.
    pub modes: Mat<f64>,
    /// `Vᵀ X₁`, `n_c × r`.
    pub vx: Mat<f64>,
    /// `Z₁ᵀ V`, `r × n_c`.
    pub zv: Mat<f64>,
}

impl BandCoupling {
    pub fn new(reduced: &ReducedCoupling, spectral: &SpectralModel) -> Self {
        let (energies, symbols, modes) = spectral.band();
        let n = spectral.channel_len();
        let x1 = Mat::from_fn(n, reduced.rank(), |i, j| reduced.x[(i, j)]);
        let z1 = Mat::from_fn(n, reduced.rank(), |i, j| reduced.z[(i, j)]);
        Self {
            energies: energies.to_vec(),
            symbols: symbols.to_vec(),
            modes: modes.clone(),
            vx: modes.transpose() * &x1,
            zv: z1.transpose() * modes,
        }
    }

    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }
}

/// How `(I - M)^{-1}` is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InverseStrategy {
    Direct,
    /// Truncated Neumann series of the given order.
    Neumann(usize),
}

/// Free-channel resolvent of the infinite lattice, used to continue `F` across the cut.
struct LatticeContinuation {
    spacing: f64,
    n: usize,
    /// `1 - s(E_k)` on a Brillouin-zone grid.
    complement: Vec<f64>,
    energies: Vec<f64>,
    ifft: Arc<dyn Fft<f64>>,
    x1: Vec<Vec<C64>>,
    z1: Mat<f64>,
    plateau: (f64, f64),
}

impl LatticeContinuation {
    fn new(reduced: &ReducedCoupling, spectral: &SpectralModel, spacing: f64) -> Self {
        let n = spectral.channel_len();
        let k_len = (4 * n).next_power_of_two().max(1 << 15);
        let energies: Vec<f64> = (0..k_len)
            .map(|j| {
                let k = 2.0 * PI * j as f64 / (k_len as f64 * spacing);
                (2.0 - 2.0 * (k * spacing).cos()) / (spacing * spacing)
            })
            .collect();
        let cut = &spectral.cutoffs;
        let complement = energies.iter().map(|&e| 1.0 - cut.continuum_symbol(e)).collect();
        let ifft = FftPlanner::new().plan_fft_inverse(k_len);
        let x1 = (0..reduced.rank()).map(|j| (0..n).map(|i| C64::new(reduced.x[(i, j)], 0.0)).collect()).collect();
        let z1 = Mat::from_fn(n, reduced.rank(), |i, j| reduced.z[(i, j)]);
        // Interior of the continuum plateau, where 1 - s vanishes identically.
        let (lo, hi) = cut.continuum_support();
        let m = cut.far_margin;
        Self { spacing, n, complement, energies, ifft, x1, z1, plateau: (lo + 2.0 * m, hi - 2.0 * m) }
    }

    /// First column of `(p + iT∞)^{-1} s(T∞)` on `n` sites.
    fn column(&self, p: C64) -> Vec<C64> {
        let h = self.spacing;
        let z = C64::i() * p;
        let theta = (C64::new(1.0, 0.0) - z * (h * h / 2.0)).acos();
        let xi = (C64::i() * theta).exp();
        let denom = xi.inv() - xi;
        let mut col: Vec<C64> = Vec::with_capacity(self.n);
        let mut pow = C64::new(1.0, 0.0);
        for _ in 0..self.n {
            col.push(-C64::i() * pow * (h * h) / denom);
            pow *= xi;
        }
        let mut w: Vec<C64> =
            self.energies.iter().zip(&self.complement).map(|(&e, &c)| if c == 0.0 { ZERO } else { C64::new(c, 0.0) / (p + C64::i() * e) }).collect();
        self.ifft.process(&mut w);
        let inv = 1.0 / w.len() as f64;
        for (c, v) in col.iter_mut().zip(&w) {
            *c -= v * inv;
        }
        col
    }

    fn q_matrix(&self, p: C64) -> Mat<C64> {
        let conv = ToeplitzConv::new(&self.column(p));
        let r = self.x1.len();
        let mut q = Mat::<C64>::zeros(r, r);
        for (j, col) in self.x1.iter().enumerate() {
            let rx = conv.apply(col);
            for i in 0..r {
                q[(i, j)] = (0..self.n).map(|k| rx[k] * self.z1[(k, i)]).sum();
            }
        }
        q
    }
}

/// Evaluator for `F(ε, p)`.
pub struct FEvaluator {
    pub reduced: ReducedCoupling,
    pub band: BandCoupling,
    pub strategy: InverseStrategy,
    pub ladder: Ladder,
    lattice: LatticeContinuation,
    band_top: f64,
}

impl FEvaluator {
    pub fn new(
        model: &TwoChannel,
        spectral: &SpectralModel,
        reduced: ReducedCoupling,
        ladder: Ladder,
        strategy: InverseStrategy,
    ) -> Result<Self, ResonanceError> {
        if reduced.eps == 0.0 {
            return Err(ResonanceError::ZeroCoupling);
        }
        let band = BandCoupling::new(&reduced, spectral);
        let h = model.grid().spacing();
        let lattice = LatticeContinuation::new(&reduced, spectral, h);
        Ok(Self { reduced, band, strategy, ladder, lattice, band_top: 4.0 / (h * h) })
    }

    pub fn eps(&self) -> f64 {
        self.reduced.eps
    }

    pub fn omega(&self) -> f64 {
        self.reduced.omega
    }

    /// `ε²F` from the reduced matrix `Q = Z₁ᵀ (p + iH0)^{-1} P X₁`.
    fn eps2_f_from_q(&self, q: &Mat<C64>) -> Result<C64, ResonanceError> {
        let r = q.nrows();
        let rhs: Vec<C64> = self.reduced.z_psi0.iter().map(|&v| C64::new(v, 0.0)).collect();
        let y: Vec<C64> = match self.strategy {
            InverseStrategy::Direct => {
                let a = Mat::<C64>::from_fn(r, r, |i, j| {
                    C64::i() * q[(i, j)] + if i == j { C64::new(1.0, 0.0) } else { ZERO }
                });
                let condition = condition_dense(&a);
                if condition > 1e12 {
                    return Err(ResonanceError::NearCut { condition });
                }
                let b = Mat::<C64>::from_fn(r, 1, |i, _| rhs[i]);
                let sol = solve_dense(&a, &b);
                (0..r).map(|i| sol[(i, 0)]).collect()
            }
            InverseStrategy::Neumann(order) => {
                let mut term = rhs.clone();
                let mut acc = rhs.clone();
                for _ in 0..order {
                    term = (0..r).map(|i| -C64::i() * (0..r).map(|j| q[(i, j)] * term[j]).sum::<C64>()).collect();
                    for (a, t) in acc.iter_mut().zip(&term) {
                        *a += t;
                    }
                }
                acc
            }
        };
        let tail: C64 =
            self.reduced.psi0_x.iter().zip(y.iter().zip(&rhs)).map(|(&l, (yv, r0))| (yv - r0) * l).sum();
        Ok(C64::i() * (self.reduced.omega1 - self.reduced.omega) + C64::i() * tail)
    }

    fn q_box(&self, p: C64) -> Mat<C64> {
        let b = &self.band;
        let r = self.reduced.rank();
        let weights: Vec<C64> =
            b.energies.iter().zip(&b.symbols).map(|(&e, &s)| C64::new(s, 0.0) / (p + C64::i() * e)).collect();
        let mut q = Mat::<C64>::zeros(r, r);
        for k in 0..b.len() {
            let w = weights[k];
            for j in 0..r {
                let wv = w * b.vx[(k, j)];
                for i in 0..r {
                    q[(i, j)] += wv * b.zv[(i, k)];
                }
            }
        }
        q
    }

    /// `ε²F(p)` on the box, `Re p > 0`.
    pub fn eval_eps2(&self, p: C64) -> Result<C64, ResonanceError> {
        if !(p.re > 0.0) {
            return Err(ResonanceError::NotInHalfPlane { p });
        }
        self.eps2_f_from_q(&self.q_box(p))
    }

    /// `F(ε, p)` on the box, `Re p > 0`.
    pub fn eval(&self, p: C64) -> Result<C64, ResonanceError> {
        Ok(self.eval_eps2(p)? / (self.eps() * self.eps()))
    }

    /// Boundary value `ε²F(is + 0⁺)` by ladder extrapolation.
    pub fn boundary_eps2(&self, s: f64) -> Result<LadderValue, ResonanceError> {
        let gammas = self.ladder.gammas();
        let samples = gammas.iter().map(|&g| self.eval_eps2(C64::new(g, s))).collect::<Result<Vec<_>, _>>()?;
        Ok(LadderValue::from_samples(gammas, samples))
    }

    /// Boundary value `F(is + 0⁺)`.
    pub fn eval_boundary(&self, s: f64) -> Result<C64, ResonanceError> {
        Ok(self.boundary_eps2(s)?.value / (self.eps() * self.eps()))
    }

    /// `ε²F(p)` continued through the cut, with the free-channel resolvent of the
    /// infinite lattice.
    pub fn continued_eps2(&self, p: C64) -> Result<C64, ResonanceError> {
        let energy = -p.im;
        let width = 1e-3 * self.band_top.min(1.0);
        if (C64::new(energy, p.re)).norm() < width || (C64::new(energy - self.band_top, p.re)).norm() < width {
            return Err(ResonanceError::BranchPoint(format!("p = {p} is at a band threshold")));
        }
        if p.re <= 0.0 && !(energy > self.lattice.plateau.0 && energy < self.lattice.plateau.1) {
            return Err(ResonanceError::OutsideNeighborhood(format!(
                "energy {energy:.4} is outside the continuation plateau ({:.4}, {:.4})",
                self.lattice.plateau.0, self.lattice.plateau.1
            )));
        }
        self.eps2_f_from_q(&self.lattice.q_matrix(p))
    }

    pub fn eval_continued(&self, p: C64) -> Result<C64, ResonanceError> {
        Ok(self.continued_eps2(p)? / (self.eps() * self.eps()))
    }

    /// `Γ₀ = ε² Re F(-iω + 0)` and `γ₀ = ε² Im F(-iω + 0)`.
    pub fn leading_pair(&self) -> Result<(f64, f64), ResonanceError> {
        let v = self.boundary_eps2(-self.omega())?.value;
        Ok((v.re, v.im))
    }
}

/// Result of the shift equation `s + ω + ε²F₂(is) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSolution {
    pub s0: f64,
    /// `δ = s₀ + ω`.
    pub delta: f64,
    pub iterations: usize,
    pub bisection: bool,
    /// Distance between the extreme roots when several were bracketed.
    pub spread: Option<f64>,
    pub roots: usize,
}

/// Solves `δ = ε² G(δ)` by damped fixed-point iteration, falling back to bisection.
pub fn solve_shift(
    mut g: impl FnMut(f64) -> Result<f64, ResonanceError>,
    eps: f64,
    omega: f64,
    damping: f64,
) -> Result<ShiftSolution, ResonanceError> {
    let e2 = eps * eps;
    let tol = 1e-10 * omega.abs().max(f64::MIN_POSITIVE);
    let mut delta = 0.0;
    for it in 1..=200 {
        let next = (1.0 - damping) * delta + damping * e2 * g(delta)?;
        if !next.is_finite() {
            break;
        }
        let step = (next - delta).abs();
        delta = next;
        if step <= tol {
            return Ok(ShiftSolution { s0: -omega + delta, delta, iterations: it, bisection: false, spread: None, roots: 1 });
        }
    }
    // Bracket from a sampled bound on |G|.
    let probe = 0.1 * omega.abs();
    let mut gmax = 0.0f64;
    for k in 0..=16 {
        gmax = gmax.max(g(-probe + 2.0 * probe * k as f64 / 16.0)?.abs());
    }
    let half = (4.0 * gmax * e2).max(tol);
    let h = |g: &mut dyn FnMut(f64) -> Result<f64, ResonanceError>, d: f64| -> Result<f64, ResonanceError> {
        Ok(d - e2 * g(d)?)
    };
    let samples = 64;
    let grid: Vec<f64> = (0..=samples).map(|k| -half + 2.0 * half * k as f64 / samples as f64).collect();
    let values = grid.iter().map(|&d| h(&mut g, d)).collect::<Result<Vec<_>, _>>()?;
    let mut brackets = Vec::new();
    for k in 0..samples {
        if values[k] == 0.0 || values[k] * values[k + 1] < 0.0 {
            brackets.push((grid[k], grid[k + 1], values[k]));
        }
    }
    if brackets.is_empty() {
        return Err(ResonanceError::NoRoot(format!("no sign change on [-{half:.3e}, {half:.3e}]")));
    }
    let mut roots = Vec::new();
    let mut iterations = 0;
    for &(mut a, mut b, mut fa) in &brackets {
        while b - a > tol {
            let m = 0.5 * (a + b);
            let fm = h(&mut g, m)?;
            iterations += 1;
            if fm == 0.0 {
                a = m;
                b = m;
                break;
            }
            if fa * fm < 0.0 {
                b = m;
            } else {
                a = m;
                fa = fm;
            }
        }
        roots.push(0.5 * (a + b));
    }
    let delta = roots.iter().copied().min_by(|x, y| x.abs().total_cmp(&y.abs())).unwrap_or(0.0);
    let spread = if roots.len() > 1 {
        Some(roots.iter().copied().fold(f64::NEG_INFINITY, f64::max) - roots.iter().copied().fold(f64::INFINITY, f64::min))
    } else {
        None
    };
    Ok(ShiftSolution { s0: -omega + delta, delta, iterations, bisection: true, spread, roots: roots.len() })
}

/// Root `s₀` of `s + ω + ε²F₂(is) = 0`, with `F₂ = Im F` at the boundary.
pub fn solve_s0(ev: &FEvaluator, damping: f64) -> Result<ShiftSolution, ResonanceError> {
    let omega = ev.omega();
    solve_shift(|d| Ok(-ev.boundary_eps2(-omega + d)?.value.im / (ev.eps() * ev.eps())), ev.eps(), omega, damping)
}

/// `ε = 0`: the shift equation reduces to `s + ω = 0`.
pub fn unperturbed_shift(omega: f64) -> ShiftSolution {
    ShiftSolution { s0: -omega, delta: 0.0, iterations: 1, bisection: false, spread: None, roots: 1 }
}

/// Width and complex resonance energy at the root `s₀`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WidthResult {
    pub gamma: f64,
    /// `ω_* = -s₀ - iΓ`, so that `a(t) ≈ e^{-iω_* t}`.
    pub omega_star: C64,
    pub ladder_error: f64,
    /// `Γ / ε^{2/(1-η)}` when `η < 1`.
    pub regime_ratio: Option<f64>,
}

pub fn gamma_omega_star(ev: &FEvaluator, s0: f64, eta: Option<f64>) -> Result<WidthResult, ResonanceError> {
    if ev.eps() == 0.0 {
        return Err(ResonanceError::ZeroCoupling);
    }
    let b = ev.boundary_eps2(s0)?;
    let gamma = b.value.re;
    if gamma <= b.error.max(1e-14) {
        return Err(ResonanceError::FgrViolation { gamma });
    }
    let regime_ratio = eta.filter(|&e| e < 1.0).map(|e| gamma / ev.eps().powf(2.0 / (1.0 - e)));
    Ok(WidthResult { gamma, omega_star: C64::new(-s0, -gamma), ladder_error: b.error, regime_ratio })
}

/// Outcome of the argument-principle search.
#[derive(Debug, Clone, PartialEq)]
pub struct PoleResult {
    pub p_z: C64,
    pub winding: f64,
    pub center: C64,
    pub side: f64,
    pub newton_steps: usize,
    pub residual: f64,
}

/// `G₁(p) = p + iω + ε²F(p)` with the continued `F`.
pub fn pole_function(ev: &FEvaluator, p: C64) -> Result<C64, ResonanceError> {
    Ok(p + C64::i() * ev.omega() + ev.continued_eps2(p)?)
}

/// Winding number of `g` around the square with the given center and side, from the
/// trapezoid rule applied to the log-derivative.
pub fn winding_number(
    mut g: impl FnMut(C64) -> Result<C64, ResonanceError>,
    center: C64,
    side: f64,
    samples: usize,
) -> Result<f64, ResonanceError> {
    let per_side = samples.div_ceil(4).max(2);
    let half = side / 2.0;
    let corners = [
        center + C64::new(half, -half),
        center + C64::new(half, half),
        center + C64::new(-half, half),
        center + C64::new(-half, -half),
    ];
    let step = side * 1e-4;
    let mut total = ZERO;
    for c in 0..4 {
        let (a, b) = (corners[c], corners[(c + 1) % 4]);
        let dp = (b - a) / per_side as f64;
        for k in 0..per_side {
            // Trapezoid on a closed contour: equal weights at the nodes.
            let p = a + dp * k as f64;
            let gp = g(p)?;
            let deriv = (g(p + step)? - g(p - step)?) / (2.0 * step);
            total += deriv / gp * dp;
        }
    }
    Ok((total / (2.0 * PI * C64::i())).re)
}

pub fn find_pole(ev: &FEvaluator, gamma0: f64, small_gamma0: f64, samples: usize) -> Result<PoleResult, ResonanceError> {
    let omega = ev.omega();
    let center = C64::new(0.0, -omega - small_gamma0);
    let side = 4.0 * gamma0;
    let winding = winding_number(|p| pole_function(ev, p), center, side, samples)?;
    let count = winding.round();
    let residual = (winding - count).abs();
    if residual > 0.1 {
        return Err(ResonanceError::Quadrature { residual });
    }
    match count as i64 {
        0 => return Err(ResonanceError::NoPole { winding }),
        1 => {}
        k => return Err(ResonanceError::Multiplicity { count: k }),
    }
    let scale = omega.abs().max(1.0);
    let mut p = center;
    let step = side * 1e-5;
    for it in 0..50 {
        let gp = pole_function(ev, p)?;
        if gp.norm() <= 1e-10 * scale {
            return Ok(PoleResult { p_z: p, winding, center, side, newton_steps: it, residual: gp.norm() });
        }
        let deriv = (pole_function(ev, p + step)? - pole_function(ev, p - step)?) / (2.0 * step);
        p -= gp / deriv;
    }
    let residual = pole_function(ev, p)?.norm();
    if residual <= 1e-10 * scale {
        Ok(PoleResult { p_z: p, winding, center, side, newton_steps: 50, residual })
    } else {
        Err(ResonanceError::Newton { residual, iterations: 50 })
    }
}

/// Residuals of the second-order expansion `ω_* ≈ λ0 + ε⟨ψ0,Wψ0⟩ ± Λ - iΓ`, divided by `ε²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpansionResidual {
    /// With `+Λ`.
    pub plus: f64,
    /// With `-Λ`, the Rayleigh-Schrödinger sign.
    pub minus: f64,
}

pub fn expansion_residual(omega_star: C64, omega_first: f64, lambda: f64, gamma: f64, eps: f64) -> ExpansionResidual {
    let e2 = eps * eps;
    let plus = (omega_star - C64::new(omega_first + lambda, -gamma)).norm() / e2;
    let minus = (omega_star - C64::new(omega_first - lambda, -gamma)).norm() / e2;
    ExpansionResidual { plus, minus }
}

/// Everything extracted about the resonance at one coupling strength.
#[derive(Debug, Clone, PartialEq)]
pub struct ResonanceReport {
    pub eps: f64,
    pub omega: f64,
    pub omega1: f64,
    pub s0: f64,
    pub delta: f64,
    pub gamma: f64,
    pub omega_star: C64,
    /// Golden-rule width from the fgr module.
    pub gamma_fgr: f64,
    pub gamma0: f64,
    pub small_gamma0: f64,
    pub lambda_shift: f64,
    pub pole: Option<PoleResult>,
    pub gamma_relative_gap: f64,
    pub pole_relative_gap: Option<f64>,
    pub expansion: ExpansionResidual,
    pub cutoff_product_norm: f64,
    pub shift: ShiftSolution,
}

/// Default ladder for boundary values of `F` on the given box.
pub fn default_ladder(energy: f64, half_width: f64, multiple: f64, rungs: usize) -> Result<Ladder, ResonanceError> {
    let _ = level_spacing(energy, half_width);
    Ok(Ladder::for_box(energy, half_width, multiple, rungs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fgr::gamma_fgr;
    use crate::model::{Coupling, CutoffKind, CutoffSpec, Grid};
    use crate::spectral::Cutoffs;
    use std::sync::OnceLock;

    fn cutoffs() -> Cutoffs {
        Cutoffs::new(CutoffSpec::new(0.5, 1.5, 0.05, CutoffKind::SmoothBump).unwrap(), 0.8, 0.025).unwrap()
    }

    fn setup(half_width: f64, points: usize, eps: f64) -> (TwoChannel, SpectralModel, ReducedCoupling) {
        let grid = Grid::new(half_width, points).unwrap();
        let m = TwoChannel::build(&grid, Coupling::default(), eps, 1e-10, 1e-8).unwrap();
        let s = SpectralModel::build(&m, cutoffs(), 0).unwrap();
        let full = FullSpectrum::compute(&m).unwrap();
        let r = ReducedCoupling::build(&m, &s, &full).unwrap();
        (m, s, r)
    }

    fn small(eps: f64) -> (TwoChannel, SpectralModel, ReducedCoupling) {
        setup(16.0, 128, eps)
    }

    struct Large {
        model: TwoChannel,
        spectral: SpectralModel,
        ev: FEvaluator,
    }

    fn large() -> &'static Large {
        static CELL: OnceLock<Large> = OnceLock::new();
        CELL.get_or_init(|| {
            let (model, spectral, r) = setup(128.0, 1024, 0.1);
            let ladder = Ladder::for_box(1.0, 128.0, 16.0, 4).unwrap();
            let ev = FEvaluator::new(&model, &spectral, r, ladder, InverseStrategy::Direct).unwrap();
            Large { model, spectral, ev }
        })
    }

    #[test]
    fn unperturbed_reduction_is_trivial() {
        let (_, s, r) = small(0.0);
        assert!(r.cutoff_product_norm < 1e-12);
        let psi = to_complex(&s.psi0);
        let d = r.dressed_state();
        assert!(psi.iter().zip(&d).all(|(a, b)| (a - b).norm() < 1e-10));
        let v: Vec<C64> = (0..psi.len()).map(|i| C64::new((i as f64).sin(), 0.0)).collect();
        let bv = r.b_apply(&v);
        assert!(v.iter().zip(&bv).all(|(a, b)| (a - b).norm() < 1e-12));
        assert_eq!(r.omega1, r.lambda0);
    }

    #[test]
    fn low_rank_forms_match_dense_definitions() {
        let (m, s, r) = small(0.1);
        let full = FullSpectrum::compute(&m).unwrap();
        let dim = full.dim();
        let cut = &s.cutoffs;
        let g = Mat::from_fn(dim, dim, |i, j| {
            (0..dim).map(|k| full.vectors[(i, k)] * cut.g_window(full.values[k]) * full.vectors[(j, k)]).sum::<f64>()
        });
        let gi = s.function_matrix(|e| cut.g_isolate(e));
        let a = Mat::<f64>::from_fn(dim, dim, |i, j| if i == j { 1.0 } else { 0.0 }) - &g * &gi;
        let a_c = Mat::<C64>::from_fn(dim, dim, |i, j| C64::new(a[(i, j)], 0.0));
        let id = Mat::<C64>::from_fn(dim, dim, |i, j| if i == j { C64::new(1.0, 0.0) } else { ZERO });
        let b = solve_dense(&a_c, &id);
        let gbar = Mat::<f64>::from_fn(dim, dim, |i, j| if i == j { 1.0 } else { 0.0 }) - &g;
        let gt = r.gtilde_matrix();
        let mut worst = 0.0f64;
        for i in 0..dim {
            for j in 0..dim {
                let bg: C64 = (0..dim).map(|k| b[(i, k)] * gbar[(k, j)]).sum();
                let expect = if i == j { 1.0 } else { 0.0 } - bg.re;
                worst = worst.max((expect - gt[(i, j)]).abs());
            }
        }
        assert!(worst < 1e-10, "g̃ mismatch {worst}");
        let bn = crate::spectral::operator_norm(dim, |v| Ok(r.b_apply(v)), |v| {
            Ok((0..dim).map(|j| (0..dim).map(|i| b[(i, j)] * v[i]).sum()).collect())
        })
        .unwrap();
        assert!(bn <= 2.0);
    }

    #[test]
    fn dressing_correction_is_at_most_first_order() {
        let mut gaps = Vec::new();
        for eps in [0.1, 0.05] {
            let (m, s, r) = small(eps);
            let full = FullSpectrum::compute(&m).unwrap();
            let dim = full.dim();
            let coef: Vec<f64> = (0..dim).map(|k| (0..dim).map(|i| full.vectors[(i, k)] * s.psi0[i]).sum()).collect();
            let gpsi: Vec<f64> = (0..dim)
                .map(|i| (0..dim).map(|k| full.vectors[(i, k)] * coef[k] * s.cutoffs.g_window(full.values[k])).sum())
                .collect();
            let gt = r.dressed_state();
            gaps.push(gt.iter().zip(&gpsi).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt());
        }
        assert!(gaps[1] / gaps[0] < 0.6, "ratio {}", gaps[1] / gaps[0]);
    }

    fn evaluator(eps: f64) -> FEvaluator {
        let (m, s, r) = small(eps);
        FEvaluator::new(&m, &s, r, Ladder::new(0.4, 4).unwrap(), InverseStrategy::Direct).unwrap()
    }

    #[test]
    fn half_plane_values_are_analytic_and_decay() {
        let ev = evaluator(0.1);
        let p = C64::new(1.0, 1.0);
        let h = 1e-4;
        let dx = (ev.eval(p + h).unwrap() - ev.eval(p - h).unwrap()) / (2.0 * h);
        let dy = (ev.eval(p + C64::new(0.0, h)).unwrap() - ev.eval(p - C64::new(0.0, h)).unwrap()) / C64::new(0.0, 2.0 * h);
        assert!((dx - dy).norm() <= 1e-6 * dx.norm().max(1.0));
        // reflection through the imaginary axis
        let q = C64::new(0.3, -0.7);
        let left = ev.eps2_f_from_q(&ev.q_box(-q.conj())).unwrap();
        assert!((left + ev.eval_eps2(q).unwrap().conj()).norm() < 1e-12);
        // F tends to i(ω₁ - ω)/ε² and the remainder decays like 1/|p|
        let limit = C64::i() * (ev.reduced.omega1 - ev.omega()) / (ev.eps() * ev.eps());
        let f1 = (ev.eval(C64::new(1e2, 0.0)).unwrap() - limit).norm() * 1e2;
        let f2 = (ev.eval(C64::new(1e3, 0.0)).unwrap() - limit).norm() * 1e3;
        assert!(f2 <= 1.1 * f1, "{f1} {f2}");
        assert!(matches!(ev.eval(C64::new(-0.1, 1.0)), Err(ResonanceError::NotInHalfPlane { .. })));
    }

    #[test]
    fn neumann_series_converges_to_direct_solve() {
        let mut ev = evaluator(0.1);
        let p = C64::new(0.2, -1.0);
        let direct = ev.eval(p).unwrap();
        let mut errors = Vec::new();
        for k in [1, 2, 3, 4] {
            ev.strategy = InverseStrategy::Neumann(k);
            errors.push((ev.eval(p).unwrap() - direct).norm());
        }
        assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
    }

    #[test]
    fn lattice_column_matches_brillouin_zone_sum() {
        let ev = &large().ev;
        let lat = &ev.lattice;
        let cut = &large().spectral.cutoffs;
        let p = C64::new(0.5, -1.0);
        let mut w: Vec<C64> =
            lat.energies.iter().map(|&e| C64::new(cut.continuum_symbol(e), 0.0) / (p + C64::i() * e)).collect();
        lat.ifft.process(&mut w);
        let k = w.len() as f64;
        let col = lat.column(p);
        let worst = col.iter().zip(&w).map(|(a, b)| (a - b / k).norm()).fold(0.0, f64::max);
        assert!(worst < 1e-10, "{worst}");
    }

    #[test]
    fn continued_values_agree_off_the_cut_and_cross_it_continuously() {
        let ev = &large().ev;
        // the box and the infinite lattice differ by the slowly decaying tail of s(T)
        for p in [C64::new(1.0, 0.5), C64::new(2.0, -1.0)] {
            let a = ev.eval_continued(p).unwrap();
            let b = ev.eval(p).unwrap();
            assert!((a - b).norm() <= 1e-2 * b.norm(), "{a} vs {b}");
        }
        let s = -ev.omega();
        let above = ev.eval_continued(C64::new(1e-6, s)).unwrap();
        let below = ev.eval_continued(C64::new(-1e-6, s)).unwrap();
        assert!((above - below).norm() < 1e-4 * above.norm());
        assert!(matches!(ev.eval_continued(C64::new(-0.01, -0.1)), Err(ResonanceError::OutsideNeighborhood(_))));
        assert!(matches!(ev.eval_continued(C64::new(0.0, 0.0)), Err(ResonanceError::BranchPoint(_))));
    }

    #[test]
    fn boundary_width_matches_golden_rule() {
        let l = large();
        let ev = &l.ev;
        let (gamma0, _) = ev.leading_pair().unwrap();
        let (fgr, _) = gamma_fgr(0.1, l.spectral.lambda0, &l.model, &l.spectral, &ev.ladder).unwrap();
        assert!((gamma0 - fgr).abs() <= 0.1 * fgr, "{gamma0} vs {fgr}");
        let shift = solve_s0(ev, 0.5).unwrap();
        let w = gamma_omega_star(ev, shift.s0, None).unwrap();
        assert!((w.gamma - gamma0).abs() <= 0.1 * gamma0);
        assert_eq!(w.omega_star.re, -shift.s0);
    }

    #[test]
    fn pole_sits_at_the_width_and_shift() {
        let ev = &large().ev;
        let (gamma0, small_gamma0) = ev.leading_pair().unwrap();
        let pole = find_pole(ev, gamma0, small_gamma0, 256).unwrap();
        let again = find_pole(ev, gamma0, small_gamma0, 512).unwrap();
        assert_eq!(pole.winding.round(), again.winding.round());
        let shift = solve_s0(ev, 0.5).unwrap();
        let w = gamma_omega_star(ev, shift.s0, None).unwrap();
        assert!((pole.p_z.re + w.gamma).abs() <= 0.05 * w.gamma, "{} vs {}", pole.p_z, w.gamma);
        assert!((pole.p_z.im - shift.s0).abs() <= w.gamma, "{} vs {}", pole.p_z, shift.s0);
    }

    #[test]
    fn shift_equation_closed_forms() {
        let sol = solve_shift(|_| Ok(1.0), 0.1, 1.0, 0.5).unwrap();
        assert!((sol.delta - 0.01).abs() < 1e-10);
        let zero = unperturbed_shift(0.996);
        assert_eq!(zero.s0, -0.996);
        assert_eq!(zero.iterations, 1);
    }
}
