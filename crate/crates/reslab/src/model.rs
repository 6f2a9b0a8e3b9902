//! Discretized two-channel Hamiltonian, smooth spectral cutoffs and spatial weights.
//!
//! Two-channel vectors are stored channel-major: the free channel occupies
//! indices `0..n`, the oscillator channel `n..2n`.

use crate::C64;
use faer::Mat;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("oscillator truncation {value:.3e} exceeds tolerance {tol:.1e}; enlarge the box")]
    Truncation { value: f64, tol: f64 },
    #[error("coupling not localized: edge/peak ratio {ratio:.3e} exceeds {tol:.1e}")]
    Localization { ratio: f64, tol: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("operator is not symmetric: residual {0:.3e}")]
    NotHermitian(f64),
    #[error("cutoff supports overlap: {0}")]
    CutoffOverlap(String),
}

/// Uniform cell-centred mesh on `[-L, L]` with Dirichlet walls at `±L`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    half_width: f64,
    spacing: f64,
    nodes: Vec<f64>,
}

impl Grid {
    pub fn new(half_width: f64, points: usize) -> Result<Self, ModelError> {
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(ModelError::InvalidConfig(format!(
                "half-width must be positive, got {half_width}"
            )));
        }
        if points < 4 || points % 2 != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "point count must be even and at least 4, got {points}"
            )));
        }
        let spacing = 2.0 * half_width / points as f64;
        let mid = (points as f64 - 1.0) / 2.0;
        // Built around the midpoint so that x_i = -x_{N-1-i} exactly.
        let nodes = (0..points).map(|i| (i as f64 - mid) * spacing).collect();
        Ok(Self { half_width, spacing, nodes })
    }

    /// Same spacing, wider box. The point count is rounded to an even number.
    pub fn widened(&self, half_width: f64) -> Result<Self, ModelError> {
        let mut points = (2.0 * half_width / self.spacing).round() as usize;
        points += points % 2;
        Self::new(points as f64 * self.spacing / 2.0, points)
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn points(&self) -> usize {
        self.nodes.len()
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }
}

/// Real symmetric tridiagonal matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymTridiag {
    pub diag: Vec<f64>,
    /// `off[i]` couples `i` and `i + 1`.
    pub off: Vec<f64>,
}

impl SymTridiag {
    pub fn new(diag: Vec<f64>, off: Vec<f64>) -> Result<Self, ModelError> {
        if diag.is_empty() || off.len() + 1 != diag.len() {
            return Err(ModelError::Dimension { expected: diag.len().saturating_sub(1), got: off.len() });
        }
        Ok(Self { diag, off })
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// `out += self * v`.
    pub fn apply_add(&self, v: &[C64], out: &mut [C64]) {
        let n = self.len();
        for i in 0..n {
            let mut acc = v[i] * self.diag[i];
            if i > 0 {
                acc += v[i - 1] * self.off[i - 1];
            }
            if i + 1 < n {
                acc += v[i + 1] * self.off[i];
            }
            out[i] += acc;
        }
    }

    pub fn apply(&self, v: &[C64]) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); self.len()];
        self.apply_add(v, &mut out);
        out
    }

    pub fn to_dense(&self) -> Mat<f64> {
        let n = self.len();
        Mat::from_fn(n, n, |i, j| {
            if i == j {
                self.diag[i]
            } else if i + 1 == j {
                self.off[i]
            } else if j + 1 == i {
                self.off[j]
            } else {
                0.0
            }
        })
    }

    /// Adds a diagonal potential.
    pub fn with_potential(&self, potential: &[f64]) -> Result<Self, ModelError> {
        if potential.len() != self.len() {
            return Err(ModelError::Dimension { expected: self.len(), got: potential.len() });
        }
        let diag = self.diag.iter().zip(potential).map(|(d, v)| d + v).collect();
        Ok(Self { diag, off: self.off.clone() })
    }
}

/// Dirichlet second-difference `-d²/dx²` on the grid.
pub fn free_laplacian(grid: &Grid) -> SymTridiag {
    let n = grid.points();
    let inv_h2 = 1.0 / (grid.spacing() * grid.spacing());
    SymTridiag { diag: vec![2.0 * inv_h2; n], off: vec![-inv_h2; n - 1] }
}

/// `-d²/dx² + x²`. Fails when the box clips the confined ground state.
pub fn oscillator(grid: &Grid, truncation_tol: f64) -> Result<SymTridiag, ModelError> {
    let l = grid.half_width();
    let tail = (-l * l / 2.0).exp();
    if tail > truncation_tol {
        return Err(ModelError::Truncation { value: tail, tol: truncation_tol });
    }
    let potential: Vec<f64> = grid.nodes().iter().map(|x| x * x).collect();
    free_laplacian(grid).with_potential(&potential)
}

/// Gaussian coupling profile `amplitude * exp(-(x/width)²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coupling {
    pub amplitude: f64,
    pub width: f64,
}

impl Default for Coupling {
    fn default() -> Self {
        Self { amplitude: 1.0, width: 1.0 }
    }
}

impl Coupling {
    pub fn value(&self, x: f64) -> f64 {
        let u = x / self.width;
        self.amplitude * (-u * u).exp()
    }

    pub fn sample(&self, grid: &Grid, localization_tol: f64) -> Result<Vec<f64>, ModelError> {
        if !(self.width > 0.0) {
            return Err(ModelError::InvalidConfig(format!("coupling width must be positive, got {}", self.width)));
        }
        let values: Vec<f64> = grid.nodes().iter().map(|&x| self.value(x)).collect();
        let peak = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            let edge = self.value(grid.half_width()).abs();
            let ratio = edge / peak;
            if ratio > localization_tol {
                return Err(ModelError::Localization { ratio, tol: localization_tol });
            }
        }
        Ok(values)
    }
}

/// One `n × n` block of a two-channel operator.
#[derive(Debug, Clone)]
pub enum Block {
    Zero,
    Diagonal(Vec<f64>),
    Tridiagonal(SymTridiag),
    Dense(Mat<f64>),
}

impl Block {
    fn apply_add(&self, v: &[C64], out: &mut [C64]) {
        match self {
            Block::Zero => {}
            Block::Diagonal(d) => {
                for ((o, x), w) in out.iter_mut().zip(v).zip(d) {
                    *o += x * w;
                }
            }
            Block::Tridiagonal(t) => t.apply_add(v, out),
            Block::Dense(m) => {
                for j in 0..m.ncols() {
                    let vj = v[j];
                    if vj == C64::new(0.0, 0.0) {
                        continue;
                    }
                    for i in 0..m.nrows() {
                        out[i] += vj * m[(i, j)];
                    }
                }
            }
        }
    }

    fn entry(&self, i: usize, j: usize) -> f64 {
        match self {
            Block::Zero => 0.0,
            Block::Diagonal(d) => {
                if i == j {
                    d[i]
                } else {
                    0.0
                }
            }
            Block::Tridiagonal(t) => {
                if i == j {
                    t.diag[i]
                } else if i + 1 == j {
                    t.off[i]
                } else if j + 1 == i {
                    t.off[j]
                } else {
                    0.0
                }
            }
            Block::Dense(m) => m[(i, j)],
        }
    }

    fn scaled(&self, s: f64) -> Block {
        match self {
            Block::Zero => Block::Zero,
            Block::Diagonal(d) => Block::Diagonal(d.iter().map(|x| x * s).collect()),
            Block::Tridiagonal(t) => Block::Tridiagonal(SymTridiag {
                diag: t.diag.iter().map(|x| x * s).collect(),
                off: t.off.iter().map(|x| x * s).collect(),
            }),
            Block::Dense(m) => Block::Dense(Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * s)),
        }
    }

    fn is_banded(&self) -> bool {
        !matches!(self, Block::Dense(_))
    }
}

/// 2 × 2 block operator on two-channel vectors.
#[derive(Debug, Clone)]
pub struct BlockOperator {
    n: usize,
    blocks: [[Block; 2]; 2],
}

impl BlockOperator {
    pub fn new(n: usize, blocks: [[Block; 2]; 2]) -> Self {
        Self { n, blocks }
    }

    /// Points per channel.
    pub fn channel_len(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        2 * self.n
    }

    pub fn block(&self, row: usize, col: usize) -> &Block {
        &self.blocks[row][col]
    }

    pub fn apply(&self, v: &[C64]) -> Vec<C64> {
        let n = self.n;
        let mut out = vec![C64::new(0.0, 0.0); 2 * n];
        let (o1, o2) = out.split_at_mut(n);
        let (v1, v2) = v.split_at(n);
        self.blocks[0][0].apply_add(v1, o1);
        self.blocks[0][1].apply_add(v2, o1);
        self.blocks[1][0].apply_add(v1, o2);
        self.blocks[1][1].apply_add(v2, o2);
        out
    }

    /// Entry in channel-major indexing.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        let n = self.n;
        self.blocks[i / n][j / n].entry(i % n, j % n)
    }

    pub fn to_dense(&self) -> Mat<f64> {
        let d = self.dim();
        Mat::from_fn(d, d, |i, j| self.entry(i, j))
    }

    /// Largest `|A_ij - A_ji|` over the stored structure.
    pub fn symmetry_residual(&self) -> f64 {
        let n = self.n;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in i.saturating_sub(1)..(i + 2).min(n) {
                worst = worst.max((self.blocks[0][1].entry(i, j) - self.blocks[1][0].entry(j, i)).abs());
                worst = worst.max((self.blocks[0][0].entry(i, j) - self.blocks[0][0].entry(j, i)).abs());
                worst = worst.max((self.blocks[1][1].entry(i, j) - self.blocks[1][1].entry(j, i)).abs());
            }
        }
        if let (Block::Dense(a), Block::Dense(b)) = (&self.blocks[0][1], &self.blocks[1][0]) {
            for i in 0..n {
                for j in 0..n {
                    worst = worst.max((a[(i, j)] - b[(j, i)]).abs());
                }
            }
        }
        worst
    }

    /// Whether the interleaved ordering `2i + channel` is pentadiagonal.
    pub fn is_banded(&self) -> bool {
        self.blocks.iter().flatten().all(Block::is_banded)
    }

    /// Entry in interleaved indexing, `index = 2 * site + channel`.
    pub fn interleaved_entry(&self, i: usize, j: usize) -> f64 {
        self.blocks[i % 2][j % 2].entry(i / 2, j / 2)
    }

    pub fn scaled(&self, s: f64) -> Self {
        let b = &self.blocks;
        Self {
            n: self.n,
            blocks: [[b[0][0].scaled(s), b[0][1].scaled(s)], [b[1][0].scaled(s), b[1][1].scaled(s)]],
        }
    }
}

/// Channel-major to interleaved.
pub fn interleave(v: &[C64]) -> Vec<C64> {
    let n = v.len() / 2;
    let mut out = Vec::with_capacity(v.len());
    for i in 0..n {
        out.push(v[i]);
        out.push(v[n + i]);
    }
    out
}

/// Interleaved to channel-major.
pub fn deinterleave(v: &[C64]) -> Vec<C64> {
    let n = v.len() / 2;
    let mut out = vec![C64::new(0.0, 0.0); v.len()];
    for i in 0..n {
        out[i] = v[2 * i];
        out[n + i] = v[2 * i + 1];
    }
    out
}

/// The assembled model: `H = H0 + eps * W`.
#[derive(Debug, Clone)]
pub struct TwoChannel {
    grid: Grid,
    free: SymTridiag,
    oscillator: SymTridiag,
    coupling: Vec<f64>,
    eps: f64,
    h0: BlockOperator,
    w: BlockOperator,
    h: BlockOperator,
}

impl TwoChannel {
    pub fn assemble(
        grid: &Grid,
        free: SymTridiag,
        oscillator: SymTridiag,
        coupling: Vec<f64>,
        eps: f64,
    ) -> Result<Self, ModelError> {
        let n = grid.points();
        for len in [free.len(), oscillator.len(), coupling.len()] {
            if len != n {
                return Err(ModelError::Dimension { expected: n, got: len });
            }
        }
        if !eps.is_finite() || eps < 0.0 {
            return Err(ModelError::InvalidConfig(format!("coupling strength must be non-negative, got {eps}")));
        }
        let h0 = BlockOperator::new(
            n,
            [[Block::Tridiagonal(free.clone()), Block::Zero], [Block::Zero, Block::Tridiagonal(oscillator.clone())]],
        );
        let w = BlockOperator::new(
            n,
            [[Block::Zero, Block::Diagonal(coupling.clone())], [Block::Diagonal(coupling.clone()), Block::Zero]],
        );
        let h = Self::combine(&free, &oscillator, &coupling, eps, n);
        for op in [&h0, &w, &h] {
            let r = op.symmetry_residual();
            if r > 1e-12 {
                return Err(ModelError::NotHermitian(r));
            }
        }
        Ok(Self { grid: grid.clone(), free, oscillator, coupling, eps, h0, w, h })
    }

    /// Standard construction: free Laplacian, oscillator and a Gaussian coupling.
    pub fn build(
        grid: &Grid,
        coupling: Coupling,
        eps: f64,
        truncation_tol: f64,
        localization_tol: f64,
    ) -> Result<Self, ModelError> {
        let free = free_laplacian(grid);
        let osc = oscillator(grid, truncation_tol)?;
        let w = coupling.sample(grid, localization_tol)?;
        Self::assemble(grid, free, osc, w, eps)
    }

    fn combine(free: &SymTridiag, osc: &SymTridiag, w: &[f64], eps: f64, n: usize) -> BlockOperator {
        let ew: Vec<f64> = w.iter().map(|x| eps * x).collect();
        BlockOperator::new(
            n,
            [
                [Block::Tridiagonal(free.clone()), Block::Diagonal(ew.clone())],
                [Block::Diagonal(ew), Block::Tridiagonal(osc.clone())],
            ],
        )
    }

    /// Same model at a different coupling strength.
    pub fn with_eps(&self, eps: f64) -> Result<Self, ModelError> {
        Self::assemble(&self.grid, self.free.clone(), self.oscillator.clone(), self.coupling.clone(), eps)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn channel_len(&self) -> usize {
        self.grid.points()
    }

    pub fn free(&self) -> &SymTridiag {
        &self.free
    }

    pub fn oscillator(&self) -> &SymTridiag {
        &self.oscillator
    }

    /// Coupling profile `W̃(x)`, unscaled by `eps`.
    pub fn coupling(&self) -> &[f64] {
        &self.coupling
    }

    pub fn h0(&self) -> &BlockOperator {
        &self.h0
    }

    /// Unscaled coupling operator.
    pub fn w(&self) -> &BlockOperator {
        &self.w
    }

    pub fn h(&self) -> &BlockOperator {
        &self.h
    }
}

/// `s(x)/(s(x)+s(1-x))` with `s(x) = exp(-1/x)`: zero for `x ≤ 0`, one for `x ≥ 1`, smooth.
pub fn smooth_step(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let s = |u: f64| (-1.0 / u).exp();
    let a = s(x);
    a / (a + s(1.0 - x))
}

/// One on `[lo, hi]`, zero outside `(lo - rise, hi + fall)`.
pub fn bump(lo: f64, hi: f64, rise: f64, fall: f64, x: f64) -> f64 {
    smooth_step((x - (lo - rise)) / rise) * smooth_step(((hi + fall) - x) / fall)
}

/// Analytic-in-the-interior window `exp(-1/(x-a)) exp(1/(x-b))` on `(a, b)`, zero elsewhere.
pub fn analytic_window(a: f64, b: f64, x: f64) -> f64 {
    if x <= a || x >= b {
        0.0
    } else {
        (-1.0 / (x - a)).exp() * (1.0 / (x - b)).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CutoffKind {
    SmoothBump,
    AnalyticWindow,
}

/// Cutoff `g_Δ` for the window `Δ = [a, b]`, optionally paired with far-field intervals
/// whose supports must stay disjoint from it.
#[derive(Debug, Clone, PartialEq)]
pub struct CutoffSpec {
    pub a: f64,
    pub b: f64,
    pub margin: f64,
    pub kind: CutoffKind,
    far_field: Vec<(f64, f64)>,
}

impl CutoffSpec {
    pub fn new(a: f64, b: f64, margin: f64, kind: CutoffKind) -> Result<Self, ModelError> {
        if !(a < b) || !(margin > 0.0) {
            return Err(ModelError::InvalidConfig(format!(
                "cutoff needs a < b and a positive margin, got [{a}, {b}] margin {margin}"
            )));
        }
        Ok(Self { a, b, margin, kind, far_field: Vec::new() })
    }

    /// Registers an interval that must not meet the support of this cutoff.
    pub fn with_far_field(mut self, lo: f64, hi: f64) -> Result<Self, ModelError> {
        let (slo, shi) = self.support();
        if lo < shi && hi > slo {
            return Err(ModelError::CutoffOverlap(format!(
                "[{lo}, {hi}] meets the cutoff support [{slo}, {shi}]"
            )));
        }
        self.far_field.push((lo, hi));
        Ok(self)
    }

    /// Closed support.
    pub fn support(&self) -> (f64, f64) {
        match self.kind {
            CutoffKind::SmoothBump => (self.a - self.margin, self.b + self.margin),
            CutoffKind::AnalyticWindow => (self.a, self.b),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self.kind {
            CutoffKind::SmoothBump => bump(self.a, self.b, self.margin, self.margin, x),
            CutoffKind::AnalyticWindow => analytic_window(self.a, self.b, x),
        }
    }
}

/// Power of the polynomial weight `<x>^σ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightSpec {
    pub sigma: f64,
}

/// `<x> = sqrt(1 + x²)`.
pub fn japanese_bracket(x: f64) -> f64 {
    (1.0 + x * x).sqrt()
}

/// Multiplies both channels pointwise by `<x>^(power)`.
pub fn apply_weight(grid: &Grid, power: f64, v: &mut [C64]) {
    let n = grid.points();
    for (i, &x) in grid.nodes().iter().enumerate() {
        let w = japanese_bracket(x).powf(power);
        v[i] *= w;
        if v.len() == 2 * n {
            v[n + i] *= w;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid {
        Grid::new(8.0, 64).unwrap()
    }

    #[test]
    fn nodes_are_symmetric_and_cell_centred() {
        let g = grid();
        let x = g.nodes();
        assert!((x[0] + 8.0 - 0.125).abs() < 1e-14);
        for i in 0..x.len() {
            assert_eq!(x[i], -x[x.len() - 1 - i]);
        }
        assert!(Grid::new(8.0, 63).is_err());
        assert!(Grid::new(-1.0, 64).is_err());
    }

    #[test]
    fn widened_grid_keeps_spacing() {
        let g = grid();
        let w = g.widened(100.0).unwrap();
        assert!((w.spacing() - g.spacing()).abs() < 1e-15);
        assert_eq!(w.points(), 800);
    }

    #[test]
    fn oscillator_rejects_small_box() {
        let g = Grid::new(3.0, 24).unwrap();
        assert!(matches!(oscillator(&g, 1e-10), Err(ModelError::Truncation { .. })));
    }

    #[test]
    fn coupling_must_be_localized() {
        let g = Grid::new(3.0, 24).unwrap();
        let wide = Coupling { amplitude: 1.0, width: 3.0 };
        assert!(matches!(wide.sample(&g, 1e-8), Err(ModelError::Localization { .. })));
    }

    #[test]
    fn hamiltonian_is_symmetric_and_blocks_consistent() {
        let m = TwoChannel::build(&grid(), Coupling::default(), 0.1, 1e-10, 1e-8).unwrap();
        let h = m.h().to_dense();
        let h0 = m.h0().to_dense();
        let w = m.w().to_dense();
        for i in 0..h.nrows() {
            for j in 0..h.ncols() {
                assert_eq!(h[(i, j)], h[(j, i)]);
                assert!((h[(i, j)] - h0[(i, j)] - 0.1 * w[(i, j)]).abs() < 1e-14);
            }
        }
        assert!(m.h().is_banded());
    }

    #[test]
    fn interleaved_entries_match_channel_major() {
        let m = TwoChannel::build(&grid(), Coupling::default(), 0.3, 1e-10, 1e-8).unwrap();
        let n = m.channel_len();
        let op = m.h();
        for i in 0..2 * n {
            for j in 0..2 * n {
                let (ci, cj) = ((i % 2) * n + i / 2, (j % 2) * n + j / 2);
                assert_eq!(op.interleaved_entry(i, j), op.entry(ci, cj));
                if i.abs_diff(j) > 2 {
                    assert_eq!(op.interleaved_entry(i, j), 0.0);
                }
            }
        }
        let v: Vec<C64> = (0..2 * n).map(|k| C64::new(k as f64, 1.0)).collect();
        assert_eq!(deinterleave(&interleave(&v)), v);
    }

    #[test]
    fn cutoff_is_one_on_window_and_zero_off_support() {
        let g = CutoffSpec::new(0.5, 1.5, 0.05, CutoffKind::SmoothBump).unwrap();
        assert_eq!(g.eval(0.5), 1.0);
        assert_eq!(g.eval(1.0), 1.0);
        assert_eq!(g.eval(0.45), 0.0);
        assert_eq!(g.eval(1.56), 0.0);
        assert!(g.eval(0.47) > 0.0 && g.eval(0.47) < 1.0);
        assert!(g.clone().with_far_field(1.52, 3.0).is_err());
        assert!(g.with_far_field(1.6, 3.0).is_ok());
    }

    #[test]
    fn analytic_window_vanishes_outside() {
        assert_eq!(analytic_window(0.5, 1.5, 0.5), 0.0);
        assert_eq!(analytic_window(0.5, 1.5, 2.0), 0.0);
        assert!(analytic_window(0.5, 1.5, 1.0) > 0.0);
    }

    #[test]
    fn weights_invert() {
        let g = grid();
        let v0: Vec<C64> = (0..2 * g.points()).map(|k| C64::new((k as f64).sin(), 0.5)).collect();
        let mut v = v0.clone();
        apply_weight(&g, 2.0, &mut v);
        apply_weight(&g, -2.0, &mut v);
        for (a, b) in v.iter().zip(&v0) {
            assert!((a - b).norm() < 1e-12);
        }
    }
}
