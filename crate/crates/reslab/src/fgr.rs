//! Golden-rule width and level shift of the embedded eigenvalue.
//!
//! Boundary values `⟨f, (H0 - λ - i0)^{-1} f⟩` are obtained from shifted solves at a
//! ladder of distances `γ` above the real axis, extrapolated to `γ = 0`. The ladder
//! must stay above the box level spacing: below it the discrete spectrum shows
//! through and the sequence stops converging.

use crate::linalg::{dot_real, to_complex, ZERO};
use crate::model::TwoChannel;
use crate::spectral::{resolvent_solve_block, SpectralError, SpectralModel};
use crate::{extrapolate_to_zero, C64};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FgrError {
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("energy {energy:.6} is within {distance:.3e} of a threshold (need {needed:.3e})")]
    NearThreshold { energy: f64, distance: f64, needed: f64 },
    #[error("ladder {0}")]
    NonMonotone(String),
    #[error("invalid ladder: {0}")]
    InvalidLadder(String),
    #[error("top rung {gamma0:.3e} is below 5 level spacings ({spacing:.3e}); enlarge the box")]
    BelowSpacing { gamma0: f64, spacing: f64 },
}

/// Spacing of free-channel levels near `energy` in a box of half-width `half_width`.
pub fn level_spacing(energy: f64, half_width: f64) -> f64 {
    PI * energy.max(0.0).sqrt() / half_width
}

/// Geometric ladder `γ_k = γ0 2^{-k}`, `k = 0..rungs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ladder {
    pub gamma0: f64,
    pub rungs: usize,
}

impl Ladder {
    pub fn new(gamma0: f64, rungs: usize) -> Result<Self, FgrError> {
        if !(gamma0 > 0.0) || rungs < 2 {
            return Err(FgrError::InvalidLadder(format!("need gamma0 > 0 and at least two rungs, got {gamma0}, {rungs}")));
        }
        Ok(Self { gamma0, rungs })
    }

    /// Ladder whose top rung is `multiple` level spacings at `energy`.
    pub fn for_box(energy: f64, half_width: f64, multiple: f64, rungs: usize) -> Result<Self, FgrError> {
        Self::new(multiple * level_spacing(energy, half_width), rungs)
    }

    pub fn gammas(&self) -> Vec<f64> {
        (0..self.rungs).map(|k| self.gamma0 / f64::from(1u32 << k)).collect()
    }

    pub fn smallest(&self) -> f64 {
        self.gamma0 / f64::from(1u32 << (self.rungs - 1))
    }
}

/// A boundary value extrapolated from a ladder.
#[derive(Debug, Clone, PartialEq)]
pub struct LadderValue {
    pub value: C64,
    /// Change when the widest rung is dropped.
    pub error: f64,
    pub gammas: Vec<f64>,
    pub samples: Vec<C64>,
}

/// Which part of the samples the convergence check looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Re,
    Im,
}

impl LadderValue {
    pub fn from_samples(gammas: Vec<f64>, samples: Vec<C64>) -> Self {
        let (value, error) = extrapolate_to_zero(&gammas, &samples);
        Self { value, error, gammas, samples }
    }

    /// The sequence must be monotone up to percent-level wiggles, or have geometrically
    /// shrinking increments.
    pub fn check(&self, component: Component) -> Result<(), FgrError> {
        let pick = |z: &C64| match component {
            Component::Re => z.re,
            Component::Im => z.im,
        };
        let d: Vec<f64> = self.samples.windows(2).map(|w| pick(&w[1]) - pick(&w[0])).collect();
        let shrinking = d.windows(2).all(|w| w[1].abs() <= 0.75 * w[0].abs());
        // Reversals are tolerated only at the percent level of the limit.
        let floor = 0.01 * pick(&self.value).abs();
        let lead = d.first().copied().unwrap_or(0.0);
        let monotone = d.iter().all(|x| x * lead >= 0.0 || x.abs() <= floor);
        if monotone || shrinking {
            Ok(())
        } else {
            Err(FgrError::NonMonotone(format!(
                "samples {:?} at gammas {:?} neither monotone nor contracting; lower rungs likely resolve box levels",
                self.samples.iter().map(pick).collect::<Vec<_>>(),
                self.gammas
            )))
        }
    }
}

fn check_threshold(model: &TwoChannel, energy: f64, ladder: &Ladder) -> Result<(), FgrError> {
    let h = model.grid().spacing();
    let top = 4.0 / (h * h);
    let distance = energy.min(top - energy);
    let needed = (10.0 * level_spacing(energy, model.grid().half_width())).max(2.0 * ladder.gamma0);
    if distance < needed {
        return Err(FgrError::NearThreshold { energy, distance, needed });
    }
    Ok(())
}

/// `W ψ0` with the unscaled coupling.
pub fn coupled_state(model: &TwoChannel, spectral: &SpectralModel) -> Vec<C64> {
    model.w().apply(&to_complex(&spectral.psi0))
}

/// `⟨f, (H0 - λ - iγ)^{-1} (I - P0) f⟩` with `f = W ψ0`.
pub fn coupling_resolvent_form(
    model: &TwoChannel,
    spectral: &SpectralModel,
    lambda: f64,
    gamma: f64,
) -> Result<C64, FgrError> {
    let n = model.channel_len();
    let f = coupled_state(model, spectral);
    let z = C64::new(lambda, gamma);
    let mut total = ZERO;
    let free_part = &f[..n];
    if free_part.iter().any(|v| *v != ZERO) {
        let u = resolvent_solve_block(model.free(), z, free_part)?;
        let fr: Vec<f64> = free_part.iter().map(|v| v.re).collect();
        let fi: Vec<f64> = free_part.iter().map(|v| v.im).collect();
        total += dot_real(&fr, &u) - C64::i() * dot_real(&fi, &u);
    }
    let osc_part = &f[n..];
    if osc_part.iter().any(|v| *v != ZERO) {
        let (vals, vecs) = spectral.oscillator_spectrum();
        for k in (0..n).filter(|&k| k != spectral.n_embed) {
            let c: C64 = (0..n).map(|i| osc_part[i] * vecs[(i, k)]).sum();
            total += c.norm_sqr() / (C64::new(vals[k], 0.0) - z);
        }
    }
    Ok(total)
}

/// Extrapolated `⟨f, (H0 - λ - i0)^{-1} (I - P0) f⟩`.
pub fn boundary_form(
    model: &TwoChannel,
    spectral: &SpectralModel,
    lambda: f64,
    ladder: &Ladder,
) -> Result<LadderValue, FgrError> {
    check_threshold(model, lambda, ladder)?;
    let spacing = level_spacing(lambda, model.grid().half_width());
    if ladder.gamma0 < 5.0 * spacing {
        return Err(FgrError::BelowSpacing { gamma0: ladder.gamma0, spacing });
    }
    let gammas = ladder.gammas();
    let samples = gammas
        .iter()
        .map(|&g| coupling_resolvent_form(model, spectral, lambda, g))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LadderValue::from_samples(gammas, samples))
}

/// First-order frequency `λ0 + ε ⟨ψ0, W ψ0⟩`.
pub fn omega_first(eps: f64, model: &TwoChannel, spectral: &SpectralModel) -> f64 {
    let f = coupled_state(model, spectral);
    spectral.lambda0 + eps * dot_real(&spectral.psi0, &f).re
}

/// Golden-rule width `π ε² ⟨Wψ0, δ(H0 - λ) Wψ0⟩ = ε² Im⟨Wψ0, (H0 - λ - i0)^{-1} Wψ0⟩`.
pub fn gamma_fgr(
    eps: f64,
    lambda: f64,
    model: &TwoChannel,
    spectral: &SpectralModel,
    ladder: &Ladder,
) -> Result<(f64, LadderValue), FgrError> {
    let form = boundary_form(model, spectral, lambda, ladder)?;
    form.check(Component::Im)?;
    Ok((eps * eps * form.value.im, form))
}

/// Second-order level shift `ε² Re⟨Wψ0, (H0 - λ0 - i0)^{-1} (I - P0) Wψ0⟩`.
pub fn lambda_shift(
    eps: f64,
    model: &TwoChannel,
    spectral: &SpectralModel,
    ladder: &Ladder,
) -> Result<(f64, LadderValue), FgrError> {
    let form = boundary_form(model, spectral, spectral.lambda0, ladder)?;
    form.check(Component::Re)?;
    Ok((eps * eps * form.value.re, form))
}

/// Perturbative resonance data at one coupling strength.
#[derive(Debug, Clone, PartialEq)]
pub struct FgrResult {
    pub eps: f64,
    /// `ω`, the frequency the reduced equation is expanded about.
    pub omega: f64,
    /// `ω₁ = λ0 + ε⟨ψ0, Wψ0⟩`.
    pub omega_first: f64,
    /// Golden-rule width `Γ₀` at `ω`.
    pub gamma0: f64,
    /// Leading-order real part of `-ε²F(-iω + 0)`, equal to `-Λ`.
    pub small_gamma0: f64,
    /// Level shift `Λ`.
    pub lambda_shift: f64,
    pub ladder_error: f64,
    pub form: LadderValue,
}

pub fn fgr_summary(
    eps: f64,
    model: &TwoChannel,
    spectral: &SpectralModel,
    ladder: &Ladder,
) -> Result<FgrResult, FgrError> {
    let omega1 = omega_first(eps, model, spectral);
    // The off-diagonal coupling gives ω₁ = λ0; ω is the unperturbed level.
    let omega = spectral.lambda0;
    let form = boundary_form(model, spectral, omega, ladder)?;
    form.check(Component::Im)?;
    form.check(Component::Re)?;
    let e2 = eps * eps;
    Ok(FgrResult {
        eps,
        omega,
        omega_first: omega1,
        gamma0: e2 * form.value.im,
        small_gamma0: -e2 * form.value.re,
        lambda_shift: e2 * form.value.re,
        ladder_error: e2 * form.error,
        form,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Coupling, CutoffKind, CutoffSpec, Grid};
    use crate::spectral::Cutoffs;

    fn setup(half_width: f64, points: usize) -> (TwoChannel, SpectralModel) {
        let grid = Grid::new(half_width, points).unwrap();
        let m = TwoChannel::build(&grid, Coupling::default(), 0.05, 1e-10, 1e-8).unwrap();
        let c = Cutoffs::new(CutoffSpec::new(0.5, 1.5, 0.05, CutoffKind::SmoothBump).unwrap(), 0.8, 0.025).unwrap();
        let s = SpectralModel::build(&m, c, 0).unwrap();
        (m, s)
    }

    /// Continuum value `|f̂(k)|² / (2k)` for `f = e^{-x²} ψ0`.
    fn continuum_width(lambda: f64) -> f64 {
        let k = lambda.sqrt();
        let fhat2 = PI.powf(-0.5) * (2.0 * PI / 3.0) * (-k * k / 3.0).exp();
        fhat2 / (2.0 * k)
    }

    #[test]
    fn golden_rule_matches_continuum_value() {
        let (m, s) = setup(128.0, 1024);
        let ladder = Ladder::for_box(s.lambda0, 128.0, 16.0, 4).unwrap();
        let (g, form) = gamma_fgr(1.0, s.lambda0, &m, &s, &ladder).unwrap();
        let exact = continuum_width(s.lambda0);
        assert!((g / exact - 1.0).abs() < 0.02, "{g} vs {exact}, error {}", form.error);
        assert!(omega_first(0.3, &m, &s) == s.lambda0);
    }

    #[test]
    fn width_scales_quadratically_and_varies_continuously() {
        let (m, s) = setup(128.0, 1024);
        let ladder = Ladder::for_box(1.0, 128.0, 16.0, 4).unwrap();
        let (g1, _) = gamma_fgr(0.1, 1.0, &m, &s, &ladder).unwrap();
        let (g2, _) = gamma_fgr(0.05, 1.0, &m, &s, &ladder).unwrap();
        assert!((g1 / g2 - 4.0).abs() < 1e-10);
        let (g3, _) = gamma_fgr(0.1, 1.01, &m, &s, &ladder).unwrap();
        assert!((g3 / g1 - 1.0).abs() < 0.05);
    }

    #[test]
    fn threshold_and_sub_spacing_ladders_are_rejected() {
        let (m, s) = setup(128.0, 1024);
        let ladder = Ladder::for_box(1.0, 128.0, 16.0, 4).unwrap();
        assert!(matches!(gamma_fgr(0.1, 0.01, &m, &s, &ladder), Err(FgrError::NearThreshold { .. })));
        let tiny = Ladder::new(0.2 * level_spacing(1.0, 128.0), 4).unwrap();
        assert!(matches!(gamma_fgr(0.1, 1.0, &m, &s, &tiny), Err(FgrError::BelowSpacing { .. })));
        let deep = Ladder::new(8.0 * level_spacing(1.0, 128.0), 8).unwrap();
        assert!(matches!(gamma_fgr(0.1, 1.0, &m, &s, &deep), Err(FgrError::NonMonotone(_))));
    }
}
