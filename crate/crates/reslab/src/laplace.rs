//! Forward Laplace transforms of sampled amplitudes, Bromwich inversion, the resolvent
//! identity `(p + iω + ε²F(p)) â(p) = a(0)` and exponential/power-law decay fits.
//!
//! Amplitudes are treated as piecewise linear after removing a carrier `e^{-iŝt}`; each
//! interval is then integrated against `e^{-pt}` in closed form, so oscillation at the
//! carrier costs nothing in accuracy.

use crate::linalg::ZERO;
use crate::{fit_line, C64};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LaplaceError {
    #[error("sample mesh: {0}")]
    Mesh(String),
    #[error("Re p = {nu:.3e} gives only {product:.2} e-folds over the record and no tail model is attached (need 20)")]
    InsufficientDamping { nu: f64, product: f64 },
    #[error("Re p = {re:.3e} lies left of the tail model's decay rate {rate:.3e}")]
    LeftOfTail { re: f64, rate: f64 },
    #[error("Bromwich refinement did not settle: last change {change:.3e} after {refinements} halvings")]
    Contour { change: f64, refinements: usize },
    #[error("fit window [{start:.4}, {end:.4}] holds {points} usable samples")]
    EmptyWindow { start: f64, end: f64, points: usize },
    #[error("phase jumps by {jump:.3} rad near t = {t:.4}; the record is undersampled")]
    PhaseUnwrap { t: f64, jump: f64 },
    #[error("fitted rate {rate:.3e} is negative")]
    NegativeRate { rate: f64 },
    #[error("transform evaluation failed: {0}")]
    Evaluation(String),
}

/// Exponential continuation `a(t) ≈ a(T) e^{-(iŝ + Γ̂)(t - T)}` beyond the record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailModel {
    pub frequency: f64,
    pub rate: f64,
}

fn uniform_step(times: &[f64], values: &[C64]) -> Result<f64, LaplaceError> {
    if times.len() != values.len() {
        return Err(LaplaceError::Mesh(format!("{} times for {} values", times.len(), values.len())));
    }
    if times.len() < 2 {
        return Err(LaplaceError::Mesh("need at least two samples".into()));
    }
    if times[0].abs() > 1e-12 {
        return Err(LaplaceError::Mesh(format!("record starts at t = {}, not 0", times[0])));
    }
    let dt = times[1] - times[0];
    if !(dt > 0.0) {
        return Err(LaplaceError::Mesh("times must increase".into()));
    }
    for (k, &t) in times.iter().enumerate() {
        if (t - k as f64 * dt).abs() > 1e-9 * (k as f64 * dt).max(dt) {
            return Err(LaplaceError::Mesh(format!("sample {k} at t = {t} is off the uniform mesh")));
        }
    }
    Ok(dt)
}

/// `∫_0^dt e^{-qτ}(1 - τ/dt) dτ` and `∫_0^dt e^{-qτ} τ/dt dτ`.
fn interval_weights(q: C64, dt: f64) -> (C64, C64) {
    let z = q * dt;
    if z.norm() < 1e-3 {
        let z2 = z * z;
        let z3 = z2 * z;
        let i0 = dt * (1.0 - z / 2.0 + z2 / 6.0 - z3 / 24.0);
        let i1 = dt * (0.5 - z / 3.0 + z2 / 8.0 - z3 / 30.0);
        return (i0 - i1, i1);
    }
    let e = (-z).exp();
    let i0 = (1.0 - e) / q;
    let i1 = ((1.0 - e) / z - e) / q;
    (i0 - i1, i1)
}

/// `∫_0^∞ e^{-pt} a(t) dt` from samples on a uniform mesh starting at 0.
///
/// Without a tail model the record must damp the kernel by `e^{-20}`; with one the
/// remainder past the last sample is added in closed form and the tail frequency is
/// used as carrier.
pub fn laplace_numeric(times: &[f64], values: &[C64], p: C64, tail: Option<&TailModel>) -> Result<C64, LaplaceError> {
    let dt = uniform_step(times, values)?;
    let horizon = *times.last().unwrap_or(&0.0);
    match tail {
        None => {
            if !(p.re > 0.0) || p.re * horizon < 20.0 {
                return Err(LaplaceError::InsufficientDamping { nu: p.re, product: p.re * horizon });
            }
        }
        Some(m) => {
            if p.re + m.rate <= 0.0 {
                return Err(LaplaceError::LeftOfTail { re: p.re, rate: m.rate });
            }
        }
    }
    let carrier = tail.map_or(0.0, |m| m.frequency);
    let q = p + C64::new(0.0, carrier);
    let (w_start, w_end) = interval_weights(q, dt);
    let step_decay = (-q * dt).exp();
    let step_carrier = C64::from_polar(1.0, carrier * dt);
    let mut decay = C64::new(1.0, 0.0);
    let mut rot = C64::new(1.0, 0.0);
    let mut prev = values[0];
    let mut total = ZERO;
    for (k, &a) in values.iter().enumerate().skip(1) {
        let next_rot = rot * step_carrier;
        let b = a * next_rot;
        total += decay * (w_start * prev + w_end * b);
        prev = b;
        rot = next_rot;
        decay *= step_decay;
        // refresh the recurrences against drift on long records
        if k % 4096 == 0 {
            let t = k as f64 * dt;
            rot = C64::from_polar(1.0, carrier * t);
            decay = (-q * t).exp();
        }
    }
    if let Some(m) = tail {
        let last = *values.last().unwrap_or(&ZERO);
        total += (-p * horizon).exp() * last / (p + C64::new(m.rate, m.frequency));
    }
    Ok(total)
}

/// Analytic part removed before the contour quadrature: `c / (p + κ)`, the transform of
/// `c e^{-κt}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferencePole {
    pub residue: C64,
    pub kappa: C64,
}

impl ReferencePole {
    /// `c / (p + 1)`.
    pub fn unit(residue: C64) -> Self {
        Self { residue, kappa: C64::new(1.0, 0.0) }
    }
}

/// Vertical contour `p = ν + iy`, `|y - center| ≤ half_width`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contour {
    pub nu: f64,
    pub center: f64,
    pub half_width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BromwichValue {
    pub value: C64,
    pub refinements: usize,
    pub last_change: f64,
    /// Estimated contribution of the discarded contour beyond `half_width`.
    pub truncation: f64,
}

/// `(2πi)^{-1} ∫ e^{pt} Ĝ(p) dp` along the contour at each requested time, by
/// trapezoid sums whose step is halved until every value changes by at most `tol`.
pub fn bromwich_invert<E: std::fmt::Display>(
    mut transform: impl FnMut(C64) -> Result<C64, E>,
    times: &[f64],
    contour: Contour,
    reference: Option<ReferencePole>,
    tol: f64,
) -> Result<Vec<BromwichValue>, LaplaceError> {
    let Contour { nu, center, half_width } = contour;
    if !(nu > 0.0) || !(half_width > 0.0) {
        return Err(LaplaceError::Evaluation(format!("need ν > 0 and a positive half-width, got {nu}, {half_width}")));
    }
    let reference = reference.unwrap_or(ReferencePole::unit(ZERO));
    let mut remainder = |y: f64| -> Result<C64, LaplaceError> {
        let p = C64::new(nu, y);
        let g = transform(p).map_err(|e| LaplaceError::Evaluation(e.to_string()))?;
        Ok(g - reference.residue / (p + reference.kappa))
    };
    let exact = |t: f64| reference.residue * (-reference.kappa * t).exp();
    let lo = center - half_width;
    let hi = center + half_width;
    let edge = remainder(lo)?.norm().max(remainder(hi)?.norm());
    // samples kept at the current resolution: (y, R(y)) with trapezoid end weights
    let mut nodes: Vec<(f64, C64)> = Vec::new();
    let mut intervals = 64usize;
    for k in 0..=intervals {
        let y = lo + 2.0 * half_width * k as f64 / intervals as f64;
        nodes.push((y, remainder(y)?));
    }
    let sums = |nodes: &[(f64, C64)], intervals: usize| -> Vec<C64> {
        let dy = 2.0 * half_width / intervals as f64;
        times
            .iter()
            .map(|&t| {
                let mut s = ZERO;
                let last = nodes.len() - 1;
                for (i, &(y, r)) in nodes.iter().enumerate() {
                    let w = if i == 0 || i == last { 0.5 } else { 1.0 };
                    s += w * r * C64::from_polar(1.0, y * t);
                }
                s * dy * (nu * t).exp() / (2.0 * PI)
            })
            .collect()
    };
    let mut current = sums(&nodes, intervals);
    let max_refinements = 22;
    for refinement in 1..=max_refinements {
        let dy = 2.0 * half_width / intervals as f64;
        let mut refined = Vec::with_capacity(2 * nodes.len() - 1);
        for (i, &node) in nodes.iter().enumerate() {
            refined.push(node);
            if i + 1 < nodes.len() {
                let y = node.0 + dy / 2.0;
                refined.push((y, remainder(y)?));
            }
        }
        nodes = refined;
        intervals *= 2;
        let next = sums(&nodes, intervals);
        let change = next.iter().zip(&current).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        current = next;
        if change <= tol && refinement >= 3 {
            return Ok(times
                .iter()
                .zip(&current)
                .map(|(&t, v)| {
                    let oscillation = if t > 0.0 { (half_width * t).max(1.0) } else { 1.0 };
                    BromwichValue {
                        value: v + exact(t),
                        refinements: refinement,
                        last_change: change,
                        truncation: (nu * t).exp() * edge * half_width / (PI * oscillation),
                    }
                })
                .collect());
        }
        if refinement == max_refinements {
            return Err(LaplaceError::Contour { change, refinements: refinement });
        }
    }
    unreachable!("refinement loop returns")
}

/// `|(ip - ω + iε²F(p)) â(p) - i a(0)|`.
pub fn identity_residual(p: C64, omega: f64, eps2_f: C64, transform: C64, a0: C64) -> f64 {
    let i = C64::i();
    ((i * p - omega + i * eps2_f) * transform - i * a0).norm()
}

/// Power law `|a| ≈ c t^{-q}` on the post-exponential window.
#[derive(Debug, Clone, PartialEq)]
pub struct TailFit {
    pub exponent: f64,
    pub prefactor: f64,
    pub window: (f64, f64),
    pub points: usize,
    pub rms: f64,
}

/// Fitted `a(t) ≈ A e^{-iŝt - Γ̂t}` on `[t1, t2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayFit {
    pub frequency: f64,
    pub rate: f64,
    /// Fitted `A`, to compare with `a(0)`.
    pub amplitude: C64,
    pub window: (f64, f64),
    pub points: usize,
    /// RMS residual of the complex logarithm.
    pub residual: f64,
    /// `None` when no sample beyond `5/Γ̂` rises above the amplitude floor.
    pub tail: Option<TailFit>,
}

impl DecayFit {
    pub fn tail_model(&self) -> TailModel {
        TailModel { frequency: self.frequency, rate: self.rate }
    }

    /// `ω_* = ŝ - iΓ̂`.
    pub fn omega_star(&self) -> C64 {
        C64::new(self.frequency, -self.rate)
    }
}

/// Samples below this modulus are left out of every fit.
pub const AMPLITUDE_FLOOR: f64 = 1e-12;

/// Log-linear fit of the amplitude on `[0.5/Γ_guess, 3/Γ_guess]`, then a power-law fit
/// of `|a|` beyond `5/Γ̂`.
pub fn fit_decay(times: &[f64], values: &[C64], gamma_guess: f64) -> Result<DecayFit, LaplaceError> {
    if times.len() != values.len() {
        return Err(LaplaceError::Mesh(format!("{} times for {} values", times.len(), values.len())));
    }
    if !(gamma_guess > 0.0) {
        return Err(LaplaceError::Evaluation(format!("rate guess must be positive, got {gamma_guess}")));
    }
    fit_decay_window(times, values, 0.5 / gamma_guess, 3.0 / gamma_guess)
}

/// As [`fit_decay`] with an explicit window.
pub fn fit_decay_window(times: &[f64], values: &[C64], start: f64, end: f64) -> Result<DecayFit, LaplaceError> {
    let last = times.last().copied().unwrap_or(f64::NEG_INFINITY);
    let first = times.first().copied().unwrap_or(f64::INFINITY);
    let empty = |points| LaplaceError::EmptyWindow { start, end, points };
    if start < first || end > last * (1.0 + 1e-12) || !(end > start) {
        return Err(empty(0));
    }
    let mut ts = Vec::new();
    let mut logs = Vec::new();
    let mut phases = Vec::new();
    let mut prev: Option<(f64, f64)> = None;
    for (&t, &a) in times.iter().zip(values) {
        if t < start || t > end || a.norm() < AMPLITUDE_FLOOR {
            continue;
        }
        let raw = a.arg();
        let phase = match prev {
            None => raw,
            Some((_, p)) => {
                let jump = raw - p - (2.0 * PI) * ((raw - p) / (2.0 * PI)).round();
                if jump.abs() > 0.9 * PI {
                    return Err(LaplaceError::PhaseUnwrap { t, jump });
                }
                p + jump
            }
        };
        prev = Some((t, phase));
        ts.push(t);
        logs.push(a.norm().ln());
        phases.push(phase);
    }
    if ts.len() < 3 {
        return Err(empty(ts.len()));
    }
    let modulus = fit_line(&ts, &logs).ok_or_else(|| empty(ts.len()))?;
    let phase = fit_line(&ts, &phases).ok_or_else(|| empty(ts.len()))?;
    let rate = -modulus.slope;
    if rate < 0.0 {
        return Err(LaplaceError::NegativeRate { rate });
    }
    let frequency = -phase.slope;
    let residual = (modulus.rms.powi(2) + phase.rms.powi(2)).sqrt();
    let tail = if rate > 0.0 { fit_tail(times, values, 5.0 / rate) } else { None };
    Ok(DecayFit {
        frequency,
        rate,
        amplitude: C64::from_polar(modulus.intercept.exp(), phase.intercept),
        window: (start, end),
        points: ts.len(),
        residual,
        tail,
    })
}

/// Power-law fit of `|a|` for `t ≥ start`.
pub fn fit_tail(times: &[f64], values: &[C64], start: f64) -> Option<TailFit> {
    let (lx, ly): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(values)
        .filter(|(&t, a)| t >= start && t > 0.0 && a.norm() >= AMPLITUDE_FLOOR)
        .map(|(&t, a)| (t.ln(), a.norm().ln()))
        .unzip();
    if lx.len() < 3 {
        return None;
    }
    let fit = fit_line(&lx, &ly)?;
    Some(TailFit {
        exponent: -fit.slope,
        prefactor: fit.intercept.exp(),
        window: (lx[0].exp(), lx[lx.len() - 1].exp()),
        points: lx.len(),
        rms: fit.rms,
    })
}

/// `|a(t) - e^{-iω_* t}|` at `t = x/Γ` for each `x`, interpolated linearly in the record.
pub fn remainder_profile(times: &[f64], values: &[C64], omega_star: C64, scaled_times: &[f64]) -> Vec<(f64, f64)> {
    let gamma = -omega_star.im;
    scaled_times
        .iter()
        .filter_map(|&x| {
            let t = x / gamma;
            let k = times.partition_point(|&s| s <= t);
            if k == 0 || k >= times.len() {
                return None;
            }
            let (t0, t1) = (times[k - 1], times[k]);
            let w = (t - t0) / (t1 - t0);
            let a = values[k - 1] * (1.0 - w) + values[k] * w;
            Some((x, (a - (-C64::i() * omega_star * t).exp()).norm()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(dt: f64, t_final: f64, f: impl Fn(f64) -> C64) -> (Vec<f64>, Vec<C64>) {
        let n = (t_final / dt).round() as usize;
        let t: Vec<f64> = (0..=n).map(|k| k as f64 * dt).collect();
        let v = t.iter().map(|&s| f(s)).collect();
        (t, v)
    }

    #[test]
    fn pure_rotation_has_closed_form_transform() {
        let w = 1.3;
        let (t, v) = series(0.01, 40.0, |s| C64::from_polar(1.0, -w * s));
        let tail = TailModel { frequency: w, rate: 0.0 };
        for y in [-3.0, -1.3, 0.0, 2.0] {
            let p = C64::new(1.0, y);
            let got = laplace_numeric(&t, &v, p, Some(&tail)).unwrap();
            let want = 1.0 / (p + C64::new(0.0, w));
            assert!((got - want).norm() < 1e-8, "{got} vs {want}");
        }
        // without the tail, e^{-40} truncation is harmless but the carrier is not removed
        let raw = laplace_numeric(&t, &v, C64::new(1.0, 0.5), None).unwrap();
        assert!((raw - 1.0 / C64::new(1.0, 0.5 + w)).norm() < 1e-4);
        assert!(matches!(
            laplace_numeric(&t, &v, C64::new(0.1, 0.0), None),
            Err(LaplaceError::InsufficientDamping { .. })
        ));
    }

    #[test]
    fn transform_is_linear_and_conjugate_symmetric() {
        let (t, u) = series(0.02, 60.0, |s| C64::new((-0.3 * s).exp() * (2.0 * s).cos(), 0.0));
        let (_, v) = series(0.02, 60.0, |s| C64::new(1.0 / (1.0 + s * s), 0.0));
        let p = C64::new(0.5, 1.7);
        let (a, b) = (C64::new(0.4, -2.0), C64::new(1.5, 0.3));
        let mix: Vec<C64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
        let lu = laplace_numeric(&t, &u, p, None).unwrap();
        let lv = laplace_numeric(&t, &v, p, None).unwrap();
        let lm = laplace_numeric(&t, &mix, p, None).unwrap();
        assert!((lm - a * lu - b * lv).norm() < 1e-13);
        let lc = laplace_numeric(&t, &u, p.conj(), None).unwrap();
        assert!((lc - lu.conj()).norm() < 1e-14);
    }

    #[test]
    fn bromwich_recovers_a_rotation() {
        let w = 1.3;
        let contour = Contour { nu: 0.5, center: -w, half_width: 2000.0 };
        let out = bromwich_invert(
            |p: C64| Ok::<_, String>(1.0 / (p + C64::new(0.0, w))),
            &[1.0],
            contour,
            Some(ReferencePole::unit(C64::new(1.0, 0.0))),
            1e-8,
        )
        .unwrap();
        let want = C64::from_polar(1.0, -w);
        assert!((out[0].value - want).norm() < 1e-6, "{}", (out[0].value - want).norm());
    }

    #[test]
    fn bromwich_round_trip_and_contour_shift() {
        // a resonance-like record with a slow algebraic admixture
        let (w, g) = (1.0, 0.05);
        let f = |s: f64| C64::from_polar((-g * s).exp(), -w * s) * 0.98 + C64::new(0.02 / (1.0 + 0.1 * s), 0.0);
        let (t, v) = series(0.01, 120.0, f);
        let tail = TailModel { frequency: w, rate: g };
        let check: Vec<f64> = (0..=12).map(|k| k as f64 * 5.0).collect();
        let reference = Some(ReferencePole { residue: v[0], kappa: C64::new(g, w) });
        let invert = |nu: f64| {
            let contour = Contour { nu, center: -w, half_width: 400.0 };
            bromwich_invert(|p| laplace_numeric(&t, &v, p, Some(&tail)), &check, contour, reference, 1e-7).unwrap()
        };
        let a = invert(0.05);
        let b = invert(0.1);
        for ((x, ra), rb) in check.iter().zip(&a).zip(&b) {
            assert!((ra.value - f(*x)).norm() < 1e-4, "t = {x}: {}", (ra.value - f(*x)).norm());
            assert!((ra.value - rb.value).norm() < 1e-5, "t = {x}: shift {}", (ra.value - rb.value).norm());
        }
    }

    #[test]
    fn identity_holds_for_a_pure_pole() {
        // a(t) = e^{-iω_* t}: â = 1/(p + iω_*), and ε²F = iω_* - iω makes the identity exact
        let omega_star = C64::new(1.1, -0.02);
        let omega = 1.0;
        let (t, v) = series(0.01, 300.0, |s| (-C64::i() * omega_star * s).exp());
        let tail = TailModel { frequency: omega_star.re, rate: -omega_star.im };
        for y in [-1.5, -1.1, -0.7] {
            let p = C64::new(0.02, y);
            let ahat = laplace_numeric(&t, &v, p, Some(&tail)).unwrap();
            let f = C64::i() * (omega_star - omega);
            assert!(identity_residual(p, omega, f, ahat, C64::new(1.0, 0.0)) < 1e-8);
        }
    }

    #[test]
    fn fit_recovers_synthetic_decay_and_flags_empty_windows() {
        let (t, v) = series(0.05, 400.0, |s| C64::from_polar((-0.01 * s).exp(), -2.0 * s));
        let fit = fit_decay(&t, &v, 0.01).unwrap();
        assert!((fit.frequency - 2.0).abs() < 1e-10);
        assert!((fit.rate - 0.01).abs() < 1e-12);
        assert!((fit.amplitude - 1.0).norm() < 1e-9);
        assert!(fit.residual < 1e-10);
        assert!(matches!(fit_decay(&t, &v, 0.001), Err(LaplaceError::EmptyWindow { .. })));
    }

    #[test]
    fn tail_fit_reads_power_laws() {
        let (t, v) = series(1.0, 5000.0, |s| C64::from_polar(3.0 * (1.0 + s).powf(-1.5), 0.7 * s));
        let tail = fit_tail(&t, &v, 500.0).unwrap();
        assert!((tail.exponent - 1.5).abs() < 1e-2);
        assert!(fit_tail(&t, &v, 6000.0).is_none());
    }

    #[test]
    fn undersampled_phase_is_rejected() {
        let (t, v) = series(1.0, 400.0, |s| C64::from_polar((-0.01 * s).exp(), -3.0 * s));
        assert!(matches!(fit_decay(&t, &v, 0.01), Err(LaplaceError::PhaseUnwrap { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn fit_is_exact_on_noiseless_exponentials(s in -3.0f64..3.0, g in 0.005f64..0.2) {
            let dt = 0.25 / (1.0 + s.abs()).max(1.0);
            let t_final = 3.0 / g;
            let n = (t_final / dt).ceil() as usize;
            let t: Vec<f64> = (0..=n).map(|k| k as f64 * dt).collect();
            let v: Vec<C64> = t.iter().map(|&x| C64::from_polar((-g * x).exp(), -s * x)).collect();
            let fit = fit_decay(&t, &v, g).unwrap();
            prop_assert!((fit.frequency - s).abs() < 1e-9 * (1.0 + s.abs()));
            prop_assert!((fit.rate - g).abs() < 1e-9 * g);
        }
    }
}
