//! Experiment configuration, orchestration of the `spectrum`, `fgr`, `resonance`,
//! `evolve`, `verify` and `sweep` runs, and report/series serialization.
//!
//! Configs are TOML with fixed sections; unknown keys are rejected. Overrides use
//! `section.key=value` with a TOML value. Reports are plain text with a stable field
//! order and numbers printed at fixed precision, so two runs of the same config produce
//! identical bytes (wall-clock timing is only included when `run.timing` is set).

use crate::dynamics::{
    cayley_max_group_velocity, embedded_state, max_group_velocity, propagate, reflection_horizon, solve_amplitude_volterra, survival_run,
    weighted_sup_norm, AmplitudeSeries, DynamicsError, KOperator, ModeCoupling, PropagationSpec, Scheme,
};
use crate::fgr::{fgr_summary, gamma_fgr, FgrError, FgrResult, Ladder};
use crate::laplace::{fit_decay, identity_residual, laplace_numeric, remainder_profile, DecayFit, LaplaceError};
use crate::linalg::{norm, to_complex, ZERO};
use crate::model::{Coupling, CutoffKind, CutoffSpec, Grid, ModelError, TwoChannel};
use crate::resonance::{
    expansion_residual, find_pole, gamma_omega_star, solve_s0, FEvaluator, FullSpectrum, InverseStrategy, PoleResult,
    ReducedCoupling, ResonanceError, ResonanceReport,
};
use crate::spectral::{
    estimate_eta_boundary, local_decay_fit, triple_norm_w, Cutoffs, EtaEstimate, LatticeProjector, RegularityEstimate,
    SpectralError, SpectralModel,
};
use crate::{fit_line, C64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("override '{0}' is not of the form section.key=value")]
    Override(String),
    #[error("[model] {0}\n  hint: enlarge the box or loosen the localization tolerance")]
    Model(#[from] ModelError),
    #[error("[spectral] {0}\n  hint: check the cutoff window and the embedded level")]
    Spectral(#[from] SpectralError),
    #[error("[fgr] {0}\n  hint: enlarge the box or raise ladder.multiple")]
    Fgr(#[from] FgrError),
    #[error("[resonance] {0}\n  hint: lower eps or widen the cutoff window")]
    Resonance(#[from] ResonanceError),
    #[error("[dynamics] {0}\n  hint: lower dt or shorten the run")]
    Dynamics(#[from] DynamicsError),
    #[error("[laplace] {0}\n  hint: extend the run or move the contour to the right")]
    Laplace(#[from] LaplaceError),
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("series line {line}: {message}")]
    Parse { line: usize, message: String },
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub half_width: f64,
    pub points: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { half_width: 128.0, points: 1024 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CouplingShape {
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CouplingConfig {
    pub shape: CouplingShape,
    pub amplitude: f64,
    pub width: f64,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        Self { shape: CouplingShape::Gaussian, amplitude: 1.0, width: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Coupling strengths of the sweep, largest first.
    pub eps: Vec<f64>,
    pub n_embed: usize,
    pub truncation_tol: f64,
    pub localization_tol: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { eps: vec![0.1, 0.05, 0.025], n_embed: 0, truncation_tol: 1e-10, localization_tol: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CutoffShape {
    SmoothBump,
    AnalyticWindow,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CutoffConfig {
    pub window: [f64; 2],
    pub margin: f64,
    pub kind: CutoffShape,
    /// Far-field edges sit at `θa` and `b/θ`.
    pub theta: f64,
    pub far_margin: f64,
    /// Real shift `c` below the spectrum used in the coupling norms.
    pub shift: f64,
}

impl Default for CutoffConfig {
    fn default() -> Self {
        Self {
            window: [0.5, 1.5],
            margin: 0.05,
            kind: CutoffShape::SmoothBump,
            theta: 0.8,
            far_margin: 0.025,
            shift: -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightConfig {
    pub sigma: f64,
    /// Time weight `<t>^β` in the norms of `K` and `A_W`.
    pub beta: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self { sigma: 1.0, beta: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsConfig {
    /// Step of the short lab-frame runs.
    pub dt: f64,
    pub scheme: String,
    /// Step of the long decay runs, taken in the frame rotating at `λ0`.
    pub decay_dt: f64,
    /// `ΓT` of the decay run at the smallest coupling.
    pub gamma_t: f64,
    /// `ΓT` of the run used for the Laplace identity and the tails.
    pub tail_gamma_t: f64,
    pub sample_every: usize,
    pub weight_every: usize,
    pub volterra_tol: f64,
    /// Length of the mesh on which `K` and `A_W` are measured.
    pub operator_horizon: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            scheme: "cayley".into(),
            decay_dt: 0.25,
            gamma_t: 3.2,
            tail_gamma_t: 10.0,
            sample_every: 2,
            weight_every: 20,
            volterra_tol: 1e-9,
            operator_horizon: 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LadderConfig {
    /// Top rung in units of the box level spacing.
    pub multiple: f64,
    pub rungs: usize,
}

impl Default for LadderConfig {
    fn default() -> Self {
        Self { multiple: 16.0, rungs: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoleConfig {
    /// Side of the search square in units of `Γ₀`.
    pub side_scale: f64,
    pub samples: usize,
    pub damping: f64,
}

impl Default for PoleConfig {
    fn default() -> Self {
        Self { side_scale: 4.0, samples: 256, damping: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
    pub series: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "reslab-out".into(), series: true }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Coupling of the single-strength runs (`spectrum`, `evolve`, continuum check).
    pub eps: f64,
    pub seed: u64,
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { eps: 0.05, seed: 7, timing: false }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub grid: GridConfig,
    pub coupling: CouplingConfig,
    pub model: ModelConfig,
    pub cutoff: CutoffConfig,
    pub weights: WeightConfig,
    pub dynamics: DynamicsConfig,
    pub ladder: LadderConfig,
    pub pole: PoleConfig,
    pub output: OutputConfig,
    pub run: RunConfig,
}

/// A parsed config together with the text it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub text: String,
    pub overrides: Vec<String>,
}

fn override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

impl ExperimentConfig {
    /// Parses `text`, applies `section.key=value` overrides and validates the result.
    pub fn parse(text: &str, overrides: &[String]) -> Result<LoadedConfig, HarnessError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        for item in overrides {
            let (key, value) = item.split_once('=').ok_or_else(|| HarnessError::Override(item.clone()))?;
            let path: Vec<&str> = key.trim().split('.').collect();
            if path.len() != 2 || path.iter().any(|p| p.is_empty()) {
                return Err(HarnessError::Override(item.clone()));
            }
            let section = table
                .entry(path[0].to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| HarnessError::Config(format!("'{}' is not a section", path[0])))?;
            section.insert(path[1].to_string(), override_value(value.trim()));
        }
        let config: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(LoadedConfig { config, text: text.to_string(), overrides: overrides.to_vec() })
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<LoadedConfig, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(io_error(path))?;
        Self::parse(&text, overrides)
    }

    fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        self.grid()?;
        self.cutoffs()?;
        self.coupling().sample(&self.grid()?, self.model.localization_tol)?;
        if self.model.eps.is_empty() || self.model.eps.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return bad(format!("model.eps must be a non-empty list of positive strengths, got {:?}", self.model.eps));
        }
        if !(self.run.eps >= 0.0) {
            return bad(format!("run.eps must be non-negative, got {}", self.run.eps));
        }
        let d = &self.dynamics;
        d.scheme.parse::<Scheme>().map_err(HarnessError::Config)?;
        for (name, v) in [
            ("dynamics.dt", d.dt),
            ("dynamics.decay_dt", d.decay_dt),
            ("dynamics.gamma_t", d.gamma_t),
            ("dynamics.tail_gamma_t", d.tail_gamma_t),
            ("dynamics.volterra_tol", d.volterra_tol),
            ("dynamics.operator_horizon", d.operator_horizon),
            ("ladder.multiple", self.ladder.multiple),
            ("pole.side_scale", self.pole.side_scale),
            ("weights.sigma", self.weights.sigma),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if d.sample_every == 0 {
            return bad("dynamics.sample_every must be at least 1".into());
        }
        if self.pole.samples < 8 {
            return bad(format!("pole.samples must be at least 8, got {}", self.pole.samples));
        }
        if !(self.pole.damping > 0.0 && self.pole.damping <= 1.0) {
            return bad(format!("pole.damping must lie in (0, 1], got {}", self.pole.damping));
        }
        Ladder::new(1.0, self.ladder.rungs)?;
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid, HarnessError> {
        Ok(Grid::new(self.grid.half_width, self.grid.points)?)
    }

    pub fn coupling(&self) -> Coupling {
        match self.coupling.shape {
            CouplingShape::Gaussian => Coupling { amplitude: self.coupling.amplitude, width: self.coupling.width },
        }
    }

    pub fn cutoffs(&self) -> Result<Cutoffs, HarnessError> {
        let c = &self.cutoff;
        let kind = match c.kind {
            CutoffShape::SmoothBump => CutoffKind::SmoothBump,
            CutoffShape::AnalyticWindow => CutoffKind::AnalyticWindow,
        };
        let window = CutoffSpec::new(c.window[0], c.window[1], c.margin, kind)?;
        Ok(Cutoffs::new(window, c.theta, c.far_margin)?)
    }

    fn model_on(&self, grid: &Grid, eps: f64) -> Result<TwoChannel, HarnessError> {
        Ok(TwoChannel::build(grid, self.coupling(), eps, self.model.truncation_tol, self.model.localization_tol)?)
    }
}

// ---------------------------------------------------------------------------
// reports

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Spectrum,
    Fgr,
    Resonance,
    Evolve,
    Verify,
    Sweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Spectrum => "spectrum",
            Command::Fgr => "fgr",
            Command::Resonance => "resonance",
            Command::Evolve => "evolve",
            Command::Verify => "verify",
            Command::Sweep => "sweep",
        }
    }

    /// Acceptance rows executed by this command.
    pub fn rows(self) -> &'static [u8] {
        match self {
            Command::Spectrum => &[],
            Command::Fgr => &[3, 11],
            Command::Resonance => &[5, 9],
            Command::Evolve => &[8],
            Command::Verify => &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11],
            Command::Sweep => &[3, 5, 9, 10],
        }
    }
}

impl std::str::FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "spectrum" => Command::Spectrum,
            "fgr" => Command::Fgr,
            "resonance" => Command::Resonance,
            "evolve" => Command::Evolve,
            "verify" => Command::Verify,
            "sweep" => Command::Sweep,
            other => return Err(format!("unknown command '{other}'")),
        })
    }
}

/// One acceptance row with its verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub measured: String,
    pub tolerance: String,
}

/// Free-form block of `key = value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub title: String,
    pub fields: Vec<(String, String)>,
}

impl Section {
    fn new(title: impl Into<String>) -> Self {
        Self { title: title.into(), fields: Vec::new() }
    }

    fn put(&mut self, key: &str, value: impl Into<String>) -> &mut Self {
        self.fields.push((key.to_string(), value.into()));
        self
    }

    fn num(&mut self, key: &str, value: f64) -> &mut Self {
        self.put(key, fmt_num(value))
    }

    fn complex(&mut self, key: &str, value: C64) -> &mut Self {
        self.put(key, fmt_c(value))
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v:.6e}")
}

fn fmt_c(v: C64) -> String {
    format!("{:.6e} {} {:.6e}i", v.re, if v.im < 0.0 { '-' } else { '+' }, v.im.abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub command: Command,
    pub config_echo: String,
    pub overrides: Vec<String>,
    pub fgr: Vec<FgrResult>,
    pub resonance: Vec<ResonanceReport>,
    pub regularity: Option<RegularityEstimate>,
    pub eta: Option<EtaSummary>,
    pub decay: Vec<(f64, DecayFit)>,
    pub sections: Vec<Section>,
    pub checks: Vec<CheckRow>,
    pub timing: Vec<(String, f64)>,
    /// Files written next to the report.
    pub artifacts: Vec<PathBuf>,
}

impl RunReport {
    fn new(command: Command, loaded: &LoadedConfig) -> Self {
        Self {
            command,
            config_echo: loaded.text.clone(),
            overrides: loaded.overrides.clone(),
            fgr: Vec::new(),
            resonance: Vec::new(),
            regularity: None,
            eta: None,
            decay: Vec::new(),
            sections: Vec::new(),
            checks: Vec::new(),
            timing: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    /// True when every executed acceptance row passed.
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let w = &mut out;
        let _ = writeln!(w, "# reslab run report");
        let _ = writeln!(w, "command = \"{}\"", self.command.name());
        let _ = writeln!(w, "passed = {}", self.passed());
        let _ = writeln!(w, "\n[config]");
        for line in self.config_echo.lines() {
            let _ = writeln!(w, "| {line}");
        }
        let _ = writeln!(w, "\n[overrides]");
        for o in &self.overrides {
            let _ = writeln!(w, "| {o}");
        }
        for f in &self.fgr {
            render_section(w, &fgr_section(f));
        }
        for r in &self.resonance {
            render_section(w, &resonance_section(r));
        }
        if let Some(r) = &self.regularity {
            render_section(w, &regularity_section(r));
        }
        if let Some(e) = &self.eta {
            render_section(w, &e.section());
        }
        for (eps, d) in &self.decay {
            render_section(w, &decay_section(*eps, d));
        }
        for s in &self.sections {
            render_section(w, s);
        }
        let _ = writeln!(w, "\n[acceptance]");
        for c in &self.checks {
            let _ = writeln!(
                w,
                "row {:>2} {} {:<34} measured: {} | tolerance: {}",
                c.id,
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.tolerance
            );
        }
        if !self.timing.is_empty() {
            let _ = writeln!(w, "\n[timing]");
            for (stage, secs) in &self.timing {
                let _ = writeln!(w, "{stage} = {secs:.3} s");
            }
        }
        out
    }
}

fn render_section(w: &mut String, s: &Section) {
    let _ = writeln!(w, "\n[{}]", s.title);
    for (k, v) in &s.fields {
        let _ = writeln!(w, "{k} = {v}");
    }
}

fn fgr_section(f: &FgrResult) -> Section {
    let mut s = Section::new(format!("fgr eps={}", f.eps));
    s.num("omega", f.omega)
        .num("omega_first", f.omega_first)
        .num("gamma0", f.gamma0)
        .num("small_gamma0", f.small_gamma0)
        .num("lambda_shift", f.lambda_shift)
        .num("ladder_error", f.ladder_error)
        .put("ladder_monotone", (f.form.check(crate::fgr::Component::Im).is_ok()).to_string());
    s
}

fn resonance_section(r: &ResonanceReport) -> Section {
    let mut s = Section::new(format!("resonance eps={}", r.eps));
    s.num("omega", r.omega)
        .num("omega1", r.omega1)
        .num("s0", r.s0)
        .num("delta", r.delta)
        .num("gamma", r.gamma)
        .complex("omega_star", r.omega_star)
        .num("gamma_fgr", r.gamma_fgr)
        .num("gamma0", r.gamma0)
        .num("small_gamma0", r.small_gamma0)
        .num("lambda_shift", r.lambda_shift)
        .num("gamma_relative_gap", r.gamma_relative_gap)
        .num("expansion_residual_plus", r.expansion.plus)
        .num("expansion_residual_minus", r.expansion.minus)
        .num("cutoff_product_norm", r.cutoff_product_norm)
        .put("shift_iterations", r.shift.iterations.to_string())
        .put("shift_bisection", r.shift.bisection.to_string())
        .put("shift_roots", r.shift.roots.to_string());
    if let Some(spread) = r.shift.spread {
        s.num("shift_spread", spread);
    }
    match &r.pole {
        Some(p) => {
            s.complex("pole", p.p_z).num("pole_winding", p.winding).num("pole_residual", p.residual);
            if let Some(gap) = r.pole_relative_gap {
                s.num("pole_relative_gap", gap);
            }
        }
        None => {
            s.put("pole", "not found");
        }
    }
    s
}

fn regularity_section(r: &RegularityEstimate) -> Section {
    let mut s = Section::new("local decay");
    s.num("rate", r.rate).num("prefactor", r.prefactor).num("fit_rms", r.fit_rms).num("horizon", r.horizon);
    s.put("times", r.times.iter().map(|t| fmt_num(*t)).collect::<Vec<_>>().join(", "));
    s
}

fn decay_section(eps: f64, d: &DecayFit) -> Section {
    let mut s = Section::new(format!("decay fit eps={eps}"));
    s.num("frequency", d.frequency)
        .num("rate", d.rate)
        .complex("amplitude", d.amplitude)
        .put("window", format!("[{}, {}]", fmt_num(d.window.0), fmt_num(d.window.1)))
        .put("points", d.points.to_string())
        .num("residual", d.residual);
    match &d.tail {
        Some(t) => {
            s.num("tail_exponent", t.exponent)
                .num("tail_prefactor", t.prefactor)
                .put("tail_window", format!("[{}, {}]", fmt_num(t.window.0), fmt_num(t.window.1)))
                .put("tail_points", t.points.to_string());
        }
        None => {
            s.put("tail", "empty window");
        }
    }
    s
}

/// `η̂ = min(boundary Hölder estimate, r̂ - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaSummary {
    pub boundary: Option<EtaEstimate>,
    pub decay_rate: Option<f64>,
    pub eta: f64,
}

impl EtaSummary {
    fn section(&self) -> Section {
        let mut s = Section::new("regularity");
        match &self.boundary {
            Some(b) => {
                s.num("eta_boundary", b.eta).num("eta_boundary_raw", b.raw_slope).put(
                    "eta_boundary_saturated",
                    if b.saturated { format!("yes (>= {})", fmt_num(b.eta)) } else { "no".into() },
                );
            }
            None => {
                s.put("eta_boundary", "unavailable");
            }
        }
        match self.decay_rate {
            Some(r) => s.num("eta_from_decay", r - 1.0),
            None => s.put("eta_from_decay", "unavailable"),
        };
        s.num("eta", self.eta);
        s
    }
}

// ---------------------------------------------------------------------------
// series files

/// Column header of series files.
pub const SERIES_HEADER: &str = "t,Re a,Im a,|a|,weighted_phid_norm";

pub fn render_series(series: &AmplitudeSeries) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# reslab amplitude series");
    let _ = writeln!(out, "# sigma = {:e}", series.sigma);
    let _ = writeln!(out, "# {SERIES_HEADER}");
    for ((t, a), w) in series.times.iter().zip(&series.amplitude).zip(&series.weighted_norm) {
        let _ = writeln!(out, "{:e},{:e},{:e},{:e},{:e}", t, a.re, a.im, a.norm(), w);
    }
    out
}

pub fn emit_series(series: &AmplitudeSeries, path: &Path) -> Result<(), HarnessError> {
    std::fs::write(path, render_series(series)).map_err(io_error(path))
}

pub fn parse_series(text: &str) -> Result<AmplitudeSeries, HarnessError> {
    let mut series = AmplitudeSeries {
        times: Vec::new(),
        amplitude: Vec::new(),
        weighted_norm: Vec::new(),
        sigma: 0.0,
        a0: ZERO,
        warnings: Vec::new(),
    };
    let mut header = false;
    for (k, line) in text.lines().enumerate() {
        let line_no = k + 1;
        let err = |message: String| HarnessError::Parse { line: line_no, message };
        if let Some(comment) = line.strip_prefix('#') {
            let comment = comment.trim();
            if let Some(v) = comment.strip_prefix("sigma =") {
                series.sigma = v.trim().parse().map_err(|e| err(format!("sigma: {e}")))?;
            } else if comment == SERIES_HEADER {
                header = true;
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if !header {
            return Err(err("data before the column header".into()));
        }
        let cols: Vec<f64> = line
            .split(',')
            .map(|c| c.trim().parse::<f64>().map_err(|e| err(format!("'{c}': {e}"))))
            .collect::<Result<_, _>>()?;
        if cols.len() != 5 {
            return Err(err(format!("expected 5 columns, got {}", cols.len())));
        }
        series.times.push(cols[0]);
        series.amplitude.push(C64::new(cols[1], cols[2]));
        series.weighted_norm.push(cols[4]);
    }
    if !header {
        return Err(HarnessError::Parse { line: 0, message: "missing column header".into() });
    }
    series.a0 = series.amplitude.first().copied().unwrap_or(ZERO);
    Ok(series)
}

pub fn read_series(path: &Path) -> Result<AmplitudeSeries, HarnessError> {
    parse_series(&std::fs::read_to_string(path).map_err(io_error(path))?)
}

pub fn emit_report(report: &RunReport, path: &Path) -> Result<(), HarnessError> {
    std::fs::write(path, report.render()).map_err(io_error(path))
}

// ---------------------------------------------------------------------------
// experiment pieces

/// Everything computed about the resonance at one coupling strength.
pub struct Member {
    pub eps: f64,
    pub model: TwoChannel,
    pub spectral: SpectralModel,
    pub evaluator: FEvaluator,
    pub fgr: FgrResult,
    pub report: ResonanceReport,
    /// Golden-rule width at the shifted point `-s₀`.
    pub gamma_fgr_shifted: f64,
    pub pole_error: Option<String>,
}

/// A long survival run on a box wide enough to keep reflections out of the record.
pub struct DecayRun {
    pub eps: f64,
    pub grid: Grid,
    pub series: AmplitudeSeries,
    pub fit: Result<DecayFit, LaplaceError>,
    pub t_final: f64,
    pub horizon: f64,
    pub dt: f64,
    pub lambda0: f64,
}

struct Lab<'a> {
    cfg: &'a ExperimentConfig,
    grid: Grid,
    cutoffs: Cutoffs,
    timing: Vec<(String, f64)>,
}

impl<'a> Lab<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Result<Self, HarnessError> {
        Ok(Self { cfg, grid: cfg.grid()?, cutoffs: cfg.cutoffs()?, timing: Vec::new() })
    }

    fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&Self) -> T) -> T {
        let start = Instant::now();
        let out = f(self);
        self.timing.push((stage.to_string(), start.elapsed().as_secs_f64()));
        out
    }

    fn ladder(&self, energy: f64, half_width: f64) -> Result<Ladder, HarnessError> {
        Ok(Ladder::for_box(energy, half_width, self.cfg.ladder.multiple, self.cfg.ladder.rungs)?)
    }

    fn spectral(&self, model: &TwoChannel) -> Result<SpectralModel, HarnessError> {
        Ok(SpectralModel::build(model, self.cutoffs.clone(), self.cfg.model.n_embed)?)
    }

    fn member(&self, eps: f64) -> Result<Member, HarnessError> {
        let model = self.cfg.model_on(&self.grid, eps)?;
        let spectral = self.spectral(&model)?;
        let full = FullSpectrum::compute(&model)?;
        let reduced = ReducedCoupling::build(&model, &spectral, &full)?;
        drop(full);
        let ladder = self.ladder(spectral.lambda0, self.grid.half_width())?;
        let fgr = fgr_summary(eps, &model, &spectral, &ladder)?;
        let ev = FEvaluator::new(&model, &spectral, reduced, ladder, InverseStrategy::Direct)?;
        let (gamma0, small_gamma0) = ev.leading_pair()?;
        let shift = solve_s0(&ev, self.cfg.pole.damping)?;
        let width = gamma_omega_star(&ev, shift.s0, None)?;
        let (gamma_fgr_shifted, _) = gamma_fgr(eps, -shift.s0, &model, &spectral, &ladder)?;
        let (pole, pole_error) = match find_pole(&ev, gamma0 * self.cfg.pole.side_scale / 4.0, small_gamma0, self.cfg.pole.samples) {
            Ok(p) => (Some(p), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let pole_relative_gap = pole.as_ref().map(|p: &PoleResult| (p.p_z.re + width.gamma).abs() / width.gamma);
        let report = ResonanceReport {
            eps,
            omega: ev.omega(),
            omega1: ev.reduced.omega1,
            s0: shift.s0,
            delta: shift.delta,
            gamma: width.gamma,
            omega_star: width.omega_star,
            gamma_fgr: fgr.gamma0,
            gamma0,
            small_gamma0,
            lambda_shift: fgr.lambda_shift,
            pole,
            gamma_relative_gap: (width.gamma - gamma0).abs() / gamma0,
            pole_relative_gap,
            expansion: expansion_residual(width.omega_star, fgr.omega_first, fgr.lambda_shift, width.gamma, eps),
            cutoff_product_norm: ev.reduced.cutoff_product_norm,
            shift,
        };
        Ok(Member { eps, model, spectral, evaluator: ev, fgr, report, gamma_fgr_shifted, pole_error })
    }

    /// Sweep members, computed concurrently.
    fn members(&self) -> Result<Vec<Member>, HarnessError> {
        let eps = self.cfg.model.eps.clone();
        std::thread::scope(|scope| {
            let handles: Vec<_> = eps.iter().map(|&e| scope.spawn(move || self.member(e))).collect();
            handles.into_iter().map(|h| h.join().expect("sweep member panicked")).collect()
        })
    }

    /// Free-channel local decay of a packet centred in the window.
    fn regularity(&self) -> Result<RegularityEstimate, HarnessError> {
        let model = self.cfg.model_on(&self.grid, 0.0)?;
        let spectral = self.spectral(&model)?;
        let n = self.grid.points();
        let (a, b) = (self.cfg.cutoff.window[0], self.cfg.cutoff.window[1]);
        let k0 = (0.5 * (a + b)).sqrt();
        let mut packet = vec![ZERO; 2 * n];
        for (i, &x) in self.grid.nodes().iter().enumerate() {
            packet[i] = C64::from_polar((-(x / 4.0).powi(2)).exp(), k0 * x);
        }
        let speed = max_group_velocity(self.grid.spacing(), self.cutoffs.continuum_support().1);
        let sigma = self.cfg.weights.sigma;
        let fit = |last: f64| {
            let times: Vec<f64> = (0..6).map(|k| last / 2f64.powi(5 - k)).collect();
            local_decay_fit(model.h0(), &self.grid, &spectral, sigma, &packet, &times, 0.01, speed)
        };
        match fit(self.grid.half_width() / speed) {
            Err(SpectralError::WindowTruncated { horizon, .. }) => Ok(fit(0.95 * horizon)?),
            other => Ok(other?),
        }
    }

    fn eta(&self, member: &Member, regularity: Option<&RegularityEstimate>) -> EtaSummary {
        let ev = &member.evaluator;
        let center = member.report.s0;
        let spacings: Vec<f64> = (0..5).map(|k| 0.04 / 2f64.powi(k)).collect();
        let boundary = estimate_eta_boundary(|s| ev.eval_continued(C64::new(1e-9, s)), center, &spacings, 0.0, 1.0).ok();
        let decay_rate = regularity.map(|r| r.rate);
        let eta = match (&boundary, decay_rate) {
            (Some(b), Some(r)) => b.eta.min(r - 1.0),
            (Some(b), None) => b.eta,
            (None, Some(r)) => r - 1.0,
            (None, None) => f64::NAN,
        };
        EtaSummary { boundary, decay_rate, eta }
    }

    /// Survival run at `member`'s coupling up to `gamma_t / Γ`.
    fn decay_run(&self, member: &Member, gamma_t: f64) -> Result<DecayRun, HarnessError> {
        let d = &self.cfg.dynamics;
        let gamma = member.report.gamma;
        let dt = d.decay_dt;
        let stride = dt * d.sample_every as f64;
        let t_final = (gamma_t / gamma / stride).ceil() * stride;
        let speed = cayley_max_group_velocity(self.grid.spacing(), dt, member.spectral.lambda0);
        let radius = support_radius(&self.grid, &member.spectral.psi0).max(4.0 * self.cfg.coupling.width);
        let h = self.grid.spacing();
        let needed = radius + 0.5 * speed * t_final + 10.0;
        let extra = ((needed - self.grid.half_width()) / h).ceil().max(0.0) as usize;
        let grid = Grid::new(self.grid.half_width() + extra as f64 * h, self.grid.points() + 2 * extra)?;
        let model = self.cfg.model_on(&grid, member.eps)?;
        let (lambda0, psi) = embedded_state(&model, self.cfg.model.n_embed)?;
        let phi0 = to_complex(&psi);
        let spec = PropagationSpec {
            frame: lambda0,
            sample_every: d.sample_every,
            max_states: 0,
            ..PropagationSpec::new(dt, t_final, Scheme::Cayley)
        };
        let projector = LatticeProjector::new(&grid, &self.cutoffs);
        let mut series =
            survival_run(model.h(), &grid, &psi, &phi0, &spec, &projector, self.cfg.weights.sigma, d.weight_every)?;
        let horizon = reflection_horizon(&grid, radius, speed);
        if t_final > horizon {
            series.warnings.push(format!("run length {t_final:.1} exceeds the reflection horizon {horizon:.1}"));
        }
        let fit = fit_decay(&series.times, &series.amplitude, gamma);
        Ok(DecayRun { eps: member.eps, grid, series, fit, t_final, horizon, dt, lambda0 })
    }
}

fn support_radius(grid: &Grid, psi: &[f64]) -> f64 {
    let n = grid.points();
    let peak = psi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    psi.iter()
        .enumerate()
        .filter(|(_, v)| v.abs() > 1e-12 * peak)
        .map(|(i, _)| grid.nodes()[i % n].abs())
        .fold(0.0, f64::max)
}

fn log_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    fit_line(&lx, &ly).map(|f| f.slope)
}

/// Members ordered by decreasing coupling.
fn by_decreasing_eps(members: &[Member]) -> Vec<&Member> {
    let mut v: Vec<&Member> = members.iter().collect();
    v.sort_by(|a, b| b.eps.total_cmp(&a.eps));
    v
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

fn join_nums(v: &[f64]) -> String {
    v.iter().map(|x| fmt_num(*x)).collect::<Vec<_>>().join(", ")
}

fn closest_member(members: &[Member], eps: f64) -> Option<&Member> {
    members.iter().min_by(|a, b| (a.eps - eps).abs().total_cmp(&(b.eps - eps).abs()))
}

// ---------------------------------------------------------------------------
// acceptance rows

fn row(id: u8, name: &'static str, passed: bool, measured: String, tolerance: impl Into<String>) -> CheckRow {
    CheckRow { id, name, passed, measured, tolerance: tolerance.into() }
}

fn failed_row(id: u8, name: &'static str, error: impl std::fmt::Display, tolerance: impl Into<String>) -> CheckRow {
    row(id, name, false, format!("error: {}", error.to_string().lines().next().unwrap_or("")), tolerance)
}

const ROW_NAMES: [&str; 11] = [
    "unitarity and stationarity",
    "oracle equivalence",
    "golden-rule eps^2 scaling",
    "three-way width consistency",
    "pole agreement",
    "laplace identity",
    "volterra vs propagation",
    "local decay and tail",
    "second-order expansion",
    "operator smallness",
    "continuum-limit stability",
];

fn row_name(id: u8) -> &'static str {
    ROW_NAMES[(id - 1) as usize]
}

impl Lab<'_> {
    fn row_unitarity(&self) -> Result<CheckRow, HarnessError> {
        let model = self.cfg.model_on(&self.grid, 0.0)?;
        let (lambda, psi) = embedded_state(&model, self.cfg.model.n_embed)?;
        let phi0 = to_complex(&psi);
        let dt = self.cfg.dynamics.dt;
        let every = ((1.0 / dt).round() as usize).max(1);
        let spec = PropagationSpec { sample_every: every, max_states: 0, ..PropagationSpec::new(dt, 50.0, Scheme::Cayley) };
        let projector = LatticeProjector::new(&self.grid, &self.cutoffs);
        let s = survival_run(model.h(), &self.grid, &psi, &phi0, &spec, &projector, self.cfg.weights.sigma, 0)?;
        let modulus = s.amplitude.iter().map(|a| (a.norm() - 1.0).abs()).fold(0.0, f64::max);
        let drift = s
            .times
            .iter()
            .zip(&s.amplitude)
            .filter(|(t, _)| **t >= 1.0)
            .map(|(t, a)| (a * C64::from_polar(1.0, lambda * t)).arg().abs() / t)
            .fold(0.0, f64::max);
        let passed = modulus <= 1e-8 && drift <= 1e-6;
        Ok(row(
            1,
            row_name(1),
            passed,
            format!("max||a|-1| = {}, phase drift = {} per unit time", fmt_num(modulus), fmt_num(drift)),
            "||a|-1| <= 1e-8, drift <= 1e-6",
        ))
    }

    fn row_oracle(&self) -> Result<CheckRow, HarnessError> {
        let h = self.grid.spacing();
        let grid = Grid::new(64.0 * h, 128)?;
        let model = self.cfg.model_on(&grid, 0.1)?;
        let (lambda, psi) = embedded_state(&model, self.cfg.model.n_embed)?;
        let phi0 = to_complex(&psi);
        let dt = self.cfg.dynamics.dt;
        let every = ((0.1 / dt).round() as usize).max(1);
        let base = PropagationSpec { frame: lambda, sample_every: every, max_states: 0, ..PropagationSpec::new(dt, 20.0, Scheme::Cayley) };
        let projector = LatticeProjector::new(&grid, &self.cutoffs);
        let scheme: Scheme = self.cfg.dynamics.scheme.parse().map_err(HarnessError::Config)?;
        let run = |scheme| survival_run(model.h(), &grid, &psi, &phi0, &PropagationSpec { scheme, ..base }, &projector, 1.0, 0);
        let a = run(scheme)?;
        let b = run(Scheme::DenseOracle)?;
        let diff = a.amplitude.iter().zip(&b.amplitude).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        let traj = propagate(model.h(), &phi0, &PropagationSpec { sample_every: base.steps(), ..base })?;
        let norm_error = traj.norms.iter().map(|n| (n - 1.0).abs()).fold(0.0, f64::max);
        Ok(row(
            2,
            row_name(2),
            diff <= 1e-6,
            format!("max|a_{} - a_oracle| = {} (norm drift {})", scheme.tag(), fmt_num(diff), fmt_num(norm_error)),
            "<= 1e-6",
        ))
    }

    fn row_fgr_scaling(&self, fgr: &[FgrResult]) -> CheckRow {
        let eps: Vec<f64> = fgr.iter().map(|f| f.eps).collect();
        let g: Vec<f64> = fgr.iter().map(|f| f.gamma0).collect();
        match log_slope(&eps, &g) {
            Some(slope) => row(3, row_name(3), (slope - 2.0).abs() <= 0.05, format!("slope = {slope:.6}"), "2.00 +/- 0.05"),
            None => row(3, row_name(3), false, "slope undefined (non-positive width or fewer than two strengths)".into(), "2.00 +/- 0.05"),
        }
    }

    fn row_width_consistency(&self, members: &[Member], run: Option<&DecayRun>) -> CheckRow {
        let tol = "|fit/root - 1| <= 0.10 and |Γ/Γ₀ - 1| decreasing";
        let ordered = by_decreasing_eps(members);
        let gaps: Vec<f64> = ordered.iter().map(|m| m.report.gamma_relative_gap).collect();
        let trend = ordered.len() >= 2 && strictly_decreasing(&gaps);
        let Some(run) = run else {
            return row(4, row_name(4), false, "no decay run".into(), tol);
        };
        let member = ordered.iter().find(|m| m.eps == run.eps).expect("decay run belongs to a member");
        match &run.fit {
            Ok(fit) => {
                let ratio = fit.rate / member.report.gamma - 1.0;
                row(
                    4,
                    row_name(4),
                    ratio.abs() <= 0.10 && trend,
                    format!(
                        "eps {}: fit/root - 1 = {}; |Γ/Γ₀ - 1| = [{}]",
                        run.eps,
                        fmt_num(ratio),
                        join_nums(&gaps)
                    ),
                    tol,
                )
            }
            Err(e) => failed_row(4, row_name(4), e, tol),
        }
    }

    fn row_pole(&self, members: &[Member]) -> CheckRow {
        let tol = "winding = 1, |Re p_z + Γ|/Γ <= 0.2 at the smallest eps, tightening";
        let ordered = by_decreasing_eps(members);
        let Some(smallest) = ordered.last() else {
            return row(5, row_name(5), false, "no members".into(), tol);
        };
        let gaps: Vec<Option<f64>> = ordered.iter().map(|m| m.report.pole_relative_gap).collect();
        let listed = gaps.iter().map(|g| g.map_or("none".to_string(), fmt_num)).collect::<Vec<_>>().join(", ");
        let Some(pole) = &smallest.report.pole else {
            let why = smallest.pole_error.clone().unwrap_or_default();
            return row(5, row_name(5), false, format!("eps {}: no pole ({why})", smallest.eps), tol);
        };
        let gap = smallest.report.pole_relative_gap.unwrap_or(f64::INFINITY);
        let known: Vec<f64> = gaps.iter().flatten().copied().collect();
        let tightening = known.len() == gaps.len() && strictly_decreasing(&known);
        let winding_ok = (pole.winding - 1.0).abs() < 0.1;
        row(
            5,
            row_name(5),
            winding_ok && gap <= 0.2 && tightening,
            format!("eps {}: winding = {:.4}, gap = {}; gaps by eps = [{listed}]", smallest.eps, pole.winding, fmt_num(gap)),
            tol,
        )
    }

    fn row_laplace(&self, member: &Member, run: &DecayRun) -> CheckRow {
        let tol = "sup residual <= 1e-3 |a(0)|";
        let fit = match &run.fit {
            Ok(f) => f,
            Err(e) => return failed_row(6, row_name(6), e, tol),
        };
        let gamma = member.report.gamma;
        let center = -member.report.omega_star.re;
        let mut worst = 0.0f64;
        for k in 0..20 {
            let p = C64::new(gamma, center + gamma * (-10.0 + 20.0 * k as f64 / 19.0));
            let ahat = match laplace_numeric(&run.series.times, &run.series.amplitude, p, Some(&fit.tail_model())) {
                Ok(v) => v,
                Err(e) => return failed_row(6, row_name(6), e, tol),
            };
            let f = match member.evaluator.continued_eps2(p) {
                Ok(v) => v,
                Err(e) => return failed_row(6, row_name(6), e, tol),
            };
            worst = worst.max(identity_residual(p, member.report.omega, f, ahat, run.series.a0));
        }
        let scale = run.series.a0.norm();
        row(
            6,
            row_name(6),
            worst <= 1e-3 * scale,
            format!("eps {}: sup residual / |a(0)| = {} over 20 points at Re p = Γ", run.eps, fmt_num(worst / scale)),
            tol,
        )
    }

    fn row_volterra(&self, member: &Member, run: &DecayRun) -> Result<(CheckRow, AmplitudeSeries), HarnessError> {
        let gamma = member.report.gamma;
        let stride = self.cfg.dynamics.sample_every;
        let t_end = 5.0 / gamma;
        let samples = run.series.times.iter().take_while(|&&t| t <= t_end + 1e-9).count();
        let steps = (samples - 1) * stride;
        let coupling = ModeCoupling::embedded(&member.evaluator.reduced, &self.grid, &run.grid, &self.cutoffs)?;
        let sol = solve_amplitude_volterra(run.series.a0, &coupling, run.dt, steps, run.lambda0, self.cfg.dynamics.volterra_tol)?;
        let diff = (0..samples)
            .map(|m| (sol.series.amplitude[m * stride] - run.series.amplitude[m]).norm())
            .fold(0.0, f64::max);
        let checked = row(
            7,
            row_name(7),
            diff <= 1e-4,
            format!(
                "eps {}: max|a_volterra - a_pde| = {} on [0, {:.1}] ({} Picard iterations)",
                run.eps,
                fmt_num(diff),
                run.series.times[samples - 1],
                sol.iterations
            ),
            "<= 1e-4 on [0, 5/Γ]",
        );
        Ok((checked, sol.series))
    }

    fn row_tails(&self, member: &Member, run: &DecayRun, eta: &EtaSummary) -> CheckRow {
        let target = 1.0 + eta.eta;
        let tol = format!("both exponents within 0.3 of 1 + η̂ = {}", fmt_num(target));
        let start = 5.0 / member.report.gamma;
        let every = self.cfg.dynamics.weight_every.max(1);
        let (lt, lw): (Vec<f64>, Vec<f64>) = run
            .series
            .times
            .iter()
            .zip(&run.series.weighted_norm)
            .enumerate()
            .filter(|(k, (t, w))| k % every == 0 && **t >= start && **w > 0.0)
            .map(|(_, (t, w))| (t.ln(), w.ln()))
            .unzip();
        let dispersive = if lt.len() >= 3 { fit_line(&lt, &lw).map(|f| -f.slope) } else { None };
        let tail = run.fit.as_ref().ok().and_then(|f| f.tail.as_ref()).map(|t| t.exponent);
        let show = |v: Option<f64>| v.map_or("empty window".to_string(), fmt_num);
        let ok = |v: Option<f64>| v.is_some_and(|q| (q - target).abs() <= 0.3);
        row(
            8,
            row_name(8),
            ok(dispersive) && ok(tail) && eta.eta.is_finite(),
            format!(
                "eps {}: φ_d exponent = {}, |a| tail exponent = {} (t > {:.1}, T = {:.1})",
                run.eps,
                show(dispersive),
                show(tail),
                start,
                run.t_final
            ),
            tol,
        )
    }

    fn row_expansion(&self, members: &[Member]) -> CheckRow {
        let tol = "residual ratio <= 0.7 per halving";
        let ordered = by_decreasing_eps(members);
        let res: Vec<f64> = ordered.iter().map(|m| m.report.expansion.plus).collect();
        let alt: Vec<f64> = ordered.iter().map(|m| m.report.expansion.minus).collect();
        if res.len() < 2 {
            return row(9, row_name(9), false, "needs at least two strengths".into(), tol);
        }
        let ratios: Vec<f64> = res.windows(2).map(|w| w[1] / w[0]).collect();
        let alt_ratios: Vec<f64> = alt.windows(2).map(|w| w[1] / w[0]).collect();
        row(
            9,
            row_name(9),
            ratios.iter().all(|r| *r <= 0.7),
            format!(
                "+Λ residual/ε² = [{}], ratios = [{}]; with -Λ: [{}], ratios = [{}]",
                join_nums(&res),
                join_nums(&ratios),
                join_nums(&alt),
                join_nums(&alt_ratios)
            ),
            tol,
        )
    }

    /// `‖K f‖_{β;σ}/‖f‖_β` and `‖A_W f‖_{β;σ}/‖f‖_β` for `f = e^{-iωt}ψ0`.
    fn operator_norms(&self, member: &Member) -> Result<(f64, f64), HarnessError> {
        let ev = &member.evaluator;
        let coupling = ModeCoupling::from_band(&ev.reduced, &ev.band);
        let dt = self.cfg.dynamics.decay_dt;
        let steps = (self.cfg.dynamics.operator_horizon / dt).round() as usize;
        let times: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();
        let omega = ev.omega();
        let alpha: Vec<C64> = times.iter().map(|&t| C64::from_polar(1.0, -omega * t)).collect();
        let psi = to_complex(&member.spectral.psi0);
        let source = KOperator::source(&ev.reduced, &psi, &alpha);
        let k = KOperator { coupling: &coupling, dt, frame: omega };
        let (sigma, beta) = (self.cfg.weights.sigma, self.cfg.weights.beta);
        let kf = weighted_sup_norm(&k.apply(&times, &source)?, &ev.band.modes, &self.grid, sigma, beta);
        let af = weighted_sup_norm(&k.apply_aw(&times, &source)?, &ev.band.modes, &self.grid, sigma, beta);
        let f_norm = times.iter().map(|&t| crate::model::japanese_bracket(t).powf(beta) * norm(&psi)).fold(0.0, f64::max);
        Ok((kf / f_norm, af / f_norm))
    }

    fn row_operators(&self, members: &[Member]) -> Result<(CheckRow, Section), HarnessError> {
        let ordered = by_decreasing_eps(members);
        let mut section = Section::new("operator norms");
        let mut eps = Vec::new();
        let mut ks = Vec::new();
        let mut aws = Vec::new();
        for m in &ordered {
            let (k, a) = self.operator_norms(m)?;
            section.num(&format!("k_ratio eps={}", m.eps), k).num(&format!("a_w eps={}", m.eps), a);
            eps.push(m.eps);
            ks.push(k);
            aws.push(a);
        }
        let tol = "slopes 1.0 +/- 0.2";
        let (Some(sk), Some(sa)) = (log_slope(&eps, &ks), log_slope(&eps, &aws)) else {
            return Ok((row(10, row_name(10), false, "slope undefined".into(), tol), section));
        };
        section.num("k_slope", sk).num("a_w_slope", sa);
        Ok((
            row(
                10,
                row_name(10),
                (sk - 1.0).abs() <= 0.2 && (sa - 1.0).abs() <= 0.2,
                format!("K slope = {sk:.4}, A_W slope = {sa:.4}"),
                tol,
            ),
            section,
        ))
    }

    fn row_continuum(&self) -> Result<(CheckRow, Section), HarnessError> {
        let eps = self.cfg.run.eps;
        let mut widths = Vec::new();
        let mut section = Section::new(format!("continuum limit eps={eps}"));
        for scale in [1usize, 2] {
            let grid = Grid::new(self.grid.half_width() * scale as f64, self.grid.points() * scale)?;
            let model = self.cfg.model_on(&grid, eps)?;
            let spectral = self.spectral(&model)?;
            let ladder = self.ladder(spectral.lambda0, grid.half_width())?;
            let f = fgr_summary(eps, &model, &spectral, &ladder)?;
            section.num(&format!("gamma0 L={} N={}", grid.half_width(), grid.points()), f.gamma0);
            widths.push(f.gamma0);
        }
        let change = (widths[1] / widths[0] - 1.0).abs();
        Ok((
            row(11, row_name(11), change <= 0.02, format!("relative change = {}", fmt_num(change)), "<= 0.02"),
            section,
        ))
    }
}

// ---------------------------------------------------------------------------
// commands

fn spectrum_section(lab: &Lab, model: &TwoChannel, spectral: &SpectralModel) -> Result<Section, HarnessError> {
    let cfg = lab.cfg;
    let mut s = Section::new(format!("spectrum eps={}", model.eps()));
    let n = model.channel_len();
    s.num("lambda0", spectral.lambda0);
    let (osc, _) = spectral.oscillator_spectrum();
    s.put("oscillator_levels", join_nums(&osc[..osc.len().min(4)]));
    let (free, _) = spectral.free_spectrum();
    s.put("free_levels", join_nums(&free[..free.len().min(3)]));
    s.num("free_band_top", free[free.len() - 1]);
    let psi = to_complex(&spectral.psi0);
    s.num("psi0_norm", norm(&psi));
    let p0 = spectral.apply_p0(&psi);
    s.num("p0_psi0_residual", norm(&p0.iter().zip(&psi).map(|(a, b)| a - b).collect::<Vec<_>>()));
    s.num("pc_psi0_norm", norm(&spectral.apply_pc(&psi)));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let v: Vec<C64> = (0..2 * n).map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
    let (a, b, c) = (spectral.apply_p0(&v), spectral.apply_p1(&v), spectral.apply_pc(&v));
    let sum: Vec<C64> = (0..2 * n).map(|i| a[i] + b[i] + c[i] - v[i]).collect();
    s.num("completeness_residual", norm(&sum) / norm(&v));
    let p0p0 = spectral.apply_p0(&a);
    s.num("p0_idempotence", norm(&p0p0.iter().zip(&a).map(|(x, y)| x - y).collect::<Vec<_>>()) / norm(&v));
    s.num("p0_pc_product", norm(&spectral.apply_p0(&c)) / norm(&v));
    let (lo, hi) = lab.cutoffs.continuum_support();
    s.put("continuum_support", format!("[{}, {}]", fmt_num(lo), fmt_num(hi)));
    let embedded = spectral.lambda0 > 0.0 && spectral.lambda0 < free[free.len() - 1];
    s.put("embedded", embedded.to_string());
    let tn = triple_norm_w(model, spectral, cfg.weights.sigma, cfg.cutoff.shift)?;
    s.num("w_weighted_cutoff", tn.weighted_cutoff)
        .num("w_sandwiched_cutoff", tn.sandwiched_cutoff)
        .num("w_resolvent", tn.resolvent)
        .num("w_triple_norm", tn.total())
        .num("w_resolvent_two_sided", tn.resolvent_two_sided);
    Ok(s)
}

fn sweep_section(members: &[Member]) -> Section {
    let ordered = by_decreasing_eps(members);
    let eps: Vec<f64> = ordered.iter().map(|m| m.eps).collect();
    let mut s = Section::new("sweep");
    s.put("eps", join_nums(&eps));
    let columns: [(&str, Box<dyn Fn(&Member) -> f64>); 6] = [
        ("gamma", Box::new(|m: &Member| m.report.gamma)),
        ("gamma0", Box::new(|m: &Member| m.report.gamma0)),
        ("gamma_fgr_shifted", Box::new(|m: &Member| m.gamma_fgr_shifted)),
        ("minus_delta", Box::new(|m: &Member| -m.report.delta)),
        ("lambda_shift_abs", Box::new(|m: &Member| m.report.lambda_shift.abs())),
        ("cutoff_product_norm", Box::new(|m: &Member| m.report.cutoff_product_norm)),
    ];
    for (name, f) in columns {
        let v: Vec<f64> = ordered.iter().map(|m| f(m)).collect();
        s.put(name, join_nums(&v));
        match log_slope(&eps, &v) {
            Some(slope) => s.put(&format!("{name}_slope"), format!("{slope:.6}")),
            None => s.put(&format!("{name}_slope"), "undefined"),
        };
    }
    s
}

fn volterra_section(run: &DecayRun, volterra: &AmplitudeSeries, stride: usize) -> Section {
    let mut s = Section::new(format!("volterra eps={}", run.eps));
    let samples = volterra.len().div_ceil(stride);
    for frac in [0.25, 0.5, 0.75, 1.0] {
        let m = (((samples - 1) as f64 * frac).round() as usize).min(samples - 1);
        let t = run.series.times[m];
        s.put(
            &format!("t={t:.1}"),
            format!("volterra {} | pde {}", fmt_c(volterra.amplitude[m * stride]), fmt_c(run.series.amplitude[m])),
        );
    }
    s
}

fn run_section(run: &DecayRun, member: &Member) -> Section {
    let mut s = Section::new(format!("decay run eps={}", run.eps));
    s.num("half_width", run.grid.half_width())
        .put("points", run.grid.points().to_string())
        .num("dt", run.dt)
        .num("t_final", run.t_final)
        .num("reflection_horizon", run.horizon)
        .put("samples", run.series.len().to_string());
    for w in &run.series.warnings {
        s.put("warning", w.clone());
    }
    let profile = remainder_profile(&run.series.times, &run.series.amplitude, member.report.omega_star, &[0.5, 1.0, 2.0, 3.0]);
    for (x, r) in profile {
        s.num(&format!("remainder tΓ={x}"), r);
    }
    s
}

fn write_series(cfg: &ExperimentConfig, out: Option<&Path>, name: &str, series: &AmplitudeSeries, report: &mut RunReport) -> Result<(), HarnessError> {
    if !cfg.output.series {
        return Ok(());
    }
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    std::fs::create_dir_all(&dir).map_err(io_error(&dir))?;
    let path = dir.join(name);
    emit_series(series, &path)?;
    report.artifacts.push(path);
    Ok(())
}

/// Runs `command` and writes artifacts into `out` (or `output.dir`).
pub fn run(command: Command, loaded: &LoadedConfig, out: Option<&Path>) -> Result<RunReport, HarnessError> {
    let cfg = &loaded.config;
    let mut lab = Lab::new(cfg)?;
    let mut report = RunReport::new(command, loaded);
    let rows = command.rows();
    let wants = |id: u8| rows.contains(&id);

    match command {
        Command::Spectrum => {
            let section = lab.timed("spectrum", |lab| -> Result<Section, HarnessError> {
                let model = cfg.model_on(&lab.grid, cfg.run.eps)?;
                let spectral = lab.spectral(&model)?;
                spectrum_section(lab, &model, &spectral)
            })?;
            report.sections.push(section);
        }
        Command::Fgr => {
            let fgr = lab.timed("fgr", |lab| -> Result<Vec<FgrResult>, HarnessError> {
                let model = cfg.model_on(&lab.grid, cfg.model.eps[0])?;
                let spectral = lab.spectral(&model)?;
                let ladder = lab.ladder(spectral.lambda0, lab.grid.half_width())?;
                cfg.model.eps.iter().map(|&e| Ok(fgr_summary(e, &model, &spectral, &ladder)?)).collect()
            })?;
            report.checks.push(lab.row_fgr_scaling(&fgr));
            report.fgr = fgr;
            let (checked, section) = lab.timed("continuum", |lab| lab.row_continuum())?;
            report.sections.push(section);
            report.checks.push(checked);
        }
        Command::Resonance | Command::Sweep | Command::Evolve | Command::Verify => {
            let members = if command == Command::Evolve {
                lab.timed("members", |lab| lab.member(cfg.run.eps).map(|m| vec![m]))?
            } else {
                lab.timed("members", |lab| lab.members())?
            };
            report.fgr = members.iter().map(|m| m.fgr.clone()).collect();
            report.resonance = members.iter().map(|m| m.report.clone()).collect();
            if matches!(command, Command::Sweep | Command::Verify) {
                report.sections.push(sweep_section(&members));
            }
            if wants(1) {
                report.checks.push(lab.timed("unitarity", |lab| lab.row_unitarity())?);
            }
            if wants(2) {
                report.checks.push(lab.timed("oracle", |lab| lab.row_oracle())?);
            }
            if wants(3) {
                report.checks.push(lab.row_fgr_scaling(&report.fgr));
            }
            if wants(4) {
                let smallest = by_decreasing_eps(&members).last().copied();
                let run = match smallest {
                    Some(m) => Some(lab.timed("decay run (width)", |lab| lab.decay_run(m, cfg.dynamics.gamma_t))?),
                    None => None,
                };
                if let (Some(run), Some(m)) = (&run, smallest) {
                    report.sections.push(run_section(run, m));
                    if let Ok(fit) = &run.fit {
                        report.decay.push((run.eps, fit.clone()));
                    }
                    write_series(cfg, out, &format!("series-width-eps{}.csv", run.eps), &run.series, &mut report)?;
                }
                report.checks.push(lab.row_width_consistency(&members, run.as_ref()));
            }
            if wants(5) {
                report.checks.push(lab.row_pole(&members));
            }
            if wants(6) || wants(7) || wants(8) {
                let member = closest_member(&members, cfg.run.eps).expect("at least one member");
                let regularity = lab.timed("local decay", |lab| lab.regularity());
                let regularity = match regularity {
                    Ok(r) => Some(r),
                    Err(e) => {
                        report.sections.push(Section { title: "local decay".into(), fields: vec![("error".into(), e.to_string())] });
                        None
                    }
                };
                let eta = lab.eta(member, regularity.as_ref());
                let run = lab.timed("decay run (tail)", |lab| lab.decay_run(member, cfg.dynamics.tail_gamma_t))?;
                report.sections.push(run_section(&run, member));
                if let Ok(fit) = &run.fit {
                    report.decay.push((run.eps, fit.clone()));
                }
                write_series(cfg, out, &format!("series-eps{}.csv", run.eps), &run.series, &mut report)?;
                if wants(6) {
                    report.checks.push(lab.timed("laplace identity", |lab| lab.row_laplace(member, &run)));
                }
                if wants(7) {
                    let (checked, volterra) = lab.timed("volterra", |lab| lab.row_volterra(member, &run))?;
                    report.sections.push(volterra_section(&run, &volterra, cfg.dynamics.sample_every));
                    report.checks.push(checked);
                }
                if wants(8) {
                    report.checks.push(lab.row_tails(member, &run, &eta));
                }
                report.regularity = regularity;
                report.eta = Some(eta);
            }
            if wants(9) {
                report.checks.push(lab.row_expansion(&members));
            }
            if wants(10) {
                let (checked, section) = lab.timed("operators", |lab| lab.row_operators(&members))?;
                report.sections.push(section);
                report.checks.push(checked);
            }
            if wants(11) {
                let (checked, section) = lab.timed("continuum", |lab| lab.row_continuum())?;
                report.sections.push(section);
                report.checks.push(checked);
            }
        }
    }
    report.checks.sort_by_key(|c| c.id);
    if cfg.run.timing {
        report.timing = std::mem::take(&mut lab.timing);
    }
    Ok(report)
}

/// Runs a command and writes `<command>-report.txt` next to the series files.
pub fn run_and_emit(command: Command, loaded: &LoadedConfig, out: Option<&Path>) -> Result<RunReport, HarnessError> {
    let mut report = run(command, loaded, out)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&loaded.config.output.dir));
    std::fs::create_dir_all(&dir).map_err(io_error(&dir))?;
    let path = dir.join(format!("{}-report.txt", command.name()));
    report.artifacts.push(path.clone());
    emit_report(&report, &path)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_an_empty_file() {
        let loaded = ExperimentConfig::parse("", &[]).unwrap();
        assert_eq!(loaded.config, ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = ExperimentConfig::parse("[grid]\nhalf_width = 64.0\npionts = 512\n", &[]).unwrap_err();
        assert!(err.to_string().contains("pionts"), "{err}");
        let err = ExperimentConfig::parse("[gird]\n", &[]).unwrap_err();
        assert!(err.to_string().contains("gird"), "{err}");
        let err = ExperimentConfig::parse("", &["dynamics.dtt=0.1".into()]).unwrap_err();
        assert!(err.to_string().contains("dtt"), "{err}");
    }

    #[test]
    fn overrides_take_toml_values() {
        let loaded = ExperimentConfig::parse(
            "[model]\neps = [0.1]\n",
            &["model.eps=[0.2, 0.1]".into(), "dynamics.scheme=dense-oracle".into(), "run.eps=0.1".into()],
        )
        .unwrap();
        assert_eq!(loaded.config.model.eps, vec![0.2, 0.1]);
        assert_eq!(loaded.config.dynamics.scheme, "dense-oracle");
        assert_eq!(loaded.config.run.eps, 0.1);
        assert!(matches!(ExperimentConfig::parse("", &["noequals".into()]), Err(HarnessError::Override(_))));
        assert!(matches!(ExperimentConfig::parse("", &["a.b.c=1".into()]), Err(HarnessError::Override(_))));
    }

    #[test]
    fn invalid_values_are_rejected_at_load() {
        for bad in ["model.eps=[]", "dynamics.dt=0", "dynamics.scheme=\"euler\"", "cutoff.window=[1.5, 0.5]", "grid.points=0"] {
            assert!(ExperimentConfig::parse("", &[bad.to_string()]).is_err(), "{bad}");
        }
    }

    #[test]
    fn series_round_trip_is_exact() {
        let series = AmplitudeSeries {
            times: vec![0.0, 0.1, 0.2],
            amplitude: vec![C64::new(1.0, 0.0), C64::new(0.1 / 3.0, -1e-300), C64::new(-2.5e-17, 7.0)],
            weighted_norm: vec![0.0, 1.0 / 3.0, 5e-324],
            sigma: 1.5,
            a0: C64::new(1.0, 0.0),
            warnings: Vec::new(),
        };
        let back = parse_series(&render_series(&series)).unwrap();
        assert_eq!(back, series);
        assert!(parse_series("1,2,3,4,5\n").is_err());
        assert!(parse_series(&format!("# {SERIES_HEADER}\n1,2,3\n")).is_err());
    }

    #[test]
    fn slopes_and_trends() {
        let eps = [0.1, 0.05, 0.025];
        let g: Vec<f64> = eps.iter().map(|e| 3.0 * e * e).collect();
        assert!((log_slope(&eps, &g).unwrap() - 2.0).abs() < 1e-12);
        assert!(log_slope(&eps, &[1.0, 0.0, 1.0]).is_none());
        assert!(strictly_decreasing(&[3.0, 2.0, 1.0]));
        assert!(!strictly_decreasing(&[3.0, 3.0]));
    }
}
