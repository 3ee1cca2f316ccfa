//! Closed-form QoE metrics from transient analysis of the tagged-flow chains.
//!
//! Conditioning on the state seen at arrival (PASTA), the playout buffer of
//! a tagged flow is a fluid driven by the background Markov chain. Two ODE
//! systems in the buffer level q carry all the information:
//!
//! - starvation: `c_ij W'_ij(q) = (lambda + mu + nu + phi) W_ij - (coupling
//!   terms)`, where `W_ij(q)` is the probability of draining the buffer
//!   before download completion when playback starts at state (i,j) with q
//!   content-seconds buffered. In matrix form `W'(q) = M_W W(q)`, solved
//!   spectrally with boundary values `W_ij(0) = 1` on negative-drift states
//!   and the coefficients of all non-decaying eigenmodes set to zero.
//! - startup: `V'(q) = M_V V(q)` with `V(qa; qa) = I`, so the state
//!   transition matrix over the prefetch phase is `V(0; qa) =
//!   exp(-M_V qa)`, a proper stochastic matrix.
//!
//! The per-class starvation probability composes the pieces as
//! `P_s(qa) = exp(-theta qa) * pi' V(0;qa) W(qa)`, and the mean
//! downloading-time/viewing-time ratio integrates the mean sojourn
//! `S(0;qv)` against the viewing-time density.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::markov::{
    arrival_distribution, ArrivalSnapshot, FlowClass, Mc1, RateMatrices, StateSpace, SystemConfig,
};
use crate::quadrature;
use crate::PerClass;

/// Which buffer ODE a system encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OdeKind {
    /// Playback phase, drift c = b - 1, with absorption.
    Starvation,
    /// Startup phase, drift b, no absorption.
    Startup,
    /// Inhomogeneous download-time system; same matrix as `Startup`.
    Sojourn,
}

/// One ODE system `y'(q) = M y(q)` over the tagged state space.
#[derive(Debug, Clone)]
pub struct OdeSystem {
    pub kind: OdeKind,
    pub matrix: Array2<f64>,
    /// Per-state drift divisor: c for starvation, b for startup/sojourn.
    pub divisors: Vec<f64>,
    pub space: StateSpace,
}

fn assemble(
    rates: &RateMatrices,
    cfg: &SystemConfig,
    divisors: &[f64],
    with_absorption: bool,
    kind: OdeKind,
) -> OdeSystem {
    let space = rates.space;
    let cap = space.admission_cap();
    let n = space.len();
    let mut m = Array2::<f64>::zeros((n, n));
    for (i, j) in space.iter() {
        let l = space.index(i, j);
        let div = divisors[l];
        // Arrivals are rejected while the cell is full (the tagged flow
        // occupies one slot), so blocked rates leave the balance entirely.
        let blocked = i + j == cap - 1;
        let lam1 = if blocked { 0.0 } else { cfg.arrival_rate_short };
        let lam2 = if blocked { 0.0 } else { cfg.arrival_rate_long };
        let absorb = if with_absorption { rates.absorb[l] } else { 0.0 };
        m[[l, l]] = (lam1 + lam2 + rates.depart_short[l] + rates.depart_long[l] + absorb) / div;
        if !blocked {
            m[[l, space.index(i + 1, j)]] = -lam1 / div;
            m[[l, space.index(i, j + 1)]] = -lam2 / div;
        }
        if i > 0 {
            m[[l, space.index(i - 1, j)]] = -rates.depart_short[l] / div;
        }
        if j > 0 {
            m[[l, space.index(i, j - 1)]] = -rates.depart_long[l] / div;
        }
    }
    OdeSystem {
        kind,
        matrix: m,
        divisors: divisors.to_vec(),
        space,
    }
}

/// Assemble the starvation system M_W (playback drift divisors, absorption).
pub fn build_starvation_system(rates: &RateMatrices, cfg: &SystemConfig) -> Result<OdeSystem> {
    if rates.fill_playback.iter().any(|c| c.abs() < 1e-10) {
        return Err(Error::numerical(
            "starvation system",
            "a state has zero playback drift; rate construction should have perturbed it",
        ));
    }
    Ok(assemble(rates, cfg, &rates.fill_playback, true, OdeKind::Starvation))
}

/// Assemble the startup system M_V (startup fill divisors, no absorption).
pub fn build_startup_system(rates: &RateMatrices, cfg: &SystemConfig) -> OdeSystem {
    assemble(rates, cfg, &rates.fill_startup, false, OdeKind::Startup)
}

/// Eigendecomposition `M = D diag(L) D^-1` with quality gates.
#[derive(Debug, Clone)]
pub struct SpectralForm {
    pub eigenvalues: Vec<Complex64>,
    pub basis: Array2<Complex64>,
    pub inverse_basis: Array2<Complex64>,
    pub condition_estimate: f64,
    pub residual: f64,
}

impl SpectralForm {
    pub fn decompose(m: &Array2<f64>) -> Result<Self> {
        let (eigenvalues, basis) = linalg::eig(m)?;
        let inverse_basis = linalg::inv_complex(&basis)?;
        let n = m.nrows();

        let mut rebuilt = Array2::<Complex64>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                rebuilt[[i, j]] = (0..n)
                    .map(|k| basis[[i, k]] * eigenvalues[k] * inverse_basis[[k, j]])
                    .sum();
            }
        }
        let mut diff = 0.0f64;
        let mut scale = 0.0f64;
        for i in 0..n {
            let row_diff: f64 = (0..n)
                .map(|j| (rebuilt[[i, j]] - Complex64::new(m[[i, j]], 0.0)).norm())
                .sum();
            let row_scale: f64 = (0..n).map(|j| m[[i, j]].abs()).sum();
            diff = diff.max(row_diff);
            scale = scale.max(row_scale);
        }
        let residual = diff / scale.max(1e-300);
        let condition_estimate =
            linalg::one_norm_complex(&basis) * linalg::one_norm_complex(&inverse_basis);
        if residual > 1e-8 {
            return Err(Error::numerical(
                "spectral decomposition",
                format!(
                    "defective or ill-conditioned eigenbasis: residual {residual:.3e}, \
                     condition {condition_estimate:.3e}"
                ),
            ));
        }
        Ok(SpectralForm {
            eigenvalues,
            basis,
            inverse_basis,
            condition_estimate,
            residual,
        })
    }
}

/// How the free boundary values of the starvation system are pinned down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    /// Zero the coefficients of every eigenmode with nonnegative real part
    /// (the bounded-solution reading; W must stay in [0,1] for all q).
    #[default]
    BoundedModes,
    /// Zero as many leading coefficients as there are nonnegative-drift
    /// states, with eigenvalues ordered by descending real part. Coincides
    /// with `BoundedModes` whenever the stability count matches.
    StateIndexed,
}

/// Solved starvation system: boundary values plus the decaying-mode
/// expansion, evaluable at any buffer level.
#[derive(Debug, Clone)]
pub struct StarvationSolution {
    pub w0: Vec<f64>,
    eigenvalues: Vec<Complex64>,
    basis: Array2<Complex64>,
    coefficients: Vec<Complex64>,
}

impl StarvationSolution {
    /// W(q): per-state starvation probability with q buffered at playback start.
    pub fn evaluate(&self, q: f64) -> Vec<f64> {
        assert!(q >= 0.0, "buffer level must be nonnegative");
        if q == 0.0 {
            return self.w0.clone();
        }
        let n = self.w0.len();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for (k, &lambda) in self.eigenvalues.iter().enumerate() {
                let c = self.coefficients[k];
                if c.norm() == 0.0 {
                    continue;
                }
                acc += self.basis[[i, k]] * c * (lambda * q).exp();
            }
            assert!(
                acc.im.abs() < 1e-9,
                "starvation solution has imaginary residue {}",
                acc.im
            );
            out[i] = acc.re.clamp(0.0, 1.0);
        }
        out
    }
}

/// Solve the starvation boundary problem.
///
/// Negative-drift states starve immediately from an empty buffer
/// (`W(0) = 1`); the remaining initial values are the unique choice that
/// cancels every non-decaying eigenmode, which is a square linear system
/// when the number of such modes equals the number of positive-drift
/// states (checked, with a condition report on failure).
pub fn solve_starvation(
    system: &OdeSystem,
    spectral: &SpectralForm,
    mode: BoundaryMode,
) -> Result<StarvationSolution> {
    debug_assert_eq!(system.kind, OdeKind::Starvation);
    let n = system.space.len();
    let negative: Vec<usize> = (0..n).filter(|&l| system.divisors[l] < 0.0).collect();
    let positive: Vec<usize> = (0..n).filter(|&l| system.divisors[l] >= 0.0).collect();

    let rate_scale = spectral
        .eigenvalues
        .iter()
        .fold(0.0f64, |m, v| m.max(v.norm()));
    let zero_modes: Vec<usize> = match mode {
        BoundaryMode::BoundedModes => (0..n)
            .filter(|&k| spectral.eigenvalues[k].re > -1e-9 * rate_scale.max(1.0))
            .collect(),
        BoundaryMode::StateIndexed => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                spectral.eigenvalues[b]
                    .re
                    .partial_cmp(&spectral.eigenvalues[a].re)
                    .unwrap()
                    .then(
                        spectral.eigenvalues[b]
                            .im
                            .partial_cmp(&spectral.eigenvalues[a].im)
                            .unwrap(),
                    )
            });
            order.truncate(positive.len());
            order
        }
    };
    if zero_modes.len() != positive.len() {
        return Err(Error::numerical(
            "starvation boundary",
            format!(
                "{} non-decaying modes vs {} nonnegative-drift states; \
                 eigenbasis condition {:.3e}",
                zero_modes.len(),
                positive.len(),
                spectral.condition_estimate
            ),
        ));
    }

    let mut w0 = vec![0.0f64; n];
    for &l in &negative {
        w0[l] = 1.0;
    }
    if !positive.is_empty() {
        // Constraints: rows of D^-1 for the zeroed modes, applied to W(0).
        let m = positive.len();
        let mut a = Array2::<Complex64>::zeros((m, m));
        let mut rhs = Array2::<Complex64>::zeros((m, 1));
        for (r, &mode_idx) in zero_modes.iter().enumerate() {
            for (p, &col) in positive.iter().enumerate() {
                a[[r, p]] = spectral.inverse_basis[[mode_idx, col]];
            }
            let known: Complex64 = negative
                .iter()
                .map(|&col| spectral.inverse_basis[[mode_idx, col]])
                .sum();
            rhs[[r, 0]] = -known;
        }
        let solution = linalg::solve_complex(&a, &rhs).map_err(|e| {
            Error::numerical(
                "starvation boundary",
                format!(
                    "boundary system singular (eigenbasis condition {:.3e}): {e}",
                    spectral.condition_estimate
                ),
            )
        })?;
        for (p, &col) in positive.iter().enumerate() {
            let v = solution[[p, 0]];
            if v.im.abs() > 1e-7 || v.re < -1e-6 || v.re > 1.0 + 1e-6 {
                return Err(Error::numerical(
                    "starvation boundary",
                    format!("boundary value out of range: {v}"),
                ));
            }
            w0[col] = v.re.clamp(0.0, 1.0);
        }
    }

    // Expansion coefficients, with the cancelled modes pinned to exactly
    // zero so no roundoff can reintroduce growth at large q.
    let mut coefficients = vec![Complex64::new(0.0, 0.0); n];
    for k in 0..n {
        coefficients[k] = (0..n)
            .map(|l| spectral.inverse_basis[[k, l]] * w0[l])
            .sum();
    }
    for &k in &zero_modes {
        coefficients[k] = Complex64::new(0.0, 0.0);
    }
    Ok(StarvationSolution {
        w0,
        eigenvalues: spectral.eigenvalues.clone(),
        basis: spectral.basis.clone(),
        coefficients,
    })
}

/// Startup transition matrix `V(0; qa) = exp(-M_V qa)`: row r is the state
/// distribution at the end of prefetch given arrival in state r.
pub fn solve_startup(system: &OdeSystem, qa: f64) -> Result<Array2<f64>> {
    debug_assert!(matches!(system.kind, OdeKind::Startup | OdeKind::Sojourn));
    if qa < 0.0 {
        return Err(Error::invalid("startup threshold must be nonnegative"));
    }
    let mut v = linalg::expm(&system.matrix.mapv(|x| -x * qa))?;
    let n = v.nrows();
    for i in 0..n {
        let mut row_sum = 0.0;
        for j in 0..n {
            let e = v[[i, j]];
            if e < 0.0 {
                if e < -1e-12 {
                    return Err(Error::numerical(
                        "startup transition",
                        format!("entry ({i},{j}) = {e:.3e} below -1e-12"),
                    ));
                }
                v[[i, j]] = 0.0;
            }
            row_sum += v[[i, j]];
        }
        if (row_sum - 1.0).abs() > 1e-9 {
            return Err(Error::numerical(
                "startup transition",
                format!("row {i} sums to {row_sum}, not stochastic"),
            ));
        }
    }
    Ok(v)
}

fn h_ratio(x: Complex64) -> Complex64 {
    // (1 - e^{-x}) / x with the series limit near zero.
    if x.norm() < 1e-4 {
        let one = Complex64::new(1.0, 0.0);
        one - x / 2.0 + x * x / 6.0 - x * x * x / 24.0
    } else {
        (Complex64::new(1.0, 0.0) - (-x).exp()) / x
    }
}

/// Mean downloading time of `qv` content-seconds per arrival state:
/// `S(0; qv) = D diag((1 - e^{-delta qv})/delta) D^-1 {1/b}`, with the
/// `delta = 0` diagonal entry evaluated as the limit `qv`.
pub fn mean_sojourn(qv: f64, spectral_v: &SpectralForm, inv_fill: &[f64]) -> Result<Vec<f64>> {
    if !(qv > 0.0) {
        return Err(Error::invalid("viewing time must be positive"));
    }
    let n = inv_fill.len();
    let mut transformed = vec![Complex64::new(0.0, 0.0); n];
    for k in 0..n {
        let coeff: Complex64 = (0..n)
            .map(|l| spectral_v.inverse_basis[[k, l]] * inv_fill[l])
            .sum();
        transformed[k] = coeff * h_ratio(spectral_v.eigenvalues[k] * qv) * qv;
    }
    let mut out = vec![0.0; n];
    for i in 0..n {
        let acc: Complex64 = (0..n)
            .map(|k| spectral_v.basis[[i, k]] * transformed[k])
            .sum();
        if acc.im.abs() > 1e-9 * acc.re.abs().max(1.0) {
            return Err(Error::numerical(
                "mean sojourn",
                format!("imaginary residue {:.3e}", acc.im),
            ));
        }
        out[i] = acc.re;
    }
    Ok(out)
}

/// Per-class pipeline: rates plus the decomposed ODE systems.
struct ClassPipeline {
    rates: RateMatrices,
    starvation: StarvationSolution,
    startup_system: OdeSystem,
    spectral_v: SpectralForm,
    mw_condition: f64,
    mw_residual: f64,
    /// pi' D_V and D_V^-1 {1/b}: everything DT/VT integration needs.
    dtvt_left: Vec<Complex64>,
    dtvt_right: Vec<Complex64>,
}

/// Solver for one system configuration; both tagged classes are prepared
/// so sweeps over the startup threshold reuse the heavy decompositions.
pub struct QoeSolver {
    cfg: SystemConfig,
    space: StateSpace,
    occupancy: Vec<f64>,
    arrival: ArrivalSnapshot,
    boundary_mode: BoundaryMode,
    pipelines: PerClass<ClassPipeline>,
}

impl QoeSolver {
    pub fn new(cfg: &SystemConfig) -> Result<Self> {
        Self::with_boundary_mode(cfg, BoundaryMode::default())
    }

    pub fn with_boundary_mode(cfg: &SystemConfig, boundary_mode: BoundaryMode) -> Result<Self> {
        cfg.validate()?;
        let mc1 = Mc1::for_config(cfg)?;
        let occupancy = crate::markov::stationary_distribution(&mc1.generator)?;
        let arrival = arrival_distribution(&occupancy, &mc1.space)?;

        let build = |class: FlowClass| -> Result<ClassPipeline> {
            let class_cfg = cfg.clone().with_tagged(class);
            let rates = RateMatrices::for_config(&class_cfg)?;
            let mw = build_starvation_system(&rates, &class_cfg)?;
            let spectral_w = SpectralForm::decompose(&mw.matrix)?;
            let starvation = solve_starvation(&mw, &spectral_w, boundary_mode)?;
            let startup_system = build_startup_system(&rates, &class_cfg);
            let spectral_v = SpectralForm::decompose(&startup_system.matrix)?;

            let n = rates.space.len();
            let inv_fill: Vec<f64> = rates.fill_startup.iter().map(|b| 1.0 / b).collect();
            let mut dtvt_left = vec![Complex64::new(0.0, 0.0); n];
            let mut dtvt_right = vec![Complex64::new(0.0, 0.0); n];
            for k in 0..n {
                dtvt_left[k] = (0..n)
                    .map(|l| Complex64::new(arrival.pi[l], 0.0) * spectral_v.basis[[l, k]])
                    .sum();
                dtvt_right[k] = (0..n)
                    .map(|l| spectral_v.inverse_basis[[k, l]] * inv_fill[l])
                    .sum();
            }
            Ok(ClassPipeline {
                rates,
                mw_condition: spectral_w.condition_estimate,
                mw_residual: spectral_w.residual,
                starvation,
                startup_system,
                spectral_v,
                dtvt_left,
                dtvt_right,
            })
        };

        let pipelines = PerClass::new(build(FlowClass::Short)?, build(FlowClass::Long)?);
        Ok(QoeSolver {
            cfg: cfg.clone(),
            space: mc1.space,
            occupancy,
            arrival,
            boundary_mode,
            pipelines,
        })
    }

    pub fn config(&self) -> &SystemConfig {
        &self.cfg
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn arrival(&self) -> &ArrivalSnapshot {
        &self.arrival
    }

    pub fn occupancy(&self) -> &[f64] {
        &self.occupancy
    }

    pub fn rates(&self, class: FlowClass) -> &RateMatrices {
        &self.pipelines.get(class).rates
    }

    /// W(q) for the tagged class, per starting state.
    pub fn starvation_given_state(&self, class: FlowClass, q: f64) -> Vec<f64> {
        self.pipelines.get(class).starvation.evaluate(q)
    }

    /// Startup transition matrix V(0; qa) for the tagged class.
    pub fn startup_transition(&self, class: FlowClass, qa: f64) -> Result<Array2<f64>> {
        solve_startup(&self.pipelines.get(class).startup_system, qa)
    }

    /// Overall starvation probability of an accepted tagged flow:
    /// survival of the prefetch times pi' V(0;qa) W(qa).
    pub fn starvation_probability(&self, class: FlowClass, qa: f64) -> Result<f64> {
        let pipeline = self.pipelines.get(class);
        let w = pipeline.starvation.evaluate(qa);
        let value = if qa == 0.0 {
            self.arrival
                .pi
                .iter()
                .zip(&w)
                .map(|(p, w)| p * w)
                .sum::<f64>()
        } else {
            let v = self.startup_transition(class, qa)?;
            let n = w.len();
            let mut acc = 0.0;
            for l in 0..n {
                let row: f64 = (0..n).map(|m| v[[l, m]] * w[m]).sum();
                acc += self.arrival.pi[l] * row;
            }
            acc
        };
        let survival = (-self.cfg.view_rate(class) * qa).exp();
        Ok((survival * value).clamp(0.0, 1.0))
    }

    /// Mean downloading time of `qv` content per arrival state.
    pub fn mean_sojourn(&self, class: FlowClass, qv: f64) -> Result<Vec<f64>> {
        let pipeline = self.pipelines.get(class);
        let inv_fill: Vec<f64> = pipeline.rates.fill_startup.iter().map(|b| 1.0 / b).collect();
        mean_sojourn(qv, &pipeline.spectral_v, &inv_fill)
    }

    fn dtvt_integrand(&self, class: FlowClass) -> impl Fn(f64) -> f64 + '_ {
        let pipeline = self.pipelines.get(class);
        let theta = self.cfg.view_rate(class);
        move |qv: f64| {
            let mut g = Complex64::new(0.0, 0.0);
            for k in 0..pipeline.dtvt_left.len() {
                g += pipeline.dtvt_left[k]
                    * h_ratio(pipeline.spectral_v.eigenvalues[k] * qv)
                    * pipeline.dtvt_right[k];
            }
            g.re * theta * (-theta * qv).exp()
        }
    }

    /// Mean DT/VT ratio by adaptive quadrature of
    /// `E[S(0;qv)]/qv` against the viewing-time density, truncated where
    /// the exponential weight drops below 1e-12.
    pub fn mean_dtvt(&self, class: FlowClass) -> Result<f64> {
        let theta = self.cfg.view_rate(class);
        let q_max = -(1e-12f64.ln()) / theta;
        let f = self.dtvt_integrand(class);
        let quad = quadrature::integrate_adaptive(|q| f(q), 1e-12 / theta, q_max, 1e-9, 1e-12)
            .map_err(|e| match e {
                Error::NonConvergence { iterations, message } => Error::NonConvergence {
                    iterations,
                    message: format!("mean DT/VT quadrature: {message}"),
                },
                other => other,
            })?;
        let value = quad.value;
        let lower = self.cfg.bitrate_bps / self.cfg.capacity_bps;
        if value < lower - 1e-9 {
            return Err(Error::numerical(
                "mean DT/VT",
                format!("ratio {value} below the full-channel bound {lower}"),
            ));
        }
        Ok(value)
    }

    /// Closed-form DT/VT via the per-mode Frullani integral
    /// `int (1-e^{-d q})/(d q) theta e^{-theta q} dq = (theta/d) ln(1 + d/theta)`;
    /// cross-check for the quadrature route.
    pub fn mean_dtvt_closed_form(&self, class: FlowClass) -> Result<f64> {
        let pipeline = self.pipelines.get(class);
        let theta = Complex64::new(self.cfg.view_rate(class), 0.0);
        let mut acc = Complex64::new(0.0, 0.0);
        for k in 0..pipeline.dtvt_left.len() {
            let delta = pipeline.spectral_v.eigenvalues[k];
            let factor = if delta.norm() < 1e-12 * theta.norm() {
                Complex64::new(1.0, 0.0)
            } else {
                (theta / delta) * (Complex64::new(1.0, 0.0) + delta / theta).ln()
            };
            acc += pipeline.dtvt_left[k] * factor * pipeline.dtvt_right[k];
        }
        if acc.im.abs() > 1e-9 * acc.re.abs().max(1.0) {
            return Err(Error::numerical(
                "mean DT/VT closed form",
                format!("imaginary residue {:.3e}", acc.im),
            ));
        }
        Ok(acc.re)
    }

    /// Full report at the configured startup threshold.
    pub fn report(&self) -> Result<QoEReport> {
        self.report_at(self.cfg.startup_threshold_s)
    }

    /// Full report at an arbitrary startup threshold; the heavy spectral
    /// work is shared across thresholds.
    pub fn report_at(&self, qa: f64) -> Result<QoEReport> {
        let starvation = PerClass::new(
            self.starvation_probability(FlowClass::Short, qa)?,
            self.starvation_probability(FlowClass::Long, qa)?,
        );
        let dtvt = PerClass::new(
            self.mean_dtvt(FlowClass::Short)?,
            self.mean_dtvt(FlowClass::Long)?,
        );
        let report = QoEReport {
            admission_cap: self.cfg.admission_cap,
            startup_threshold_s: qa,
            weight_ratio: self.cfg.weight_short / self.cfg.weight_long,
            offered_load: self.cfg.offered_load(),
            progressive: self.cfg.progressive,
            starvation,
            dtvt,
            p_reject: self.arrival.p_reject,
            dtvt_lower_bound: self.cfg.bitrate_bps / self.cfg.capacity_bps,
            occupancy: self.occupancy.clone(),
            diagnostics: SolverDiagnostics {
                boundary_mode: self.boundary_mode,
                mw_condition: self.pipelines.map(|p| p.mw_condition),
                mw_residual: self.pipelines.map(|p| p.mw_residual),
                bitrate_perturbation: self
                    .pipelines
                    .get(FlowClass::Short)
                    .rates
                    .bitrate_perturbation,
            },
        };
        report.validate()?;
        Ok(report)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolverDiagnostics {
    pub boundary_mode: BoundaryMode,
    pub mw_condition: PerClass<f64>,
    pub mw_residual: PerClass<f64>,
    pub bitrate_perturbation: Option<f64>,
}

/// Per-class QoE metrics, identical in shape for the analytic and
/// simulation paths.
#[derive(Debug, Clone, Serialize)]
pub struct QoEReport {
    pub admission_cap: usize,
    pub startup_threshold_s: f64,
    pub weight_ratio: f64,
    pub offered_load: f64,
    pub progressive: bool,
    pub starvation: PerClass<f64>,
    pub dtvt: PerClass<f64>,
    pub p_reject: f64,
    pub dtvt_lower_bound: f64,
    pub occupancy: Vec<f64>,
    pub diagnostics: SolverDiagnostics,
}

impl QoEReport {
    pub fn validate(&self) -> Result<()> {
        for class in FlowClass::BOTH {
            let p = *self.starvation.get(class);
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::numerical(
                    "report",
                    format!("starvation probability {p} outside [0,1]"),
                ));
            }
            let d = *self.dtvt.get(class);
            if d < self.dtvt_lower_bound - 1e-9 {
                return Err(Error::numerical(
                    "report",
                    format!("DT/VT {d} below bound {}", self.dtvt_lower_bound),
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.p_reject) {
            return Err(Error::numerical(
                "report",
                format!("rejection probability {} outside [0,1]", self.p_reject),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn csv_header() -> &'static str {
        "admission_cap,startup_threshold_s,weight_ratio,offered_load,progressive,class,\
         starvation_probability,mean_dtvt,p_reject"
    }

    pub fn csv_rows(&self) -> Vec<String> {
        FlowClass::BOTH
            .iter()
            .map(|&class| {
                format!(
                    "{},{},{},{},{},{},{},{},{}",
                    self.admission_cap,
                    self.startup_threshold_s,
                    self.weight_ratio,
                    self.offered_load,
                    self.progressive,
                    class,
                    self.starvation.get(class),
                    self.dtvt.get(class),
                    self.p_reject
                )
            })
            .collect()
    }
}

/// One-shot solve at the configured startup threshold.
pub fn solve_qoe(cfg: &SystemConfig) -> Result<QoEReport> {
    QoeSolver::new(cfg)?.report()
}

/// Direct RK4 integration of `y' = M y` for cross-checking the spectral
/// solution; step count is chosen from the rate scale.
pub fn propagate_direct(system: &OdeSystem, y0: &[f64], q: f64) -> Vec<f64> {
    let y = Array1::from_vec(y0.to_vec());
    if q == 0.0 {
        return y.to_vec();
    }
    let scale = linalg::one_norm(&system.matrix);
    let steps = ((scale * q * 50.0).ceil() as usize).clamp(2000, 400_000);
    linalg::rk4_propagate(&system.matrix, &y, q, steps).to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn reference_config() -> SystemConfig {
        SystemConfig::default()
    }

    fn small_config(k: usize) -> SystemConfig {
        let mut cfg = reference_config();
        cfg.admission_cap = k;
        cfg
    }

    #[test]
    fn k1_starvation_matrix_is_absorption_over_drift() {
        // Single state, arrivals blocked: M_W = [phi_00 / c_00].
        let cfg = small_config(1);
        let rates = RateMatrices::build(&cfg).unwrap();
        let mw = build_starvation_system(&rates, &cfg).unwrap();
        assert_eq!(mw.matrix.nrows(), 1);
        assert_abs_diff_eq!(
            mw.matrix[[0, 0]],
            rates.absorb[0] / rates.fill_playback[0],
            epsilon = 1e-15
        );
    }

    #[test]
    fn starvation_matrix_matches_block_stencil() {
        // The only nonzeros are the diagonal and the four lattice
        // neighbors; compare against an independently generated stencil.
        let cfg = small_config(3);
        let rates = RateMatrices::build(&cfg).unwrap();
        let mw = build_starvation_system(&rates, &cfg).unwrap();
        let space = rates.space;
        for (i, j) in space.iter() {
            let l = space.index(i, j);
            for (i2, j2) in space.iter() {
                let m = space.index(i2, j2);
                let neighbor = (i2 == i + 1 && j2 == j)
                    || (i2 == i && j2 == j + 1)
                    || (i + 1 == i2 + 2 && j2 == j) // i2 == i - 1
                    || (i2 == i && j + 1 == j2 + 2); // j2 == j - 1
                if l == m || neighbor {
                    continue;
                }
                assert_eq!(mw.matrix[[l, m]], 0.0, "spurious entry at ({i},{j})->({i2},{j2})");
            }
        }
    }

    #[test]
    fn starvation_rows_balance_to_absorption() {
        // Applying M_W to the all-ones vector isolates phi/c in every row:
        // blocked arrival rates are censored from the diagonal.
        let cfg = small_config(4);
        let rates = RateMatrices::build(&cfg).unwrap();
        let mw = build_starvation_system(&rates, &cfg).unwrap();
        for (i, j) in rates.space.iter() {
            let l = rates.space.index(i, j);
            let row_sum: f64 = mw.matrix.row(l).sum();
            assert_abs_diff_eq!(
                row_sum,
                rates.absorb[l] / rates.fill_playback[l],
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn startup_rows_balance_to_zero() {
        let cfg = small_config(4);
        let rates = RateMatrices::build(&cfg).unwrap();
        let mv = build_startup_system(&rates, &cfg);
        for l in 0..rates.space.len() {
            assert!(mv.matrix.row(l).sum().abs() < 1e-12);
        }
    }

    #[test]
    fn k1_uncongested_never_starves() {
        // C > bitrate: positive drift everywhere forces W == 0.
        let cfg = small_config(1);
        let rates = RateMatrices::build(&cfg).unwrap();
        let mw = build_starvation_system(&rates, &cfg).unwrap();
        let spectral = SpectralForm::decompose(&mw.matrix).unwrap();
        let sol = solve_starvation(&mw, &spectral, BoundaryMode::BoundedModes).unwrap();
        assert_eq!(sol.w0, vec![0.0]);
        for q in [0.0, 5.0, 50.0] {
            assert_eq!(sol.evaluate(q), vec![0.0]);
        }
    }

    #[test]
    fn negative_drift_states_start_at_one() {
        let cfg = small_config(8);
        let rates = RateMatrices::build(&cfg).unwrap();
        let mw = build_starvation_system(&rates, &cfg).unwrap();
        let spectral = SpectralForm::decompose(&mw.matrix).unwrap();
        let sol = solve_starvation(&mw, &spectral, BoundaryMode::BoundedModes).unwrap();
        for l in 0..rates.space.len() {
            if rates.fill_playback[l] < 0.0 {
                assert_abs_diff_eq!(sol.w0[l], 1.0, epsilon = 1e-12);
            } else {
                assert!(sol.w0[l] >= 0.0 && sol.w0[l] < 1.0);
            }
        }
    }

    #[test]
    fn spectral_solution_matches_direct_integration() {
        // Cross-method oracle for K up to 6. Forward integration excites
        // the cancelled growing modes from roundoff at e^{Re lambda q}, so
        // the comparison points keep that amplification below 1e-8.
        for k in [2, 4, 6] {
            let cfg = small_config(k);
            for class in FlowClass::BOTH {
                let class_cfg = cfg.clone().with_tagged(class);
                let rates = RateMatrices::build(&class_cfg).unwrap();
                let mw = build_starvation_system(&rates, &class_cfg).unwrap();
                let spectral = SpectralForm::decompose(&mw.matrix).unwrap();
                let sol = solve_starvation(&mw, &spectral, BoundaryMode::BoundedModes).unwrap();
                let growth = spectral
                    .eigenvalues
                    .iter()
                    .map(|v| v.re)
                    .fold(0.0f64, f64::max);
                let q_safe = 18.0 / growth.max(0.5);
                for q in [0.2 * q_safe, 0.6 * q_safe, q_safe] {
                    let spectral_w = sol.evaluate(q);
                    let direct = propagate_direct(&mw, &sol.w0, q);
                    for l in 0..spectral_w.len() {
                        assert!(
                            (spectral_w[l] - direct[l]).abs() < 1e-6,
                            "K={k} class={class} q={q} state {l}: {} vs {}",
                            spectral_w[l],
                            direct[l]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn spectral_solution_satisfies_the_ode_everywhere() {
        // Residual check with no amplification limit: central differences
        // of W(q) against M_W W(q), over the whole q range of interest.
        let cfg = small_config(6);
        let rates = RateMatrices::build(&cfg).unwrap();
        let mw = build_starvation_system(&rates, &cfg).unwrap();
        let spectral = SpectralForm::decompose(&mw.matrix).unwrap();
        let sol = solve_starvation(&mw, &spectral, BoundaryMode::BoundedModes).unwrap();
        let h = 1e-5;
        for q in [0.5, 3.0, 17.0, 60.0, 150.0] {
            let w = Array1::from_vec(sol.evaluate(q));
            let plus = Array1::from_vec(sol.evaluate(q + h));
            let minus = Array1::from_vec(sol.evaluate(q - h));
            let numeric = (&plus - &minus) / (2.0 * h);
            let exact = mw.matrix.dot(&w);
            for l in 0..w.len() {
                assert!(
                    (numeric[l] - exact[l]).abs() < 1e-6 * (1.0 + exact[l].abs()),
                    "q={q} state {l}: {} vs {}",
                    numeric[l],
                    exact[l]
                );
            }
        }
    }

    #[test]
    fn boundary_modes_agree_on_reference_case() {
        let cfg = small_config(6);
        let rates = RateMatrices::build(&cfg).unwrap();
        let mw = build_starvation_system(&rates, &cfg).unwrap();
        let spectral = SpectralForm::decompose(&mw.matrix).unwrap();
        let a = solve_starvation(&mw, &spectral, BoundaryMode::BoundedModes).unwrap();
        let b = solve_starvation(&mw, &spectral, BoundaryMode::StateIndexed).unwrap();
        for (x, y) in a.w0.iter().zip(&b.w0) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn starvation_is_monotone_in_buffer_and_state() {
        let cfg = small_config(6);
        let rates = RateMatrices::build(&cfg).unwrap();
        let mw = build_starvation_system(&rates, &cfg).unwrap();
        let spectral = SpectralForm::decompose(&mw.matrix).unwrap();
        let sol = solve_starvation(&mw, &spectral, BoundaryMode::BoundedModes).unwrap();
        let grid: Vec<f64> = (0..50).map(|k| k as f64 * 2.0).collect();
        let mut prev = sol.evaluate(grid[0]);
        for &q in &grid[1..] {
            let w = sol.evaluate(q);
            for l in 0..w.len() {
                assert!(
                    w[l] <= prev[l] + 1e-9,
                    "W not nonincreasing in q at state {l}: {} -> {}",
                    prev[l],
                    w[l]
                );
            }
            // More congestion hurts: W[i,j] <= W[i',j'] when i<=i', j<=j'.
            for (i, j) in rates.space.iter() {
                for (i2, j2) in rates.space.iter() {
                    if i <= i2 && j <= j2 {
                        let a = w[rates.space.index(i, j)];
                        let b = w[rates.space.index(i2, j2)];
                        assert!(a <= b + 1e-9, "ordering violated at ({i},{j}) vs ({i2},{j2})");
                    }
                }
            }
            prev = w;
        }
    }

    #[test]
    fn startup_transition_is_identity_at_zero() {
        let cfg = small_config(4);
        let rates = RateMatrices::build(&cfg).unwrap();
        let mv = build_startup_system(&rates, &cfg);
        let v = solve_startup(&mv, 0.0).unwrap();
        for i in 0..v.nrows() {
            for j in 0..v.ncols() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(v[[i, j]], want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn startup_transition_is_row_stochastic() {
        let cfg = small_config(5);
        let rates = RateMatrices::build(&cfg).unwrap();
        let mv = build_startup_system(&rates, &cfg);
        for qa in [1.0, 10.0, 120.0] {
            let v = solve_startup(&mv, qa).unwrap();
            for i in 0..v.nrows() {
                let s: f64 = v.row(i).sum();
                assert!((s - 1.0).abs() < 1e-9);
                for j in 0..v.ncols() {
                    assert!(v[[i, j]] >= 0.0);
                }
            }
        }
    }

    #[test]
    fn startup_rows_match_monte_carlo() {
        // K=3, qa=10: end-of-prefetch state distributions against a
        // jump-process simulation of the startup phase.
        use rand::Rng;
        let cfg = small_config(3);
        let rates = RateMatrices::build(&cfg).unwrap();
        let mv = build_startup_system(&rates, &cfg);
        let qa = 10.0;
        let v = solve_startup(&mv, qa).unwrap();
        let space = rates.space;
        let mut rng = crate::seed::rng_for(21, "startup-mc");
        for start in [(0usize, 0usize), (1usize, 1usize)] {
            let replicas = 200_000;
            let mut counts = vec![0u64; space.len()];
            for _ in 0..replicas {
                let (mut i, mut j) = start;
                let mut q = 0.0;
                loop {
                    let l = space.index(i, j);
                    let b = rates.fill_startup[l];
                    let blocked = i + j == 2;
                    let lam1 = if blocked { 0.0 } else { cfg.arrival_rate_short };
                    let lam2 = if blocked { 0.0 } else { cfg.arrival_rate_long };
                    let mu = rates.depart_short[l];
                    let nu = rates.depart_long[l];
                    let total = lam1 + lam2 + mu + nu;
                    let dwell = -(1.0 - rng.gen::<f64>()).ln() / total;
                    if q + b * dwell >= qa {
                        break;
                    }
                    q += b * dwell;
                    let u = rng.gen::<f64>() * total;
                    if u < lam1 {
                        i += 1;
                    } else if u < lam1 + lam2 {
                        j += 1;
                    } else if u < lam1 + lam2 + mu {
                        i -= 1;
                    } else {
                        j -= 1;
                    }
                }
                counts[space.index(i, j)] += 1;
            }
            let row = space.index(start.0, start.1);
            let tv: f64 = (0..space.len())
                .map(|m| (counts[m] as f64 / replicas as f64 - v[[row, m]]).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv < 0.01, "start {start:?}: TV distance {tv}");
        }
    }

    #[test]
    fn sojourn_matches_monte_carlo() {
        // K=3: mean downloading time of a fixed demand per start state
        // against a jump-process simulation, within 1%.
        use rand::Rng;
        let cfg = small_config(3);
        let solver = QoeSolver::new(&cfg).unwrap();
        let rates = solver.rates(FlowClass::Short);
        let space = rates.space;
        let qv = 400.0;
        let s = solver.mean_sojourn(FlowClass::Short, qv).unwrap();
        let mut rng = crate::seed::rng_for(22, "sojourn-mc");
        for start in [(0usize, 0usize), (0usize, 2usize)] {
            let replicas = 200_000;
            let mut total_time = 0.0;
            for _ in 0..replicas {
                let (mut i, mut j) = start;
                let mut q = 0.0;
                let mut t = 0.0;
                loop {
                    let l = space.index(i, j);
                    let b = rates.fill_startup[l];
                    let blocked = i + j == 2;
                    let lam1 = if blocked { 0.0 } else { cfg.arrival_rate_short };
                    let lam2 = if blocked { 0.0 } else { cfg.arrival_rate_long };
                    let mu = rates.depart_short[l];
                    let nu = rates.depart_long[l];
                    let total = lam1 + lam2 + mu + nu;
                    let dwell = -(1.0 - rng.gen::<f64>()).ln() / total;
                    if q + b * dwell >= qv {
                        t += (qv - q) / b;
                        break;
                    }
                    q += b * dwell;
                    t += dwell;
                    let u = rng.gen::<f64>() * total;
                    if u < lam1 {
                        i += 1;
                    } else if u < lam1 + lam2 {
                        j += 1;
                    } else if u < lam1 + lam2 + mu {
                        i -= 1;
                    } else {
                        j -= 1;
                    }
                }
                total_time += t;
            }
            let mc = total_time / replicas as f64;
            let expected = s[space.index(start.0, start.1)];
            assert!(
                (mc - expected).abs() / expected < 0.01,
                "start {start:?}: MC {mc} vs spectral {expected}"
            );
        }
    }

    #[test]
    fn startup_transition_matches_direct_integration() {
        let cfg = small_config(4);
        let rates = RateMatrices::build(&cfg).unwrap();
        let mv = build_startup_system(&rates, &cfg);
        let qa = 12.0;
        let v = solve_startup(&mv, qa).unwrap();
        let direct = linalg::rk4_propagate_matrix(&mv.matrix.mapv(|x| -x), qa, 20_000);
        for i in 0..v.nrows() {
            for j in 0..v.ncols() {
                assert!((v[[i, j]] - direct[[i, j]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn k1_sojourn_is_linear_in_demand() {
        // Lone flow, C > bitrate: downloading qv takes qv * bitrate / C.
        let cfg = small_config(1);
        let solver = QoeSolver::new(&cfg).unwrap();
        for qv in [1.0, 40.0, 900.0] {
            let s = solver.mean_sojourn(FlowClass::Short, qv).unwrap();
            assert_abs_diff_eq!(s[0], qv * 980.0e3 / 5.0e6, epsilon = 1e-9 * qv);
        }
    }

    #[test]
    fn sojourn_is_positive_and_nondecreasing() {
        let cfg = small_config(4);
        let solver = QoeSolver::new(&cfg).unwrap();
        let mut prev = vec![0.0; 10];
        for qv in [1.0, 5.0, 25.0, 125.0, 625.0] {
            let s = solver.mean_sojourn(FlowClass::Long, qv).unwrap();
            for (l, &v) in s.iter().enumerate() {
                assert!(v > 0.0);
                assert!(v >= prev[l] - 1e-9);
                prev[l] = v;
            }
        }
    }

    #[test]
    fn k1_dtvt_is_bitrate_over_capacity() {
        let cfg = small_config(1);
        let solver = QoeSolver::new(&cfg).unwrap();
        let dv = solver.mean_dtvt(FlowClass::Short).unwrap();
        assert_abs_diff_eq!(dv, 980.0e3 / 5.0e6, epsilon = 1e-9);
        assert!((dv - 0.196).abs() < 1e-9);
    }

    #[test]
    fn dtvt_quadrature_matches_closed_form() {
        let mut cfg = small_config(5);
        cfg.weight_short = 2.0; // break the EPS symmetry so modes matter
        let solver = QoeSolver::new(&cfg).unwrap();
        for class in FlowClass::BOTH {
            let quad = solver.mean_dtvt(class).unwrap();
            let closed = solver.mean_dtvt_closed_form(class).unwrap();
            assert!(
                (quad - closed).abs() < 1e-8,
                "class {class}: quadrature {quad} vs closed form {closed}"
            );
        }
    }

    #[test]
    fn eps_dtvt_is_class_independent() {
        // Equal weights: the content-clock chain started from the arrival
        // distribution is stationary, so DT/VT loses all theta dependence.
        let cfg = small_config(10);
        let solver = QoeSolver::new(&cfg).unwrap();
        let short = solver.mean_dtvt(FlowClass::Short).unwrap();
        let long = solver.mean_dtvt(FlowClass::Long).unwrap();
        assert!(
            (short - long).abs() < 1e-6,
            "EPS DT/VT differs: {short} vs {long}"
        );
    }

    #[test]
    fn starvation_probability_reference_window() {
        // Reference cell at load 0.96: the class-one probability falls
        // from about 0.48 at qa=0 to about 0.17 at qa=30; the long class
        // from about 0.57 to 0.48. Wide gates here, tight in acceptance.
        let solver = QoeSolver::new(&reference_config()).unwrap();
        let s0 = solver.starvation_probability(FlowClass::Short, 0.0).unwrap();
        let s30 = solver.starvation_probability(FlowClass::Short, 30.0).unwrap();
        let l0 = solver.starvation_probability(FlowClass::Long, 0.0).unwrap();
        let l30 = solver.starvation_probability(FlowClass::Long, 30.0).unwrap();
        assert!((s0 - 0.48).abs() < 0.08, "short qa=0: {s0}");
        assert!((s30 - 0.17).abs() < 0.08, "short qa=30: {s30}");
        assert!((l0 - 0.57).abs() < 0.08, "long qa=0: {l0}");
        assert!((l30 - 0.48).abs() < 0.08, "long qa=30: {l30}");
        assert!(s0 > s30 && l0 > l30);
        assert!(l0 > s0 && l30 > s30);
    }

    #[test]
    fn starvation_vanishes_for_large_threshold() {
        let solver = QoeSolver::new(&reference_config()).unwrap();
        let p = solver
            .starvation_probability(FlowClass::Short, 3000.0)
            .unwrap();
        assert!(p < 1e-10);
    }

    #[test]
    fn refined_rates_raise_starvation_below_saturation() {
        let cfg = reference_config();
        let basic = QoeSolver::new(&cfg).unwrap();
        let mut pd_cfg = cfg.clone();
        pd_cfg.progressive = true;
        let refined = QoeSolver::new(&pd_cfg).unwrap();
        for class in FlowClass::BOTH {
            for qa in [0.0, 20.0, 60.0] {
                let b = basic.starvation_probability(class, qa).unwrap();
                let r = refined.starvation_probability(class, qa).unwrap();
                assert!(r >= b - 1e-9, "class {class} qa={qa}: refined {r} < basic {b}");
            }
        }
    }

    #[test]
    fn solver_is_robust_across_configurations() {
        use proptest::prelude::*;
        let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig {
            cases: 24,
            ..ProptestConfig::default()
        });
        runner
            .run(
                &(
                    2usize..=7,
                    -1.5f64..1.5,
                    0.3f64..1.4,
                    30.0f64..200.0,
                    500.0f64..3000.0,
                    0.2f64..0.8,
                    0.0f64..120.0,
                ),
                |(k, log_ratio, load, mean_short, mean_long, p_short, qa)| {
                    let mut cfg = SystemConfig {
                        admission_cap: k,
                        weight_short: log_ratio.exp(),
                        view_rate_short: 1.0 / mean_short,
                        view_rate_long: 1.0 / mean_long,
                        ..SystemConfig::default()
                    };
                    cfg = cfg.with_offered_load(load, p_short);
                    let solver = QoeSolver::new(&cfg).unwrap();
                    for class in FlowClass::BOTH {
                        let near = solver.starvation_probability(class, qa).unwrap();
                        let far = solver.starvation_probability(class, qa * 2.0 + 5.0).unwrap();
                        prop_assert!((0.0..=1.0).contains(&near));
                        prop_assert!(far <= near + 1e-9, "P_s not monotone in threshold");
                        let dv = solver.mean_dtvt(class).unwrap();
                        prop_assert!(dv >= cfg.bitrate_bps / cfg.capacity_bps - 1e-9);
                        let closed = solver.mean_dtvt_closed_form(class).unwrap();
                        prop_assert!((dv - closed).abs() < 1e-7 * (1.0 + dv));
                    }
                    Ok(())
                },
            )
            .unwrap();
    }

    #[test]
    fn report_serializes_and_validates() {
        let mut cfg = small_config(3);
        cfg.startup_threshold_s = 10.0;
        let report = solve_qoe(&cfg).unwrap();
        report.validate().unwrap();
        let json = report.to_json();
        assert!(json.contains("starvation"));
        let rows = report.csv_rows();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].contains("short"));
        assert!(rows[1].contains("long"));
    }
}
