//! State spaces and transition rates for the flow-count Markov chains.
//!
//! A cell serves at most `K` concurrent video flows under discriminatory
//! processor sharing: a flow of class k receives the bandwidth fraction
//! `phi_k / (n1 phi_1 + n2 phi_2)`. Viewing times are a two-phase
//! exponential mixture, so flows split into a short class and a long class
//! and the pair of in-flight counts is a continuous-time Markov chain.
//!
//! Three chains matter for the tagged-flow analysis:
//! - the pre-arrival chain on `{(n1, n2) | n1 + n2 <= K}` (admission,
//!   stationary state seen by an arrival);
//! - the startup-phase chain on `{(i, j) | i + j <= K-1}` of *other* flow
//!   counts, with the tagged flow admitted but not yet departing;
//! - the playback-phase chain, which adds the tagged flow's own
//!   download-completion rate as an absorption term.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workload::HyperExpParams;


/// Flow class: short views drain fast (large viewing-time rate), long views slowly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowClass {
    Short,
    Long,
}

impl FlowClass {
    pub fn other(self) -> FlowClass {
        match self {
            FlowClass::Short => FlowClass::Long,
            FlowClass::Long => FlowClass::Short,
        }
    }

    pub const BOTH: [FlowClass; 2] = [FlowClass::Short, FlowClass::Long];
}

impl std::fmt::Display for FlowClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FlowClass::Short => write!(f, "short"),
            FlowClass::Long => write!(f, "long"),
        }
    }
}

/// Cell and workload parameters for one experiment point.
///
/// Rates are per second, capacities in bits per second, buffer levels in
/// seconds of video content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Downlink capacity of the cell in bits/s.
    pub capacity_bps: f64,
    /// Playback rate of the (identical) video streams in bits/s.
    pub bitrate_bps: f64,
    /// Admission cap K: at most this many concurrent flows.
    pub admission_cap: usize,
    /// DPS weight of short flows (phi_1).
    pub weight_short: f64,
    /// DPS weight of long flows (phi_2).
    pub weight_long: f64,
    /// Poisson arrival rate of short flows (lambda_1), 1/s.
    pub arrival_rate_short: f64,
    /// Poisson arrival rate of long flows (lambda_2), 1/s.
    pub arrival_rate_long: f64,
    /// Viewing-time rate of short flows (theta_1 = 1/mean), 1/s.
    pub view_rate_short: f64,
    /// Viewing-time rate of long flows (theta_2), 1/s.
    pub view_rate_long: f64,
    /// Startup threshold q_a: content-seconds prefetched before playback.
    pub startup_threshold_s: f64,
    /// Progressive downloading: players fetch ahead of the playhead, so the
    /// refined departure rates apply.
    pub progressive: bool,
    /// Class of the tagged flow whose QoE is analyzed.
    pub tagged: FlowClass,
}

/// Parameters of the reference configuration: 5 Mb/s cell, 980 kb/s
/// streams, cap of 10 flows, equal weights, and the measured viewing-time
/// mixture (60% short views of mean 94 s, 40% long views of mean 1143 s)
/// at offered load 0.96.
impl Default for SystemConfig {
    fn default() -> Self {
        let cfg = SystemConfig {
            capacity_bps: 5.0e6,
            bitrate_bps: 980.0e3,
            admission_cap: 10,
            weight_short: 1.0,
            weight_long: 1.0,
            arrival_rate_short: 0.0,
            arrival_rate_long: 0.0,
            view_rate_short: 1.0 / 94.0,
            view_rate_long: 1.0 / 1143.0,
            startup_threshold_s: 0.0,
            progressive: false,
            tagged: FlowClass::Short,
        };
        cfg.with_offered_load(0.96, 0.6)
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("capacity_bps", self.capacity_bps),
            ("bitrate_bps", self.bitrate_bps),
            ("weight_short", self.weight_short),
            ("weight_long", self.weight_long),
            ("view_rate_short", self.view_rate_short),
            ("view_rate_long", self.view_rate_long),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.admission_cap == 0 {
            return Err(Error::invalid("admission_cap must be at least 1"));
        }
        if self.arrival_rate_short < 0.0 || self.arrival_rate_long < 0.0 {
            return Err(Error::invalid("arrival rates must be nonnegative"));
        }
        if self.arrival_rate_short + self.arrival_rate_long <= 0.0 {
            return Err(Error::invalid("total arrival rate must be positive"));
        }
        if self.startup_threshold_s < 0.0 {
            return Err(Error::invalid("startup_threshold_s must be nonnegative"));
        }
        Ok(())
    }

    pub fn arrival_rate_total(&self) -> f64 {
        self.arrival_rate_short + self.arrival_rate_long
    }

    pub fn weight(&self, class: FlowClass) -> f64 {
        match class {
            FlowClass::Short => self.weight_short,
            FlowClass::Long => self.weight_long,
        }
    }

    pub fn arrival_rate(&self, class: FlowClass) -> f64 {
        match class {
            FlowClass::Short => self.arrival_rate_short,
            FlowClass::Long => self.arrival_rate_long,
        }
    }

    pub fn view_rate(&self, class: FlowClass) -> f64 {
        match class {
            FlowClass::Short => self.view_rate_short,
            FlowClass::Long => self.view_rate_long,
        }
    }

    /// Fraction of arrivals in `class` (p_k = lambda_k / lambda).
    pub fn class_fraction(&self, class: FlowClass) -> f64 {
        self.arrival_rate(class) / self.arrival_rate_total()
    }

    /// Mean standalone departure rate psi_k = C theta_k / Bitrate: the rate
    /// at which a class-k flow would complete if it had the cell to itself.
    pub fn service_rate(&self, class: FlowClass) -> f64 {
        self.capacity_bps * self.view_rate(class) / self.bitrate_bps
    }

    /// Offered load rho = lambda_1/psi_1 + lambda_2/psi_2.
    pub fn offered_load(&self) -> f64 {
        self.arrival_rate_short / self.service_rate(FlowClass::Short)
            + self.arrival_rate_long / self.service_rate(FlowClass::Long)
    }

    /// Set the arrival rates from a target offered load and short-class mix.
    pub fn with_offered_load(mut self, offered_load: f64, p_short: f64) -> Self {
        let lambda = calibrate_arrival_rate(
            offered_load,
            p_short,
            self.service_rate(FlowClass::Short),
            self.service_rate(FlowClass::Long),
        );
        self.arrival_rate_short = p_short * lambda;
        self.arrival_rate_long = (1.0 - p_short) * lambda;
        self
    }

    pub fn with_tagged(mut self, class: FlowClass) -> Self {
        self.tagged = class;
        self
    }

    pub fn with_startup_threshold(mut self, qa: f64) -> Self {
        self.startup_threshold_s = qa;
        self
    }

    /// The viewing-time mixture implied by the configured rates and mix.
    pub fn viewing_mixture(&self) -> HyperExpParams {
        HyperExpParams::new(
            self.class_fraction(FlowClass::Short),
            self.view_rate_short,
            self.view_rate_long,
        )
        .expect("config rates form a valid mixture")
    }
}

/// Total arrival rate that produces `offered_load` given the class mix:
/// lambda = rho / (p1/psi_1 + p2/psi_2).
pub fn calibrate_arrival_rate(
    offered_load: f64,
    p_short: f64,
    service_rate_short: f64,
    service_rate_long: f64,
) -> f64 {
    offered_load / (p_short / service_rate_short + (1.0 - p_short) / service_rate_long)
}

/// Triangular lattice of other-flow counts seen by an admitted tagged flow,
/// `S = {(i, j) | i + j <= K-1}`, in row-major order (i ascending, then j).
///
/// The same object also indexes the extended pre-arrival lattice
/// `{(n1, n2) | n1 + n2 <= K}` used by the admission chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateSpace {
    cap: usize,
}

impl StateSpace {
    pub fn new(admission_cap: usize) -> Result<Self> {
        if admission_cap == 0 {
            return Err(Error::invalid("state space requires admission cap >= 1"));
        }
        Ok(StateSpace { cap: admission_cap })
    }

    pub fn admission_cap(&self) -> usize {
        self.cap
    }

    /// Number of states with i + j <= K-1.
    pub fn len(&self) -> usize {
        self.cap * (self.cap + 1) / 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of states in the extended lattice i + j <= K.
    pub fn extended_len(&self) -> usize {
        (self.cap + 1) * (self.cap + 2) / 2
    }

    /// Zero-based linear index of (i, j) in S; row i starts after the
    /// K + (K-1) + ... + (K-i+1) states of the previous rows.
    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i + j < self.cap, "state ({i},{j}) outside S for K={}", self.cap);
        i * self.cap - i * (i.saturating_sub(1)) / 2 + j
    }

    /// One-based index, the convention used for block layouts.
    pub fn ordinal(&self, i: usize, j: usize) -> usize {
        self.index(i, j) + 1
    }

    pub fn state(&self, mut idx: usize) -> (usize, usize) {
        debug_assert!(idx < self.len());
        let mut i = 0;
        loop {
            let row = self.cap - i;
            if idx < row {
                return (i, idx);
            }
            idx -= row;
            i += 1;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.cap).flat_map(move |i| (0..self.cap - i).map(move |j| (i, j)))
    }

    pub fn extended_index(&self, n1: usize, n2: usize) -> usize {
        debug_assert!(n1 + n2 <= self.cap);
        n1 * (self.cap + 1) - n1 * (n1.saturating_sub(1)) / 2 + n2
    }

    pub fn extended_state(&self, mut idx: usize) -> (usize, usize) {
        debug_assert!(idx < self.extended_len());
        let mut n1 = 0;
        loop {
            let row = self.cap + 1 - n1;
            if idx < row {
                return (n1, idx);
            }
            idx -= row;
            n1 += 1;
        }
    }

    pub fn iter_extended(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..=self.cap).flat_map(move |n1| (0..=self.cap - n1).map(move |n2| (n1, n2)))
    }
}

/// Pre-arrival admission chain: generator over the extended lattice plus
/// the per-state departure rates of each class.
#[derive(Debug, Clone)]
pub struct Mc1 {
    pub space: StateSpace,
    /// Generator Q with Q[l][m] the rate l -> m and zero row sums.
    pub generator: Array2<f64>,
    /// Departure rate of the short class per state (eta_1).
    pub depart_short: Vec<f64>,
    /// Departure rate of the long class per state (eta_2).
    pub depart_long: Vec<f64>,
}

impl Mc1 {
    pub fn build(cfg: &SystemConfig) -> Result<Self> {
        Self::build_inner(cfg, false)
    }

    /// Refined admission chain for progressive downloading: a flow whose
    /// share exceeds the playback rate stays for its viewing time, so each
    /// class departure rate is capped at `n_k theta_k`.
    pub fn pd_refined(cfg: &SystemConfig) -> Result<Self> {
        Self::build_inner(cfg, true)
    }

    /// Chain matching the config's downloading mode.
    pub fn for_config(cfg: &SystemConfig) -> Result<Self> {
        Self::build_inner(cfg, cfg.progressive)
    }

    fn build_inner(cfg: &SystemConfig, cap_at_view_rate: bool) -> Result<Self> {
        cfg.validate()?;
        let space = StateSpace::new(cfg.admission_cap)?;
        let n = space.extended_len();
        let mut generator = Array2::<f64>::zeros((n, n));
        let mut depart_short = vec![0.0; n];
        let mut depart_long = vec![0.0; n];
        let cap = cfg.admission_cap;
        let cb = cfg.capacity_bps / cfg.bitrate_bps;

        for (n1, n2) in space.iter_extended() {
            let l = space.extended_index(n1, n2);
            let mut out = 0.0;
            let denom = n1 as f64 * cfg.weight_short + n2 as f64 * cfg.weight_long;
            // Departures: each class-k flow completes at theta_k times its
            // bandwidth share expressed in content-seconds per second.
            if n1 > 0 {
                let mut eta = n1 as f64 * cfg.weight_short * cfg.view_rate_short * cb / denom;
                if cap_at_view_rate {
                    eta = eta.min(n1 as f64 * cfg.view_rate_short);
                }
                depart_short[l] = eta;
                generator[[l, space.extended_index(n1 - 1, n2)]] = eta;
                out += eta;
            }
            if n2 > 0 {
                let mut eta = n2 as f64 * cfg.weight_long * cfg.view_rate_long * cb / denom;
                if cap_at_view_rate {
                    eta = eta.min(n2 as f64 * cfg.view_rate_long);
                }
                depart_long[l] = eta;
                generator[[l, space.extended_index(n1, n2 - 1)]] = eta;
                out += eta;
            }
            // Arrivals are blocked once the cell is full.
            if n1 + n2 < cap {
                generator[[l, space.extended_index(n1 + 1, n2)]] = cfg.arrival_rate_short;
                generator[[l, space.extended_index(n1, n2 + 1)]] = cfg.arrival_rate_long;
                out += cfg.arrival_rate_short + cfg.arrival_rate_long;
            }
            generator[[l, l]] = -out;
        }
        Ok(Mc1 {
            space,
            generator,
            depart_short,
            depart_long,
        })
    }
}

/// Per-state transition rates of the tagged-flow chains, plus the playout
/// buffer fill rates of the tagged flow.
#[derive(Debug, Clone)]
pub struct RateMatrices {
    pub space: StateSpace,
    pub tagged: FlowClass,
    /// mu: departure rate of other short flows at each state of S.
    pub depart_short: Vec<f64>,
    /// nu: departure rate of other long flows.
    pub depart_long: Vec<f64>,
    /// Download-completion rate of the tagged flow (absorption in playback).
    pub absorb: Vec<f64>,
    /// b: buffer fill rate during startup, content-seconds per second.
    pub fill_startup: Vec<f64>,
    /// c = b - 1: net buffer drift during playback.
    pub fill_playback: Vec<f64>,
    /// Relative bitrate perturbation applied to avoid an exactly balanced
    /// playback drift (c = 0), if any state needed it.
    pub bitrate_perturbation: Option<f64>,
}

const DRIFT_EPSILON: f64 = 1e-9;

impl RateMatrices {
    pub fn build(cfg: &SystemConfig) -> Result<Self> {
        cfg.validate()?;
        let space = StateSpace::new(cfg.admission_cap)?;
        // An exactly zero playback drift would put a division by zero into
        // the starvation ODE; nudge the bitrate by 1e-7 steps until every
        // state has |c| above the threshold.
        let mut bitrate = cfg.bitrate_bps;
        let mut perturbation = None;
        for attempt in 0..32 {
            let built = Self::build_with_bitrate(cfg, space, bitrate);
            if built
                .fill_playback
                .iter()
                .all(|c| c.abs() >= DRIFT_EPSILON)
            {
                let mut out = built;
                out.bitrate_perturbation = perturbation;
                return Ok(out);
            }
            bitrate = cfg.bitrate_bps * (1.0 + 1e-7 * (attempt + 1) as f64);
            perturbation = Some(1e-7 * (attempt + 1) as f64);
        }
        Err(Error::numerical(
            "rate construction",
            "could not perturb bitrate away from zero playback drift",
        ))
    }

    fn build_with_bitrate(cfg: &SystemConfig, space: StateSpace, bitrate: f64) -> Self {
        let n = space.len();
        let mut depart_short = vec![0.0; n];
        let mut depart_long = vec![0.0; n];
        let mut absorb = vec![0.0; n];
        let mut fill_startup = vec![0.0; n];
        let mut fill_playback = vec![0.0; n];
        let cb = cfg.capacity_bps / bitrate;
        let (w_short, w_long) = (cfg.weight_short, cfg.weight_long);
        let w_tagged = cfg.weight(cfg.tagged);
        let theta_tagged = cfg.view_rate(cfg.tagged);

        for (i, j) in space.iter() {
            let l = space.index(i, j);
            // The tagged flow itself occupies one slot of its own class.
            let mut n_short = i as f64;
            let mut n_long = j as f64;
            match cfg.tagged {
                FlowClass::Short => n_short += 1.0,
                FlowClass::Long => n_long += 1.0,
            }
            let denom = n_short * w_short + n_long * w_long;
            let b = cb * w_tagged / denom;
            fill_startup[l] = b;
            fill_playback[l] = b - 1.0;
            depart_short[l] = i as f64 * w_short * cfg.view_rate_short * cb / denom;
            depart_long[l] = j as f64 * w_long * cfg.view_rate_long * cb / denom;
            absorb[l] = w_tagged * theta_tagged * cb / denom;
        }
        RateMatrices {
            space,
            tagged: cfg.tagged,
            depart_short,
            depart_long,
            absorb,
            fill_startup,
            fill_playback,
            bitrate_perturbation: None,
        }
    }

    /// Refined rates for progressive downloading: a flow whose throughput
    /// exceeds the playback rate stays for its full viewing time instead of
    /// leaving at download completion, so each departure rate is capped by
    /// the pure viewing-time rate.
    pub fn pd_refined(&self, cfg: &SystemConfig) -> Self {
        let mut refined = self.clone();
        for (i, j) in self.space.iter() {
            let l = self.space.index(i, j);
            refined.depart_short[l] =
                self.depart_short[l].min(i as f64 * cfg.view_rate_short);
            refined.depart_long[l] = self.depart_long[l].min(j as f64 * cfg.view_rate_long);
            refined.absorb[l] = self.absorb[l].min(cfg.view_rate(cfg.tagged));
        }
        refined
    }

    /// Rates actually used by the analytic pipeline for this config.
    pub fn for_config(cfg: &SystemConfig) -> Result<Self> {
        let basic = Self::build(cfg)?;
        if cfg.progressive {
            Ok(basic.pd_refined(cfg))
        } else {
            Ok(basic)
        }
    }
}

/// Stationary distribution of a CTMC generator: solves z^T Q = 0 with the
/// first balance equation replaced by normalization.
pub fn stationary_distribution(generator: &Array2<f64>) -> Result<Vec<f64>> {
    let n = generator.nrows();
    if n != generator.ncols() {
        return Err(Error::invalid("generator must be square"));
    }
    let mut a = generator.t().to_owned();
    for j in 0..n {
        a[[0, j]] = 1.0;
    }
    let mut rhs = Array2::<f64>::zeros((n, 1));
    rhs[[0, 0]] = 1.0;
    let solved = crate::linalg::solve_real(&a, &rhs)?;
    let mut z: Vec<f64> = (0..n).map(|i| solved[[i, 0]]).collect();

    // Validate the defining property before cleaning up roundoff.
    let max_rate = generator.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut residual = 0.0f64;
    for j in 0..n {
        let bal: f64 = (0..n).map(|i| z[i] * generator[[i, j]]).sum();
        residual = residual.max(bal.abs());
    }
    if residual > 1e-10 * max_rate.max(1.0) {
        return Err(Error::numerical(
            "stationary distribution",
            format!("balance residual {residual:.3e} too large"),
        ));
    }
    for v in &mut z {
        if *v < 0.0 {
            if *v < -1e-12 {
                return Err(Error::numerical(
                    "stationary distribution",
                    format!("negative probability {v:.3e}"),
                ));
            }
            *v = 0.0;
        }
    }
    let total: f64 = z.iter().sum();
    for v in &mut z {
        *v /= total;
    }
    Ok(z)
}

/// State distribution seen by an accepted arrival, by PASTA: the stationary
/// distribution conditioned on the cell not being full.
#[derive(Debug, Clone)]
pub struct ArrivalSnapshot {
    /// Probability that an arrival is rejected (mass on n1 + n2 = K).
    pub p_reject: f64,
    /// Conditional distribution over S, indexed like `StateSpace::index`.
    pub pi: Vec<f64>,
}

pub fn arrival_distribution(z: &[f64], space: &StateSpace) -> Result<ArrivalSnapshot> {
    if z.len() != space.extended_len() {
        return Err(Error::invalid(
            "arrival_distribution: z must live on the extended lattice",
        ));
    }
    let cap = space.admission_cap();
    let mut p_reject = 0.0;
    for (n1, n2) in space.iter_extended() {
        if n1 + n2 == cap {
            p_reject += z[space.extended_index(n1, n2)];
        }
    }
    let admit = 1.0 - p_reject;
    if admit <= 1e-14 {
        return Err(Error::numerical(
            "arrival_distribution",
            "every arrival is rejected; conditional distribution undefined",
        ));
    }
    let mut pi = vec![0.0; space.len()];
    for (i, j) in space.iter() {
        pi[space.index(i, j)] = z[space.extended_index(i, j)] / admit;
    }
    Ok(ArrivalSnapshot { p_reject, pi })
}

/// Per-class mean offered and the blocking seen by each class are identical
/// here (both classes are blocked in the same full states), so a single
/// rejection probability applies.
pub fn rejection_probability(z: &[f64], space: &StateSpace) -> f64 {
    let cap = space.admission_cap();
    space
        .iter_extended()
        .filter(|&(n1, n2)| n1 + n2 == cap)
        .map(|(n1, n2)| z[space.extended_index(n1, n2)])
        .sum()
}
