//! Event-driven fluid simulation of the cell.
//!
//! Between events every rate is constant: each active flow of class k
//! downloads at `C phi_k / (Bitrate (n1 phi_1 + n2 phi_2))` content-seconds
//! per second, and a playing flow consumes one content-second per second.
//! Every next event time (download completion, startup threshold reached,
//! buffer empty, watch end, next arrival) therefore has a closed form, and
//! the simulation jumps from event to event.
//!
//! The simulator is the ground-truth oracle for the analytic pipeline: in
//! basic mode its dynamics coincide exactly with the Markov description
//! (exponential volumes, Poisson arrivals, DPS sharing, admission cap).

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markov::{FlowClass, StateSpace, SystemConfig};
use crate::seed::rng_for;
use crate::trace::ViewRecord;
use crate::workload::HyperExpParams;
use crate::PerClass;

/// What a flow demands from the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    /// Demand equals the viewing time; depart at download completion.
    Basic,
    /// Progressive downloading with unbounded duration: fetch ahead without
    /// limit, depart at watch end.
    Progressive,
    /// Progressive downloading capped at the video duration; depart at
    /// watch end or full download, whichever comes first.
    ProgressiveFinite,
}

/// What the player does when the buffer runs dry mid-playback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RebufferPolicy {
    /// Refill to the startup threshold, then resume. With a zero threshold
    /// the playhead simply tracks the download (throttled playback).
    RebufferToThreshold,
    /// Halt playback permanently after the first starvation; in unbounded
    /// progressive mode the viewer abandons the session instead.
    StopAtFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Horizon {
    /// Measure this many accepted flows (after warmup) to completion.
    AcceptedFlows(usize),
    /// Inject arrivals up to this simulated time, then drain.
    SimTime(f64),
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub system: SystemConfig,
    pub mode: SimMode,
    pub rebuffer_policy: RebufferPolicy,
    pub horizon: Horizon,
    /// Accepted flows skipped before metrics start accumulating.
    pub warmup_flows: usize,
    pub seed: u64,
    /// Replay these records instead of generating arrivals.
    pub trace: Option<Vec<ViewRecord>>,
    /// Keep per-flow outcomes in the report.
    pub collect_flows: bool,
}

impl SimConfig {
    pub fn new(system: SystemConfig) -> Self {
        SimConfig {
            system,
            mode: SimMode::Basic,
            rebuffer_policy: RebufferPolicy::RebufferToThreshold,
            horizon: Horizon::AcceptedFlows(100_000),
            warmup_flows: 2_000,
            seed: 0,
            trace: None,
            collect_flows: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        if self.mode == SimMode::ProgressiveFinite {
            let ok = match &self.trace {
                Some(records) => records.iter().all(|r| r.video_duration_s.is_some()),
                None => false,
            };
            if !ok {
                return Err(Error::invalid(
                    "finite-duration progressive mode needs a trace with durations",
                ));
            }
        }
        if let Some(records) = &self.trace {
            if records
                .windows(2)
                .any(|w| w[1].arrival_ts_s < w[0].arrival_ts_s)
            {
                return Err(Error::invalid("trace arrivals must be time-ordered"));
            }
        }
        Ok(())
    }
}

/// Tallies for one class over the measurement window.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ClassTally {
    pub offered: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub completed: u64,
    /// Completed flows that starved at least once.
    pub starved: u64,
    /// starvation_events[k] = completed flows with exactly k starvations.
    pub starvation_events: Vec<u64>,
    /// Sum over completed flows of (depart - admit) / viewing_time.
    pub dtvt_sum: f64,
}

impl ClassTally {
    fn record_completion(&mut self, starvations: u32, dtvt: f64) {
        self.completed += 1;
        if starvations > 0 {
            self.starved += 1;
        }
        let idx = starvations as usize;
        if self.starvation_events.len() <= idx {
            self.starvation_events.resize(idx + 1, 0);
        }
        self.starvation_events[idx] += 1;
        self.dtvt_sum += dtvt;
    }

    fn merge(&mut self, other: &ClassTally) {
        self.offered += other.offered;
        self.accepted += other.accepted;
        self.rejected += other.rejected;
        self.completed += other.completed;
        self.starved += other.starved;
        if self.starvation_events.len() < other.starvation_events.len() {
            self.starvation_events
                .resize(other.starvation_events.len(), 0);
        }
        for (k, v) in other.starvation_events.iter().enumerate() {
            self.starvation_events[k] += v;
        }
        self.dtvt_sum += other.dtvt_sum;
    }
}

/// Outcome of one measured flow.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FlowOutcome {
    pub id: u64,
    pub class: FlowClass,
    pub admit_ts: f64,
    pub depart_ts: f64,
    pub viewing_time: f64,
    pub downloaded: f64,
    pub played: f64,
    pub starvations: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimReport {
    pub admission_cap: usize,
    pub startup_threshold_s: f64,
    pub mode: SimMode,
    pub seed: u64,
    pub replicas: usize,
    pub per_class: PerClass<ClassTally>,
    /// Time spent in each (n1, n2) state of the extended lattice during the
    /// measurement window.
    pub occupancy_time: Vec<f64>,
    /// States seen by every offered arrival (before admission).
    pub arrival_state_counts: Vec<u64>,
    /// States seen by accepted arrivals, on the tagged lattice.
    pub accepted_state_counts: Vec<u64>,
    /// Trace ran out before the horizon was met.
    pub trace_truncated: bool,
    pub flows: Vec<FlowOutcome>,
}

impl SimReport {
    pub fn starvation_fraction(&self, class: FlowClass) -> f64 {
        let t = self.per_class.get(class);
        if t.completed == 0 {
            0.0
        } else {
            t.starved as f64 / t.completed as f64
        }
    }

    pub fn mean_dtvt(&self, class: FlowClass) -> f64 {
        let t = self.per_class.get(class);
        if t.completed == 0 {
            f64::NAN
        } else {
            t.dtvt_sum / t.completed as f64
        }
    }

    pub fn rejection_probability(&self) -> f64 {
        let offered = self.per_class.short.offered + self.per_class.long.offered;
        let rejected = self.per_class.short.rejected + self.per_class.long.rejected;
        if offered == 0 {
            0.0
        } else {
            rejected as f64 / offered as f64
        }
    }

    pub fn occupancy_distribution(&self) -> Vec<f64> {
        let total: f64 = self.occupancy_time.iter().sum();
        self.occupancy_time
            .iter()
            .map(|t| t / total.max(1e-300))
            .collect()
    }

    pub fn arrival_distribution(&self) -> Vec<f64> {
        let total: u64 = self.arrival_state_counts.iter().sum();
        self.arrival_state_counts
            .iter()
            .map(|&c| c as f64 / (total.max(1) as f64))
            .collect()
    }

    pub fn accepted_distribution(&self) -> Vec<f64> {
        let total: u64 = self.accepted_state_counts.iter().sum();
        self.accepted_state_counts
            .iter()
            .map(|&c| c as f64 / (total.max(1) as f64))
            .collect()
    }

    /// Pool replica counts in replica order; fractions are never averaged.
    pub fn merge(reports: &[SimReport]) -> SimReport {
        assert!(!reports.is_empty());
        let mut merged = reports[0].clone();
        for r in &reports[1..] {
            merged.per_class.short.merge(&r.per_class.short);
            merged.per_class.long.merge(&r.per_class.long);
            for (a, b) in merged.occupancy_time.iter_mut().zip(&r.occupancy_time) {
                *a += b;
            }
            for (a, b) in merged
                .arrival_state_counts
                .iter_mut()
                .zip(&r.arrival_state_counts)
            {
                *a += b;
            }
            for (a, b) in merged
                .accepted_state_counts
                .iter_mut()
                .zip(&r.accepted_state_counts)
            {
                *a += b;
            }
            merged.trace_truncated |= r.trace_truncated;
            merged.flows.extend_from_slice(&r.flows);
        }
        merged.replicas = reports.len();
        merged
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn csv_header() -> &'static str {
        "admission_cap,startup_threshold_s,mode,class,offered,accepted,rejected,completed,\
         starved,starvation_fraction,mean_dtvt,p_reject"
    }

    pub fn csv_rows(&self) -> Vec<String> {
        let mode = match self.mode {
            SimMode::Basic => "basic",
            SimMode::Progressive => "progressive",
            SimMode::ProgressiveFinite => "progressive_finite",
        };
        FlowClass::BOTH
            .iter()
            .map(|&class| {
                let t = self.per_class.get(class);
                format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{}",
                    self.admission_cap,
                    self.startup_threshold_s,
                    mode,
                    class,
                    t.offered,
                    t.accepted,
                    t.rejected,
                    t.completed,
                    t.starved,
                    self.starvation_fraction(class),
                    self.mean_dtvt(class),
                    self.rejection_probability()
                )
            })
            .collect()
    }
}

/// Bayes class assignment: short with probability
/// `gamma(t) = p1 th1 e^{-th1 t} / (p1 th1 e^{-th1 t} + p2 th2 e^{-th2 t})`.
pub fn assign_class<R: Rng + ?Sized>(
    viewing_time: f64,
    params: &HyperExpParams,
    rng: &mut R,
) -> FlowClass {
    let gamma = params.posterior_short(viewing_time);
    if rng.gen::<f64>() < gamma {
        FlowClass::Short
    } else {
        FlowClass::Long
    }
}

/// Synthetic workload: Poisson arrivals at `lambda`, short class with
/// probability `p_short`, per-class exponential viewing times.
pub fn generate_workload(
    params: &HyperExpParams,
    lambda: f64,
    p_short: f64,
    flows: usize,
    seed: u64,
) -> Vec<ViewRecord> {
    let mut rng = rng_for(seed, "workload-generator");
    let mut t = 0.0;
    (0..flows)
        .map(|_| {
            t += -(1.0 - rng.gen::<f64>()).ln() / lambda;
            let class = if rng.gen::<f64>() < p_short {
                FlowClass::Short
            } else {
                FlowClass::Long
            };
            let rate = match class {
                FlowClass::Short => params.theta1,
                FlowClass::Long => params.theta2,
            };
            let viewing = -(1.0 - rng.gen::<f64>()).ln() / rate;
            ViewRecord {
                arrival_ts_s: t,
                viewing_time_s: viewing,
                video_duration_s: None,
                class: Some(class),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    /// Prefetching; playback starts once `downloaded` reaches the target.
    Startup { target: f64 },
    Playing,
    /// Refilling after a starvation; playback resumes at `resume_at`.
    Rebuffering { resume_at: f64 },
    /// Zero-threshold rebuffering: the playhead tracks the download.
    Throttled,
    /// Playback halted for good (stop-at-first policy).
    Stalled,
}

#[derive(Debug, Clone)]
struct ActiveFlow {
    id: u64,
    class: FlowClass,
    viewing_time: f64,
    /// Content the user will actually watch (viewing time capped by duration).
    watch_demand: f64,
    /// Content the network will deliver at most.
    download_limit: f64,
    downloaded: f64,
    played: f64,
    phase: Phase,
    starvations: u32,
    admit_ts: f64,
    counted: bool,
}

// Variant order is the simultaneous-event priority.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Departure,
    BufferEmpty,
    PlaybackStart,
    Arrival,
}

enum ArrivalSource {
    Synthetic { next_ts: f64 },
    Trace { records: Vec<ViewRecord>, pos: usize },
}

struct Engine {
    sys: SystemConfig,
    mode: SimMode,
    policy: RebufferPolicy,
    mixture: HyperExpParams,
    space: StateSpace,
    qa: f64,
    rng: ChaCha12Rng,
    source: ArrivalSource,
    now: f64,
    flows: Vec<ActiveFlow>,
    n_short: usize,
    n_long: usize,
    next_id: u64,
    warmup: usize,
    target: Option<usize>,
    time_limit: Option<f64>,
    accepted_seen: usize,
    counted_active: usize,
    counted_done: usize,
    collect_flows: bool,
    report: SimReport,
}

impl Engine {
    fn new(cfg: &SimConfig) -> Result<Engine> {
        cfg.validate()?;
        let space = StateSpace::new(cfg.system.admission_cap)?;
        let (target, time_limit) = match cfg.horizon {
            Horizon::AcceptedFlows(n) => (Some(n), None),
            Horizon::SimTime(t) => (None, Some(t)),
        };
        let mut rng = rng_for(cfg.seed, "flowsim");
        let source = match &cfg.trace {
            Some(records) => ArrivalSource::Trace {
                records: records.clone(),
                pos: 0,
            },
            None => ArrivalSource::Synthetic {
                next_ts: -(1.0 - rng.gen::<f64>()).ln() / cfg.system.arrival_rate_total(),
            },
        };
        let report = SimReport {
            admission_cap: cfg.system.admission_cap,
            startup_threshold_s: cfg.system.startup_threshold_s,
            mode: cfg.mode,
            seed: cfg.seed,
            replicas: 1,
            per_class: PerClass::default(),
            occupancy_time: vec![0.0; space.extended_len()],
            arrival_state_counts: vec![0; space.extended_len()],
            accepted_state_counts: vec![0; space.len()],
            trace_truncated: false,
            flows: Vec::new(),
        };
        Ok(Engine {
            mixture: cfg.system.viewing_mixture(),
            qa: cfg.system.startup_threshold_s,
            sys: cfg.system.clone(),
            mode: cfg.mode,
            policy: cfg.rebuffer_policy,
            space,
            rng,
            source,
            now: 0.0,
            flows: Vec::with_capacity(cfg.system.admission_cap),
            n_short: 0,
            n_long: 0,
            next_id: 0,
            warmup: cfg.warmup_flows,
            target,
            time_limit,
            accepted_seen: 0,
            counted_active: 0,
            counted_done: 0,
            collect_flows: cfg.collect_flows,
            report,
        })
    }

    /// Download rate of one class-k flow, content-seconds per second.
    fn rate(&self, class: FlowClass) -> f64 {
        let denom = self.n_short as f64 * self.sys.weight_short
            + self.n_long as f64 * self.sys.weight_long;
        self.sys.capacity_bps * self.sys.weight(class) / (self.sys.bitrate_bps * denom)
    }

    /// Arrivals currently contribute to the metrics window.
    fn in_measure_window(&self) -> bool {
        if self.accepted_seen < self.warmup {
            return false;
        }
        match self.target {
            Some(n) => self.accepted_seen < self.warmup + n,
            None => true,
        }
    }

    fn measured_target_reached(&self) -> bool {
        match self.target {
            Some(n) => self.accepted_seen >= self.warmup + n,
            None => self.next_arrival_raw().is_none(),
        }
    }

    fn next_arrival_raw(&self) -> Option<f64> {
        match &self.source {
            ArrivalSource::Synthetic { next_ts } => match self.time_limit {
                Some(limit) if *next_ts > limit => None,
                _ => Some(*next_ts),
            },
            ArrivalSource::Trace { records, pos } => {
                let ts = records.get(*pos).map(|r| r.arrival_ts_s)?;
                match self.time_limit {
                    Some(limit) if ts > limit => None,
                    _ => Some(ts),
                }
            }
        }
    }

    fn next_arrival(&self) -> Option<f64> {
        // Keep the background process alive until every measured flow has
        // departed, so late measured flows see an unbiased environment.
        if self.measured_target_reached() && self.counted_active == 0 {
            return None;
        }
        self.next_arrival_raw()
    }

    /// Earliest candidate event of one flow under the current rates.
    fn flow_event(&self, flow: &ActiveFlow) -> Option<(f64, EventKind)> {
        let d = self.rate(flow.class);
        let mut best: Option<(f64, EventKind)> = None;
        let mut push = |t: f64, kind: EventKind| {
            let t = t.max(0.0);
            let replace = match best {
                Some((bt, bk)) => (t, kind) < (bt, bk),
                None => true,
            };
            if replace {
                best = Some((t, kind));
            }
        };
        let dl_end = (flow.download_limit - flow.downloaded) / d;
        let progressive = matches!(self.mode, SimMode::Progressive | SimMode::ProgressiveFinite);
        match flow.phase {
            Phase::Startup { target } => {
                // Hitting the download limit during prefetch is a departure
                // (demand below the threshold); the tie resolves to it.
                if flow.download_limit.is_finite() {
                    push(dl_end, EventKind::Departure);
                }
                push((target - flow.downloaded) / d, EventKind::PlaybackStart);
            }
            Phase::Playing => {
                if flow.download_limit.is_finite() {
                    push(dl_end, EventKind::Departure);
                }
                if progressive {
                    push(flow.watch_demand - flow.played, EventKind::Departure);
                }
                if d < 1.0 {
                    let buffer = flow.downloaded - flow.played;
                    push(buffer / (1.0 - d), EventKind::BufferEmpty);
                }
            }
            Phase::Rebuffering { resume_at } => {
                if flow.download_limit.is_finite() {
                    push(dl_end, EventKind::Departure);
                }
                push((resume_at - flow.downloaded) / d, EventKind::PlaybackStart);
            }
            Phase::Throttled => {
                if flow.download_limit.is_finite() {
                    push(dl_end, EventKind::Departure);
                }
                if progressive {
                    // The playhead advances at the download rate.
                    push((flow.watch_demand - flow.played) / d, EventKind::Departure);
                }
            }
            Phase::Stalled => {
                if flow.download_limit.is_finite() {
                    push(dl_end, EventKind::Departure);
                }
            }
        }
        best
    }

    fn advance(&mut self, dt: f64) {
        if dt <= 0.0 {
            return;
        }
        if self.in_measure_window() {
            let idx = self.space.extended_index(self.n_short, self.n_long);
            self.report.occupancy_time[idx] += dt;
        }
        let rate_short = self.rate(FlowClass::Short);
        let rate_long = self.rate(FlowClass::Long);
        if !self.flows.is_empty() {
            // Fluid work conservation: active flows always consume the cell.
            let total = self.n_short as f64 * rate_short + self.n_long as f64 * rate_long;
            let cell = self.sys.capacity_bps / self.sys.bitrate_bps;
            debug_assert!((total - cell).abs() < 1e-9 * cell);
        }
        for flow in &mut self.flows {
            let d = match flow.class {
                FlowClass::Short => rate_short,
                FlowClass::Long => rate_long,
            };
            flow.downloaded = (flow.downloaded + d * dt).min(flow.download_limit);
            match flow.phase {
                Phase::Playing => {
                    flow.played = (flow.played + dt).min(flow.downloaded);
                }
                Phase::Throttled => {
                    flow.played = flow.downloaded;
                }
                _ => {}
            }
        }
        self.now += dt;
    }

    fn record_starvation(&mut self, pos: usize) {
        self.flows[pos].starvations += 1;
        match self.policy {
            RebufferPolicy::StopAtFirst => {
                if self.mode == SimMode::Progressive {
                    // Nothing bounds the session anymore; the viewer quits.
                    self.depart(pos);
                } else {
                    self.flows[pos].phase = Phase::Stalled;
                }
            }
            RebufferPolicy::RebufferToThreshold => {
                if self.qa <= 0.0 {
                    self.flows[pos].phase = Phase::Throttled;
                } else {
                    let f = &self.flows[pos];
                    let resume = (f.played + self.qa).min(f.download_limit);
                    self.flows[pos].phase = Phase::Rebuffering { resume_at: resume };
                }
            }
        }
    }

    fn depart(&mut self, pos: usize) {
        let flow = self.flows.swap_remove(pos);
        match flow.class {
            FlowClass::Short => self.n_short -= 1,
            FlowClass::Long => self.n_long -= 1,
        }
        if flow.counted {
            self.counted_active -= 1;
            self.counted_done += 1;
            let dtvt = (self.now - flow.admit_ts) / flow.viewing_time;
            self.report
                .per_class
                .get_mut(flow.class)
                .record_completion(flow.starvations, dtvt);
            if self.collect_flows {
                self.report.flows.push(FlowOutcome {
                    id: flow.id,
                    class: flow.class,
                    admit_ts: flow.admit_ts,
                    depart_ts: self.now,
                    viewing_time: flow.viewing_time,
                    downloaded: flow.downloaded,
                    played: flow.played,
                    starvations: flow.starvations,
                });
            }
        }
    }

    /// Throttled flows whose rate recovered above the playback speed return
    /// to normal playing; called after any event that changes flow counts.
    fn release_throttled(&mut self) {
        for i in 0..self.flows.len() {
            if self.flows[i].phase == Phase::Throttled && self.rate(self.flows[i].class) >= 1.0 {
                self.flows[i].phase = Phase::Playing;
            }
        }
    }

    fn handle_arrival(&mut self) -> Result<()> {
        let in_window = self.in_measure_window();
        let (viewing, duration, recorded_class, ts) = match &mut self.source {
            ArrivalSource::Synthetic { next_ts } => {
                let rng = &mut self.rng;
                let ts = *next_ts;
                let class = if rng.gen::<f64>() < self.sys.class_fraction(FlowClass::Short) {
                    FlowClass::Short
                } else {
                    FlowClass::Long
                };
                let viewing = -(1.0 - rng.gen::<f64>()).ln() / self.sys.view_rate(class);
                *next_ts = ts + -(1.0 - rng.gen::<f64>()).ln() / self.sys.arrival_rate_total();
                (viewing, None, Some(class), ts)
            }
            ArrivalSource::Trace { records, pos } => {
                let r = records[*pos];
                *pos += 1;
                (r.viewing_time_s, r.video_duration_s, r.class, r.arrival_ts_s)
            }
        };
        debug_assert!((ts - self.now).abs() <= 1e-6 * self.now.abs().max(1.0));
        let class = match recorded_class {
            Some(c) => c,
            None => assign_class(viewing, &self.mixture, &mut self.rng),
        };

        if in_window {
            let idx = self.space.extended_index(self.n_short, self.n_long);
            self.report.arrival_state_counts[idx] += 1;
            self.report.per_class.get_mut(class).offered += 1;
        }
        // Admission strictly before the flow is materialized.
        if self.n_short + self.n_long >= self.sys.admission_cap {
            if in_window {
                self.report.per_class.get_mut(class).rejected += 1;
            }
            return Ok(());
        }
        if in_window {
            self.report.per_class.get_mut(class).accepted += 1;
            let idx = self.space.index(self.n_short, self.n_long);
            self.report.accepted_state_counts[idx] += 1;
        }
        self.accepted_seen += 1;
        if in_window {
            self.counted_active += 1;
        }

        let download_limit = match self.mode {
            SimMode::Basic => viewing,
            SimMode::Progressive => f64::INFINITY,
            SimMode::ProgressiveFinite => duration.ok_or_else(|| {
                Error::invalid("finite-duration mode needs durations in every record")
            })?,
        };
        let watch_demand = match self.mode {
            SimMode::Basic | SimMode::Progressive => viewing,
            SimMode::ProgressiveFinite => viewing.min(download_limit),
        };
        let target = self.qa.min(download_limit);
        let phase = if target <= 0.0 {
            Phase::Playing
        } else {
            Phase::Startup { target }
        };
        self.flows.push(ActiveFlow {
            id: self.next_id,
            class,
            viewing_time: viewing,
            watch_demand,
            download_limit,
            downloaded: 0.0,
            played: 0.0,
            phase,
            starvations: 0,
            admit_ts: self.now,
            counted: in_window,
        });
        self.next_id += 1;
        match class {
            FlowClass::Short => self.n_short += 1,
            FlowClass::Long => self.n_long += 1,
        }
        self.release_throttled();
        Ok(())
    }

    fn run(mut self) -> Result<SimReport> {
        loop {
            if self.measured_target_reached() && self.counted_active == 0 {
                break;
            }
            let mut best_t = f64::INFINITY;
            let mut best_kind = EventKind::Arrival;
            let mut best_flow: Option<usize> = None;
            let mut best_id = u64::MAX;
            if let Some(ts) = self.next_arrival() {
                best_t = ts - self.now;
            }
            for (pos, flow) in self.flows.iter().enumerate() {
                if let Some((t, kind)) = self.flow_event(flow) {
                    let better = t < best_t
                        || (t == best_t
                            && (kind < best_kind || (kind == best_kind && flow.id < best_id)));
                    if better {
                        best_t = t;
                        best_kind = kind;
                        best_flow = Some(pos);
                        best_id = flow.id;
                    }
                }
            }
            if !best_t.is_finite() {
                // Drained trace with nothing left in flight.
                break;
            }
            self.advance(best_t);

            match (best_kind, best_flow) {
                (EventKind::Arrival, _) => self.handle_arrival()?,
                (EventKind::Departure, Some(pos)) => {
                    // Snap the fired quantity to its target to kill drift.
                    let progressive =
                        matches!(self.mode, SimMode::Progressive | SimMode::ProgressiveFinite);
                    let flow = &mut self.flows[pos];
                    let watch_rem = flow.watch_demand - flow.played;
                    let dl_rem = flow.download_limit - flow.downloaded;
                    let watch_end = progressive
                        && matches!(flow.phase, Phase::Playing | Phase::Throttled)
                        && (!dl_rem.is_finite() || watch_rem <= dl_rem);
                    if watch_end {
                        flow.played = flow.watch_demand;
                    } else {
                        flow.downloaded = flow.download_limit;
                    }
                    self.depart(pos);
                    self.release_throttled();
                }
                (EventKind::BufferEmpty, Some(pos)) => {
                    let flow = &mut self.flows[pos];
                    flow.played = flow.downloaded;
                    self.record_starvation(pos);
                }
                (EventKind::PlaybackStart, Some(pos)) => {
                    let flow = &mut self.flows[pos];
                    match flow.phase {
                        Phase::Startup { target } => {
                            flow.downloaded = flow.downloaded.max(target)
                        }
                        Phase::Rebuffering { resume_at } => {
                            flow.downloaded = flow.downloaded.max(resume_at)
                        }
                        _ => {}
                    }
                    flow.phase = Phase::Playing;
                }
                (kind, None) => unreachable!("flow event {kind:?} without a flow"),
            }
        }
        if self.target.is_some()
            && self.counted_done < self.target.unwrap()
            && matches!(self.source, ArrivalSource::Trace { .. })
        {
            self.report.trace_truncated = true;
        }
        Ok(self.report)
    }
}

/// Run one replica.
pub fn run(cfg: &SimConfig) -> Result<SimReport> {
    Engine::new(cfg)?.run()
}

/// Independent replicas with seeds `seed + r`, pooled by counts in replica
/// order regardless of completion order.
pub fn run_replicated(cfg: &SimConfig, replicas: usize) -> Result<SimReport> {
    if replicas == 0 {
        return Err(Error::invalid("need at least one replica"));
    }
    let reports: Result<Vec<SimReport>> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut replica_cfg = cfg.clone();
            replica_cfg.seed = cfg.seed + r as u64;
            run(&replica_cfg)
        })
        .collect();
    Ok(SimReport::merge(&reports?))
}
