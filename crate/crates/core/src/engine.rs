//! Scenario execution: control loops, tally accumulation and key extraction.
//!
//! A block is cut into control segments. Within a segment the polarization
//! and timing state is frozen at its start value for the pulse statistics,
//! then both loops advance through the segment in simulated time. Analytic
//! mode accumulates expected counts; Monte Carlo mode samples a pulse budget
//! spread over segments and scales the counts to the full block.

use std::f64::consts::{SQRT_2, TAU};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comb::{CombError, CombPlan, SeedJitterModel};
use crate::control::{
    link_qber, CompensationConfig, ControlError, PolarizationLoop, TimingLoop, TimingLoopConfig,
};
use crate::interference::{
    classify, expected_overlap, mode_overlap, sample_clicks, visibility, BsmInput,
    InterferenceError, ModeOverlap,
};
use crate::link::LinkModel;
use crate::photonics::{
    timing_step, Basis, DetectorSet, DriftState, FiberChannel, Intensity, IntensitySet, Jones,
    PhotonicsError, PulseShape,
};
use crate::protocol::{
    analyze, asymptotic_key_rate, estimate_single_photon, secret_key_length, sift_with,
    DecoyEstimate, FiniteKeyParams, JointScanEstimator, KeyReport, ProtocolError, SiftPolicy,
    SiftedTally,
};

/// Version of the serialized [`RunResult`] layout.
pub const SCHEMA_VERSION: u32 = 1;
pub const MIN_PULSE_BUDGET: u64 = 10_000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Photonics(#[from] PhotonicsError),
    #[error(transparent)]
    Comb(#[from] CombError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Interference(#[from] InterferenceError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Expected counts from closed-form gains.
    Analytic,
    /// Sampled pulse pairs, split into independently seeded shards.
    MonteCarlo { pulse_budget: u64, shards: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    /// Alice's and Bob's combs.
    pub combs: [CombPlan; 2],
    /// Tooth index `CH n` carrying the link.
    pub tooth: i32,
    pub seed_jitter: [SeedJitterModel; 2],
    pub intensities: IntensitySet,
    pub pulse: PulseShape,
    pub extinction_ratio_db: f64,
    /// Alice→hub and Bob→hub spans.
    pub channels: [FiberChannel; 2],
    pub receiver_loss_db: f64,
    pub detectors: DetectorSet,
    /// Static polarization error of each arm behind the compensator (rad).
    pub residual_misalignment_rad: f64,
    /// Residual arrival-time jitter per user assumed by the static link model (ps).
    pub timing_jitter_ps: f64,
    pub polarization: CompensationConfig,
    pub timing: TimingLoopConfig,
    pub sift: SiftPolicy,
    pub finite_key: FiniteKeyParams,
    pub accumulation_s: f64,
    /// Interval at which control state is refreshed into the pulse statistics.
    pub control_segment_s: f64,
    pub mode: RunMode,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::InvalidScenario(m.to_string()));
        if !(self.accumulation_s > 0.0 && self.accumulation_s.is_finite()) {
            return bad("accumulation time must be positive");
        }
        if !(self.control_segment_s > 0.0) {
            return bad("control segment must be positive");
        }
        if !(self.extinction_ratio_db > 0.0) {
            return bad("extinction ratio must be positive");
        }
        if !(self.receiver_loss_db >= 0.0) || !(self.timing_jitter_ps >= 0.0) {
            return bad("receiver loss and timing jitter must be >= 0");
        }
        if let RunMode::MonteCarlo {
            pulse_budget,
            shards,
        } = self.mode
        {
            if pulse_budget < MIN_PULSE_BUDGET {
                return Err(EngineError::InvalidScenario(format!(
                    "Monte Carlo pulse budget must be >= {MIN_PULSE_BUDGET}, got {pulse_budget}"
                )));
            }
            if shards == 0 {
                return bad("Monte Carlo needs at least one shard");
            }
        }
        for comb in &self.combs {
            comb.validate()?;
            comb.tooth_frequency(self.tooth)?;
        }
        self.pulse.validate()?;
        self.intensities.validate()?;
        for c in &self.channels {
            c.validate()?;
        }
        self.detectors.validate()?;
        self.polarization.validate()?;
        self.timing.validate()?;
        self.finite_key.validate_for(JointScanEstimator::BOUNDS)?;
        Ok(())
    }

    pub fn clock_rate_hz(&self) -> f64 {
        self.pulse.clock_rate_ghz * 1e9
    }

    /// Carrier offset between the two users' teeth (kHz).
    pub fn mean_detuning_khz(&self) -> Result<f64, EngineError> {
        let a = self.combs[0].tooth_frequency(self.tooth)?;
        let b = self.combs[1].tooth_frequency(self.tooth)?;
        Ok((a - b) * 1e9)
    }

    /// Mean overlap factor from carrier detuning and seed jitter.
    pub fn detuning_factor(&self) -> Result<f64, EngineError> {
        let std = self.seed_jitter[0]
            .single_laser_std_khz
            .hypot(self.seed_jitter[1].single_laser_std_khz);
        Ok(detuning_overlap(
            &self.pulse,
            self.mean_detuning_khz()?,
            std,
        ))
    }

    pub fn residual_rotations(&self) -> [Jones; 2] {
        let axis = [0.0, 0.0, 1.0];
        [
            Jones::rotation(axis, self.residual_misalignment_rad),
            Jones::rotation(axis, -self.residual_misalignment_rad),
        ]
    }

    /// Link with perfectly compensated drift and the nominal timing jitter.
    pub fn static_link(&self) -> Result<LinkModel, EngineError> {
        let timing = expected_overlap(&self.pulse, 0.0, self.timing_jitter_ps * SQRT_2, 0.0).xi;
        Ok(self.link_with(self.residual_rotations(), timing * self.detuning_factor()?))
    }

    fn link_with(&self, arm_unitaries: [Jones; 2], xi: f64) -> LinkModel {
        LinkModel {
            shape: self.pulse,
            intensities: self.intensities.clone(),
            extinction_ratio_db: self.extinction_ratio_db,
            channels: self.channels,
            receiver_loss_db: self.receiver_loss_db,
            detectors: self.detectors,
            arm_unitaries,
            xi,
            sift: self.sift,
        }
    }

    pub fn channel_label(&self) -> String {
        match self.combs[0].itu_label(self.tooth) {
            Ok(itu) => format!("CH{} ({itu})", self.tooth),
            Err(_) => format!("CH{}", self.tooth),
        }
    }
}

/// `E[exp(−(2πΔν σ)²/2)]` for Gaussian Δν with the given mean and std.
pub fn detuning_overlap(shape: &PulseShape, mean_khz: f64, std_khz: f64) -> f64 {
    let c = (TAU * 1e3 * shape.sigma_t_ps() * 1e-12).powi(2) / 2.0;
    let d = 1.0 + 2.0 * c * std_khz * std_khz;
    (-c * mean_khz * mean_khz / d).exp() / d.sqrt()
}

/// Control and link state at one segment boundary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSample {
    pub time_s: f64,
    pub qber_z: f64,
    pub qber_x: f64,
    /// RMS arrival-time residual over both arms during the segment (ps).
    pub residual_ps: f64,
    pub xi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomDiagnostics {
    /// Block-mean wavepacket overlap.
    pub mean_xi: f64,
    /// Dip visibility for signal pulses as they arrive at the hub.
    pub visibility: f64,
}

/// Wall-clock counters; never serialized so outputs stay reproducible.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PerfCounters {
    pub wall_s: f64,
    pub trials: u64,
}

impl PerfCounters {
    pub fn trials_per_s(&self) -> f64 {
        if self.wall_s > 0.0 {
            self.trials as f64 / self.wall_s
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub schema: u32,
    pub scenario: String,
    pub block: usize,
    pub mode: RunMode,
    /// Counts the key report was computed from (scaled to the block in Monte Carlo mode).
    pub tally: SiftedTally,
    /// Unscaled Monte Carlo counts.
    pub sampled_tally: Option<SiftedTally>,
    pub report: KeyReport,
    pub trace: Vec<ControlSample>,
    pub hom: HomDiagnostics,
    pub diagnostics: Vec<String>,
    #[serde(skip)]
    pub perf: PerfCounters,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub mean_bps: f64,
    pub std_bps: f64,
    pub min_bps: f64,
    pub max_bps: f64,
    pub positive_blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongRun {
    pub blocks: Vec<RunResult>,
    pub summary: RateSummary,
}

/// Independent random stream for one purpose/block/segment/shard.
fn stream(seed: u64, purpose: u64, block: u64, segment: u64, shard: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 60) ^ (block << 40) ^ (segment << 20) ^ shard);
    rng
}

const STREAM_CONTROL: u64 = 1;
const STREAM_TIMING: u64 = 2;
const STREAM_PULSES: u64 = 3;

/// Persistent drift and control state of one link.
struct LinkState {
    polarization: PolarizationLoop,
    timing: [TimingLoop; 2],
    timing_drift: [DriftState; 2],
    timing_rng: ChaCha8Rng,
}

impl LinkState {
    fn new(s: &Scenario) -> Result<Self, EngineError> {
        let control_seed: u64 = stream(s.seed, STREAM_CONTROL, 0, 0, 0).random();
        let mut polarization = PolarizationLoop::new(s.polarization, control_seed)?;
        polarization.drift_rates = [
            s.channels[0].polarization_drift_rate,
            s.channels[1].polarization_drift_rate,
        ];
        let mut seeds = stream(s.seed, STREAM_TIMING, 0, 0, 0);
        Ok(Self {
            polarization,
            timing: [
                TimingLoop::new(s.timing, seeds.random())?,
                TimingLoop::new(s.timing, seeds.random())?,
            ],
            timing_drift: [DriftState::default(); 2],
            timing_rng: ChaCha8Rng::seed_from_u64(seeds.random()),
        })
    }

    /// Runs both timing loops over `duration_s`; returns the mean overlap
    /// factor and the RMS residual.
    fn advance_timing(&mut self, s: &Scenario, duration_s: f64) -> (f64, f64) {
        let dt = s.timing.measurement_period_s;
        let steps = ((duration_s / dt).round() as usize).max(1);
        let (mut xi_sum, mut sq_sum) = (0.0, 0.0);
        for _ in 0..steps {
            let mut r = [0.0; 2];
            #[allow(clippy::needless_range_loop)]
            for k in 0..2 {
                self.timing_drift[k] = timing_step(
                    &self.timing_drift[k],
                    dt,
                    s.channels[k].timing_drift_ps_per_sqrt_s,
                    &mut self.timing_rng,
                );
                r[k] = self.timing[k].step(self.timing_drift[k].timing_offset_ps);
            }
            xi_sum += mode_overlap(&s.pulse, r[0] - r[1], 0.0).xi;
            sq_sum += 0.5 * (r[0] * r[0] + r[1] * r[1]);
        }
        (xi_sum / steps as f64, (sq_sum / steps as f64).sqrt())
    }
}

/// Expected or sampled counts per tally cell, in `SiftedTally::cells` order.
#[derive(Clone, Debug)]
struct Counts {
    sent: Vec<f64>,
    detected: Vec<f64>,
    errors: Vec<f64>,
}

impl Counts {
    fn zeros(n: usize) -> Self {
        Self {
            sent: vec![0.0; n],
            detected: vec![0.0; n],
            errors: vec![0.0; n],
        }
    }

    fn add(&mut self, other: &Counts) {
        for i in 0..self.sent.len() {
            self.sent[i] += other.sent[i];
            self.detected[i] += other.detected[i];
            self.errors[i] += other.errors[i];
        }
    }

    fn into_tally(self, scale: f64, accumulation_s: f64, clock_rate_hz: f64) -> SiftedTally {
        let mut t = SiftedTally::empty(accumulation_s, clock_rate_hz);
        for (i, c) in t.cells.iter_mut().enumerate() {
            c.sent = (self.sent[i] * scale).round() as u64;
            c.detected = ((self.detected[i] * scale).round() as u64).min(c.sent);
            c.errors = ((self.errors[i] * scale).round() as u64).min(c.detected);
        }
        t
    }
}

fn expected_counts(
    link: &LinkModel,
    pulses: f64,
    template: &SiftedTally,
) -> Result<Counts, EngineError> {
    let mut out = Counts::zeros(template.cells.len());
    for (i, c) in template.cells.iter().enumerate() {
        let e = link.cell(c.alice, c.bob)?;
        let sent = pulses
            * link.intensities.send_probability(c.alice)
            * link.intensities.send_probability(c.bob);
        out.sent[i] = sent;
        out.detected[i] = sent * e.gain;
        out.errors[i] = sent * e.error_gain;
    }
    Ok(out)
}

/// Samples `trials` slots of a static link.
fn sample_counts<R: Rng>(
    link: &LinkModel,
    trials: u64,
    template: &SiftedTally,
    rng: &mut R,
) -> Counts {
    let set = &link.intensities;
    let cumulative: Vec<f64> = set
        .send_probabilities
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let pick = |u: f64| cumulative.iter().position(|&c| u < c).unwrap_or(3);
    let mut cell_of = [[None; 4]; 4];
    for (i, c) in template.cells.iter().enumerate() {
        cell_of[c.alice.index()][c.bob.index()] = Some(i);
    }
    let mut inputs = [[[[None::<BsmInput>; 2]; 4]; 2]; 4];
    for ia in Intensity::ALL {
        for ib in Intensity::ALL {
            if cell_of[ia.index()][ib.index()].is_none() {
                continue;
            }
            for ba in [false, true] {
                for bb in [false, true] {
                    inputs[ia.index()][ba as usize][ib.index()][bb as usize] =
                        Some(link.slot_input((ia, ba), (ib, bb)));
                }
            }
        }
    }
    let mut out = Counts::zeros(template.cells.len());
    for _ in 0..trials {
        let (ia, ib) = (pick(rng.random()), pick(rng.random()));
        let Some(cell) = cell_of[ia][ib] else {
            continue;
        };
        let (ba, bb): (bool, bool) = (rng.random(), rng.random());
        out.sent[cell] += 1.0;
        let input = inputs[ia][ba as usize][ib][bb as usize]
            .expect("input prepared for every tallied cell");
        let outcome = classify(sample_clicks(&input, &link.detectors, rng));
        let basis = template.cells[cell].basis;
        let ev = sift_with(link.sift, outcome, basis, basis, ba, bb);
        if ev.kept {
            out.detected[cell] += 1.0;
            if ev.error {
                out.errors[cell] += 1.0;
            }
        }
    }
    out
}

/// Splits `total` into `parts` near-equal integers.
fn split(total: u64, parts: u64) -> impl Iterator<Item = u64> {
    (0..parts).map(move |k| total / parts + u64::from(k < total % parts))
}

fn zero_report(channel: String, tally: &SiftedTally) -> KeyReport {
    let (qz, sz) = tally
        .cell(Intensity::Signal, Intensity::Signal, Basis::Z)
        .map(|c| (c.error_rate(), c.detected))
        .unwrap_or((0.0, 0));
    let qx = tally
        .qber(Intensity::Decoy, Intensity::Decoy, Basis::X)
        .unwrap_or(0.0);
    KeyReport {
        channel,
        qber_z: qz,
        qber_x: qx,
        sifted_z: sz,
        key_length_bits: 0.0,
        key_rate_bps: 0.0,
        accumulation_s: tally.accumulation_s,
        estimate: DecoyEstimate::infeasible(),
    }
}

fn run_block(s: &Scenario, state: &mut LinkState, block: usize) -> Result<RunResult, EngineError> {
    let started = Instant::now();
    let clock = s.clock_rate_hz();
    let template = SiftedTally::empty(s.accumulation_s, clock);
    let detuning = s.detuning_factor()?;
    let residual = s.residual_rotations();
    let segments = (s.accumulation_s / s.control_segment_s).ceil().max(1.0) as usize;
    let durations: Vec<f64> = (0..segments)
        .map(|k| (s.accumulation_s - k as f64 * s.control_segment_s).min(s.control_segment_s))
        .collect();

    let budget_per_segment: Vec<u64> = match s.mode {
        RunMode::Analytic => vec![0; segments],
        RunMode::MonteCarlo { pulse_budget, .. } => {
            // proportional to segment length, remainder on the last segment
            let mut v: Vec<u64> = durations
                .iter()
                .map(|d| (pulse_budget as f64 * d / s.accumulation_s).floor() as u64)
                .collect();
            let assigned: u64 = v.iter().sum();
            *v.last_mut().expect("at least one segment") += pulse_budget - assigned;
            v
        }
    };

    let mut counts = Counts::zeros(template.cells.len());
    let mut trace = Vec::with_capacity(segments);
    let mut xi_weighted = 0.0;
    let mut trials = 0;
    for (k, &duration) in durations.iter().enumerate() {
        let time_s = block as f64 * s.accumulation_s + durations[..k].iter().sum::<f64>();
        let (timing_xi, residual_ps) = state.advance_timing(s, duration);
        let xi = timing_xi * detuning;
        let link = state
            .polarization
            .apply_to(&s.link_with([Jones::identity(); 2], xi), &residual);
        let (qber_z, qber_x) = link_qber(&link)?;
        trace.push(ControlSample {
            time_s,
            qber_z,
            qber_x,
            residual_ps,
            xi,
        });
        xi_weighted += xi * duration;
        match s.mode {
            RunMode::Analytic => counts.add(&expected_counts(&link, duration * clock, &template)?),
            RunMode::MonteCarlo { shards, .. } => {
                let budget = budget_per_segment[k];
                let parts: Vec<u64> = split(budget, shards as u64).collect();
                let shard_counts: Vec<Counts> = parts
                    .par_iter()
                    .enumerate()
                    .map(|(j, &n)| {
                        let mut rng =
                            stream(s.seed, STREAM_PULSES, block as u64, k as u64, j as u64);
                        sample_counts(&link, n, &template, &mut rng)
                    })
                    .collect();
                for c in &shard_counts {
                    counts.add(c);
                }
                trials += budget;
            }
        }
        state.polarization.advance(duration);
    }

    let (tally, sampled_tally) = match s.mode {
        RunMode::Analytic => (counts.into_tally(1.0, s.accumulation_s, clock), None),
        RunMode::MonteCarlo { pulse_budget, .. } => {
            let sampled = counts.clone().into_tally(1.0, s.accumulation_s, clock);
            let scale = s.accumulation_s * clock / pulse_budget as f64;
            (
                counts.into_tally(scale, s.accumulation_s, clock),
                Some(sampled),
            )
        }
    };

    let mut diagnostics = Vec::new();
    if let RunMode::MonteCarlo { .. } = s.mode {
        diagnostics.push(
            "Monte Carlo counts are scaled to the block; their variance reflects the sampled budget, not the full block"
                .to_string(),
        );
    }
    let report = match analyze(&tally, &s.intensities, &s.finite_key) {
        Ok(mut r) => {
            r.channel = s.channel_label();
            if r.estimate.infeasible {
                diagnostics.push("decoy statistics certify no single-photon events".to_string());
            }
            r
        }
        Err(e) => {
            diagnostics.push(format!("key extraction failed: {e}"));
            zero_report(s.channel_label(), &tally)
        }
    };

    let mean_xi = xi_weighted / s.accumulation_s;
    let eta = s.static_link()?.arm_transmittance();
    let signal = s.intensities.mean(Intensity::Signal);
    let vis = visibility(
        signal * eta[0],
        signal * eta[1],
        ModeOverlap { xi: mean_xi },
        &s.detectors,
    )
    .unwrap_or(f64::NAN);
    Ok(RunResult {
        schema: SCHEMA_VERSION,
        scenario: s.name.clone(),
        block,
        mode: s.mode,
        tally,
        sampled_tally,
        report,
        trace,
        hom: HomDiagnostics {
            mean_xi,
            visibility: vis,
        },
        diagnostics,
        perf: PerfCounters {
            wall_s: started.elapsed().as_secs_f64(),
            trials,
        },
    })
}

/// One accumulation block from a freshly aligned link.
pub fn run_scenario(s: &Scenario) -> Result<RunResult, EngineError> {
    let mut run = run_long(s, 1)?;
    Ok(run.blocks.remove(0))
}

/// Consecutive blocks sharing drift and control-loop state.
pub fn run_long(s: &Scenario, blocks: usize) -> Result<LongRun, EngineError> {
    if blocks == 0 {
        return Err(EngineError::InvalidScenario(
            "run needs at least one block".into(),
        ));
    }
    s.validate()?;
    let mut state = LinkState::new(s)?;
    let results = (0..blocks)
        .map(|b| run_block(s, &mut state, b))
        .collect::<Result<Vec<_>, _>>()?;
    let rates: Vec<f64> = results.iter().map(|r| r.report.key_rate_bps).collect();
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / rates.len() as f64;
    let summary = RateSummary {
        mean_bps: mean,
        std_bps: var.sqrt(),
        min_bps: rates.iter().copied().fold(f64::INFINITY, f64::min),
        max_bps: rates.iter().copied().fold(0.0, f64::max),
        positive_blocks: rates.iter().filter(|&&r| r > 0.0).count(),
    };
    Ok(LongRun {
        blocks: results,
        summary,
    })
}

/// Finite-key report of the static link from expected counts.
pub fn static_key_report(s: &Scenario, link: &LinkModel) -> Result<KeyReport, EngineError> {
    let clock = s.clock_rate_hz();
    let template = SiftedTally::empty(s.accumulation_s, clock);
    let tally = expected_counts(link, s.accumulation_s * clock, &template)?.into_tally(
        1.0,
        s.accumulation_s,
        clock,
    );
    let mut r = match analyze(&tally, &link.intensities, &s.finite_key) {
        Ok(r) => r,
        Err(ProtocolError::Numeric(_)) | Err(ProtocolError::InvalidTally(_)) => {
            zero_report(String::new(), &tally)
        }
        Err(e) => return Err(e.into()),
    };
    r.channel = s.channel_label();
    Ok(r)
}

/// Unclamped key length of the static link, `−∞` where nothing is certified.
fn raw_key_length(s: &Scenario, link: &LinkModel) -> f64 {
    let clock = s.clock_rate_hz();
    let template = SiftedTally::empty(s.accumulation_s, clock);
    let Ok(counts) = expected_counts(link, s.accumulation_s * clock, &template) else {
        return f64::NEG_INFINITY;
    };
    let tally = counts.into_tally(1.0, s.accumulation_s, clock);
    let Ok(est) = estimate_single_photon(&tally, &link.intensities, &s.finite_key) else {
        return f64::NEG_INFINITY;
    };
    let Ok(z) = tally.cell(Intensity::Signal, Intensity::Signal, Basis::Z) else {
        return f64::NEG_INFINITY;
    };
    if est.infeasible || est.key_phase_error >= 0.5 {
        return f64::NEG_INFINITY;
    }
    secret_key_length(
        est.key_n11,
        est.key_phase_error,
        z.detected as f64,
        z.error_rate(),
        &s.finite_key,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizedIntensities {
    pub intensities: IntensitySet,
    pub key_rate_bps: f64,
}

/// Intensities as the free vector `[s, μ, ν, p_s, p_d, p_w]`, or `None` if invalid.
fn intensities_from(x: &[f64; 6]) -> Option<IntensitySet> {
    let [s, mu, nu, ps, pd, pw] = *x;
    let pv = 1.0 - ps - pd - pw;
    let ok = s > 0.0 && nu > 0.0 && nu < mu && ps > 0.0 && pd > 0.0 && pw > 0.0 && pv >= 1e-3;
    let set = IntensitySet {
        mean_photons: [s, mu, nu, 0.0],
        send_probabilities: [ps, pd, pw, pv],
        z_probabilities: [1.0, 0.0, 0.0, 0.0],
    };
    (ok && set.validate().is_ok()).then_some(set)
}

/// Coordinate search over intensities and send probabilities maximizing the
/// finite-key length of the static link.
pub fn optimize_intensities(s: &Scenario) -> Result<OptimizedIntensities, EngineError> {
    s.validate()?;
    let base = s.static_link()?;
    let objective = |x: &[f64; 6]| match intensities_from(x) {
        Some(set) => raw_key_length(
            s,
            &LinkModel {
                intensities: set,
                ..base.clone()
            },
        ),
        None => f64::NEG_INFINITY,
    };
    let i = &s.intensities;
    let mut x = [
        i.mean_photons[0],
        i.mean_photons[1],
        i.mean_photons[2],
        i.send_probabilities[0],
        i.send_probabilities[1],
        i.send_probabilities[2],
    ];
    let mut best = objective(&x);
    let mut step = 0.2;
    while step > 1e-3 {
        let mut improved = false;
        for k in 0..6 {
            for factor in [1.0 + step, 1.0 / (1.0 + step)] {
                let mut y = x;
                y[k] *= factor;
                let v = objective(&y);
                if v > best {
                    (x, best) = (y, v);
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    let intensities = intensities_from(&x)
        .ok_or_else(|| EngineError::InvalidScenario("no valid intensity set".into()))?;
    let report = static_key_report(
        s,
        &LinkModel {
            intensities: intensities.clone(),
            ..base
        },
    )?;
    Ok(OptimizedIntensities {
        intensities,
        key_rate_bps: report.key_rate_bps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistancePoint {
    pub distance_km: f64,
    pub key_rate_bps: f64,
    pub asymptotic_rate_bps: f64,
    pub qber_z: f64,
    pub qber_x: f64,
}

/// Static-link key rate over total user-to-user distances, split evenly
/// between the arms; optionally re-optimizing intensities per point.
pub fn keyrate_vs_distance(
    s: &Scenario,
    distances_km: &[f64],
    optimize: bool,
) -> Result<Vec<DistancePoint>, EngineError> {
    s.validate()?;
    distances_km
        .par_iter()
        .map(|&d| {
            let mut local = s.clone();
            for c in &mut local.channels {
                c.length_km = 0.5 * d;
            }
            if optimize {
                if let Ok(opt) = optimize_intensities(&local) {
                    local.intensities = opt.intensities;
                }
            }
            let link = local.static_link()?;
            let report = static_key_report(&local, &link)?;
            let cells = link.expected_cells()?;
            let asymptotic = asymptotic_key_rate(
                &cells,
                &local.intensities,
                local.finite_key.f_ec,
                local.clock_rate_hz(),
            )?;
            Ok(DistancePoint {
                distance_km: d,
                key_rate_bps: report.key_rate_bps,
                asymptotic_rate_bps: asymptotic,
                qber_z: report.qber_z,
                qber_x: report.qber_x,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration;

    fn quiet(mut s: Scenario) -> Scenario {
        for c in &mut s.channels {
            c.polarization_drift_rate = 0.0;
            c.timing_drift_ps_per_sqrt_s = 0.0;
        }
        s.polarization.enabled = false;
        s.timing.enabled = false;
        s
    }

    #[test]
    fn detuning_overlap_matches_pointwise_limit() {
        let shape = calibration::pulse_shape();
        let direct = mode_overlap(&shape, 0.0, 500.0).xi;
        assert!((detuning_overlap(&shape, 500.0, 0.0) - direct).abs() < 1e-15);
        assert!(
            (detuning_overlap(&shape, 0.0, 30.0) - expected_overlap(&shape, 0.0, 0.0, 30.0).xi)
                .abs()
                < 1e-15
        );
    }

    #[test]
    fn split_is_exact() {
        assert_eq!(split(10, 3).collect::<Vec<_>>(), vec![4, 3, 3]);
        assert_eq!(split(7, 7).sum::<u64>(), 7);
    }

    #[test]
    fn rejects_small_budget() {
        let mut s = calibration::scenario_200km();
        s.mode = RunMode::MonteCarlo {
            pulse_budget: 100,
            shards: 1,
        };
        assert!(matches!(s.validate(), Err(EngineError::InvalidScenario(_))));
    }

    #[test]
    fn zero_transmittance_gives_zero_key() {
        let mut s = quiet(calibration::scenario_200km());
        s.receiver_loss_db = 400.0;
        let r = run_scenario(&s).unwrap();
        assert_eq!(r.report.key_rate_bps, 0.0);
        assert!(!r.diagnostics.is_empty());
    }

    #[test]
    fn quiet_blocks_are_identical() {
        let mut s = quiet(calibration::scenario_200km());
        s.accumulation_s = 100.0;
        let run = run_long(&s, 3).unwrap();
        let rates: Vec<f64> = run.blocks.iter().map(|b| b.report.key_rate_bps).collect();
        assert!(rates.iter().all(|&r| r == rates[0]));
        assert_eq!(run.blocks[0].tally.cells, run.blocks[2].tally.cells);
    }

    #[test]
    fn analytic_counts_follow_static_link() {
        let mut s = quiet(calibration::scenario_200km());
        s.timing_jitter_ps = 0.0;
        let r = run_scenario(&s).unwrap();
        let expected = static_key_report(&s, &s.static_link().unwrap()).unwrap();
        assert!((r.report.qber_z - expected.qber_z).abs() < 1e-6);
    }
}
