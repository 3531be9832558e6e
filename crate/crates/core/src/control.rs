//! Closed-loop compensators: SPGD polarization control and arrival-time feedback.

use std::convert::Infallible;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::interference::InterferenceError;
use crate::link::LinkModel;
use crate::photonics::{drift_step, timing_step, DriftState, Intensity, Jones, PolarizationState};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ControlError {
    #[error("invalid control configuration: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Interference(#[from] InterferenceError),
}

/// Wraps an angle to `[−π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

const S1: [f64; 3] = [1.0, 0.0, 0.0];
const S2: [f64; 3] = [0.0, 1.0, 0.0];

/// Four retarders about alternating S1/S2 axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpcState {
    angles: [f64; 4],
}

impl Default for EpcState {
    fn default() -> Self {
        Self::home()
    }
}

impl EpcState {
    /// Identity transform at which the four stages still span all three
    /// rotation axes (all-zero angles reach only S1 and S2 to first order).
    pub fn home() -> Self {
        Self::new([0.0, PI / 2.0, 0.0, -PI / 2.0])
    }

    pub fn new(angles: [f64; 4]) -> Self {
        Self {
            angles: angles.map(wrap_angle),
        }
    }

    pub fn angles(&self) -> [f64; 4] {
        self.angles
    }

    /// `R_S1(a₃)·R_S2(a₂)·R_S1(a₁)·R_S2(a₀)`.
    pub fn unitary(&self) -> Jones {
        let [a0, a1, a2, a3] = self.angles;
        Jones::rotation(S1, a3)
            * Jones::rotation(S2, a2)
            * Jones::rotation(S1, a1)
            * Jones::rotation(S2, a0)
    }

    /// State displaced by `step` (then wrapped).
    pub fn offset(&self, step: [f64; 4], scale: f64) -> Self {
        Self::new(std::array::from_fn(|i| self.angles[i] + scale * step[i]))
    }
}

/// Observable the SPGD loop minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpgdObjective {
    /// Fraction of H reference counts landing on V.
    RejectedZ,
    /// Mean rejected fraction of H and D references.
    RejectedZx,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpgdConfig {
    /// γ (rad per unit objective change).
    pub gain: f64,
    /// δ (rad).
    pub perturbation: f64,
    pub iteration_period_s: f64,
    pub objective: SpgdObjective,
}

impl SpgdConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        if !(self.gain >= 0.0) || !(self.perturbation > 0.0) || !(self.iteration_period_s > 0.0) {
            return Err(ControlError::InvalidConfig(
                "SPGD needs gain >= 0, perturbation > 0 and a positive period",
            ));
        }
        Ok(())
    }
}

/// One two-sided SPGD update `u ← u − γ·[J(u+δs) − J(u−δs)]·s`.
pub fn spgd_step<R, E>(
    state: &EpcState,
    mut objective: impl FnMut(&EpcState) -> Result<f64, E>,
    config: &SpgdConfig,
    rng: &mut R,
) -> Result<EpcState, E>
where
    R: Rng + ?Sized,
{
    let signs: [f64; 4] = std::array::from_fn(|_| if rng.random::<bool>() { 1.0 } else { -1.0 });
    let plus = objective(&state.offset(signs, config.perturbation))?;
    let minus = objective(&state.offset(signs, -config.perturbation))?;
    Ok(state.offset(signs, -config.gain * (plus - minus)))
}

/// Drift and compensation parameters for one link.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompensationConfig {
    pub spgd: SpgdConfig,
    /// Detected reference counts per second feeding the objective.
    pub reference_rate_cps: f64,
    /// Fraction of reference counts that are background (spread evenly over outcomes).
    pub background_fraction: f64,
    /// Polarization drift of each fiber span (rad²/s).
    pub drift_rate_rad2_per_s: f64,
    pub enabled: bool,
}

impl CompensationConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        self.spgd.validate()?;
        if !(self.reference_rate_cps > 0.0) || !(0.0..1.0).contains(&self.background_fraction) {
            return Err(ControlError::InvalidConfig(
                "reference rate must be positive and background in [0, 1)",
            ));
        }
        if !(self.drift_rate_rad2_per_s >= 0.0) {
            return Err(ControlError::InvalidConfig("drift rate must be >= 0"));
        }
        Ok(())
    }
}

/// Rejected-count estimate of the objective for the transform `u`.
fn measured_objective<R: Rng + ?Sized>(
    u: &Jones,
    config: &CompensationConfig,
    counts: f64,
    rng: &mut R,
) -> f64 {
    let refs: &[(PolarizationState, PolarizationState)] = match config.spgd.objective {
        SpgdObjective::RejectedZ => &[(
            PolarizationState::horizontal(),
            PolarizationState::vertical(),
        )],
        SpgdObjective::RejectedZx => &[
            (
                PolarizationState::horizontal(),
                PolarizationState::vertical(),
            ),
            (
                PolarizationState::diagonal(),
                PolarizationState::antidiagonal(),
            ),
        ],
    };
    let per_ref = counts / refs.len() as f64;
    let mut rejected = 0.0;
    for (sent, wrong) in refs {
        let p = wrong.fidelity(&u.apply(sent));
        let mean =
            per_ref * ((1.0 - config.background_fraction) * p + 0.5 * config.background_fraction);
        rejected += if mean > 0.0 {
            Poisson::new(mean).expect("finite mean").sample(rng)
        } else {
            0.0
        };
    }
    rejected / counts
}

/// One fiber span with its compensating EPC.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompensatedArm {
    pub drift: DriftState,
    pub epc: EpcState,
}

impl CompensatedArm {
    pub fn new(drift: DriftState) -> Self {
        Self {
            drift,
            epc: EpcState::default(),
        }
    }

    /// Fiber followed by the EPC.
    pub fn net_unitary(&self) -> Jones {
        self.epc.unitary() * self.drift.unitary
    }
}

/// Polarization drift and SPGD compensation of both arms of a link.
#[derive(Clone, Debug)]
pub struct PolarizationLoop {
    pub arms: [CompensatedArm; 2],
    pub config: CompensationConfig,
    /// Rotation-angle diffusion of each arm (rad²/s).
    pub drift_rates: [f64; 2],
    pub time_s: f64,
    drift_rng: ChaCha8Rng,
    dither_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
}

impl PolarizationLoop {
    /// Starts from aligned arms.
    pub fn new(config: CompensationConfig, seed: u64) -> Result<Self, ControlError> {
        config.validate()?;
        let mut root = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            arms: [CompensatedArm::new(DriftState::default()); 2],
            config,
            drift_rates: [config.drift_rate_rad2_per_s; 2],
            time_s: 0.0,
            drift_rng: ChaCha8Rng::seed_from_u64(root.random()),
            dither_rng: ChaCha8Rng::seed_from_u64(root.random()),
            noise_rng: ChaCha8Rng::seed_from_u64(root.random()),
        })
    }

    /// Runs SPGD iterations (or free drift when disabled) for `duration_s`.
    pub fn advance(&mut self, duration_s: f64) {
        let config = self.config;
        let period = config.spgd.iteration_period_s;
        let steps = (duration_s / period).round() as usize;
        // each objective evaluation integrates half an iteration period
        let counts = 0.5 * config.reference_rate_cps * period;
        let Self {
            arms,
            drift_rates,
            drift_rng,
            dither_rng,
            noise_rng,
            ..
        } = self;
        for _ in 0..steps {
            for (arm, &rate) in arms.iter_mut().zip(drift_rates.iter()) {
                arm.drift = drift_step(&arm.drift, period, rate, drift_rng);
                if config.enabled {
                    let fiber = arm.drift.unitary;
                    let objective = |s: &EpcState| -> Result<f64, Infallible> {
                        Ok(measured_objective(
                            &(s.unitary() * fiber),
                            &config,
                            counts,
                            noise_rng,
                        ))
                    };
                    let Ok(next) = spgd_step(&arm.epc, objective, &config.spgd, dither_rng);
                    arm.epc = next;
                }
            }
        }
        self.time_s += steps as f64 * period;
    }

    pub fn net_unitaries(&self) -> [Jones; 2] {
        [self.arms[0].net_unitary(), self.arms[1].net_unitary()]
    }

    /// `link` with the current arm transforms placed behind the static
    /// per-arm rotations in `residual`, which the loop cannot observe.
    pub fn apply_to(&self, link: &LinkModel, residual: &[Jones; 2]) -> LinkModel {
        let net = self.net_unitaries();
        LinkModel {
            arm_unitaries: [residual[0] * net[0], residual[1] * net[1]],
            ..link.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompensationSample {
    pub time_s: f64,
    pub qber_z: f64,
    pub qber_x: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompensationTrace {
    pub samples: Vec<CompensationSample>,
}

impl CompensationTrace {
    /// Mean Z QBER over samples at or after `settle_s`.
    pub fn mean_qber_z(&self, settle_s: f64) -> f64 {
        let v: Vec<f64> = self
            .samples
            .iter()
            .filter(|s| s.time_s >= settle_s)
            .map(|s| s.qber_z)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn max_qber_z(&self) -> f64 {
        self.samples.iter().map(|s| s.qber_z).fold(0.0, f64::max)
    }

    /// First sample time with Z QBER above `threshold`.
    pub fn first_exceeding(&self, threshold: f64) -> Option<f64> {
        self.samples
            .iter()
            .find(|s| s.qber_z > threshold)
            .map(|s| s.time_s)
    }
}

/// Expected Z (signal–signal) and X (decoy–decoy) QBER of a link.
pub fn link_qber(link: &LinkModel) -> Result<(f64, f64), InterferenceError> {
    let z = link.cell(Intensity::Signal, Intensity::Signal)?;
    let x = link.cell(Intensity::Decoy, Intensity::Decoy)?;
    let rate = |g: f64, e: f64| if g > 0.0 { e / g } else { 0.0 };
    Ok((rate(z.gain, z.error_gain), rate(x.gain, x.error_gain)))
}

/// Drifts both arms under the polarization loop and samples the link QBER
/// every `sample_every_s`.
pub fn run_compensation(
    link: &LinkModel,
    residual: &[Jones; 2],
    duration_s: f64,
    sample_every_s: f64,
    config: &CompensationConfig,
    seed: u64,
) -> Result<CompensationTrace, ControlError> {
    if !(duration_s > 0.0 && sample_every_s > 0.0) {
        return Err(ControlError::InvalidConfig(
            "duration and sampling interval must be positive",
        ));
    }
    let mut pl = PolarizationLoop::new(*config, seed)?;
    let mut samples = Vec::new();
    loop {
        let (qber_z, qber_x) = link_qber(&pl.apply_to(link, residual))?;
        samples.push(CompensationSample {
            time_s: pl.time_s,
            qber_z,
            qber_x,
        });
        if pl.time_s >= duration_s - 1e-9 {
            break;
        }
        pl.advance(sample_every_s.min(duration_s - pl.time_s));
    }
    Ok(CompensationTrace { samples })
}

/// Arrival-time feedback parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingLoopConfig {
    pub measurement_period_s: f64,
    /// Weight of the newest offset measurement in the running estimate.
    pub smoothing: f64,
    pub actuator_resolution_ps: f64,
    /// White error on each offset measurement (ps).
    pub measurement_noise_ps: f64,
    pub enabled: bool,
}

impl TimingLoopConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        if !(self.measurement_period_s > 0.0) {
            return Err(ControlError::InvalidConfig(
                "measurement period must be positive",
            ));
        }
        if !(self.smoothing > 0.0 && self.smoothing <= 1.0) {
            return Err(ControlError::InvalidConfig("smoothing must lie in (0, 1]"));
        }
        if !(self.actuator_resolution_ps >= 0.0) || !(self.measurement_noise_ps >= 0.0) {
            return Err(ControlError::InvalidConfig(
                "resolution and noise must be >= 0",
            ));
        }
        Ok(())
    }
}

fn quantize(x: f64, step: f64) -> f64 {
    if step > 0.0 {
        (x / step).round() * step
    } else {
        x
    }
}

/// Arrival-time feedback state.
///
/// Each period the loop measures the residual, folds `correction + residual`
/// into a smoothed estimate of the absolute offset and moves the delay line to
/// the nearest actuator step of that estimate.
#[derive(Clone, Debug)]
pub struct TimingLoop {
    pub config: TimingLoopConfig,
    correction_ps: f64,
    estimate_ps: f64,
    rng: ChaCha8Rng,
}

impl TimingLoop {
    pub fn new(config: TimingLoopConfig, seed: u64) -> Result<Self, ControlError> {
        config.validate()?;
        Ok(Self {
            config,
            correction_ps: 0.0,
            estimate_ps: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn correction_ps(&self) -> f64 {
        self.correction_ps
    }

    /// Residual for one input sample, then one correction update.
    pub fn step(&mut self, input_ps: f64) -> f64 {
        if !self.config.enabled {
            return input_ps;
        }
        let residual = input_ps - self.correction_ps;
        let noise: f64 = self.rng.sample(StandardNormal);
        let measured = self.correction_ps + residual + self.config.measurement_noise_ps * noise;
        self.estimate_ps += self.config.smoothing * (measured - self.estimate_ps);
        self.correction_ps = quantize(self.estimate_ps, self.config.actuator_resolution_ps);
        residual
    }
}

/// Residual arrival-time offsets for `input_ps`, one sample per measurement period.
pub fn timing_feedback(
    input_ps: &[f64],
    config: &TimingLoopConfig,
    seed: u64,
) -> Result<Vec<f64>, ControlError> {
    let mut l = TimingLoop::new(*config, seed)?;
    Ok(input_ps.iter().map(|&x| l.step(x)).collect())
}

/// Random-walk arrival-time offset sampled every `period_s`.
pub fn timing_drift_series(
    duration_s: f64,
    period_s: f64,
    walk_ps_per_sqrt_s: f64,
    seed: u64,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = (duration_s / period_s).round() as usize;
    let mut state = DriftState::default();
    (0..steps)
        .map(|_| {
            state = timing_step(&state, period_s, walk_ps_per_sqrt_s, &mut rng);
            state.timing_offset_ps
        })
        .collect()
}

/// Population standard deviation.
pub fn series_std(values: &[f64]) -> f64 {
    crate::comb::std_dev(values.iter().copied())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn quadratic_config() -> SpgdConfig {
        SpgdConfig {
            gain: 0.5,
            perturbation: 0.05,
            iteration_period_s: 0.1,
            objective: SpgdObjective::RejectedZx,
        }
    }

    fn dist(a: &EpcState, b: &[f64; 4]) -> f64 {
        a.angles()
            .iter()
            .zip(b)
            .map(|(x, y)| wrap_angle(x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn bowl(target: [f64; 4]) -> impl FnMut(&EpcState) -> Result<f64, Infallible> {
        move |u| Ok(dist(u, &target).powi(2))
    }

    #[test]
    fn wrapping() {
        assert!(EpcState::home().unitary().rotation_angle() < 1e-6);
        assert!((wrap_angle(PI) + PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn epc_angles_stay_wrapped_and_unitary(a in prop::array::uniform4(-50.0f64..50.0)) {
            let s = EpcState::new(a);
            prop_assert!(s.angles().iter().all(|x| (-PI..PI).contains(x)));
            prop_assert!(s.unitary().unitarity_error() < 1e-10);
        }
    }

    #[test]
    fn zero_gain_leaves_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = EpcState::new([0.1, 0.2, 0.3, 0.4]);
        let cfg = SpgdConfig {
            gain: 0.0,
            ..quadratic_config()
        };
        let Ok(next) = spgd_step(&s, bowl([0.0; 4]), &cfg, &mut rng);
        assert_eq!(next, s);
    }

    #[test]
    fn converges_on_quadratic() {
        let target = [0.3, -0.5, 1.0, 0.2];
        let (mut start_sum, mut end_sum) = (0.0, 0.0);
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let init: [f64; 4] = std::array::from_fn(|i| target[i] + rng.random_range(-1.0..1.0));
            let mut s = EpcState::new(init);
            start_sum += dist(&s, &target);
            for _ in 0..200 {
                let Ok(next) = spgd_step(&s, bowl(target), &quadratic_config(), &mut rng);
                s = next;
            }
            end_sum += dist(&s, &target);
        }
        assert!(end_sum * 10.0 <= start_sum, "{start_sum} -> {end_sum}");
    }

    #[test]
    fn stationary_point_has_zero_mean_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = EpcState::new([0.0; 4]);
        let cfg = quadratic_config();
        let mut sum = [0.0; 4];
        let n = 10_000;
        for _ in 0..n {
            let Ok(next) = spgd_step(&s, bowl([0.0; 4]), &cfg, &mut rng);
            for (acc, a) in sum.iter_mut().zip(next.angles()) {
                *acc += a;
            }
        }
        for v in sum {
            assert!((v / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn timing_loop_constant_input() {
        let cfg = TimingLoopConfig {
            measurement_period_s: 1.0,
            smoothing: 1.0,
            actuator_resolution_ps: 0.5,
            measurement_noise_ps: 0.0,
            enabled: true,
        };
        let out = timing_feedback(&[37.3; 10], &cfg, 0).unwrap();
        assert_eq!(out[0], 37.3);
        assert!(out[1..].iter().all(|r| r.abs() <= 0.25 + 1e-12));
    }

    #[test]
    fn timing_loop_off_is_identity() {
        let input = timing_drift_series(100.0, 1.0, 3.0, 5);
        let cfg = TimingLoopConfig {
            measurement_period_s: 1.0,
            smoothing: 0.5,
            actuator_resolution_ps: 1.0,
            measurement_noise_ps: 0.5,
            enabled: false,
        };
        assert_eq!(timing_feedback(&input, &cfg, 1).unwrap(), input);
    }

    #[test]
    fn timing_loop_never_amplifies_drift() {
        for (k, smoothing) in [0.05, 0.2, 0.5, 1.0].into_iter().enumerate() {
            let cfg = TimingLoopConfig {
                measurement_period_s: 1.0,
                smoothing,
                actuator_resolution_ps: 1.0,
                measurement_noise_ps: 1.0,
                enabled: true,
            };
            let input = timing_drift_series(20_000.0, 1.0, 2.0, 100 + k as u64);
            let residual = timing_feedback(&input, &cfg, 7).unwrap();
            assert!(
                series_std(&residual) <= series_std(&input),
                "smoothing {smoothing}"
            );
        }
    }

    #[test]
    fn loop_is_deterministic_and_tracks_time() {
        let cfg = CompensationConfig {
            spgd: quadratic_config(),
            reference_rate_cps: 1e5,
            background_fraction: 0.01,
            drift_rate_rad2_per_s: 1e-3,
            enabled: true,
        };
        let mut a = PolarizationLoop::new(cfg, 9).unwrap();
        let mut b = PolarizationLoop::new(cfg, 9).unwrap();
        a.advance(50.0);
        b.advance(50.0);
        assert_eq!(a.net_unitaries(), b.net_unitaries());
        assert!((a.time_s - 50.0).abs() < 1e-9);
        assert!(a.net_unitaries()[0].unitarity_error() < 1e-9);
    }
}
