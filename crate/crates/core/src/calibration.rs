//! Reference operating point of the 200 km, 2.5 GHz link.
//!
//! Values that are not measured quantities (loop gains, noise amplitudes,
//! residual misalignment, receiver loss) were tuned so the simulated
//! observables land on the reported ones.

use crate::comb::{CombPlan, LockLoopConfig, SeedJitterModel};
use crate::control::{CompensationConfig, SpgdConfig, SpgdObjective, TimingLoopConfig};
use crate::engine::{RunMode, Scenario};
use crate::interference::{expected_overlap, HomScanConfig};
use crate::link::LinkModel;
use crate::photonics::{DetectorSet, FiberChannel, IntensitySet, Jones, PulseShape};
use crate::protocol::{FiniteKeyParams, SiftPolicy};

/// Repetition-rate lock tuned for a ~215 Hz closed-loop ΔΩr standard deviation.
pub fn lock_loop() -> LockLoopConfig {
    LockLoopConfig {
        thermal_coefficient_hz_per_mk: 400.0,
        plant_time_constant_s: 5.0,
        proportional_gain: 0.6,
        integral_gain: 0.25,
        disturbance_walk_mk_per_sqrt_s: 0.4,
        measurement_noise_hz: 100.0,
        step_interval_s: 1.0,
        rf_reference_ghz: 49.0,
        initial_delta_hz: 0.0,
        divergence_bound_hz: 1.0e6,
    }
}

pub const CLOCK_RATE_GHZ: f64 = 2.5;
pub const PULSE_FWHM_PS: f64 = 95.0;
pub const EXTINCTION_RATIO_DB: f64 = 30.0;
/// Residual arrival-time jitter of each user after timing feedback (ps).
pub const TIMING_JITTER_PS: f64 = 2.0;
pub const SPAN_KM: f64 = 100.0;
/// Static polarization error of each arm that the feedback cannot see (rad on
/// the Poincaré sphere, opposite sense for the two arms).
pub const RESIDUAL_MISALIGNMENT_RAD: f64 = 0.115;
pub const RECEIVER_LOSS_DB: f64 = 0.0;

pub fn pulse_shape() -> PulseShape {
    PulseShape::new(PULSE_FWHM_PS, CLOCK_RATE_GHZ).expect("valid reference pulse")
}

/// Superconducting detectors: 70% efficiency, 1e-7 dark counts per gate.
pub fn detectors() -> DetectorSet {
    DetectorSet::uniform(0.7, 1e-7, 30.0)
}

/// Intensities optimized for a 1000-s block at 200 km.
pub fn intensities() -> IntensitySet {
    IntensitySet {
        mean_photons: [0.296, 0.270, 0.059, 0.0],
        send_probabilities: [0.453, 0.069, 0.372, 0.106],
        z_probabilities: [1.0, 0.0, 0.0, 0.0],
    }
}

pub fn finite_key() -> FiniteKeyParams {
    FiniteKeyParams::default()
}

/// Mean wavepacket overlap with locked seeds and residual timing jitter.
pub fn mode_overlap() -> f64 {
    let seed = SeedJitterModel::locked_default();
    let detuning_std = seed.single_laser_std_khz * std::f64::consts::SQRT_2;
    expected_overlap(
        &pulse_shape(),
        0.0,
        TIMING_JITTER_PS * std::f64::consts::SQRT_2,
        detuning_std,
    )
    .xi
}

pub fn residual_misalignment() -> [Jones; 2] {
    let axis = [0.0, 0.0, 1.0];
    [
        Jones::rotation(axis, RESIDUAL_MISALIGNMENT_RAD),
        Jones::rotation(axis, -RESIDUAL_MISALIGNMENT_RAD),
    ]
}

/// Fiber span with the reference drift rates.
pub fn fiber_span(length_km: f64) -> FiberChannel {
    FiberChannel {
        polarization_drift_rate: POLARIZATION_DRIFT_RAD2_PER_S,
        timing_drift_ps_per_sqrt_s: TIMING_DRIFT_PS_PER_SQRT_S,
        ..FiberChannel::standard(length_km)
    }
}

/// 100 km + 100 km link with the residual misalignment applied.
pub fn link_200km() -> LinkModel {
    LinkModel {
        shape: pulse_shape(),
        intensities: intensities(),
        extinction_ratio_db: EXTINCTION_RATIO_DB,
        channels: [fiber_span(SPAN_KM); 2],
        receiver_loss_db: RECEIVER_LOSS_DB,
        detectors: detectors(),
        arm_unitaries: residual_misalignment(),
        xi: mode_overlap(),
        sift: SiftPolicy::default(),
    }
}

/// Rotation-angle diffusion of each 100-km span (rad²/s).
pub const POLARIZATION_DRIFT_RAD2_PER_S: f64 = 1.0e-4;
/// Arrival-time random walk of each span (ps/√s).
pub const TIMING_DRIFT_PS_PER_SQRT_S: f64 = 6.0;

pub fn spgd() -> SpgdConfig {
    SpgdConfig {
        gain: 4.0,
        perturbation: 0.05,
        iteration_period_s: 1.0,
        objective: SpgdObjective::RejectedZx,
    }
}

pub fn compensation() -> CompensationConfig {
    CompensationConfig {
        spgd: spgd(),
        reference_rate_cps: 2.0e4,
        background_fraction: 0.01,
        drift_rate_rad2_per_s: POLARIZATION_DRIFT_RAD2_PER_S,
        enabled: true,
    }
}

pub fn timing_loop() -> TimingLoopConfig {
    TimingLoopConfig {
        measurement_period_s: 0.1,
        smoothing: 0.7,
        actuator_resolution_ps: 0.1,
        measurement_noise_ps: 0.5,
        enabled: true,
    }
}

/// Polarization mismatch between the two arms during a HOM measurement.
pub const HOM_POLARIZATION_MISMATCH_RAD: f64 = 0.34;

/// HOM dip measurement with locked combs and residual timing jitter.
pub fn hom_scan() -> HomScanConfig {
    HomScanConfig {
        shape: pulse_shape(),
        mean_photons: [0.01; 2],
        detectors: detectors(),
        timing_jitter_ps: TIMING_JITTER_PS,
        seed_jitter: [SeedJitterModel::locked_default(); 2],
        extinction_ratio_db: EXTINCTION_RATIO_DB,
        polarization_mismatch_rad: HOM_POLARIZATION_MISMATCH_RAD,
    }
}

/// Tooth used for the reference link.
pub const REFERENCE_TOOTH: i32 = 0;
pub const BLOCK_S: f64 = 1000.0;
pub const CONTROL_SEGMENT_S: f64 = 100.0;

/// The 200-km link over one 1000-s block in analytic mode.
pub fn scenario_200km() -> Scenario {
    Scenario {
        name: "paper-200km".to_string(),
        combs: [CombPlan::nominal(); 2],
        tooth: REFERENCE_TOOTH,
        seed_jitter: [SeedJitterModel::locked_default(); 2],
        intensities: intensities(),
        pulse: pulse_shape(),
        extinction_ratio_db: EXTINCTION_RATIO_DB,
        channels: [fiber_span(SPAN_KM); 2],
        receiver_loss_db: RECEIVER_LOSS_DB,
        detectors: detectors(),
        residual_misalignment_rad: RESIDUAL_MISALIGNMENT_RAD,
        timing_jitter_ps: TIMING_JITTER_PS,
        polarization: compensation(),
        timing: timing_loop(),
        sift: SiftPolicy::default(),
        finite_key: finite_key(),
        accumulation_s: BLOCK_S,
        control_segment_s: CONTROL_SEGMENT_S,
        mode: RunMode::Analytic,
        seed: 2024,
    }
}
