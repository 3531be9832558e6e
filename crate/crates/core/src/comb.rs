//! Soliton microcomb frequency plan and lock loops.
//!
//! Tooth `CH+n` sits `n` repetition rates *below* CH0, so increasing index
//! means longer wavelength. Teeth are labelled with the nearest point of the
//! 50-GHz ITU grid: `C<k>` at `190.0 + 0.1k` THz and `H<k>` at `190.05 + 0.1k` THz.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CombError {
    #[error("tooth index {index} outside the plan range [{min}, {max}]")]
    OutOfRange { index: i32, min: i32, max: i32 },
    #[error("tooth frequency {frequency_thz:.4} THz lies outside ITU C/H grid coverage")]
    Unlabeled { frequency_thz: f64 },
    #[error("invalid comb configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("lock loop diverged at t = {time_s} s (|ΔΩr| = {delta_hz:.3e} Hz)")]
    Unstable { time_s: f64, delta_hz: f64 },
}

/// Frequency grid of one locked comb.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombPlan {
    /// Optical frequency of CH0 in THz.
    pub center_frequency_thz: f64,
    /// Tooth spacing Ω_Rep in GHz.
    pub repetition_rate_ghz: f64,
    pub tooth_min: i32,
    pub tooth_max: i32,
    /// Minimum tooth SNR (dB) for the range to count as usable.
    pub snr_floor_db: f64,
}

/// First and last ITU grid indices (both families) covered by labelling.
const ITU_K_MIN: i64 = 1;
const ITU_K_MAX: i64 = 72;

impl CombPlan {
    /// Nominal locked comb: ~49-GHz spacing, 201 teeth, CH0 17.5 GHz above the C21 grid point.
    pub fn nominal() -> Self {
        Self {
            center_frequency_thz: 192.1175,
            repetition_rate_ghz: 49.0,
            tooth_min: -100,
            tooth_max: 100,
            snr_floor_db: 20.0,
        }
    }

    pub fn validate(&self) -> Result<(), CombError> {
        if !(self.repetition_rate_ghz > 0.0) {
            return Err(CombError::InvalidConfig("repetition rate must be positive"));
        }
        if !(self.tooth_min <= 0 && 0 <= self.tooth_max) {
            return Err(CombError::InvalidConfig("tooth range must contain CH0"));
        }
        Ok(())
    }

    pub fn usable_teeth(&self) -> usize {
        (self.tooth_max - self.tooth_min + 1) as usize
    }

    fn check(&self, n: i32) -> Result<(), CombError> {
        if n < self.tooth_min || n > self.tooth_max {
            return Err(CombError::OutOfRange {
                index: n,
                min: self.tooth_min,
                max: self.tooth_max,
            });
        }
        Ok(())
    }

    /// Optical frequency (THz) of tooth `CH n`.
    pub fn tooth_frequency(&self, n: i32) -> Result<f64, CombError> {
        self.check(n)?;
        Ok(self.center_frequency_thz - n as f64 * self.repetition_rate_ghz * 1e-3)
    }

    /// Nearest 50-GHz ITU grid label of tooth `CH n`.
    pub fn itu_label(&self, n: i32) -> Result<ItuChannel, CombError> {
        ItuChannel::nearest(self.tooth_frequency(n)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ItuFamily {
    /// 100-GHz grid points.
    C,
    /// Half-grid points, 50 GHz above the C point with the same number.
    H,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItuChannel {
    pub family: ItuFamily,
    pub number: u32,
}

impl ItuChannel {
    pub fn nearest(frequency_thz: f64) -> Result<Self, CombError> {
        let slot = ((frequency_thz - 190.0) / 0.05).round() as i64;
        let (family, k) = if slot.rem_euclid(2) == 0 {
            (ItuFamily::C, slot / 2)
        } else {
            (ItuFamily::H, (slot - 1) / 2)
        };
        if !(ITU_K_MIN..=ITU_K_MAX).contains(&k) {
            return Err(CombError::Unlabeled { frequency_thz });
        }
        Ok(Self {
            family,
            number: k as u32,
        })
    }

    pub fn frequency_thz(&self) -> f64 {
        let base = match self.family {
            ItuFamily::C => 190.0,
            ItuFamily::H => 190.05,
        };
        base + 0.1 * self.number as f64
    }
}

impl std::fmt::Display for ItuChannel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let p = match self.family {
            ItuFamily::C => 'C',
            ItuFamily::H => 'H',
        };
        write!(f, "{p}{}", self.number)
    }
}

/// Repetition-rate lock: a PI controller driving the resonator temperature
/// through a first-order thermal lag.
///
/// Plant: `T[k+1] = a·T[k] + (1−a)(u[k] + d[k])` with `a = exp(−dt/τ)`;
/// error signal `ΔΩr = Δ0 − κ·T + n`, where `d` is an ambient random walk
/// and `n` is white counter noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LockLoopConfig {
    /// κ, repetition-rate shift per resonator temperature change (Hz/mK).
    pub thermal_coefficient_hz_per_mk: f64,
    pub plant_time_constant_s: f64,
    pub proportional_gain: f64,
    pub integral_gain: f64,
    /// Ambient temperature random-walk step std (mK/√s).
    pub disturbance_walk_mk_per_sqrt_s: f64,
    /// White noise on the measured beat note (Hz).
    pub measurement_noise_hz: f64,
    pub step_interval_s: f64,
    /// Ω_RF (GHz).
    pub rf_reference_ghz: f64,
    /// ΔΩr at t = 0 (Hz).
    pub initial_delta_hz: f64,
    /// |ΔΩr| above which the loop is declared unstable (Hz).
    pub divergence_bound_hz: f64,
}

impl LockLoopConfig {
    pub fn validate(&self) -> Result<(), CombError> {
        if !(self.step_interval_s > 0.0) || !(self.plant_time_constant_s > 0.0) {
            return Err(CombError::InvalidConfig(
                "step interval and plant time constant must be positive",
            ));
        }
        if !(self.disturbance_walk_mk_per_sqrt_s >= 0.0) || !(self.measurement_noise_hz >= 0.0) {
            return Err(CombError::InvalidConfig(
                "noise standard deviations must be >= 0",
            ));
        }
        if !(self.thermal_coefficient_hz_per_mk > 0.0) {
            return Err(CombError::InvalidConfig(
                "thermal coefficient must be positive",
            ));
        }
        Ok(())
    }

    /// Same plant and noise with the controller switched off.
    pub fn open_loop(&self) -> Self {
        Self {
            proportional_gain: 0.0,
            integral_gain: 0.0,
            ..self.clone()
        }
    }

    /// Scales both noise sources by `factor`.
    pub fn with_noise_scale(&self, factor: f64) -> Self {
        Self {
            disturbance_walk_mk_per_sqrt_s: self.disturbance_walk_mk_per_sqrt_s * factor,
            measurement_noise_hz: self.measurement_noise_hz * factor,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LockState {
    /// Measured ΔΩr = Ω_RF − Ω_Rep (Hz).
    pub delta_omega_r_hz: f64,
    /// Controller-applied temperature offset (mK).
    pub temperature_offset_mk: f64,
    pub time_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LockTrajectory {
    pub states: Vec<LockState>,
}

impl LockTrajectory {
    fn deltas(&self) -> impl Iterator<Item = f64> + '_ {
        self.states.iter().map(|s| s.delta_omega_r_hz)
    }

    pub fn delta_std_hz(&self) -> f64 {
        std_dev(self.deltas())
    }

    pub fn delta_peak_to_peak_hz(&self) -> f64 {
        peak_to_peak(self.deltas())
    }

    pub fn temperature_excursion_mk(&self) -> f64 {
        peak_to_peak(self.states.iter().map(|s| s.temperature_offset_mk))
    }

    /// Statistics after discarding the first `settle_s` seconds.
    pub fn after(&self, settle_s: f64) -> LockTrajectory {
        LockTrajectory {
            states: self
                .states
                .iter()
                .copied()
                .filter(|s| s.time_s >= settle_s)
                .collect(),
        }
    }
}

pub(crate) fn std_dev(values: impl Iterator<Item = f64>) -> f64 {
    let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
    for x in values {
        n += 1;
        let d = x - mean;
        mean += d / n as f64;
        m2 += d * (x - mean);
    }
    if n < 2 {
        0.0
    } else {
        (m2 / (n - 1) as f64).sqrt()
    }
}

fn peak_to_peak(values: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
        (lo.min(x), hi.max(x))
    });
    if lo.is_finite() {
        hi - lo
    } else {
        0.0
    }
}

/// Simulates the repetition-rate lock for `duration_s` seconds.
pub fn simulate_lock(
    config: &LockLoopConfig,
    duration_s: f64,
    seed: u64,
) -> Result<LockTrajectory, CombError> {
    config.validate()?;
    if !(duration_s > 0.0) {
        return Err(CombError::InvalidConfig("duration must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = config.step_interval_s;
    let steps = (duration_s / dt).round().max(1.0) as usize;
    let kappa = config.thermal_coefficient_hz_per_mk;
    let a = (-dt / config.plant_time_constant_s).exp();
    let walk = config.disturbance_walk_mk_per_sqrt_s * dt.sqrt();

    let (mut resonator_mk, mut ambient_mk, mut integral_mk) = (0.0, 0.0, 0.0);
    let mut states = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let time_s = k as f64 * dt;
        let noise: f64 = rng.sample(StandardNormal);
        let delta =
            config.initial_delta_hz - kappa * resonator_mk + config.measurement_noise_hz * noise;
        if !delta.is_finite() || delta.abs() > config.divergence_bound_hz {
            return Err(CombError::Unstable {
                time_s,
                delta_hz: delta,
            });
        }
        let error_mk = delta / kappa;
        integral_mk += config.integral_gain * error_mk;
        let control_mk = config.proportional_gain * error_mk + integral_mk;
        states.push(LockState {
            delta_omega_r_hz: delta,
            temperature_offset_mk: control_mk,
            time_s,
        });

        resonator_mk = a * resonator_mk + (1.0 - a) * (control_mk + ambient_mk);
        let step: f64 = rng.sample(StandardNormal);
        ambient_mk += walk * step;
    }
    Ok(LockTrajectory { states })
}

/// Noise scale that brings the closed-loop ΔΩr std to `target_std_hz` for this seed.
///
/// The loop is linear in its noise inputs, so the std scales exactly with the factor.
pub fn fit_noise_scale(
    config: &LockLoopConfig,
    duration_s: f64,
    seed: u64,
    target_std_hz: f64,
) -> Result<f64, CombError> {
    let unit = LockLoopConfig {
        initial_delta_hz: 0.0,
        ..config.clone()
    };
    let std = simulate_lock(&unit, duration_s, seed)?.delta_std_hz();
    if std == 0.0 {
        return Err(CombError::InvalidConfig(
            "noise-free configuration cannot be scaled",
        ));
    }
    Ok(target_std_hz / std)
}

/// Residual frequency noise of one pump laser after its atomic lock.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedJitterModel {
    pub single_laser_std_khz: f64,
    pub correlation_time_s: f64,
}

impl SeedJitterModel {
    pub fn locked_default() -> Self {
        Self {
            single_laser_std_khz: 21.7,
            correlation_time_s: 1.0,
        }
    }

    pub fn noiseless() -> Self {
        Self {
            single_laser_std_khz: 0.0,
            correlation_time_s: 1.0,
        }
    }
}

/// One instantaneous carrier difference between matching teeth of two combs (kHz).
pub fn pair_detuning<R: Rng + ?Sized>(
    a: &SeedJitterModel,
    b: &SeedJitterModel,
    rng: &mut R,
) -> f64 {
    let std = a.single_laser_std_khz.hypot(b.single_laser_std_khz);
    if std == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, std).expect("finite std").sample(rng)
}

/// Ornstein-Uhlenbeck trajectory of one laser's frequency offset.
#[derive(Clone, Debug)]
pub struct SeedJitterProcess {
    model: SeedJitterModel,
    value_khz: f64,
}

impl SeedJitterProcess {
    /// Starts from a draw of the stationary distribution.
    pub fn new<R: Rng + ?Sized>(model: SeedJitterModel, rng: &mut R) -> Self {
        let z: f64 = rng.sample(StandardNormal);
        Self {
            model,
            value_khz: model.single_laser_std_khz * z,
        }
    }

    pub fn value_khz(&self) -> f64 {
        self.value_khz
    }

    pub fn step<R: Rng + ?Sized>(&mut self, dt: f64, rng: &mut R) -> f64 {
        let rho = (-dt / self.model.correlation_time_s).exp();
        let z: f64 = rng.sample(StandardNormal);
        self.value_khz =
            rho * self.value_khz + self.model.single_laser_std_khz * (1.0 - rho * rho).sqrt() * z;
        self.value_khz
    }
}
