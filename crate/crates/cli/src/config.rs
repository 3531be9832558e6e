//! Scenario config files: TOML sections with units in key names.

use mdinet::comb::{CombPlan, LockLoopConfig, SeedJitterModel};
use mdinet::control::{CompensationConfig, SpgdConfig, SpgdObjective, TimingLoopConfig};
use mdinet::engine::{RunMode, Scenario};
use mdinet::interference::HomScanConfig;
use mdinet::netplan::NetworkSpec;
use mdinet::photonics::{DetectorSet, FiberChannel, IntensitySet, PulseShape};
use mdinet::protocol::{FiniteKeyParams, JointScanEstimator, SiftPolicy};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Built-in profiles, selectable with `--profile`.
pub const PROFILES: &[(&str, &str)] =
    &[("paper-200km", include_str!("../profiles/paper-200km.toml"))];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub name: String,
    pub seed: u64,
    pub comb: CombSection,
    pub source: SourceSection,
    pub channel: ChannelSection,
    pub detectors: DetectorSection,
    pub decoy: DecoySection,
    pub finite_key: FiniteKeySection,
    pub control: ControlSection,
    pub network: NetworkSection,
    pub run: RunSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombSection {
    pub center_frequency_thz: f64,
    pub repetition_rate_ghz: f64,
    pub tooth_min: i32,
    pub tooth_max: i32,
    pub snr_floor_db: f64,
    /// Tooth index carrying the simulated link.
    pub tooth: i32,
    /// Offset of Bob's CH0 from Alice's.
    pub bob_offset_khz: f64,
    pub seed_jitter_std_khz: f64,
    pub seed_correlation_time_s: f64,
    pub lock: LockSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LockSection {
    pub thermal_coefficient_hz_per_mk: f64,
    pub plant_time_constant_s: f64,
    pub proportional_gain: f64,
    pub integral_gain: f64,
    pub disturbance_walk_mk_per_sqrt_s: f64,
    pub measurement_noise_hz: f64,
    pub step_interval_s: f64,
    pub rf_reference_ghz: f64,
    pub initial_delta_hz: f64,
    pub divergence_bound_hz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSection {
    pub clock_rate_ghz: f64,
    pub pulse_fwhm_ps: f64,
    pub extinction_ratio_db: f64,
    pub timing_jitter_ps: f64,
    pub residual_misalignment_rad: f64,
    pub hom_mean_photons: f64,
    pub hom_polarization_mismatch_rad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    pub alice_length_km: f64,
    pub bob_length_km: f64,
    pub attenuation_db_per_km: f64,
    pub ull_attenuation_db_per_km: f64,
    pub polarization_drift_rad2_per_s: f64,
    pub timing_drift_ps_per_sqrt_s: f64,
    pub receiver_loss_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    pub efficiency: f64,
    pub dark_prob_per_gate: f64,
    pub jitter_ps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoySection {
    pub signal_mean_photons: f64,
    pub decoy_mean_photons: f64,
    pub weak_mean_photons: f64,
    /// Send probabilities of signal, decoy, weak and vacuum.
    pub send_probabilities: [f64; 4],
    pub keep_psi_plus_in_z: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteKeySection {
    pub epsilon_total: f64,
    pub f_ec: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    pub segment_s: f64,
    pub polarization_enabled: bool,
    pub spgd_gain_rad: f64,
    pub spgd_perturbation_rad: f64,
    pub spgd_period_s: f64,
    pub spgd_objective: SpgdObjective,
    pub reference_rate_cps: f64,
    pub background_fraction: f64,
    pub timing_enabled: bool,
    pub timing_period_s: f64,
    pub timing_smoothing: f64,
    pub actuator_resolution_ps: f64,
    pub timing_noise_ps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub users: usize,
    pub channels: usize,
    pub tdm_slots: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Analytic,
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub mode: ModeName,
    pub pulse_budget: u64,
    pub shards: usize,
    pub accumulation_s: f64,
    pub blocks: usize,
    pub lock_duration_s: f64,
    pub hom_span_ps: f64,
    pub hom_points: usize,
    pub distance_min_km: f64,
    pub distance_max_km: f64,
    pub distance_step_km: f64,
    pub optimize_intensities: bool,
}

/// Raw TOML of a file or built-in profile.
pub fn read_source(path: Option<&str>, profile: Option<&str>) -> Result<String, CliError> {
    match (path, profile) {
        (Some(p), _) => std::fs::read_to_string(p)
            .map_err(|e| CliError::Config(format!("cannot read config {p}: {e}"))),
        (None, name) => {
            let name = name.unwrap_or("paper-200km");
            PROFILES
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, text)| text.to_string())
                .ok_or_else(|| CliError::Config(format!("unknown profile {name:?}")))
        }
    }
}

/// Parses `text`, applies `section.key=value` overrides and an optional seed.
pub fn parse(text: &str, overrides: &[String], seed: Option<u64>) -> Result<Config, CliError> {
    let mut table: toml::Table =
        toml::from_str(text).map_err(|e| CliError::Config(format!("malformed config: {e}")))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    if let Some(seed) = seed {
        let seed = i64::try_from(seed)
            .map_err(|_| CliError::Config(format!("seed {seed} exceeds the TOML integer range")))?;
        table.insert("seed".into(), toml::Value::Integer(seed));
    }
    // re-parse from text so errors point at the offending line and key
    let merged = toml::to_string(&table)
        .map_err(|e| CliError::Config(format!("cannot apply overrides: {e}")))?;
    toml::from_str(&merged).map_err(|e| CliError::Config(format!("invalid config: {e}")))
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut node = table;
    for k in parents {
        node = match node.get_mut(*k) {
            Some(toml::Value::Table(t)) => t,
            _ => {
                return Err(CliError::Config(format!(
                    "override {path}: no section [{k}]"
                )))
            }
        };
    }
    if !node.contains_key(*last) {
        return Err(CliError::Config(format!(
            "override {path}: unknown key {last}"
        )));
    }
    node.insert(last.to_string(), value);
    Ok(())
}

impl Config {
    pub fn comb_plans(&self) -> [CombPlan; 2] {
        let c = &self.comb;
        let alice = CombPlan {
            center_frequency_thz: c.center_frequency_thz,
            repetition_rate_ghz: c.repetition_rate_ghz,
            tooth_min: c.tooth_min,
            tooth_max: c.tooth_max,
            snr_floor_db: c.snr_floor_db,
        };
        let bob = CombPlan {
            center_frequency_thz: c.center_frequency_thz + c.bob_offset_khz * 1e-9,
            ..alice
        };
        [alice, bob]
    }

    pub fn seed_jitter(&self) -> SeedJitterModel {
        SeedJitterModel {
            single_laser_std_khz: self.comb.seed_jitter_std_khz,
            correlation_time_s: self.comb.seed_correlation_time_s,
        }
    }

    pub fn lock_loop(&self) -> LockLoopConfig {
        let l = &self.comb.lock;
        LockLoopConfig {
            thermal_coefficient_hz_per_mk: l.thermal_coefficient_hz_per_mk,
            plant_time_constant_s: l.plant_time_constant_s,
            proportional_gain: l.proportional_gain,
            integral_gain: l.integral_gain,
            disturbance_walk_mk_per_sqrt_s: l.disturbance_walk_mk_per_sqrt_s,
            measurement_noise_hz: l.measurement_noise_hz,
            step_interval_s: l.step_interval_s,
            rf_reference_ghz: l.rf_reference_ghz,
            initial_delta_hz: l.initial_delta_hz,
            divergence_bound_hz: l.divergence_bound_hz,
        }
    }

    pub fn pulse(&self) -> PulseShape {
        PulseShape {
            fwhm_ps: self.source.pulse_fwhm_ps,
            clock_rate_ghz: self.source.clock_rate_ghz,
        }
    }

    pub fn detectors(&self) -> DetectorSet {
        let d = &self.detectors;
        DetectorSet::uniform(d.efficiency, d.dark_prob_per_gate, d.jitter_ps)
    }

    pub fn fiber(&self, length_km: f64) -> FiberChannel {
        FiberChannel {
            length_km,
            attenuation_db_per_km: self.channel.attenuation_db_per_km,
            polarization_drift_rate: self.channel.polarization_drift_rad2_per_s,
            timing_drift_ps_per_sqrt_s: self.channel.timing_drift_ps_per_sqrt_s,
        }
    }

    pub fn scenario(&self) -> Scenario {
        let (ctl, d) = (&self.control, &self.decoy);
        let mode = match self.run.mode {
            ModeName::Analytic => RunMode::Analytic,
            ModeName::MonteCarlo => RunMode::MonteCarlo {
                pulse_budget: self.run.pulse_budget,
                shards: self.run.shards,
            },
        };
        Scenario {
            name: self.name.clone(),
            combs: self.comb_plans(),
            tooth: self.comb.tooth,
            seed_jitter: [self.seed_jitter(); 2],
            intensities: IntensitySet {
                mean_photons: [
                    d.signal_mean_photons,
                    d.decoy_mean_photons,
                    d.weak_mean_photons,
                    0.0,
                ],
                send_probabilities: d.send_probabilities,
                z_probabilities: [1.0, 0.0, 0.0, 0.0],
            },
            pulse: self.pulse(),
            extinction_ratio_db: self.source.extinction_ratio_db,
            channels: [
                self.fiber(self.channel.alice_length_km),
                self.fiber(self.channel.bob_length_km),
            ],
            receiver_loss_db: self.channel.receiver_loss_db,
            detectors: self.detectors(),
            residual_misalignment_rad: self.source.residual_misalignment_rad,
            timing_jitter_ps: self.source.timing_jitter_ps,
            polarization: CompensationConfig {
                spgd: SpgdConfig {
                    gain: ctl.spgd_gain_rad,
                    perturbation: ctl.spgd_perturbation_rad,
                    iteration_period_s: ctl.spgd_period_s,
                    objective: ctl.spgd_objective,
                },
                reference_rate_cps: ctl.reference_rate_cps,
                background_fraction: ctl.background_fraction,
                drift_rate_rad2_per_s: self.channel.polarization_drift_rad2_per_s,
                enabled: ctl.polarization_enabled,
            },
            timing: TimingLoopConfig {
                measurement_period_s: ctl.timing_period_s,
                smoothing: ctl.timing_smoothing,
                actuator_resolution_ps: ctl.actuator_resolution_ps,
                measurement_noise_ps: ctl.timing_noise_ps,
                enabled: ctl.timing_enabled,
            },
            sift: SiftPolicy {
                keep_psi_plus_in_z: d.keep_psi_plus_in_z,
            },
            finite_key: FiniteKeyParams::partitioned(
                self.finite_key.epsilon_total,
                self.finite_key.f_ec,
                JointScanEstimator::BOUNDS,
            ),
            accumulation_s: self.run.accumulation_s,
            control_segment_s: ctl.segment_s,
            mode,
            seed: self.seed,
        }
    }

    pub fn hom_scan(&self) -> HomScanConfig {
        HomScanConfig {
            shape: self.pulse(),
            mean_photons: [self.source.hom_mean_photons; 2],
            detectors: self.detectors(),
            timing_jitter_ps: self.source.timing_jitter_ps,
            seed_jitter: [self.seed_jitter(); 2],
            extinction_ratio_db: self.source.extinction_ratio_db,
            polarization_mismatch_rad: self.source.hom_polarization_mismatch_rad,
        }
    }

    pub fn network(&self) -> NetworkSpec {
        NetworkSpec {
            users: self.network.users,
            channels: self.network.channels,
            tdm_slots: self.network.tdm_slots,
        }
    }

    /// Total user-to-user distances of the key-rate sweep.
    pub fn distances_km(&self) -> Result<Vec<f64>, CliError> {
        let r = &self.run;
        if !(r.distance_step_km > 0.0) || !(r.distance_max_km >= r.distance_min_km) {
            return Err(CliError::Config(
                "run: distance grid needs step > 0 and max >= min".into(),
            ));
        }
        let n =
            ((r.distance_max_km - r.distance_min_km) / r.distance_step_km + 1e-9).floor() as usize;
        Ok((0..=n)
            .map(|k| r.distance_min_km + k as f64 * r.distance_step_km)
            .collect())
    }
}
