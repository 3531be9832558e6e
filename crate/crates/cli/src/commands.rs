//! Subcommand bodies: each validates, runs, and writes its tables.

use std::fs;
use std::path::{Path, PathBuf};

use mdinet::comb::simulate_lock;
use mdinet::engine::{
    keyrate_vs_distance as sweep, optimize_intensities, run_long, static_key_report, ControlSample,
    RateSummary, RunResult, Scenario,
};
use mdinet::interference::{delay_grid, hom_scan as scan};
use mdinet::netplan::{allocate, network_report, NetworkSpec};
use mdinet::protocol::analyze;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::{CliError, CommonArgs, SCHEMA_VERSION};

fn prepare(common: &CommonArgs) -> Result<Option<PathBuf>, CliError> {
    if common.dry_run {
        return Ok(None);
    }
    let dir = common.out_dir();
    fs::create_dir_all(&dir)?;
    Ok(Some(dir))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(&path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_csv<T: Serialize>(dir: &Path, name: &str, rows: &[T]) -> Result<(), CliError> {
    let path = dir.join(name);
    let mut w = csv::Writer::from_path(&path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}

fn dry_run_ok(cfg: &Config) -> Result<(), CliError> {
    println!("config ok: {}", cfg.name);
    Ok(())
}

/// Scenario from the config, with intensities re-optimized when requested.
fn scenario(cfg: &Config) -> Result<Scenario, CliError> {
    let mut s = cfg.scenario();
    s.validate()?;
    if cfg.run.optimize_intensities {
        s.intensities = optimize_intensities(&s)?.intensities;
    }
    Ok(s)
}

fn check_blocks(cfg: &Config) -> Result<(), CliError> {
    if cfg.run.blocks == 0 {
        return Err(CliError::Config("run.blocks must be >= 1".into()));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SimulateOutput {
    pub schema: u32,
    pub config: Config,
    /// Scenario actually run, including re-optimized intensities.
    pub scenario: Scenario,
    pub blocks: Vec<RunResult>,
    pub summary: RateSummary,
}

#[derive(Debug, Serialize)]
struct KeyRateRow<'a> {
    block: usize,
    channel: &'a str,
    qber_z: f64,
    qber_x: f64,
    key_length_bits: f64,
    key_rate_bps: f64,
    accumulation_s: f64,
}

impl<'a> KeyRateRow<'a> {
    fn new(block: usize, r: &'a mdinet::protocol::KeyReport) -> Self {
        Self {
            block,
            channel: &r.channel,
            qber_z: r.qber_z,
            qber_x: r.qber_x,
            key_length_bits: r.key_length_bits,
            key_rate_bps: r.key_rate_bps,
            accumulation_s: r.accumulation_s,
        }
    }
}

#[derive(Debug, Serialize)]
struct TraceRow {
    block: usize,
    time_s: f64,
    qber_z: f64,
    qber_x: f64,
    residual_ps: f64,
    xi: f64,
}

fn trace_rows(blocks: &[RunResult]) -> Vec<TraceRow> {
    blocks
        .iter()
        .flat_map(|b| {
            b.trace.iter().map(|t: &ControlSample| TraceRow {
                block: b.block,
                time_s: t.time_s,
                qber_z: t.qber_z,
                qber_x: t.qber_x,
                residual_ps: t.residual_ps,
                xi: t.xi,
            })
        })
        .collect()
}

pub fn simulate(common: &CommonArgs, cfg: &Config) -> Result<(), CliError> {
    check_blocks(cfg)?;
    let s = scenario(cfg)?;
    let Some(dir) = prepare(common)? else {
        return dry_run_ok(cfg);
    };
    let run = run_long(&s, cfg.run.blocks)?;
    for b in &run.blocks {
        for d in &b.diagnostics {
            eprintln!("block {}: {d}", b.block);
        }
    }
    let rows: Vec<KeyRateRow> = run
        .blocks
        .iter()
        .map(|b| KeyRateRow::new(b.block, &b.report))
        .collect();
    write_csv(&dir, "key_rate.csv", &rows)?;
    write_csv(&dir, "control_trace.csv", &trace_rows(&run.blocks))?;
    println!(
        "{}: mean key rate {:.3} bps over {} block(s)",
        s.name,
        run.summary.mean_bps,
        run.blocks.len()
    );
    write_json(
        &dir,
        "simulate.json",
        &SimulateOutput {
            schema: SCHEMA_VERSION,
            config: cfg.clone(),
            scenario: s,
            blocks: run.blocks,
            summary: run.summary,
        },
    )
}

pub fn replay(common: &CommonArgs, path: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let out: SimulateOutput = serde_json::from_str(&text).map_err(|e| {
        CliError::Config(format!("{} is not a simulate result: {e}", path.display()))
    })?;
    if out.schema != SCHEMA_VERSION {
        return Err(CliError::Config(format!(
            "schema {} is not supported (expected {SCHEMA_VERSION})",
            out.schema
        )));
    }
    out.config.scenario().validate()?;
    out.scenario.validate()?;
    let Some(dir) = prepare(common)? else {
        return dry_run_ok(&out.config);
    };
    let s = &out.scenario;
    let mut reports = Vec::with_capacity(out.blocks.len());
    for b in &out.blocks {
        b.tally.validate()?;
        let (bits, rate) = match analyze(&b.tally, &s.intensities, &s.finite_key) {
            Ok(r) => (r.key_length_bits, r.key_rate_bps),
            Err(_) => (0.0, 0.0),
        };
        if bits != b.report.key_length_bits || rate != b.report.key_rate_bps {
            return Err(CliError::Numeric(format!(
                "block {}: replayed key length {bits} differs from stored {}",
                b.block, b.report.key_length_bits
            )));
        }
        reports.push(b.report.clone());
    }
    let rows: Vec<KeyRateRow> = reports
        .iter()
        .zip(&out.blocks)
        .map(|(r, b)| KeyRateRow::new(b.block, r))
        .collect();
    write_csv(&dir, "replay.csv", &rows)?;
    println!("replayed {} block(s): reports match", rows.len());
    Ok(())
}

#[derive(Debug, Serialize)]
struct HomRow {
    delay_ps: f64,
    coincidence_prob: f64,
    coincidence_rate_hz: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HomOutput {
    pub schema: u32,
    pub scenario: String,
    pub visibility: f64,
    pub baseline_prob: f64,
    pub minimum_prob: f64,
}

pub fn hom_scan(common: &CommonArgs, cfg: &Config) -> Result<(), CliError> {
    if cfg.run.hom_points < 3 || !(cfg.run.hom_span_ps > 0.0) {
        return Err(CliError::Config(
            "run: hom_points must be >= 3 and hom_span_ps > 0".into(),
        ));
    }
    let config = cfg.hom_scan();
    config
        .shape
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let Some(dir) = prepare(common)? else {
        return dry_run_ok(cfg);
    };
    let result = scan(
        &config,
        &delay_grid(cfg.run.hom_span_ps, cfg.run.hom_points),
    )?;
    let rows: Vec<HomRow> = result
        .points
        .iter()
        .map(|p| HomRow {
            delay_ps: p.delay_ps,
            coincidence_prob: p.coincidence_prob,
            coincidence_rate_hz: p.coincidence_rate_hz,
        })
        .collect();
    write_csv(&dir, "hom_scan.csv", &rows)?;
    println!("HOM visibility {:.3}%", 100.0 * result.visibility);
    write_json(
        &dir,
        "hom_scan.json",
        &HomOutput {
            schema: SCHEMA_VERSION,
            scenario: cfg.name.clone(),
            visibility: result.visibility,
            baseline_prob: result.baseline_prob,
            minimum_prob: result.minimum_prob,
        },
    )
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DistanceRow {
    pub fiber: String,
    pub attenuation_db_per_km: f64,
    pub distance_km: f64,
    pub key_rate_bps: f64,
    pub asymptotic_rate_bps: f64,
    pub qber_z: f64,
    pub qber_x: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DistanceOutput {
    pub schema: u32,
    pub scenario: String,
    pub optimized: bool,
    pub points: Vec<DistanceRow>,
}

pub fn keyrate_vs_distance(common: &CommonArgs, cfg: &Config) -> Result<(), CliError> {
    let distances = cfg.distances_km()?;
    let base = cfg.scenario();
    base.validate()?;
    let Some(dir) = prepare(common)? else {
        return dry_run_ok(cfg);
    };
    let mut points = Vec::new();
    for (fiber, attenuation) in [
        ("standard", cfg.channel.attenuation_db_per_km),
        ("ull", cfg.channel.ull_attenuation_db_per_km),
    ] {
        let mut s = base.clone();
        for c in &mut s.channels {
            c.attenuation_db_per_km = attenuation;
        }
        for p in sweep(&s, &distances, cfg.run.optimize_intensities)? {
            points.push(DistanceRow {
                fiber: fiber.to_string(),
                attenuation_db_per_km: attenuation,
                distance_km: p.distance_km,
                key_rate_bps: p.key_rate_bps,
                asymptotic_rate_bps: p.asymptotic_rate_bps,
                qber_z: p.qber_z,
                qber_x: p.qber_x,
            });
        }
    }
    write_csv(&dir, "keyrate_vs_distance.csv", &points)?;
    write_json(
        &dir,
        "keyrate_vs_distance.json",
        &DistanceOutput {
            schema: SCHEMA_VERSION,
            scenario: cfg.name.clone(),
            optimized: cfg.run.optimize_intensities,
            points,
        },
    )
}

#[derive(Debug, Serialize)]
struct LockRow {
    time_s: f64,
    delta_omega_r_hz: f64,
    temperature_mk: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LockOutput {
    pub schema: u32,
    pub scenario: String,
    pub seed: u64,
    pub open_loop: bool,
    pub duration_s: f64,
    pub delta_std_hz: f64,
    pub delta_peak_to_peak_hz: f64,
    pub temperature_excursion_mk: f64,
    /// Same noise realization with the controller off.
    pub open_loop_delta_std_hz: f64,
}

pub fn lock_sim(common: &CommonArgs, cfg: &Config, open_loop: bool) -> Result<(), CliError> {
    let closed = cfg.lock_loop();
    closed.validate()?;
    let duration = cfg.run.lock_duration_s;
    if !(duration > 0.0) {
        return Err(CliError::Config(
            "run.lock_duration_s must be positive".into(),
        ));
    }
    let Some(dir) = prepare(common)? else {
        return dry_run_ok(cfg);
    };
    let config = if open_loop {
        closed.open_loop()
    } else {
        closed.clone()
    };
    let traj = simulate_lock(&config, duration, cfg.seed)?;
    let reference = simulate_lock(&closed.open_loop(), duration, cfg.seed)?;
    let rows: Vec<LockRow> = traj
        .states
        .iter()
        .map(|s| LockRow {
            time_s: s.time_s,
            delta_omega_r_hz: s.delta_omega_r_hz,
            temperature_mk: s.temperature_offset_mk,
        })
        .collect();
    write_csv(&dir, "lock_sim.csv", &rows)?;
    println!(
        "ΔΩr std {:.1} Hz, peak-to-peak {:.0} Hz",
        traj.delta_std_hz(),
        traj.delta_peak_to_peak_hz()
    );
    write_json(
        &dir,
        "lock_sim.json",
        &LockOutput {
            schema: SCHEMA_VERSION,
            scenario: cfg.name.clone(),
            seed: cfg.seed,
            open_loop,
            duration_s: duration,
            delta_std_hz: traj.delta_std_hz(),
            delta_peak_to_peak_hz: traj.delta_peak_to_peak_hz(),
            temperature_excursion_mk: traj.temperature_excursion_mk(),
            open_loop_delta_std_hz: reference.delta_std_hz(),
        },
    )
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CompensateOutput {
    pub schema: u32,
    pub scenario: String,
    pub polarization_enabled: bool,
    pub timing_enabled: bool,
    pub mean_qber_z: f64,
    pub max_qber_z: f64,
    pub block_key_rates_bps: Vec<f64>,
    pub samples: Vec<ControlSample>,
}

pub fn compensate(common: &CommonArgs, cfg: &Config) -> Result<(), CliError> {
    check_blocks(cfg)?;
    let s = scenario(cfg)?;
    let Some(dir) = prepare(common)? else {
        return dry_run_ok(cfg);
    };
    let run = run_long(&s, cfg.run.blocks)?;
    let rows = trace_rows(&run.blocks);
    write_csv(&dir, "compensate.csv", &rows)?;
    let samples: Vec<ControlSample> = run.blocks.iter().flat_map(|b| b.trace.clone()).collect();
    let mean = samples.iter().map(|t| t.qber_z).sum::<f64>() / samples.len() as f64;
    let max = samples.iter().map(|t| t.qber_z).fold(0.0, f64::max);
    println!("E_Z mean {:.3}%, max {:.3}%", 100.0 * mean, 100.0 * max);
    write_json(
        &dir,
        "compensate.json",
        &CompensateOutput {
            schema: SCHEMA_VERSION,
            scenario: s.name.clone(),
            polarization_enabled: s.polarization.enabled,
            timing_enabled: s.timing.enabled,
            mean_qber_z: mean,
            max_qber_z: max,
            block_key_rates_bps: run.blocks.iter().map(|b| b.report.key_rate_bps).collect(),
            samples,
        },
    )
}

#[derive(Debug, Serialize)]
struct PairRow {
    user_a: usize,
    user_b: usize,
    channel: usize,
    slot: usize,
    duty_cycle: f64,
    raw_rate_bps: f64,
    effective_rate_bps: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NetplanOutput {
    pub schema: u32,
    pub scenario: String,
    pub spec: NetworkSpec,
    pub channel_use: String,
    pub pairs: usize,
    pub raw_rate_bps: f64,
    pub mean_rate_bps: f64,
    pub min_rate_bps: f64,
    pub max_rate_bps: f64,
    pub aggregate_rate_bps: f64,
    pub capacity_bound_bps: f64,
    pub capacity_respected: bool,
    pub full_duty: bool,
}

pub fn netplan(common: &CommonArgs, cfg: &Config, raw_rate: Option<f64>) -> Result<(), CliError> {
    let spec = cfg.network();
    spec.validate()?;
    let allocation = allocate(&spec)?;
    allocation.validate()?;
    if let Some(r) = raw_rate {
        if !(r >= 0.0 && r.is_finite()) {
            return Err(CliError::Config(
                "--raw-rate-bps must be finite and >= 0".into(),
            ));
        }
    }
    let Some(dir) = prepare(common)? else {
        return dry_run_ok(cfg);
    };
    let raw = match raw_rate {
        Some(r) => r,
        None => {
            let s = scenario(cfg)?;
            static_key_report(&s, &s.static_link()?)?.key_rate_bps
        }
    };
    let report = network_report(&allocation, raw);
    let rows: Vec<PairRow> = report
        .pairs
        .iter()
        .map(|p| PairRow {
            user_a: p.users.0,
            user_b: p.users.1,
            channel: p.channel,
            slot: p.slot,
            duty_cycle: p.duty_cycle,
            raw_rate_bps: p.raw_rate_bps,
            effective_rate_bps: p.effective_rate_bps,
        })
        .collect();
    write_csv(&dir, "netplan.csv", &rows)?;
    println!(
        "{} pairs on {} channels x {} slots, per-pair rate {:.4} bps",
        rows.len(),
        spec.channels,
        spec.slots_needed(),
        report.mean_rate_bps
    );
    write_json(
        &dir,
        "netplan.json",
        &NetplanOutput {
            schema: SCHEMA_VERSION,
            scenario: cfg.name.clone(),
            spec,
            channel_use: report.channel_use.clone(),
            pairs: rows.len(),
            raw_rate_bps: raw,
            mean_rate_bps: report.mean_rate_bps,
            min_rate_bps: report.min_rate_bps,
            max_rate_bps: report.max_rate_bps,
            aggregate_rate_bps: report.aggregate_rate_bps,
            capacity_bound_bps: report.capacity_bound_bps,
            capacity_respected: report.capacity_respected(),
            full_duty: report.full_duty,
        },
    )
}
