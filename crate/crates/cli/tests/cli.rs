use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_mdinet");
const PROFILE: &str = include_str!("../profiles/paper-200km.toml");

fn mdinet(args: &[&str], out: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("MDINET_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn key_rate(dir: &Path) -> f64 {
    let mut r = csv::Reader::from_path(dir.join("key_rate.csv")).unwrap();
    let headers = r.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "key_rate_bps").unwrap();
    let row = r.records().next().unwrap().unwrap();
    row[col].parse().unwrap()
}

fn headers(path: &Path) -> Vec<String> {
    csv::Reader::from_path(path)
        .unwrap()
        .headers()
        .unwrap()
        .iter()
        .map(String::from)
        .collect()
}

#[test]
fn bundled_profile_rate_in_band() {
    let dir = tempfile::tempdir().unwrap();
    let o = mdinet(&["simulate"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rate = key_rate(dir.path());
    assert!((29.0..=96.0).contains(&rate), "rate {rate}");
}

#[test]
fn longer_block_scales_rate() {
    let base = tempfile::tempdir().unwrap();
    let long = tempfile::tempdir().unwrap();
    assert_eq!(code(&mdinet(&["simulate"], base.path())), 0);
    let o = mdinet(
        &[
            "simulate",
            "--override",
            "run.accumulation_s=10000",
            "--override",
            "run.optimize_intensities=true",
        ],
        long.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ratio = key_rate(long.path()) / key_rate(base.path());
    assert!((3.5..=6.5).contains(&ratio), "ratio {ratio}");
}

#[test]
fn missing_section_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let start = PROFILE.find("[decoy]").unwrap();
    let end = PROFILE.find("[finite_key]").unwrap();
    let cfg = dir.path().join("no-decoy.toml");
    fs::write(&cfg, format!("{}{}", &PROFILE[..start], &PROFILE[end..])).unwrap();
    let o = mdinet(&["simulate", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("decoy"), "{}", stderr(&o));
    assert!(!dir.path().join("simulate.json").exists());
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("extra.toml");
    fs::write(
        &cfg,
        PROFILE.replace("[detectors]\n", "[detectors]\nquantum_magic = 1\n"),
    )
    .unwrap();
    let o = mdinet(&["simulate", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("quantum_magic"), "{}", stderr(&o));

    let o = mdinet(
        &["simulate", "--override", "run.speed_of_light=1"],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("speed_of_light"));
}

#[test]
fn infeasible_network_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = mdinet(
        &[
            "netplan",
            "--override",
            "network.tdm_slots=99",
            "--raw-rate-bps",
            "60",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("100"));
}

#[test]
fn unstable_lock_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let o = mdinet(
        &["lock-sim", "--override", "comb.lock.proportional_gain=-5.0"],
        dir.path(),
    );
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn seeded_monte_carlo_is_byte_identical() {
    let args = [
        "simulate",
        "--override",
        "run.mode=\"monte_carlo\"",
        "--override",
        "run.pulse_budget=200000",
        "--override",
        "channel.alice_length_km=10.0",
        "--override",
        "channel.bob_length_km=10.0",
        "--seed",
        "77",
    ];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(code(&mdinet(&args, a.path())), 0);
    assert_eq!(code(&mdinet(&args, b.path())), 0);
    for f in ["simulate.json", "key_rate.csv", "control_trace.csv"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let c = tempfile::tempdir().unwrap();
    let mut other = args.to_vec();
    *other.last_mut().unwrap() = "78";
    assert_eq!(code(&mdinet(&other, c.path())), 0);
    assert_ne!(
        fs::read(a.path().join("simulate.json")).unwrap(),
        fs::read(c.path().join("simulate.json")).unwrap()
    );
}

#[test]
fn results_round_trip_through_replay() {
    let dir = tempfile::tempdir().unwrap();
    let o = mdinet(&["simulate", "--override", "run.blocks=2"], dir.path());
    assert_eq!(code(&o), 0);
    let result = dir.path().join("simulate.json");
    let o = mdinet(&["replay", result.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read(dir.path().join("replay.csv")).unwrap(),
        fs::read(dir.path().join("key_rate.csv")).unwrap()
    );

    // a tampered report no longer replays
    let text = fs::read_to_string(&result).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["blocks"][0]["report"]["key_length_bits"] = serde_json::json!(1.0);
    fs::write(&result, serde_json::to_string(&v).unwrap()).unwrap();
    let o = mdinet(&["replay", result.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 4);
}

#[test]
fn every_subcommand_writes_documented_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&[&str], &str, &[&str]); 6] = [
        (
            &["simulate"],
            "key_rate.csv",
            &[
                "block",
                "channel",
                "qber_z",
                "qber_x",
                "key_length_bits",
                "key_rate_bps",
                "accumulation_s",
            ],
        ),
        (
            &["hom-scan"],
            "hom_scan.csv",
            &["delay_ps", "coincidence_prob", "coincidence_rate_hz"],
        ),
        (
            &[
                "keyrate-vs-distance",
                "--override",
                "run.distance_step_km=100.0",
            ],
            "keyrate_vs_distance.csv",
            &[
                "fiber",
                "attenuation_db_per_km",
                "distance_km",
                "key_rate_bps",
                "asymptotic_rate_bps",
                "qber_z",
                "qber_x",
            ],
        ),
        (
            &["lock-sim"],
            "lock_sim.csv",
            &["time_s", "delta_omega_r_hz", "temperature_mk"],
        ),
        (
            &["compensate"],
            "compensate.csv",
            &["block", "time_s", "qber_z", "qber_x", "residual_ps", "xi"],
        ),
        (
            &["netplan", "--raw-rate-bps", "62"],
            "netplan.csv",
            &[
                "user_a",
                "user_b",
                "channel",
                "slot",
                "duty_cycle",
                "raw_rate_bps",
                "effective_rate_bps",
            ],
        ),
    ];
    for (args, csv_name, columns) in cases {
        let o = mdinet(args, dir.path());
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        assert_eq!(headers(&dir.path().join(csv_name)), *columns, "{csv_name}");
        let json = dir.path().join(
            csv_name
                .replace(".csv", ".json")
                .replace("key_rate", "simulate"),
        );
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(v["schema"], 1, "{}", json.display());
    }
}

#[test]
fn hom_scan_visibility_in_band() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&mdinet(&["hom-scan"], dir.path())), 0);
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("hom_scan.json")).unwrap())
            .unwrap();
    let vis = v["visibility"].as_f64().unwrap();
    assert!((0.48..=0.50).contains(&vis), "{vis}");
}

#[test]
fn ull_fiber_reaches_further() {
    let dir = tempfile::tempdir().unwrap();
    let o = mdinet(
        &[
            "keyrate-vs-distance",
            "--override",
            "run.distance_min_km=240.0",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("keyrate_vs_distance.json")).unwrap(),
    )
    .unwrap();
    let rate = |fiber: &str| {
        v["points"]
            .as_array()
            .unwrap()
            .iter()
            .find(|p| p["fiber"] == fiber)
            .unwrap()["key_rate_bps"]
            .as_f64()
            .unwrap()
    };
    assert!(rate("ull") > rate("standard"));
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    for cmd in [
        "simulate",
        "hom-scan",
        "keyrate-vs-distance",
        "lock-sim",
        "compensate",
        "netplan",
    ] {
        let o = mdinet(&[cmd, "--dry-run"], &out);
        assert_eq!(code(&o), 0, "{cmd}: {}", stderr(&o));
    }
    assert!(!out.exists());
}

#[test]
fn output_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(BIN)
        .args(["hom-scan"])
        .env("MDINET_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("hom_scan.csv").exists());
}

#[test]
fn thread_cap_keeps_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = [
        "keyrate-vs-distance",
        "--override",
        "run.distance_step_km=50.0",
    ];
    assert_eq!(code(&mdinet(&args, a.path())), 0);
    let mut capped = args.to_vec();
    capped.extend(["--threads", "1"]);
    assert_eq!(code(&mdinet(&capped, b.path())), 0);
    assert_eq!(
        fs::read(a.path().join("keyrate_vs_distance.csv")).unwrap(),
        fs::read(b.path().join("keyrate_vs_distance.csv")).unwrap()
    );
}
