//! Test oracles and statistics shared by the integration suites.
#![allow(dead_code)]

use mdinet::calibration;
use mdinet::engine::{RunMode, Scenario};
use mdinet::photonics::{Basis, Intensity, IntensitySet};
use mdinet::protocol::{cell_keys, CellExpectation, ExpectedCells, SiftedTally};
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use statrs::distribution::{DiscreteCDF, Poisson};

/// Two-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    // the alternating series does not converge near zero, where Q_KS is 1 to within 1e-5
    if lambda < 0.3 {
        return (d, 1.0);
    }
    let mut p = 0.0;
    for k in 1..=100 {
        let term = 2.0 * (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        p += if k % 2 == 1 { term } else { -term };
    }
    (d, p.clamp(0.0, 1.0))
}

/// Two-sided p-value of `k` successes in `n` trials with success probability `p`.
///
/// Normal approximation when the expected count is large, Poisson tails otherwise.
pub fn binomial_p_value(k: u64, n: u64, p: f64) -> f64 {
    let mean = n as f64 * p;
    if mean >= 30.0 && n as f64 * (1.0 - p) >= 30.0 {
        let z = (k as f64 - mean) / (mean * (1.0 - p)).sqrt();
        return statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2);
    }
    if mean == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    let pois = Poisson::new(mean).expect("positive mean");
    let lower = pois.cdf(k);
    let upper = if k == 0 { 1.0 } else { pois.sf(k - 1) };
    (2.0 * lower.min(upper)).min(1.0)
}

/// Per-comparison threshold keeping the family-wise false-alarm rate at
/// `family_alpha` over `comparisons` independent tests.
pub fn sidak_threshold(family_alpha: f64, comparisons: usize) -> f64 {
    1.0 - (1.0 - family_alpha).powf(1.0 / comparisons as f64)
}

pub const CUTOFF: usize = 20;

/// Synthetic photon-number-resolved link: per-(n, m) yields and error
/// yields for both bases, from which cell gains follow by Poisson mixing.
pub struct DecoyInstance {
    pub intensities: IntensitySet,
    pub pulses: f64,
    yield_x: Vec<Vec<f64>>,
    error_x: Vec<Vec<f64>>,
    yield_z: Vec<Vec<f64>>,
    error_z: Vec<Vec<f64>>,
}

pub fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

fn poisson_weights(mean: f64) -> Vec<f64> {
    let mut w = vec![(-mean).exp(); CUTOFF + 1];
    for n in 1..=CUTOFF {
        w[n] = w[n - 1] * mean / n as f64;
    }
    w
}

impl DecoyInstance {
    /// Random yields shaped like a lossy two-arm link with dark counts.
    pub fn random<R: Rng>(rng: &mut R, intensities: IntensitySet, pulses: f64) -> Self {
        let dark = log_uniform(rng, 1e-8, 1e-6);
        Self::with_dark(rng, intensities, pulses, dark)
    }

    /// Same shape without dark counts.
    pub fn random_noiseless<R: Rng>(rng: &mut R, intensities: IntensitySet, pulses: f64) -> Self {
        Self::with_dark(rng, intensities, pulses, 0.0)
    }

    fn with_dark<R: Rng>(rng: &mut R, intensities: IntensitySet, pulses: f64, dark: f64) -> Self {
        let eta = [log_uniform(rng, 1e-3, 1e-1), log_uniform(rng, 1e-3, 1e-1)];
        let click = |k: usize, n: usize| 1.0 - (1.0 - eta[k]).powi(n as i32);
        let mut table = |error_max: f64| {
            let mut y = vec![vec![0.0; CUTOFF + 1]; CUTOFF + 1];
            let mut e = vec![vec![0.0; CUTOFF + 1]; CUTOFF + 1];
            for n in 0..=CUTOFF {
                for m in 0..=CUTOFF {
                    let q = rng.random_range(0.3..0.6);
                    let v = (q * click(0, n) * click(1, m)
                        + dark * (click(0, n) + click(1, m))
                        + dark * dark)
                        .min(1.0);
                    y[n][m] = v;
                    // a user sending vacuum holds a bit independent of the announcement
                    e[n][m] = if n == 0 || m == 0 {
                        0.5 * v
                    } else {
                        rng.random_range(0.0..error_max) * v
                    };
                }
            }
            (y, e)
        };
        let (yield_x, error_x) = table(0.5);
        let (mut yield_z, error_z) = table(0.05);
        // single-photon pairs carry no basis information
        yield_z[1][1] = yield_x[1][1];
        Self {
            intensities,
            pulses,
            yield_x,
            error_x,
            yield_z,
            error_z,
        }
    }

    pub fn y11(&self) -> f64 {
        self.yield_x[1][1]
    }

    pub fn e11(&self) -> f64 {
        self.error_x[1][1] / self.yield_x[1][1]
    }

    /// Gain and error gain of one cell.
    pub fn gains(&self, a: Intensity, b: Intensity, basis: Basis) -> (f64, f64) {
        let (y, e) = match basis {
            Basis::X => (&self.yield_x, &self.error_x),
            Basis::Z => (&self.yield_z, &self.error_z),
        };
        let (wa, wb) = (
            poisson_weights(self.intensities.mean(a)),
            poisson_weights(self.intensities.mean(b)),
        );
        let (mut q, mut qe) = (0.0, 0.0);
        for n in 0..=CUTOFF {
            for m in 0..=CUTOFF {
                q += wa[n] * wb[m] * y[n][m];
                qe += wa[n] * wb[m] * e[n][m];
            }
        }
        (q, qe)
    }

    fn sent(&self, a: Intensity, b: Intensity) -> u64 {
        (self.pulses * self.intensities.send_probability(a) * self.intensities.send_probability(b))
            .round() as u64
    }

    /// Exact per-slot gains of every tally cell.
    pub fn expected_cells(&self) -> ExpectedCells {
        ExpectedCells(
            cell_keys()
                .into_iter()
                .map(|(alice, bob, basis)| {
                    let (gain, error_gain) = self.gains(alice, bob, basis);
                    CellExpectation {
                        alice,
                        bob,
                        basis,
                        gain,
                        error_gain,
                    }
                })
                .collect(),
        )
    }

    /// Counts equal to their (rounded) expectations.
    pub fn expected_tally(&self) -> SiftedTally {
        let mut t = SiftedTally::empty(1.0, 1.0);
        for c in &mut t.cells {
            let (q, qe) = self.gains(c.alice, c.bob, c.basis);
            c.sent = self.sent(c.alice, c.bob);
            c.detected = (c.sent as f64 * q).round() as u64;
            c.errors = (c.sent as f64 * qe).round() as u64;
        }
        t
    }

    /// Binomially sampled counts.
    pub fn sampled_tally<R: Rng>(&self, rng: &mut R) -> SiftedTally {
        let mut t = SiftedTally::empty(1.0, 1.0);
        for c in &mut t.cells {
            let (q, qe) = self.gains(c.alice, c.bob, c.basis);
            c.sent = self.sent(c.alice, c.bob);
            let errors = Binomial::new(c.sent, qe)
                .expect("valid probability")
                .sample(rng);
            let p_correct = ((q - qe) / (1.0 - qe)).clamp(0.0, 1.0);
            let correct = Binomial::new(c.sent - errors, p_correct)
                .expect("valid probability")
                .sample(rng);
            c.detected = errors + correct;
            c.errors = errors;
        }
        t
    }
}

/// Random valid intensity set with X-basis decoys and a Z-basis signal.
pub fn random_intensities<R: Rng>(rng: &mut R) -> IntensitySet {
    let s = rng.random_range(0.2..0.6);
    let mu = rng.random_range(0.1..0.5);
    let nu = rng.random_range(0.02..0.5 * mu);
    let raw: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.05..1.0));
    let total: f64 = raw.iter().sum();
    let mut p = raw.map(|x| x / total);
    p[3] = 1.0 - p[0] - p[1] - p[2];
    IntensitySet {
        mean_photons: [s, mu, nu, 0.0],
        send_probabilities: p,
        z_probabilities: [1.0, 0.0, 0.0, 0.0],
    }
}

/// Drift-free scenario with both loops off, so every segment sees the static link.
pub fn quiet(mut s: Scenario) -> Scenario {
    for c in &mut s.channels {
        c.polarization_drift_rate = 0.0;
        c.timing_drift_ps_per_sqrt_s = 0.0;
    }
    s.polarization.enabled = false;
    s.timing.enabled = false;
    s.timing_jitter_ps = 0.0;
    s
}

/// Random short-haul Monte Carlo scenario.
pub fn random_mc_scenario<R: Rng>(rng: &mut R, pulse_budget: u64, shards: usize) -> Scenario {
    let mut s = quiet(calibration::scenario_200km());
    s.intensities = random_intensities(rng);
    for c in &mut s.channels {
        c.length_km = rng.random_range(5.0..50.0);
    }
    s.detectors = mdinet::photonics::DetectorSet::uniform(
        rng.random_range(0.5..0.9),
        log_uniform(rng, 1e-7, 1e-5),
        30.0,
    );
    s.extinction_ratio_db = rng.random_range(20.0..35.0);
    s.residual_misalignment_rad = rng.random_range(0.0..0.3);
    s.mode = RunMode::MonteCarlo {
        pulse_budget,
        shards,
    };
    s.seed = rng.random();
    s
}
