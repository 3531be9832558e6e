//! Two-pulse interference at the hub's Bell-state analyzer.
//!
//! A 50:50 beam splitter combines the pulses; each output port feeds a PBS
//! and two threshold detectors (D1H, D1V, D2H, D2V). Pulse B is split into a
//! component matched to A's wavepacket (weight ξ) and an orthogonal one
//! (weight √(1−ξ²)). For a fixed relative phase φ all four detectors see
//! independent Poisson exposures
//!
//! ```text
//! E(1,p) = (|a_p|² + |b_p|²)/2 + ξ·Re(a_p* b_p e^{iφ})
//! E(2,p) = (|a_p|² + |b_p|²)/2 − ξ·Re(a_p* b_p e^{iφ})
//! ```
//!
//! and phase randomization is handled by averaging over φ.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::comb::SeedJitterModel;
use crate::photonics::{
    encoded_polarization, Basis, Complex, DetectorSet, Jones, PolarizationState, PulseDescriptor,
    PulseShape,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InterferenceError {
    #[error(
        "phase quadrature did not converge (last refinement changed the result by {delta:.3e})"
    )]
    QuadratureNonConvergence { delta: f64 },
    #[error("HOM scan needs a baseline delay with |τ| >= {min_ps} ps")]
    MissingBaseline { min_ps: f64 },
    #[error("invalid interference input: {0}")]
    InvalidInput(&'static str),
}

/// Wavepacket overlap magnitude ξ ∈ [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeOverlap {
    pub xi: f64,
}

impl ModeOverlap {
    pub const PERFECT: ModeOverlap = ModeOverlap { xi: 1.0 };
    pub const DISTINGUISHABLE: ModeOverlap = ModeOverlap { xi: 0.0 };
}

/// Overlap of two unit-norm Gaussian amplitude envelopes delayed by `tau_ps`
/// and detuned by `delta_nu_khz`: `exp(−τ²/8σ² − (2πΔν σ)²/2)` with σ the
/// intensity std.
pub fn mode_overlap(shape: &PulseShape, tau_ps: f64, delta_nu_khz: f64) -> ModeOverlap {
    let sigma = shape.sigma_t_ps();
    let omega_sigma = TAU * delta_nu_khz * 1e3 * sigma * 1e-12;
    ModeOverlap {
        xi: (-(tau_ps * tau_ps) / (8.0 * sigma * sigma) - 0.5 * omega_sigma * omega_sigma).exp(),
    }
}

/// Mean ξ when the delay is Gaussian around `delay_ps` with std `timing_std_ps`
/// and the detuning is zero-mean Gaussian with std `detuning_std_khz`.
pub fn expected_overlap(
    shape: &PulseShape,
    delay_ps: f64,
    timing_std_ps: f64,
    detuning_std_khz: f64,
) -> ModeOverlap {
    let s2 = shape.sigma_t_ps().powi(2);
    let v = timing_std_ps * timing_std_ps;
    let timing =
        (1.0 + v / (4.0 * s2)).powf(-0.5) * (-(delay_ps * delay_ps) / (8.0 * s2 + 2.0 * v)).exp();
    let c = (TAU * 1e3 * shape.sigma_t_ps() * 1e-12).powi(2) / 2.0;
    let detuning = (1.0 + 2.0 * c * detuning_std_khz * detuning_std_khz).powf(-0.5);
    ModeOverlap {
        xi: timing * detuning,
    }
}

/// Coherent amplitudes arriving at the beam splitter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BsmInput {
    /// `√μ_A · jones_A`.
    pub a: [Complex; 2],
    /// `√μ_B · jones_B`.
    pub b: [Complex; 2],
    pub xi: f64,
}

impl BsmInput {
    pub fn from_pulses(a: &PulseDescriptor, b: &PulseDescriptor, xi: f64) -> Self {
        Self {
            a: a.field(),
            b: b.field(),
            xi,
        }
    }

    pub fn new(
        mu_a: f64,
        pol_a: &PolarizationState,
        mu_b: f64,
        pol_b: &PolarizationState,
        xi: f64,
    ) -> Self {
        let (sa, sb) = (mu_a.sqrt(), mu_b.sqrt());
        Self {
            a: [pol_a.h() * sa, pol_a.v() * sa],
            b: [pol_b.h() * sb, pol_b.v() * sb],
            xi,
        }
    }

    fn terms(&self) -> ([f64; 2], [Complex; 2]) {
        let s = [0, 1].map(|p| 0.5 * (self.a[p].norm_sqr() + self.b[p].norm_sqr()));
        let c = [0, 1].map(|p| self.a[p].conj() * self.b[p] * self.xi);
        (s, c)
    }

    /// Mean photon exposures of D1H, D1V, D2H, D2V at relative phase `phi`.
    pub fn exposures(&self, phi: f64) -> [f64; 4] {
        let (s, c) = self.terms();
        exposures_from_terms(s, c, Complex::from_polar(1.0, phi))
    }
}

fn exposures_from_terms(s: [f64; 2], c: [Complex; 2], rot: Complex) -> [f64; 4] {
    let i_h = (c[0] * rot).re;
    let i_v = (c[1] * rot).re;
    [
        (s[0] + i_h).max(0.0),
        (s[1] + i_v).max(0.0),
        (s[0] - i_h).max(0.0),
        (s[1] - i_v).max(0.0),
    ]
}

/// Outcome probabilities for one relative phase, from the four click probabilities.
fn outcome_terms(p: [f64; 4]) -> [f64; 8] {
    let q = p.map(|x| 1.0 - x);
    let [p1h, p1v, p2h, p2v] = p;
    let [q1h, q1v, q2h, q2v] = q;
    let psi_minus = p1h * p2v * q1v * q2h + p1v * p2h * q1h * q2v;
    let psi_plus = p1h * p1v * q2h * q2v + p2h * p2v * q1h * q1v;
    let coincidence = (1.0 - q1h * q1v) * (1.0 - q2h * q2v);
    [psi_plus, psi_minus, coincidence, p1h, p1v, p2h, p2v, 0.0]
}

/// Phase-averaged detection statistics of one input configuration.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct OutcomeProbabilities {
    pub psi_plus: f64,
    pub psi_minus: f64,
    /// At least one click behind each beam-splitter output port.
    pub coincidence: f64,
    /// Click probability of each detector, ordered D1H, D1V, D2H, D2V.
    pub marginals: [f64; 4],
}

impl OutcomeProbabilities {
    pub fn success(&self) -> f64 {
        self.psi_plus + self.psi_minus
    }
}

const QUADRATURE_TOLERANCE: f64 = 1e-9;
const MAX_QUADRATURE_POINTS: usize = 1 << 14;

/// Averages the outcome probabilities over a uniformly random relative phase.
///
/// Uses the periodic trapezoid rule, doubling the grid until every output
/// changes by less than 1e-9 relative to its value.
pub fn phase_averaged(
    input: &BsmInput,
    detectors: &DetectorSet,
) -> Result<OutcomeProbabilities, InterferenceError> {
    let (s, c) = input.terms();
    let eval = |phi: f64| {
        let e = exposures_from_terms(s, c, Complex::from_polar(1.0, phi));
        outcome_terms(detectors.click_probabilities(e))
    };
    // no interference term: the integrand is constant
    if c[0].norm() == 0.0 && c[1].norm() == 0.0 {
        return Ok(pack(eval(0.0)));
    }
    let mut n = 8usize;
    let mut sum = [0.0; 8];
    for k in 0..n {
        add(&mut sum, eval(TAU * k as f64 / n as f64));
    }
    let mut current = sum.map(|x| x / n as f64);
    loop {
        for k in 0..n {
            add(&mut sum, eval(TAU * (k as f64 + 0.5) / n as f64));
        }
        n *= 2;
        let next = sum.map(|x| x / n as f64);
        let delta = current
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs() / b.abs().max(1e-300))
            .fold(0.0, f64::max);
        current = next;
        if delta <= QUADRATURE_TOLERANCE {
            return Ok(pack(current));
        }
        if n >= MAX_QUADRATURE_POINTS {
            return Err(InterferenceError::QuadratureNonConvergence { delta });
        }
    }
}

fn add(acc: &mut [f64; 8], x: [f64; 8]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

fn pack(v: [f64; 8]) -> OutcomeProbabilities {
    OutcomeProbabilities {
        psi_plus: v[0],
        psi_minus: v[1],
        coincidence: v[2],
        marginals: [v[3], v[4], v[5], v[6]],
    }
}

/// Two-port coincidence probability for co-polarized (H) pulses.
pub fn coincidence_prob(
    mu1: f64,
    mu2: f64,
    overlap: ModeOverlap,
    detectors: &DetectorSet,
) -> Result<f64, InterferenceError> {
    if !(mu1 >= 0.0 && mu2 >= 0.0) {
        return Err(InterferenceError::InvalidInput(
            "mean photon numbers must be >= 0",
        ));
    }
    let h = PolarizationState::horizontal();
    Ok(phase_averaged(&BsmInput::new(mu1, &h, mu2, &h, overlap.xi), detectors)?.coincidence)
}

/// `1 − P_cc(ξ)/P_cc(0)` for co-polarized pulses.
pub fn visibility(
    mu1: f64,
    mu2: f64,
    overlap: ModeOverlap,
    detectors: &DetectorSet,
) -> Result<f64, InterferenceError> {
    let dip = coincidence_prob(mu1, mu2, overlap, detectors)?;
    let base = coincidence_prob(mu1, mu2, ModeOverlap::DISTINGUISHABLE, detectors)?;
    Ok(1.0 - dip / base)
}

/// Source, detector and imperfection model behind a HOM dip measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomScanConfig {
    pub shape: PulseShape,
    /// Mean photon number of each user's pulse at the beam splitter.
    pub mean_photons: [f64; 2],
    pub detectors: DetectorSet,
    /// Residual arrival-time jitter of each user (ps, std).
    pub timing_jitter_ps: f64,
    pub seed_jitter: [SeedJitterModel; 2],
    pub extinction_ratio_db: f64,
    /// Angle between the two arriving polarizations on the Poincaré sphere (rad).
    pub polarization_mismatch_rad: f64,
}

impl HomScanConfig {
    /// Perfectly matched pulses with no imperfections.
    pub fn ideal(shape: PulseShape, mean_photons: f64) -> Self {
        Self {
            shape,
            mean_photons: [mean_photons; 2],
            detectors: DetectorSet::ideal(),
            timing_jitter_ps: 0.0,
            seed_jitter: [SeedJitterModel::noiseless(); 2],
            extinction_ratio_db: f64::INFINITY,
            polarization_mismatch_rad: 0.0,
        }
    }

    fn polarizations(&self) -> (PolarizationState, PolarizationState) {
        let er = if self.extinction_ratio_db.is_finite() {
            self.extinction_ratio_db
        } else {
            f64::INFINITY
        };
        let a = encoded_polarization(Basis::Z, false, er);
        let b = Jones::rotation([0.0, 0.0, 1.0], self.polarization_mismatch_rad).apply(&a);
        (a, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomPoint {
    pub delay_ps: f64,
    pub coincidence_prob: f64,
    pub coincidence_rate_hz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomScan {
    pub points: Vec<HomPoint>,
    pub baseline_prob: f64,
    pub minimum_prob: f64,
    pub visibility: f64,
}

/// Ensemble coincidence probability at a programmed relative delay.
///
/// Timing jitter is integrated on a ±6σ grid; carrier detuning enters through
/// its mean overlap factor.
pub fn ensemble_coincidence(
    config: &HomScanConfig,
    delay_ps: f64,
) -> Result<f64, InterferenceError> {
    let (pa, pb) = config.polarizations();
    let sigma_t = config.shape.sigma_t_ps();
    let nu_var = config.seed_jitter[0].single_laser_std_khz.powi(2)
        + config.seed_jitter[1].single_laser_std_khz.powi(2);
    let c = (TAU * 1e3 * sigma_t * 1e-12).powi(2) / 2.0;
    let detuning_factor = 1.0 / (1.0 + 2.0 * c * nu_var).sqrt();
    let rel_jitter = config.timing_jitter_ps * 2f64.sqrt();
    let eval = |tau: f64| {
        let xi = mode_overlap(&config.shape, tau, 0.0).xi * detuning_factor;
        let input = BsmInput::new(config.mean_photons[0], &pa, config.mean_photons[1], &pb, xi);
        phase_averaged(&input, &config.detectors).map(|o| o.coincidence)
    };
    if rel_jitter == 0.0 {
        return eval(delay_ps);
    }
    const NODES: usize = 49;
    let mut total = 0.0;
    let mut weight_sum = 0.0;
    for k in 0..NODES {
        let z = -6.0 + 12.0 * k as f64 / (NODES - 1) as f64;
        let w = (-0.5 * z * z).exp();
        total += w * eval(delay_ps + rel_jitter * z)?;
        weight_sum += w;
    }
    Ok(total / weight_sum)
}

/// Coincidence curve over `delays_ps` and the resulting dip visibility.
pub fn hom_scan(config: &HomScanConfig, delays_ps: &[f64]) -> Result<HomScan, InterferenceError> {
    let far = 5.0 * config.shape.fwhm_ps;
    if !delays_ps.iter().any(|d| d.abs() >= far) {
        return Err(InterferenceError::MissingBaseline { min_ps: far });
    }
    let clock_hz = config.shape.clock_rate_ghz * 1e9;
    let points = delays_ps
        .iter()
        .map(|&d| {
            ensemble_coincidence(config, d).map(|p| HomPoint {
                delay_ps: d,
                coincidence_prob: p,
                coincidence_rate_hz: p * clock_hz,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let baseline: Vec<f64> = points
        .iter()
        .filter(|p| p.delay_ps.abs() >= far)
        .map(|p| p.coincidence_prob)
        .collect();
    let baseline_prob = baseline.iter().sum::<f64>() / baseline.len() as f64;
    let minimum_prob = points
        .iter()
        .map(|p| p.coincidence_prob)
        .fold(f64::INFINITY, f64::min);
    Ok(HomScan {
        points,
        baseline_prob,
        minimum_prob,
        visibility: 1.0 - minimum_prob / baseline_prob,
    })
}

/// Symmetric delay grid from `-span` to `span` with `count` points.
pub fn delay_grid(span_ps: f64, count: usize) -> Vec<f64> {
    assert!(count >= 2);
    (0..count)
        .map(|k| -span_ps + 2.0 * span_ps * k as f64 / (count - 1) as f64)
        .collect()
}

/// Clicks of D1H, D1V, D2H, D2V in one time slot.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClickPattern(pub [bool; 4]);

impl ClickPattern {
    pub fn clicks(&self) -> usize {
        self.0.iter().filter(|&&c| c).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BsmOutcome {
    PsiPlus,
    PsiMinus,
    None,
}

/// Post-selection rule: Ψ− for orthogonal polarizations in different ports,
/// Ψ+ for orthogonal polarizations in the same port.
pub fn classify(pattern: ClickPattern) -> BsmOutcome {
    match pattern.0 {
        [true, false, false, true] | [false, true, true, false] => BsmOutcome::PsiMinus,
        [true, true, false, false] | [false, false, true, true] => BsmOutcome::PsiPlus,
        _ => BsmOutcome::None,
    }
}

/// Samples one detection event for two pulses in the same slot.
pub fn bsm_trial<R: Rng + ?Sized>(
    a: &PulseDescriptor,
    b: &PulseDescriptor,
    shape: &PulseShape,
    detectors: &DetectorSet,
    rng: &mut R,
) -> ClickPattern {
    let xi = mode_overlap(
        shape,
        a.time_offset_ps - b.time_offset_ps,
        a.carrier_detuning_khz - b.carrier_detuning_khz,
    )
    .xi;
    let input = BsmInput::from_pulses(a, b, xi);
    sample_clicks(&input, detectors, rng)
}

/// Draws a relative phase and the four detector outcomes.
pub fn sample_clicks<R: Rng + ?Sized>(
    input: &BsmInput,
    detectors: &DetectorSet,
    rng: &mut R,
) -> ClickPattern {
    let phi = rng.random::<f64>() * TAU;
    let p = detectors.click_probabilities(input.exposures(phi));
    ClickPattern(p.map(|pi| rng.random::<f64>() < pi))
}

/// HOM visibility limit for phase-randomized coherent pulses.
pub const COHERENT_VISIBILITY_LIMIT: f64 = 0.5;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::photonics::{encode_pulse, Intensity, IntensitySet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn shape() -> PulseShape {
        PulseShape::new(95.0, 2.5).unwrap()
    }

    /// Direct trapezoid quadrature of ∫ψ₁*ψ₂ over ±20σ.
    fn overlap_by_quadrature(shape: &PulseShape, tau: f64, dnu_khz: f64) -> f64 {
        let s = shape.sigma_t_ps();
        let norm = (2.0 * PI * s * s).powf(-0.25);
        let psi = |t: f64| norm * (-t * t / (4.0 * s * s)).exp();
        let dw = TAU * dnu_khz * 1e3 * 1e-12; // rad/ps
        let (lo, hi) = (-20.0 * s - tau.abs(), 20.0 * s + tau.abs());
        let n = 200_000;
        let h = (hi - lo) / n as f64;
        let mut acc = Complex::new(0.0, 0.0);
        for k in 0..=n {
            let t = lo + k as f64 * h;
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            acc += Complex::from_polar(psi(t) * psi(t - tau) * w, dw * t);
        }
        (acc * h).norm()
    }

    #[test]
    fn overlap_closed_form_matches_quadrature() {
        let s = shape();
        for &(tau, dnu) in &[
            (0.0, 0.0),
            (2.0, 31.0),
            (40.0, 0.0),
            (100.0, 2.0e6),
            (-17.0, 5.0e5),
        ] {
            let closed = mode_overlap(&s, tau, dnu).xi;
            let quad = overlap_by_quadrature(&s, tau, dnu);
            assert!(
                (closed - quad).abs() < 1e-6,
                "τ={tau} Δν={dnu}: {closed} vs {quad}"
            );
        }
        assert_eq!(mode_overlap(&s, 0.0, 0.0).xi, 1.0);
        assert!(mode_overlap(&s, 950.0, 0.0).xi < 1e-3);
        let small = overlap_by_quadrature(&s, 2.0, 31.0);
        assert!(small > 0.999);
    }

    #[test]
    fn expected_overlap_matches_sampling() {
        let s = shape();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 200_000;
        let (delay, sd_t, sd_nu) = (20.0, 15.0, 2.0e6);
        let mut acc = 0.0;
        for _ in 0..n {
            let t = delay + sd_t * rng.sample::<f64, _>(rand_distr::StandardNormal);
            let f = sd_nu * rng.sample::<f64, _>(rand_distr::StandardNormal);
            acc += mode_overlap(&s, t, f).xi;
        }
        let mc = acc / n as f64;
        let closed = expected_overlap(&s, delay, sd_t, sd_nu).xi;
        assert!((mc - closed).abs() < 5e-4, "{mc} vs {closed}");
    }

    #[test]
    fn distinguishable_coincidence_is_independent_splitting() {
        let d = DetectorSet::ideal();
        for mu in [1e-3, 0.1, 0.5, 2.0] {
            let p = coincidence_prob(mu, mu, ModeOverlap::DISTINGUISHABLE, &d).unwrap();
            let expected = (1.0 - (-mu).exp()).powi(2);
            assert!((p - expected).abs() < 1e-14, "{p} vs {expected}");
        }
    }

    #[test]
    fn weak_limit_visibility_is_one_half() {
        let d = DetectorSet::ideal();
        let v = visibility(1e-4, 1e-4, ModeOverlap::PERFECT, &d).unwrap();
        assert!((v - 0.5).abs() < 1e-3, "{v}");
    }

    #[test]
    fn phase_quadrature_matches_monte_carlo_sampling() {
        let d = DetectorSet::ideal();
        let h = PolarizationState::horizontal();
        let input = BsmInput::new(0.1, &h, 0.1, &h, 1.0);
        let exact = phase_averaged(&input, &d).unwrap().coincidence;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let phi = rng.random::<f64>() * TAU;
            let p = outcome_terms(d.click_probabilities(input.exposures(phi)))[2];
            sum += p;
            sq += p * p;
        }
        let mean = sum / n as f64;
        let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(
            (mean - exact).abs() < 3.0 * se,
            "{mean} vs {exact} (se {se})"
        );
    }

    #[test]
    fn interference_term_vanishes_for_identical_weak_pulses() {
        // only the (1,1) photon-number term interferes; it is fully suppressed at ξ = 1
        let d = DetectorSet::ideal();
        let mu = 1e-4;
        let both = coincidence_prob(mu, mu, ModeOverlap::PERFECT, &d).unwrap();
        let single = coincidence_prob(mu, 0.0, ModeOverlap::PERFECT, &d).unwrap();
        let base = coincidence_prob(mu, mu, ModeOverlap::DISTINGUISHABLE, &d).unwrap();
        assert!(((both - 2.0 * single) / base).abs() < 1e-3);
    }

    #[test]
    fn hom_scan_requires_baseline() {
        let cfg = HomScanConfig::ideal(shape(), 1e-3);
        assert!(matches!(
            hom_scan(&cfg, &[0.0, 50.0]),
            Err(InterferenceError::MissingBaseline { .. })
        ));
    }

    #[test]
    fn hom_scan_is_symmetric() {
        let mut cfg = HomScanConfig::ideal(shape(), 1e-3);
        cfg.timing_jitter_ps = 2.0;
        let scan = hom_scan(&cfg, &delay_grid(600.0, 31)).unwrap();
        let n = scan.points.len();
        for k in 0..n / 2 {
            let (l, r) = (scan.points[k], scan.points[n - 1 - k]);
            assert!((l.coincidence_prob - r.coincidence_prob).abs() <= 1e-12 * l.coincidence_prob);
        }
        assert!(scan.visibility < 0.5 && scan.visibility > 0.49);
    }

    #[test]
    fn visibility_grows_with_overlap() {
        let d = DetectorSet::ideal();
        let mut prev = visibility(0.01, 0.01, ModeOverlap { xi: 0.0 }, &d).unwrap();
        assert!(prev.abs() < 1e-12);
        for k in 1..=10 {
            let v = visibility(
                0.01,
                0.01,
                ModeOverlap {
                    xi: k as f64 / 10.0,
                },
                &d,
            )
            .unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn vacuum_inputs_never_click() {
        let set = IntensitySet {
            mean_photons: [0.3, 0.2, 0.05, 0.0],
            send_probabilities: [0.25; 4],
            z_probabilities: [1.0, 0.0, 0.0, 0.0],
        };
        let a = encode_pulse(false, Basis::Z, Intensity::Vacuum, &set, 30.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(
                bsm_trial(&a, &a, &shape(), &DetectorSet::ideal(), &mut rng),
                ClickPattern([false; 4])
            );
        }
    }

    #[test]
    fn orthogonal_inputs_separate_at_the_pbs() {
        let h = PolarizationState::horizontal();
        let v = PolarizationState::vertical();
        let input = BsmInput::new(0.5, &h, 0.7, &v, 1.0);
        for phi in [0.0, 1.0, 2.5] {
            let e = input.exposures(phi);
            assert!((e[0] - 0.25).abs() < 1e-15 && (e[2] - 0.25).abs() < 1e-15);
            assert!((e[1] - 0.35).abs() < 1e-15 && (e[3] - 0.35).abs() < 1e-15);
        }
        let only_a = BsmInput::new(0.5, &h, 0.0, &v, 1.0);
        let e = only_a.exposures(0.3);
        assert_eq!(e[1], 0.0);
        assert_eq!(e[3], 0.0);
    }

    #[test]
    fn sampled_marginals_match_phase_average() {
        let d = DetectorSet::uniform(0.8, 1e-3, 0.0);
        let pa = PolarizationState::diagonal();
        let pb = Jones::rotation([1.0, 0.2, 0.0], 0.7).apply(&PolarizationState::horizontal());
        let input = BsmInput::new(0.4, &pa, 0.3, &pb, 0.9);
        let exact = phase_averaged(&input, &d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 1_000_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let c = sample_clicks(&input, &d, &mut rng);
            for (n, &click) in counts.iter_mut().zip(&c.0) {
                *n += click as usize;
            }
        }
        for (i, (&count, &p)) in counts.iter().zip(&exact.marginals).enumerate() {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (count as f64 - n as f64 * p).abs() < 3.0 * sigma,
                "detector {i}"
            );
        }
    }

    #[test]
    fn classification_table() {
        let pat = |b: [u8; 4]| ClickPattern(b.map(|x| x == 1));
        assert_eq!(classify(pat([1, 0, 0, 1])), BsmOutcome::PsiMinus);
        assert_eq!(classify(pat([0, 1, 1, 0])), BsmOutcome::PsiMinus);
        assert_eq!(classify(pat([0, 0, 1, 1])), BsmOutcome::PsiPlus);
        assert_eq!(classify(pat([1, 1, 0, 0])), BsmOutcome::PsiPlus);
        assert_eq!(classify(pat([1, 0, 0, 0])), BsmOutcome::None);
        assert_eq!(classify(pat([1, 0, 1, 0])), BsmOutcome::None);
        assert_eq!(classify(pat([1, 1, 1, 0])), BsmOutcome::None);
        // exhaustive: Ψ+ and Ψ− never overlap, exactly four patterns are accepted
        let accepted = (0u8..16)
            .map(|m| classify(ClickPattern([0, 1, 2, 3].map(|i| m >> i & 1 == 1))))
            .filter(|o| *o != BsmOutcome::None)
            .count();
        assert_eq!(accepted, 4);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn visibility_never_exceeds_limit(mu in 1e-4f64..3.0, xi in 0.0f64..=1.0) {
                let v = visibility(mu, mu, ModeOverlap { xi }, &DetectorSet::ideal()).unwrap();
                prop_assert!(v <= COHERENT_VISIBILITY_LIMIT + 0.005);
            }

            #[test]
            fn overlap_monotone(t1 in 0.0f64..500.0, dt in 0.0f64..500.0, n1 in 0.0f64..1e7, dn in 0.0f64..1e7) {
                let s = PulseShape::new(95.0, 2.5).unwrap();
                let base = mode_overlap(&s, t1, n1).xi;
                prop_assert!((0.0..=1.0).contains(&base));
                prop_assert!(mode_overlap(&s, t1 + dt, n1).xi <= base);
                prop_assert!(mode_overlap(&s, -(t1 + dt), n1).xi <= base);
                prop_assert!(mode_overlap(&s, t1, n1 + dn).xi <= base);
            }
        }
    }
}
