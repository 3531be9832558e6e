//! Post-processing: sifting, tallies, decoy-state estimation and finite-size key length.
//!
//! Intensity roles: `Signal` is sent in Z only and forms the key; `Decoy` (μ),
//! `Weak` (ν) and `Vacuum` are sent in X and feed parameter estimation.

use serde::{Deserialize, Serialize};

use crate::interference::BsmOutcome;
use crate::photonics::{Basis, Intensity, IntensitySet};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error("tally has no cell for ({alice:?}, {bob:?}, {basis:?})")]
    MissingCell {
        alice: Intensity,
        bob: Intensity,
        basis: Basis,
    },
    #[error("invalid tally: {0}")]
    InvalidTally(String),
    #[error("invalid finite-key parameters: {0}")]
    InvalidParams(&'static str),
    #[error("numeric failure: {0}")]
    Numeric(&'static str),
}

/// Result of sifting one slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiftedEvent {
    pub kept: bool,
    pub basis: Option<Basis>,
    pub error: bool,
}

impl SiftedEvent {
    const DISCARDED: SiftedEvent = SiftedEvent {
        kept: false,
        basis: None,
        error: false,
    };
}

/// Which announced outcomes are kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiftPolicy {
    pub keep_psi_plus_in_z: bool,
}

impl Default for SiftPolicy {
    fn default() -> Self {
        Self {
            keep_psi_plus_in_z: true,
        }
    }
}

/// Sifts one announced event with the default policy.
pub fn sift(
    outcome: BsmOutcome,
    basis_a: Basis,
    basis_b: Basis,
    bit_a: bool,
    bit_b: bool,
) -> SiftedEvent {
    sift_with(
        SiftPolicy::default(),
        outcome,
        basis_a,
        basis_b,
        bit_a,
        bit_b,
    )
}

/// Z: Ψ± both mean anti-correlated bits. X: Ψ− anti-correlated, Ψ+ correlated.
pub fn sift_with(
    policy: SiftPolicy,
    outcome: BsmOutcome,
    basis_a: Basis,
    basis_b: Basis,
    bit_a: bool,
    bit_b: bool,
) -> SiftedEvent {
    if outcome == BsmOutcome::None || basis_a != basis_b {
        return SiftedEvent::DISCARDED;
    }
    let flip = match (basis_a, outcome) {
        (Basis::Z, BsmOutcome::PsiPlus) if !policy.keep_psi_plus_in_z => {
            return SiftedEvent::DISCARDED
        }
        (Basis::Z, _) => true,
        (Basis::X, BsmOutcome::PsiMinus) => true,
        _ => false,
    };
    SiftedEvent {
        kept: true,
        basis: Some(basis_a),
        error: (bit_b ^ flip) != bit_a,
    }
}

/// Basis an intensity is sent in.
pub fn intensity_basis(intensity: Intensity) -> Basis {
    match intensity {
        Intensity::Signal => Basis::Z,
        _ => Basis::X,
    }
}

/// All basis-matched intensity pairs, in tally order.
pub fn cell_keys() -> Vec<(Intensity, Intensity, Basis)> {
    let mut keys = vec![(Intensity::Signal, Intensity::Signal, Basis::Z)];
    let x = [Intensity::Decoy, Intensity::Weak, Intensity::Vacuum];
    for a in x {
        for b in x {
            keys.push((a, b, Basis::X));
        }
    }
    keys
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TallyCell {
    pub alice: Intensity,
    pub bob: Intensity,
    pub basis: Basis,
    /// Pulse pairs sent with this intensity/basis combination.
    pub sent: u64,
    /// Kept Ψ± announcements.
    pub detected: u64,
    pub errors: u64,
}

impl TallyCell {
    pub fn gain(&self) -> f64 {
        ratio(self.detected, self.sent)
    }

    pub fn error_rate(&self) -> f64 {
        ratio(self.errors, self.detected)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Per-cell counts over one accumulation block; merges by cell-wise addition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiftedTally {
    pub cells: Vec<TallyCell>,
    pub accumulation_s: f64,
    pub clock_rate_hz: f64,
}

impl SiftedTally {
    pub fn empty(accumulation_s: f64, clock_rate_hz: f64) -> Self {
        let cells = cell_keys()
            .into_iter()
            .map(|(alice, bob, basis)| TallyCell {
                alice,
                bob,
                basis,
                sent: 0,
                detected: 0,
                errors: 0,
            })
            .collect();
        Self {
            cells,
            accumulation_s,
            clock_rate_hz,
        }
    }

    pub fn cell(
        &self,
        alice: Intensity,
        bob: Intensity,
        basis: Basis,
    ) -> Result<&TallyCell, ProtocolError> {
        self.cells
            .iter()
            .find(|c| c.alice == alice && c.bob == bob && c.basis == basis)
            .ok_or(ProtocolError::MissingCell { alice, bob, basis })
    }

    pub fn cell_mut(
        &mut self,
        alice: Intensity,
        bob: Intensity,
        basis: Basis,
    ) -> Result<&mut TallyCell, ProtocolError> {
        self.cells
            .iter_mut()
            .find(|c| c.alice == alice && c.bob == bob && c.basis == basis)
            .ok_or(ProtocolError::MissingCell { alice, bob, basis })
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        for c in &self.cells {
            if c.errors > c.detected || c.detected > c.sent {
                return Err(ProtocolError::InvalidTally(format!(
                    "cell ({:?}, {:?}, {:?}) violates errors <= detected <= sent",
                    c.alice, c.bob, c.basis
                )));
            }
        }
        if !(self.accumulation_s >= 0.0) || !(self.clock_rate_hz > 0.0) {
            return Err(ProtocolError::InvalidTally(
                "accumulation time and clock rate must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Adds `other` cell by cell; accumulation times add.
    pub fn merge(&mut self, other: &SiftedTally) -> Result<(), ProtocolError> {
        if self.clock_rate_hz != other.clock_rate_hz {
            return Err(ProtocolError::InvalidTally(
                "cannot merge tallies with different clock rates".into(),
            ));
        }
        for c in &other.cells {
            let mine = self.cell_mut(c.alice, c.bob, c.basis)?;
            mine.sent += c.sent;
            mine.detected += c.detected;
            mine.errors += c.errors;
        }
        self.accumulation_s += other.accumulation_s;
        Ok(())
    }

    /// Tally whose counts equal the rounded expectations of `cells` for `pulses` sent slots.
    pub fn from_expected(
        cells: &ExpectedCells,
        intensities: &IntensitySet,
        pulses: f64,
        accumulation_s: f64,
        clock_rate_hz: f64,
    ) -> Self {
        let mut tally = Self::empty(accumulation_s, clock_rate_hz);
        for c in &mut tally.cells {
            let e = cells.get(c.alice, c.bob, c.basis);
            let sent = (pulses
                * intensities.send_probability(c.alice)
                * intensities.send_probability(c.bob))
            .round();
            c.sent = sent as u64;
            c.detected = ((sent * e.gain).round() as u64).min(c.sent);
            c.errors = ((sent * e.error_gain).round() as u64).min(c.detected);
        }
        tally
    }

    pub fn qber(
        &self,
        alice: Intensity,
        bob: Intensity,
        basis: Basis,
    ) -> Result<f64, ProtocolError> {
        Ok(self.cell(alice, bob, basis)?.error_rate())
    }
}

/// Expected per-slot rates of one tally cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellExpectation {
    pub alice: Intensity,
    pub bob: Intensity,
    pub basis: Basis,
    /// Probability of a kept announcement per sent pair.
    pub gain: f64,
    /// Probability of a kept announcement with a bit error per sent pair.
    pub error_gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpectedCells(pub Vec<CellExpectation>);

impl ExpectedCells {
    pub fn get(&self, alice: Intensity, bob: Intensity, basis: Basis) -> CellExpectation {
        *self
            .0
            .iter()
            .find(|c| c.alice == alice && c.bob == bob && c.basis == basis)
            .expect("expected cells cover every tally cell")
    }
}

/// Failure budget and error-correction cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteKeyParams {
    pub epsilon_total: f64,
    pub epsilon_correctness: f64,
    pub epsilon_privacy_amplification: f64,
    /// Failure probability allotted to each concentration bound.
    pub epsilon_per_bound: f64,
    pub f_ec: f64,
}

impl FiniteKeyParams {
    /// Correctness and privacy amplification take 10% each; the rest is split
    /// equally over `bounds` concentration bounds.
    pub fn partitioned(epsilon_total: f64, f_ec: f64, bounds: usize) -> Self {
        Self {
            epsilon_total,
            epsilon_correctness: 0.1 * epsilon_total,
            epsilon_privacy_amplification: 0.1 * epsilon_total,
            epsilon_per_bound: 0.8 * epsilon_total / bounds as f64,
            f_ec,
        }
    }

    /// Checks ranges and that `bounds` concentration bounds fit in the budget.
    pub fn validate_for(&self, bounds: usize) -> Result<(), ProtocolError> {
        let parts = [
            self.epsilon_correctness,
            self.epsilon_privacy_amplification,
            self.epsilon_per_bound,
        ];
        if !(self.epsilon_total > 0.0 && self.epsilon_total < 1.0)
            || parts.iter().any(|e| !(*e > 0.0))
        {
            return Err(ProtocolError::InvalidParams(
                "failure probabilities must lie in (0, 1)",
            ));
        }
        let used = self.epsilon_correctness
            + self.epsilon_privacy_amplification
            + bounds as f64 * self.epsilon_per_bound;
        if used > self.epsilon_total * (1.0 + 1e-12) {
            return Err(ProtocolError::InvalidParams(
                "epsilon partition exceeds the total budget",
            ));
        }
        if !(self.f_ec >= 1.0) {
            return Err(ProtocolError::InvalidParams("f_ec must be >= 1"));
        }
        Ok(())
    }
}

impl Default for FiniteKeyParams {
    fn default() -> Self {
        Self::partitioned(1e-10, 1.16, JointScanEstimator::BOUNDS)
    }
}

/// Poisson-form Chernoff divergence `k·(x − ln(1+x))` for `E = k(1+x)`.
fn divergence_from_observed(k: f64, x: f64) -> f64 {
    k * (x - x.ln_1p())
}

/// Poisson-form divergence `E·((1+y)ln(1+y) − y)` for `k = E(1+y)`.
fn divergence_from_expected(e: f64, y: f64) -> f64 {
    if y <= -1.0 {
        return e;
    }
    e * ((1.0 + y) * y.ln_1p() - y)
}

/// Finds `t` in `(lo, hi)` with `f(t) = target`, `f` monotone.
fn bisect(
    f: impl Fn(f64) -> f64,
    target: f64,
    mut lo: f64,
    mut hi: f64,
    increasing: bool,
) -> Result<f64, ProtocolError> {
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        let above = f(mid) > target;
        if above == increasing {
            hi = mid;
        } else {
            lo = mid;
        }
        if (hi - lo).abs() <= 1e-14 * mid.abs().max(1e-300) {
            return Ok(0.5 * (lo + hi));
        }
    }
    let mid = 0.5 * (lo + hi);
    if (f(mid) - target).abs() <= 1e-9 * target.max(1.0) {
        Ok(mid)
    } else {
        Err(ProtocolError::Numeric("bisection did not converge"))
    }
}

fn check_inputs(k: f64, epsilon: f64) -> Result<(), ProtocolError> {
    if !(k >= 0.0 && k.is_finite()) {
        return Err(ProtocolError::InvalidParams(
            "count must be finite and >= 0",
        ));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(ProtocolError::InvalidParams("epsilon must lie in (0, 1)"));
    }
    Ok(())
}

/// Two-sided confidence interval for the expected value behind an observed count.
///
/// Each side solves `E − k + k·ln(k/E) = ln(2/ε)`.
pub fn chernoff_bounds(k: f64, epsilon: f64) -> Result<(f64, f64), ProtocolError> {
    check_inputs(k, epsilon)?;
    let l = (2.0 / epsilon).ln();
    if k == 0.0 {
        return Ok((0.0, l));
    }
    // lower: x in (-1, 0); D(-1) = k
    let lower = if k <= l {
        0.0
    } else {
        k * (1.0 + bisect(|x| divergence_from_observed(k, x), l, -1.0, 0.0, false)?)
    };
    let mut hi = 1.0;
    while divergence_from_observed(k, hi) < l {
        hi *= 2.0;
    }
    let upper = k * (1.0 + bisect(|x| divergence_from_observed(k, x), l, 0.0, hi, true)?);
    Ok((lower, upper))
}

/// Range the observed count stays in, except with probability ε on each side,
/// given its expectation.
pub fn observed_bounds(expected: f64, epsilon: f64) -> Result<(f64, f64), ProtocolError> {
    check_inputs(expected, epsilon)?;
    let l = (1.0 / epsilon).ln();
    if expected == 0.0 {
        return Ok((0.0, 0.0));
    }
    let lower = if expected <= l {
        0.0
    } else {
        expected
            * (1.0
                + bisect(
                    |y| divergence_from_expected(expected, y),
                    l,
                    -1.0,
                    0.0,
                    false,
                )?)
    };
    let mut hi = 1.0;
    while divergence_from_expected(expected, hi) < l {
        hi *= 2.0;
    }
    let upper =
        expected * (1.0 + bisect(|y| divergence_from_expected(expected, y), l, 0.0, hi, true)?);
    Ok((lower, upper))
}

/// H₂(x) in bits.
///
/// # Panics
/// If `x` is outside `[0, 1]`.
pub fn binary_entropy(x: f64) -> f64 {
    assert!(
        (0.0..=1.0).contains(&x),
        "binary entropy argument {x} outside [0, 1]"
    );
    if x == 0.0 || x == 1.0 {
        return 0.0;
    }
    -x * x.log2() - (1.0 - x) * (1.0 - x).log2()
}

/// Single-photon bounds and the diagnostics behind them.
///
/// `y11_lower`, `e11_upper` and `n11_lower` are each valid on their own. The
/// key formula is evaluated at `key_n11` and `key_phase_error`, a pair that is
/// jointly worst-case and may be tighter than combining the separate bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoyEstimate {
    pub y11_lower: f64,
    /// Upper bound on the single-photon error yield `e₁₁·Y₁₁`.
    pub ey11_upper: f64,
    pub e11_upper: f64,
    /// Lower bound on single-photon pairs among the kept Z events.
    pub n11_lower: f64,
    pub key_n11: f64,
    pub key_phase_error: f64,
    /// The statistics could not certify any single-photon contribution.
    pub infeasible: bool,
}

impl DecoyEstimate {
    pub fn infeasible() -> Self {
        Self {
            y11_lower: 0.0,
            ey11_upper: 0.0,
            e11_upper: 0.5,
            n11_lower: 0.0,
            key_n11: 0.0,
            key_phase_error: 0.5,
            infeasible: true,
        }
    }
}

/// Strategy for bounding single-photon statistics from a tally.
pub trait DecoyEstimator {
    fn estimate(
        &self,
        tally: &SiftedTally,
        intensities: &IntensitySet,
        params: &FiniteKeyParams,
    ) -> Result<DecoyEstimate, ProtocolError>;

    /// Number of concentration bounds drawing on the failure budget.
    fn concentration_bounds(&self) -> usize;
}

/// Analytic two-decoy bounds over the X-basis intensities {μ, ν, 0}, with
/// each observed cell replaced by its Chernoff interval.
#[derive(Clone, Copy, Debug, Default)]
pub struct FourIntensityEstimator;

impl FourIntensityEstimator {
    /// Seven gain cells, four error cells and two expected-to-observed conversions.
    pub const BOUNDS: usize = 13;
}

/// Interval for `e^{a+b}·(count/N)`.
#[derive(Clone, Copy, Debug)]
struct Scaled {
    lo: f64,
    hi: f64,
}

/// Linear combination `Σ cᵢ·xᵢ` bounded from below (or above) term by term.
fn combine(terms: &[(f64, Scaled)], lower: bool) -> f64 {
    terms
        .iter()
        .map(|(c, s)| c * if (*c > 0.0) == lower { s.lo } else { s.hi })
        .sum()
}

/// Core of the bound shared by the finite and asymptotic paths.
///
/// `gain(a, b)` and `errors(a, b)` give intervals for `e^{a+b}·Q` and
/// `e^{a+b}·Q·E` of X-basis cells.
fn single_photon_bounds(
    mu: f64,
    nu: f64,
    gain: impl Fn(Intensity, Intensity) -> Result<Scaled, ProtocolError>,
    errors: impl Fn(Intensity, Intensity) -> Result<Scaled, ProtocolError>,
) -> Result<(f64, f64), ProtocolError> {
    use Intensity::{Decoy as M, Vacuum as O, Weak as W};
    let r = nu / mu;
    let r3 = r * r * r;
    let s00 = gain(O, O)?;
    let y11_numerator = combine(
        &[
            (1.0, gain(W, W)?),
            (-1.0, gain(W, O)?),
            (-1.0, gain(O, W)?),
            (1.0 - r3, s00),
            (-r3, gain(M, M)?),
            (r3, gain(M, O)?),
            (r3, gain(O, M)?),
        ],
        true,
    );
    let y11 = y11_numerator / (nu * nu * (1.0 - r));
    let ey11 = combine(
        &[
            (1.0, errors(W, W)?),
            (-1.0, errors(W, O)?),
            (-1.0, errors(O, W)?),
            (1.0, errors(O, O)?),
        ],
        false,
    ) / (nu * nu);
    Ok((y11, ey11.max(0.0)))
}

fn check_intensities(intensities: &IntensitySet) -> Result<(f64, f64, f64), ProtocolError> {
    let s = intensities.mean(Intensity::Signal);
    let mu = intensities.mean(Intensity::Decoy);
    let nu = intensities.mean(Intensity::Weak);
    if !(nu > 0.0 && nu < mu) || intensities.mean(Intensity::Vacuum) != 0.0 || !(s > 0.0) {
        return Err(ProtocolError::InvalidParams(
            "decoy estimation needs 0 = vacuum < weak < decoy and signal > 0",
        ));
    }
    Ok((s, mu, nu))
}

impl DecoyEstimator for FourIntensityEstimator {
    fn estimate(
        &self,
        tally: &SiftedTally,
        intensities: &IntensitySet,
        params: &FiniteKeyParams,
    ) -> Result<DecoyEstimate, ProtocolError> {
        tally.validate()?;
        params.validate_for(Self::BOUNDS)?;
        let (s, mu, nu) = check_intensities(intensities)?;
        let eps = params.epsilon_per_bound;
        let scaled = |a: Intensity, b: Intensity, errors: bool| -> Result<Scaled, ProtocolError> {
            let c = tally.cell(a, b, Basis::X)?;
            if c.sent == 0 {
                return Err(ProtocolError::InvalidTally(format!(
                    "no pulses sent in cell ({a:?}, {b:?}, X)"
                )));
            }
            let k = if errors { c.errors } else { c.detected };
            let (lo, hi) = chernoff_bounds(k as f64, eps)?;
            let w = (intensities.mean(a) + intensities.mean(b)).exp() / c.sent as f64;
            Ok(Scaled {
                lo: lo * w,
                hi: hi * w,
            })
        };
        let (y11, ey11) = single_photon_bounds(
            mu,
            nu,
            |a, b| scaled(a, b, false),
            |a, b| scaled(a, b, true),
        )?;
        if !(y11 > 0.0) {
            return Ok(DecoyEstimate::infeasible());
        }
        let z = tally.cell(Intensity::Signal, Intensity::Signal, Basis::Z)?;
        let single_pair = s * s * (-2.0 * s).exp() * z.sent as f64;
        let n11_lower = observed_bounds(single_pair * y11, eps)?
            .0
            .min(z.detected as f64);
        let phase_errors_upper = observed_bounds(single_pair * ey11, eps)?.1;
        let e11_upper = (phase_errors_upper / n11_lower).clamp(0.0, 0.5);
        if !(n11_lower > 0.0) {
            return Ok(DecoyEstimate {
                y11_lower: y11,
                ey11_upper: ey11,
                ..DecoyEstimate::infeasible()
            });
        }
        Ok(DecoyEstimate {
            y11_lower: y11,
            ey11_upper: ey11,
            e11_upper,
            n11_lower,
            key_n11: n11_lower,
            key_phase_error: e11_upper,
            infeasible: false,
        })
    }

    fn concentration_bounds(&self) -> usize {
        Self::BOUNDS
    }
}

/// Tighter variant of [`FourIntensityEstimator`].
///
/// Three refinements, each valid on its own:
/// - cells that differ only by which user sent vacuum are bounded jointly;
/// - when one user sends vacuum their bit is independent of the event, so the
///   expected error count is exactly half the expected detections and the
///   detection count (twice as many events) bounds it;
/// - the shared one-sided-vacuum statistic `x` enters the yield bound and the
///   error bound with opposite signs, so instead of taking opposite interval
///   ends in the two places the final key is minimized over `x` in its interval.
#[derive(Clone, Copy, Debug, Default)]
pub struct JointScanEstimator;

/// Interval for `e^{a+b}·(q_ab + q_ba)` from two cells with possibly different pulse counts.
fn joint_scaled(
    tally: &SiftedTally,
    a: Intensity,
    b: Intensity,
    w: f64,
    eps: f64,
) -> Result<Scaled, ProtocolError> {
    let c1 = tally.cell(a, b, Basis::X)?;
    let c2 = tally.cell(b, a, Basis::X)?;
    let (n_min, n_max) = (c1.sent.min(c2.sent) as f64, c1.sent.max(c2.sent) as f64);
    if n_min == 0.0 {
        return Err(ProtocolError::InvalidTally(format!(
            "no pulses sent in cell ({a:?}, {b:?}, X)"
        )));
    }
    let (lo, hi) = chernoff_bounds((c1.detected + c2.detected) as f64, eps)?;
    Ok(Scaled {
        lo: lo * w / n_max,
        hi: hi * w / n_min,
    })
}

impl JointScanEstimator {
    /// Gain cells (W,W), (M,M), (0,0); the joint one-sided-vacuum cells for
    /// W and M; the (W,W) error cell; two expected-to-observed conversions.
    pub const BOUNDS: usize = 8;
}

const SCAN_POINTS: usize = 256;

#[derive(Clone, Copy, Debug)]
struct ScanPoint {
    y11: f64,
    ey11: f64,
    n11: f64,
    phase_error: f64,
    key: f64,
}

impl DecoyEstimator for JointScanEstimator {
    fn estimate(
        &self,
        tally: &SiftedTally,
        intensities: &IntensitySet,
        params: &FiniteKeyParams,
    ) -> Result<DecoyEstimate, ProtocolError> {
        use Intensity::{Decoy as M, Vacuum as O, Weak as W};
        tally.validate()?;
        params.validate_for(Self::BOUNDS)?;
        let (s, mu, nu) = check_intensities(intensities)?;
        let eps = params.epsilon_per_bound;
        let single = |a: Intensity, b: Intensity, errors: bool| -> Result<Scaled, ProtocolError> {
            let c = tally.cell(a, b, Basis::X)?;
            if c.sent == 0 {
                return Err(ProtocolError::InvalidTally(format!(
                    "no pulses sent in cell ({a:?}, {b:?}, X)"
                )));
            }
            let (lo, hi) = chernoff_bounds(if errors { c.errors } else { c.detected } as f64, eps)?;
            let w = (intensities.mean(a) + intensities.mean(b)).exp() / c.sent as f64;
            Ok(Scaled {
                lo: lo * w,
                hi: hi * w,
            })
        };
        let r = nu / mu;
        let r3 = r * r * r;
        let s_ww = single(W, W, false)?;
        let m_ww = single(W, W, true)?;
        let s_mm = single(M, M, false)?;
        let s_00 = single(O, O, false)?;
        let x = joint_scaled(tally, W, O, nu.exp(), eps)?;
        let y_m = joint_scaled(tally, M, O, mu.exp(), eps)?;

        // vacuum-sided error cells equal half their gain cells in expectation
        let fixed_yield = s_ww.lo + (1.0 - r3) * s_00.lo - r3 * s_mm.hi + r3 * y_m.lo;
        let fixed_errors = m_ww.hi + 0.5 * s_00.hi;
        let z = tally.cell(Intensity::Signal, Intensity::Signal, Basis::Z)?;
        let single_pair = s * s * (-2.0 * s).exp() * z.sent as f64;
        let e_z = z.error_rate();

        let evaluate = |xv: f64| -> Result<Option<ScanPoint>, ProtocolError> {
            let y11 = (fixed_yield - xv) / (nu * nu * (1.0 - r));
            let ey11 = ((fixed_errors - 0.5 * xv) / (nu * nu)).max(0.0);
            if !(y11 > 0.0) {
                return Ok(None);
            }
            let n11 = observed_bounds(single_pair * y11, eps)?
                .0
                .min(z.detected as f64);
            if !(n11 > 0.0) {
                return Ok(None);
            }
            let phase_errors = observed_bounds(single_pair * ey11, eps)?.1;
            let phase_error = (phase_errors / n11).clamp(0.0, 0.5);
            let key = secret_key_length(n11, phase_error, z.detected as f64, e_z, params);
            Ok(Some(ScanPoint {
                y11,
                ey11,
                n11,
                phase_error,
                key,
            }))
        };
        let at = |k: f64| x.lo + (x.hi - x.lo) * k / SCAN_POINTS as f64;

        let mut points = Vec::with_capacity(SCAN_POINTS + 1);
        for k in 0..=SCAN_POINTS {
            match evaluate(at(k as f64))? {
                Some(p) => points.push((k, p)),
                None => return Ok(DecoyEstimate::infeasible()),
            }
        }
        let (k_min, mut worst) = points
            .iter()
            .copied()
            .min_by(|a, b| a.1.key.total_cmp(&b.1.key))
            .expect("non-empty scan");
        // the key is smooth in x: refine the grid minimum by golden-section search
        let (mut lo, mut hi) = (
            (k_min as f64 - 1.0).max(0.0),
            (k_min as f64 + 1.0).min(SCAN_POINTS as f64),
        );
        let g = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..40 {
            let (a, b) = (hi - g * (hi - lo), lo + g * (hi - lo));
            let (pa, pb) = (evaluate(at(a))?, evaluate(at(b))?);
            match (pa, pb) {
                (Some(pa), Some(pb)) => {
                    if pa.key < pb.key {
                        hi = b;
                    } else {
                        lo = a;
                    }
                    for p in [pa, pb] {
                        if p.key < worst.key {
                            worst = p;
                        }
                    }
                }
                _ => return Ok(DecoyEstimate::infeasible()),
            }
        }
        let y11_lower = points
            .iter()
            .map(|(_, p)| p.y11)
            .fold(f64::INFINITY, f64::min);
        let n11_lower = points
            .iter()
            .map(|(_, p)| p.n11)
            .fold(f64::INFINITY, f64::min);
        let ey11_upper = points.iter().map(|(_, p)| p.ey11).fold(0.0, f64::max);
        let e11_upper = points
            .iter()
            .map(|(_, p)| p.phase_error)
            .fold(0.0, f64::max);
        Ok(DecoyEstimate {
            y11_lower,
            ey11_upper,
            e11_upper,
            n11_lower,
            key_n11: worst.n11,
            key_phase_error: worst.phase_error,
            infeasible: false,
        })
    }

    fn concentration_bounds(&self) -> usize {
        Self::BOUNDS
    }
}

/// Single-photon bounds with the default estimator.
pub fn estimate_single_photon(
    tally: &SiftedTally,
    intensities: &IntensitySet,
    params: &FiniteKeyParams,
) -> Result<DecoyEstimate, ProtocolError> {
    JointScanEstimator.estimate(tally, intensities, params)
}

/// Key length in bits before flooring and clamping.
pub fn secret_key_length(
    n11_lower: f64,
    e11_upper: f64,
    n_z: f64,
    e_z: f64,
    params: &FiniteKeyParams,
) -> f64 {
    n11_lower * (1.0 - binary_entropy(e11_upper.clamp(0.0, 0.5)))
        - params.f_ec * n_z * binary_entropy(e_z.clamp(0.0, 1.0))
        - (2.0 / params.epsilon_correctness).log2()
        - 2.0 * (1.0 / (2.0 * params.epsilon_privacy_amplification)).log2()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyReport {
    pub channel: String,
    pub qber_z: f64,
    pub qber_x: f64,
    pub sifted_z: u64,
    pub key_length_bits: f64,
    pub key_rate_bps: f64,
    pub accumulation_s: f64,
    pub estimate: DecoyEstimate,
}

/// Extractable key for one block.
pub fn key_length(
    estimate: &DecoyEstimate,
    tally: &SiftedTally,
    params: &FiniteKeyParams,
) -> Result<KeyReport, ProtocolError> {
    let z = tally.cell(Intensity::Signal, Intensity::Signal, Basis::Z)?;
    let x = tally.cell(Intensity::Decoy, Intensity::Decoy, Basis::X)?;
    let raw = if estimate.infeasible || estimate.key_phase_error >= 0.5 {
        0.0
    } else {
        secret_key_length(
            estimate.key_n11,
            estimate.key_phase_error,
            z.detected as f64,
            z.error_rate(),
            params,
        )
    };
    let key_length_bits = raw.max(0.0).floor();
    let key_rate_bps = if tally.accumulation_s > 0.0 {
        key_length_bits / tally.accumulation_s
    } else {
        0.0
    };
    Ok(KeyReport {
        channel: String::new(),
        qber_z: z.error_rate(),
        qber_x: x.error_rate(),
        sifted_z: z.detected,
        key_length_bits,
        key_rate_bps,
        accumulation_s: tally.accumulation_s,
        estimate: *estimate,
    })
}

/// Estimation and key length in one step.
pub fn analyze(
    tally: &SiftedTally,
    intensities: &IntensitySet,
    params: &FiniteKeyParams,
) -> Result<KeyReport, ProtocolError> {
    let estimate = estimate_single_photon(tally, intensities, params)?;
    key_length(&estimate, tally, params)
}

/// Lower bound on `Y₁₁` and upper bound on `e₁₁·Y₁₁` from exact expected gains.
pub fn asymptotic_single_photon(
    cells: &ExpectedCells,
    intensities: &IntensitySet,
) -> Result<(f64, f64), ProtocolError> {
    let (_, mu, nu) = check_intensities(intensities)?;
    let exact = |a: Intensity, b: Intensity, errors: bool| {
        let c = cells.get(a, b, Basis::X);
        let v = (intensities.mean(a) + intensities.mean(b)).exp()
            * if errors { c.error_gain } else { c.gain };
        Ok(Scaled { lo: v, hi: v })
    };
    single_photon_bounds(mu, nu, |a, b| exact(a, b, false), |a, b| exact(a, b, true))
}

/// Key bits per second with exact expectations and no finite-size terms.
pub fn asymptotic_key_rate(
    cells: &ExpectedCells,
    intensities: &IntensitySet,
    f_ec: f64,
    clock_rate_hz: f64,
) -> Result<f64, ProtocolError> {
    let s = check_intensities(intensities)?.0;
    let (y11, ey11) = asymptotic_single_photon(cells, intensities)?;
    if !(y11 > 0.0) {
        return Ok(0.0);
    }
    let z = cells.get(Intensity::Signal, Intensity::Signal, Basis::Z);
    let p_ss = intensities.send_probability(Intensity::Signal).powi(2);
    let e_ph = (ey11 / y11).clamp(0.0, 0.5);
    let e_z = if z.gain > 0.0 {
        z.error_gain / z.gain
    } else {
        0.0
    };
    let per_slot = p_ss
        * (s * s * (-2.0 * s).exp() * y11 * (1.0 - binary_entropy(e_ph))
            - f_ec * z.gain * binary_entropy(e_z));
    Ok((per_slot * clock_rate_hz).max(0.0))
}

/// Asymptotic key rate over a distance grid; `model` maps distance to expected cells.
pub fn asymptotic_rate<E>(
    distances_km: &[f64],
    intensities: &IntensitySet,
    f_ec: f64,
    clock_rate_hz: f64,
    mut model: impl FnMut(f64) -> Result<ExpectedCells, E>,
) -> Result<Vec<(f64, f64)>, E>
where
    E: From<ProtocolError>,
{
    distances_km
        .iter()
        .map(|&d| {
            let cells = model(d)?;
            Ok((
                d,
                asymptotic_key_rate(&cells, intensities, f_ec, clock_rate_hz)?,
            ))
        })
        .collect()
}
