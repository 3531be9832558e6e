//! Transmitter, fiber and detector models.
//!
//! Pulses are phase-randomized weak coherent states described by a mean
//! photon number and a Jones vector. Polarization transformations are SU(2)
//! matrices; a rotation by angle `θ` about the Stokes axis `n` is
//! `exp(-i θ/2 n·σ)` with `σ = (σ_HV, σ_DA, σ_RL)`.

use std::f64::consts::{FRAC_1_SQRT_2, LN_2};
use std::ops::Mul;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub type Complex = Complex64;

const ZERO: Complex = Complex::new(0.0, 0.0);
const ONE: Complex = Complex::new(1.0, 0.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Basis {
    Z,
    X,
}

impl Basis {
    pub const ALL: [Basis; 2] = [Basis::Z, Basis::X];

    pub fn index(self) -> usize {
        match self {
            Basis::Z => 0,
            Basis::X => 1,
        }
    }
}

/// Unit-norm Jones vector `(h, v)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolarizationState {
    h: Complex,
    v: Complex,
}

impl PolarizationState {
    /// Builds a state from raw amplitudes, normalizing them.
    ///
    /// Panics if both amplitudes are zero.
    pub fn new(h: Complex, v: Complex) -> Self {
        let norm = (h.norm_sqr() + v.norm_sqr()).sqrt();
        assert!(norm > 0.0, "polarization state needs a nonzero amplitude");
        Self {
            h: h / norm,
            v: v / norm,
        }
    }

    pub fn horizontal() -> Self {
        Self { h: ONE, v: ZERO }
    }

    pub fn vertical() -> Self {
        Self { h: ZERO, v: ONE }
    }

    pub fn diagonal() -> Self {
        let a = Complex::new(FRAC_1_SQRT_2, 0.0);
        Self { h: a, v: a }
    }

    pub fn antidiagonal() -> Self {
        let a = Complex::new(FRAC_1_SQRT_2, 0.0);
        Self { h: a, v: -a }
    }

    /// Linear polarization at `angle` radians from horizontal.
    pub fn linear(angle: f64) -> Self {
        Self {
            h: Complex::new(angle.cos(), 0.0),
            v: Complex::new(angle.sin(), 0.0),
        }
    }

    /// Ideal BB84 state for `bit` in `basis`: Z maps 0/1 to H/V, X maps 0/1 to +/−.
    pub fn bb84(basis: Basis, bit: bool) -> Self {
        match (basis, bit) {
            (Basis::Z, false) => Self::horizontal(),
            (Basis::Z, true) => Self::vertical(),
            (Basis::X, false) => Self::diagonal(),
            (Basis::X, true) => Self::antidiagonal(),
        }
    }

    pub fn h(&self) -> Complex {
        self.h
    }

    pub fn v(&self) -> Complex {
        self.v
    }

    pub fn amplitudes(&self) -> [Complex; 2] {
        [self.h, self.v]
    }

    pub fn norm_sqr(&self) -> f64 {
        self.h.norm_sqr() + self.v.norm_sqr()
    }

    /// The orthogonal state, with the phase convention `(−v*, h*)`.
    pub fn orthogonal(&self) -> Self {
        Self {
            h: -self.v.conj(),
            v: self.h.conj(),
        }
    }

    /// Inner product `⟨self|other⟩`.
    pub fn inner(&self, other: &PolarizationState) -> Complex {
        self.h.conj() * other.h + self.v.conj() * other.v
    }

    /// Probability of projecting `self` onto `other`.
    pub fn fidelity(&self, other: &PolarizationState) -> f64 {
        self.inner(other).norm_sqr()
    }

    /// Stokes vector `(S1, S2, S3)` on the Poincaré sphere.
    pub fn stokes(&self) -> [f64; 3] {
        let hv = self.h.conj() * self.v;
        [
            self.h.norm_sqr() - self.v.norm_sqr(),
            2.0 * hv.re,
            2.0 * hv.im,
        ]
    }
}

/// 2×2 polarization transfer matrix (unitary for lossless elements).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jones([[Complex; 2]; 2]);

impl Jones {
    pub fn identity() -> Self {
        Jones([[ONE, ZERO], [ZERO, ONE]])
    }

    pub fn from_matrix(m: [[Complex; 2]; 2]) -> Self {
        Jones(m)
    }

    pub fn matrix(&self) -> [[Complex; 2]; 2] {
        self.0
    }

    /// Rotation by `angle` about the Stokes direction `axis` (need not be normalized).
    pub fn rotation(axis: [f64; 3], angle: f64) -> Self {
        let len = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if len == 0.0 || angle == 0.0 {
            return Self::identity();
        }
        let [nx, ny, nz] = [axis[0] / len, axis[1] / len, axis[2] / len];
        let (s, c) = (angle / 2.0).sin_cos();
        // exp(-iθ/2 n·σ) with σ1 = diag(1,-1), σ2 = [[0,1],[1,0]], σ3 = [[0,-i],[i,0]]
        Jones([
            [Complex::new(c, -s * nx), Complex::new(-s * nz, -s * ny)],
            [Complex::new(s * nz, -s * ny), Complex::new(c, s * nx)],
        ])
    }

    /// Rotation whose Stokes rotation vector is `omega` (angle = |omega|).
    pub fn from_rotation_vector(omega: [f64; 3]) -> Self {
        let angle = (omega[0] * omega[0] + omega[1] * omega[1] + omega[2] * omega[2]).sqrt();
        Self::rotation(omega, angle)
    }

    pub fn apply(&self, state: &PolarizationState) -> PolarizationState {
        let [h, v] = self.apply_amplitudes(state.amplitudes());
        PolarizationState { h, v }
    }

    pub fn apply_amplitudes(&self, a: [Complex; 2]) -> [Complex; 2] {
        let m = &self.0;
        [
            m[0][0] * a[0] + m[0][1] * a[1],
            m[1][0] * a[0] + m[1][1] * a[1],
        ]
    }

    pub fn adjoint(&self) -> Self {
        let m = &self.0;
        Jones([
            [m[0][0].conj(), m[1][0].conj()],
            [m[0][1].conj(), m[1][1].conj()],
        ])
    }

    /// Largest entry-wise deviation of `U†U` from the identity.
    pub fn unitarity_error(&self) -> f64 {
        let p = self.adjoint() * *self;
        let id = Jones::identity();
        let mut worst: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                worst = worst.max((p.0[i][j] - id.0[i][j]).norm());
            }
        }
        worst
    }

    /// Rotation angle on the Poincaré sphere, in `[0, π]`, ignoring global phase.
    pub fn rotation_angle(&self) -> f64 {
        let m = &self.0;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        // remove global phase: SU(2) trace is 2cos(θ/2)
        let phase = det.sqrt();
        let half_trace = ((m[0][0] + m[1][1]) / phase / 2.0).re.abs().min(1.0);
        2.0 * half_trace.acos()
    }

    /// Projects back onto the unitary group (polar decomposition for 2×2).
    pub fn renormalized(&self) -> Self {
        // Gram-Schmidt on columns keeps the drift accumulation numerically unitary.
        let m = &self.0;
        let c0 = [m[0][0], m[1][0]];
        let n0 = (c0[0].norm_sqr() + c0[1].norm_sqr()).sqrt();
        let c0 = [c0[0] / n0, c0[1] / n0];
        let c1 = [m[0][1], m[1][1]];
        let proj = c0[0].conj() * c1[0] + c0[1].conj() * c1[1];
        let c1 = [c1[0] - proj * c0[0], c1[1] - proj * c0[1]];
        let n1 = (c1[0].norm_sqr() + c1[1].norm_sqr()).sqrt();
        let c1 = [c1[0] / n1, c1[1] / n1];
        Jones([[c0[0], c1[0]], [c0[1], c1[1]]])
    }
}

impl Mul for Jones {
    type Output = Jones;

    fn mul(self, rhs: Jones) -> Jones {
        let (a, b) = (&self.0, &rhs.0);
        let mut out = [[ZERO; 2]; 2];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        Jones(out)
    }
}

/// Temporal profile of the transmitted pulses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PulseShape {
    pub fwhm_ps: f64,
    pub clock_rate_ghz: f64,
}

impl PulseShape {
    pub fn new(fwhm_ps: f64, clock_rate_ghz: f64) -> Result<Self, PhotonicsError> {
        let shape = Self {
            fwhm_ps,
            clock_rate_ghz,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<(), PhotonicsError> {
        if !(self.fwhm_ps > 0.0) || !(self.clock_rate_ghz > 0.0) {
            return Err(PhotonicsError::InvalidPulseShape(
                "fwhm and clock rate must be positive",
            ));
        }
        if self.fwhm_ps >= self.period_ps() {
            return Err(PhotonicsError::InvalidPulseShape(
                "pulse FWHM exceeds the clock period",
            ));
        }
        Ok(())
    }

    pub fn period_ps(&self) -> f64 {
        1000.0 / self.clock_rate_ghz
    }

    /// Standard deviation of the Gaussian intensity envelope.
    pub fn sigma_t_ps(&self) -> f64 {
        self.fwhm_ps / (2.0 * (2.0 * LN_2).sqrt())
    }
}

/// The four intensity classes of the decoy protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intensity {
    /// Key-generating intensity.
    Signal,
    /// Stronger of the two test decoys.
    Decoy,
    /// Weaker test decoy.
    Weak,
    Vacuum,
}

impl Intensity {
    pub const ALL: [Intensity; 4] = [
        Intensity::Signal,
        Intensity::Decoy,
        Intensity::Weak,
        Intensity::Vacuum,
    ];

    pub fn index(self) -> usize {
        match self {
            Intensity::Signal => 0,
            Intensity::Decoy => 1,
            Intensity::Weak => 2,
            Intensity::Vacuum => 3,
        }
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }
}

/// Mean photon numbers, selection probabilities and basis choice per intensity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensitySet {
    /// Indexed by [`Intensity::index`]; the vacuum entry must be 0.
    pub mean_photons: [f64; 4],
    pub send_probabilities: [f64; 4],
    /// Probability of choosing the Z basis given the intensity.
    pub z_probabilities: [f64; 4],
}

impl IntensitySet {
    pub fn validate(&self) -> Result<(), PhotonicsError> {
        let m = &self.mean_photons;
        if m[Intensity::Vacuum.index()] != 0.0 {
            return Err(PhotonicsError::InvalidIntensitySet(
                "vacuum intensity must be 0".into(),
            ));
        }
        if m.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(PhotonicsError::InvalidIntensitySet(
                "intensities must be finite and >= 0".into(),
            ));
        }
        for i in 0..4 {
            for j in i + 1..4 {
                if m[i] == m[j] {
                    return Err(PhotonicsError::InvalidIntensitySet(format!(
                        "intensities {:?} and {:?} coincide",
                        Intensity::from_index(i),
                        Intensity::from_index(j)
                    )));
                }
            }
        }
        if m[Intensity::Weak.index()] >= m[Intensity::Decoy.index()] {
            return Err(PhotonicsError::InvalidIntensitySet(
                "weak decoy must be below the decoy".into(),
            ));
        }
        let in_unit = |p: &f64| (0.0..=1.0).contains(p);
        if !self.send_probabilities.iter().all(in_unit) || !self.z_probabilities.iter().all(in_unit)
        {
            return Err(PhotonicsError::InvalidIntensitySet(
                "probabilities must lie in [0, 1]".into(),
            ));
        }
        let total: f64 = self.send_probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(PhotonicsError::InvalidIntensitySet(format!(
                "send probabilities sum to {total}, expected 1"
            )));
        }
        Ok(())
    }

    pub fn mean(&self, intensity: Intensity) -> f64 {
        self.mean_photons[intensity.index()]
    }

    pub fn send_probability(&self, intensity: Intensity) -> f64 {
        self.send_probabilities[intensity.index()]
    }

    pub fn basis_probability(&self, intensity: Intensity, basis: Basis) -> f64 {
        let z = self.z_probabilities[intensity.index()];
        match basis {
            Basis::Z => z,
            Basis::X => 1.0 - z,
        }
    }

    /// Probability that one user emits `intensity` prepared in `basis`.
    pub fn choice_probability(&self, intensity: Intensity, basis: Basis) -> f64 {
        self.send_probability(intensity) * self.basis_probability(intensity, basis)
    }
}

/// Fiber span between a user and the hub.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiberChannel {
    pub length_km: f64,
    pub attenuation_db_per_km: f64,
    /// Rotation-angle diffusion coefficient of the polarization transform (rad²/s).
    pub polarization_drift_rate: f64,
    /// Random-walk amplitude of the arrival time (ps/√s).
    pub timing_drift_ps_per_sqrt_s: f64,
}

impl FiberChannel {
    pub const STANDARD_ATTENUATION_DB_PER_KM: f64 = 0.2;
    pub const ULL_ATTENUATION_DB_PER_KM: f64 = 0.16;

    pub fn standard(length_km: f64) -> Self {
        Self {
            length_km,
            attenuation_db_per_km: Self::STANDARD_ATTENUATION_DB_PER_KM,
            polarization_drift_rate: 0.0,
            timing_drift_ps_per_sqrt_s: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), PhotonicsError> {
        if !(self.length_km >= 0.0) || !(self.attenuation_db_per_km >= 0.0) {
            return Err(PhotonicsError::InvalidChannel(
                "length and attenuation must be >= 0",
            ));
        }
        if !(self.polarization_drift_rate >= 0.0) || !(self.timing_drift_ps_per_sqrt_s >= 0.0) {
            return Err(PhotonicsError::InvalidChannel("drift rates must be >= 0"));
        }
        Ok(())
    }

    pub fn loss_db(&self) -> f64 {
        self.length_km * self.attenuation_db_per_km
    }

    pub fn transmittance(&self) -> f64 {
        db_to_transmittance(self.loss_db())
    }
}

pub fn db_to_transmittance(loss_db: f64) -> f64 {
    10f64.powf(-loss_db / 10.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DetectorLabel {
    D1H,
    D1V,
    D2H,
    D2V,
}

impl DetectorLabel {
    pub const ALL: [DetectorLabel; 4] = [
        DetectorLabel::D1H,
        DetectorLabel::D1V,
        DetectorLabel::D2H,
        DetectorLabel::D2V,
    ];
}

/// Threshold single-photon detector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub efficiency: f64,
    /// Dark-count probability per gate.
    pub dark_prob: f64,
    pub jitter_ps: f64,
    pub label: DetectorLabel,
}

impl DetectorModel {
    pub fn ideal(label: DetectorLabel) -> Self {
        Self {
            efficiency: 1.0,
            dark_prob: 0.0,
            jitter_ps: 0.0,
            label,
        }
    }

    pub fn validate(&self) -> Result<(), PhotonicsError> {
        if !(0.0..=1.0).contains(&self.efficiency) || !(0.0..1.0).contains(&self.dark_prob) {
            return Err(PhotonicsError::InvalidDetector(self.label));
        }
        if !(self.jitter_ps >= 0.0) {
            return Err(PhotonicsError::InvalidDetector(self.label));
        }
        Ok(())
    }

    /// `1 − (1 − p_dark)·exp(−η·exposure)`.
    pub fn click_probability(&self, exposure: f64) -> f64 {
        let x = self.efficiency * exposure;
        -(-x).exp_m1() + self.dark_prob * (-x).exp()
    }
}

/// The four detectors behind the hub's beam splitter, ordered D1H, D1V, D2H, D2V.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorSet(pub [DetectorModel; 4]);

impl DetectorSet {
    pub fn ideal() -> Self {
        Self(DetectorLabel::ALL.map(DetectorModel::ideal))
    }

    pub fn uniform(efficiency: f64, dark_prob: f64, jitter_ps: f64) -> Self {
        Self(DetectorLabel::ALL.map(|label| DetectorModel {
            efficiency,
            dark_prob,
            jitter_ps,
            label,
        }))
    }

    pub fn validate(&self) -> Result<(), PhotonicsError> {
        self.0.iter().try_for_each(DetectorModel::validate)
    }

    pub fn click_probabilities(&self, exposures: [f64; 4]) -> [f64; 4] {
        [0, 1, 2, 3].map(|i| self.0[i].click_probability(exposures[i]))
    }
}

/// One prepared (or propagated) weak coherent pulse.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PulseDescriptor {
    pub mean_photons: f64,
    pub polarization: PolarizationState,
    /// Arrival time relative to the slot center.
    pub time_offset_ps: f64,
    /// Carrier offset from the nominal tooth frequency.
    pub carrier_detuning_khz: f64,
    pub intensity: Intensity,
    pub basis: Basis,
    pub bit: bool,
}

impl PulseDescriptor {
    /// Coherent amplitude vector `√μ · jones`.
    pub fn field(&self) -> [Complex; 2] {
        let a = self.mean_photons.sqrt();
        [self.polarization.h * a, self.polarization.v * a]
    }
}

/// Relative power of the orthogonal leakage for a given extinction ratio.
pub fn leakage_ratio(extinction_ratio_db: f64) -> f64 {
    10f64.powf(-extinction_ratio_db / 10.0)
}

/// Intrinsic polarization error floor `r/(1+r)` of the encoder.
pub fn polarization_error_floor(extinction_ratio_db: f64) -> f64 {
    let r = leakage_ratio(extinction_ratio_db);
    r / (1.0 + r)
}

/// Prepares a pulse: the ideal BB84 polarization plus orthogonal leakage of
/// relative power `10^(−ER/10)`, added in phase quadrature.
pub fn encode_pulse(
    bit: bool,
    basis: Basis,
    intensity: Intensity,
    set: &IntensitySet,
    extinction_ratio_db: f64,
) -> PulseDescriptor {
    assert!(
        extinction_ratio_db > 0.0,
        "extinction ratio must be positive"
    );
    PulseDescriptor {
        mean_photons: set.mean(intensity),
        polarization: encoded_polarization(basis, bit, extinction_ratio_db),
        time_offset_ps: 0.0,
        carrier_detuning_khz: 0.0,
        intensity,
        basis,
        bit,
    }
}

pub fn encoded_polarization(
    basis: Basis,
    bit: bool,
    extinction_ratio_db: f64,
) -> PolarizationState {
    let target = PolarizationState::bb84(basis, bit);
    let eps = polarization_error_floor(extinction_ratio_db);
    if eps == 0.0 {
        return target;
    }
    let orth = target.orthogonal();
    let a = (1.0 - eps).sqrt();
    let b = Complex::new(0.0, eps.sqrt());
    PolarizationState::new(target.h * a + orth.h * b, target.v * a + orth.v * b)
}

/// Time-varying state of one fiber span.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriftState {
    pub unitary: Jones,
    pub timing_offset_ps: f64,
}

impl Default for DriftState {
    fn default() -> Self {
        Self {
            unitary: Jones::identity(),
            timing_offset_ps: 0.0,
        }
    }
}

/// Sends a pulse through a fiber span in its current drift state.
pub fn propagate(
    pulse: &PulseDescriptor,
    channel: &FiberChannel,
    drift: &DriftState,
) -> PulseDescriptor {
    PulseDescriptor {
        mean_photons: pulse.mean_photons * channel.transmittance(),
        polarization: drift.unitary.apply(&pulse.polarization),
        time_offset_ps: pulse.time_offset_ps + drift.timing_offset_ps,
        ..*pulse
    }
}

/// Composes the polarization transform with an isotropic random rotation whose
/// squared angle has mean `rate·dt`.
pub fn drift_step<R: Rng + ?Sized>(
    state: &DriftState,
    dt: f64,
    rate: f64,
    rng: &mut R,
) -> DriftState {
    assert!(dt > 0.0, "drift step needs dt > 0");
    if rate == 0.0 {
        return *state;
    }
    let sd = (rate * dt / 3.0).sqrt();
    let omega: [f64; 3] = std::array::from_fn(|_| sd * rng.sample::<f64, _>(StandardNormal));
    DriftState {
        unitary: (Jones::from_rotation_vector(omega) * state.unitary).renormalized(),
        ..*state
    }
}

/// Advances the arrival-time random walk by `dt` seconds.
pub fn timing_step<R: Rng + ?Sized>(
    state: &DriftState,
    dt: f64,
    amplitude_ps_per_sqrt_s: f64,
    rng: &mut R,
) -> DriftState {
    let step: f64 = rng.sample(StandardNormal);
    DriftState {
        timing_offset_ps: state.timing_offset_ps + amplitude_ps_per_sqrt_s * dt.sqrt() * step,
        ..*state
    }
}

/// Samples a click given the detector's mean photon exposure.
pub fn detect<R: Rng + ?Sized>(exposure: f64, model: &DetectorModel, rng: &mut R) -> bool {
    debug_assert!(exposure >= 0.0);
    rng.random::<f64>() < model.click_probability(exposure)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PhotonicsError {
    #[error("invalid pulse shape: {0}")]
    InvalidPulseShape(&'static str),
    #[error("invalid intensity set: {0}")]
    InvalidIntensitySet(String),
    #[error("invalid fiber channel: {0}")]
    InvalidChannel(&'static str),
    #[error("invalid detector parameters for {0:?}")]
    InvalidDetector(DetectorLabel),
}

/// Random rotation with a Gaussian-direction axis and a uniform angle in `[0, π)`.
pub fn random_unitary<R: Rng + ?Sized>(rng: &mut R) -> Jones {
    let dist = StandardNormal;
    let axis: [f64; 3] = std::array::from_fn(|_| dist.sample(rng));
    let angle = rng.random::<f64>() * std::f64::consts::PI;
    Jones::rotation(axis, angle)
}
