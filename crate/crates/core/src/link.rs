//! Analytic model of one user pair: per-cell gains and error gains.
//!
//! The same slot construction drives the Monte Carlo engine, so both modes
//! sample one physical model.

use serde::{Deserialize, Serialize};

use crate::interference::{phase_averaged, BsmInput, BsmOutcome, InterferenceError};
use crate::photonics::{
    db_to_transmittance, encode_pulse, DetectorSet, FiberChannel, Intensity, IntensitySet, Jones,
    PulseShape,
};
use crate::protocol::{
    cell_keys, intensity_basis, sift_with, CellExpectation, ExpectedCells, SiftPolicy,
};

/// Static state of one Alice–Charlie–Bob link during a block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub shape: PulseShape,
    pub intensities: IntensitySet,
    pub extinction_ratio_db: f64,
    /// Alice→Charlie and Bob→Charlie spans.
    pub channels: [FiberChannel; 2],
    /// Charlie's insertion loss ahead of the detectors (dB).
    pub receiver_loss_db: f64,
    pub detectors: DetectorSet,
    /// Net polarization transform of each arm as seen by the analyzer.
    pub arm_unitaries: [Jones; 2],
    /// Mean wavepacket overlap of the two arms.
    pub xi: f64,
    pub sift: SiftPolicy,
}

impl LinkModel {
    /// Arm transmittances including receiver loss.
    pub fn arm_transmittance(&self) -> [f64; 2] {
        let rx = db_to_transmittance(self.receiver_loss_db);
        [
            self.channels[0].transmittance() * rx,
            self.channels[1].transmittance() * rx,
        ]
    }

    /// Fields at the beam splitter for one choice of intensities and bits.
    pub fn slot_input(&self, alice: (Intensity, bool), bob: (Intensity, bool)) -> BsmInput {
        let eta = self.arm_transmittance();
        let arm = |k: usize, (intensity, bit): (Intensity, bool)| {
            let p = encode_pulse(
                bit,
                intensity_basis(intensity),
                intensity,
                &self.intensities,
                self.extinction_ratio_db,
            );
            (
                p.mean_photons * eta[k],
                self.arm_unitaries[k].apply(&p.polarization),
            )
        };
        let (mu_a, pol_a) = arm(0, alice);
        let (mu_b, pol_b) = arm(1, bob);
        BsmInput::new(mu_a, &pol_a, mu_b, &pol_b, self.xi)
    }

    /// Expected gain and error gain of one basis-matched cell.
    pub fn cell(
        &self,
        alice: Intensity,
        bob: Intensity,
    ) -> Result<CellExpectation, InterferenceError> {
        let basis = intensity_basis(alice);
        debug_assert_eq!(basis, intensity_basis(bob));
        let (mut gain, mut error_gain) = (0.0, 0.0);
        for bit_a in [false, true] {
            for bit_b in [false, true] {
                let o = phase_averaged(
                    &self.slot_input((alice, bit_a), (bob, bit_b)),
                    &self.detectors,
                )?;
                for (outcome, p) in [
                    (BsmOutcome::PsiPlus, o.psi_plus),
                    (BsmOutcome::PsiMinus, o.psi_minus),
                ] {
                    let ev = sift_with(self.sift, outcome, basis, basis, bit_a, bit_b);
                    if ev.kept {
                        gain += 0.25 * p;
                        if ev.error {
                            error_gain += 0.25 * p;
                        }
                    }
                }
            }
        }
        Ok(CellExpectation {
            alice,
            bob,
            basis,
            gain,
            error_gain,
        })
    }

    pub fn expected_cells(&self) -> Result<ExpectedCells, InterferenceError> {
        cell_keys()
            .into_iter()
            .map(|(a, b, _)| self.cell(a, b))
            .collect::<Result<Vec<_>, _>>()
            .map(ExpectedCells)
    }

    /// Same link with the user-to-user distance split evenly between the arms.
    pub fn with_distance(&self, total_km: f64) -> Self {
        let mut out = self.clone();
        for c in &mut out.channels {
            c.length_km = 0.5 * total_km;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::photonics::{Basis, DetectorLabel, DetectorModel};

    fn link() -> LinkModel {
        LinkModel {
            shape: PulseShape::new(95.0, 2.5).unwrap(),
            intensities: IntensitySet {
                mean_photons: [0.3, 0.2, 0.05, 0.0],
                send_probabilities: [0.5, 0.2, 0.2, 0.1],
                z_probabilities: [1.0, 0.0, 0.0, 0.0],
            },
            extinction_ratio_db: f64::INFINITY,
            channels: [FiberChannel::standard(50.0), FiberChannel::standard(50.0)],
            receiver_loss_db: 0.0,
            detectors: DetectorSet::ideal(),
            arm_unitaries: [Jones::identity(); 2],
            xi: 1.0,
            sift: SiftPolicy::default(),
        }
    }

    #[test]
    fn perfect_link_has_no_z_errors() {
        let z = link().cell(Intensity::Signal, Intensity::Signal).unwrap();
        assert!(z.gain > 0.0);
        assert!(z.error_gain < 1e-15);
    }

    #[test]
    fn x_error_rate_near_quarter_for_equal_intensities() {
        let x = link().cell(Intensity::Decoy, Intensity::Decoy).unwrap();
        let e = x.error_gain / x.gain;
        assert!((e - 0.25).abs() < 0.01, "{e}");
    }

    #[test]
    fn vacuum_cells_are_dark() {
        let mut l = link();
        assert_eq!(
            l.cell(Intensity::Vacuum, Intensity::Vacuum).unwrap().gain,
            0.0
        );
        l.detectors = DetectorSet(
            [DetectorModel {
                efficiency: 1.0,
                dark_prob: 1e-6,
                jitter_ps: 0.0,
                label: DetectorLabel::D1H,
            }; 4],
        );
        let c = l.cell(Intensity::Vacuum, Intensity::Vacuum).unwrap();
        assert!(c.gain > 0.0 && (c.error_gain / c.gain - 0.5).abs() < 1e-9);
    }

    #[test]
    fn z_gain_weak_limit() {
        // two single photons with orthogonal polarizations give Ψ± half the time
        let mut l = link().with_distance(400.0);
        l.intensities.mean_photons[0] = 1e-3;
        let eta = l.arm_transmittance()[0];
        let mu = 1e-3 * eta;
        let z = l.cell(Intensity::Signal, Intensity::Signal).unwrap();
        // HV and VH bit pairs always split into one H and one V click: P ≈ μ² each
        let approx = 0.5 * mu * mu;
        assert!(
            (z.gain / approx - 1.0).abs() < 1e-3,
            "{} vs {}",
            z.gain,
            approx
        );
        assert_eq!(z.basis, Basis::Z);
    }
}
