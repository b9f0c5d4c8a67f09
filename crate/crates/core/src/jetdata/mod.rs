//! Jet data model: particles, jet-level summaries and the per-particle
//! feature vector consumed by the tokenizer.

mod augment;
mod io;
mod synth;

pub use augment::{augment_boost, augment_rotate, augment_smear, AugmentConfig};
pub use io::{load_dataset, read_dataset, write_dataset, write_dataset_to, DataFormat, BINARY_MAGIC};
pub use synth::{gen_synthetic, ClassSpec};

use std::f64::consts::PI;

use crate::error::{Error, Result};

const REL_TOL: f64 = 1e-6;

/// Wraps an angle to `(−π, π]`.
pub fn wrap_phi(phi: f64) -> f64 {
    let y = phi.rem_euclid(2.0 * PI);
    if y > PI {
        y - 2.0 * PI
    } else {
        y
    }
}

/// Angular distance in the (η, φ) plane with periodic φ.
pub fn delta_r(eta_a: f64, phi_a: f64, eta_b: f64, phi_b: f64) -> f64 {
    let deta = eta_a - eta_b;
    let dphi = wrap_phi(phi_a - phi_b);
    (deta * deta + dphi * dphi).sqrt()
}

/// Energy-momentum four-vector `(E, px, py, pz)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FourVector {
    pub e: f64,
    pub px: f64,
    pub py: f64,
    pub pz: f64,
}

impl FourVector {
    pub fn pt(&self) -> f64 {
        self.px.hypot(self.py)
    }

    pub fn phi(&self) -> f64 {
        wrap_phi(self.py.atan2(self.px))
    }

    pub fn eta(&self) -> f64 {
        let pt = self.pt();
        if pt > 0.0 {
            (self.pz / pt).asinh()
        } else if self.pz == 0.0 {
            0.0
        } else {
            self.pz.signum() * f64::INFINITY
        }
    }

    pub fn p2(&self) -> f64 {
        self.px * self.px + self.py * self.py + self.pz * self.pz
    }

    pub fn mass2(&self) -> f64 {
        self.e * self.e - self.p2()
    }
}

impl std::ops::Add for FourVector {
    type Output = FourVector;
    fn add(self, o: FourVector) -> FourVector {
        FourVector { e: self.e + o.e, px: self.px + o.px, py: self.py + o.py, pz: self.pz + o.pz }
    }
}

impl std::iter::Sum for FourVector {
    fn sum<I: Iterator<Item = FourVector>>(iter: I) -> Self {
        iter.fold(FourVector::default(), |a, b| a + b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawParticle {
    pub pt: f64,
    pub eta: f64,
    pub phi: f64,
    pub energy: f64,
    pub mass: f64,
}

impl RawParticle {
    /// Particle with energy fixed by the on-shell relation.
    pub fn on_shell(pt: f64, eta: f64, phi: f64, mass: f64) -> Self {
        let p = pt * eta.cosh();
        Self { pt, eta, phi: wrap_phi(phi), energy: (p * p + mass * mass).sqrt(), mass }
    }

    pub fn four_vector(&self) -> FourVector {
        FourVector {
            e: self.energy,
            px: self.pt * self.phi.cos(),
            py: self.pt * self.phi.sin(),
            pz: self.pt * self.eta.sinh(),
        }
    }

    /// Checks the particle-level invariants.
    pub fn validate(&self, index: usize) -> Result<()> {
        let bad = |reason: String| Err(Error::NonPhysical { index, reason });
        let fields = [self.pt, self.eta, self.phi, self.energy, self.mass];
        if fields.iter().any(|v| !v.is_finite()) {
            return bad("non-finite field".into());
        }
        if self.pt <= 0.0 {
            return bad(format!("pt = {}", self.pt));
        }
        if self.energy <= 0.0 {
            return bad(format!("energy = {}", self.energy));
        }
        if self.mass < 0.0 {
            return bad(format!("mass = {}", self.mass));
        }
        if !(self.phi > -PI && self.phi <= PI) {
            return bad(format!("phi = {} outside (-pi, pi]", self.phi));
        }
        let p = self.pt * self.eta.cosh();
        if self.energy * self.energy < p * p * (1.0 - REL_TOL) {
            return bad(format!("energy {} below momentum {}", self.energy, p));
        }
        Ok(())
    }
}

/// Jet-level summary of a set of particles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JetSummary {
    pub jet_pt: f64,
    pub jet_energy: f64,
    pub jet_axis: (f64, f64),
}

/// Sums the particle four-vectors and reports pt, energy and (η, φ) of the
/// total.
pub fn jet_summary(particles: &[RawParticle]) -> Result<JetSummary> {
    if particles.is_empty() {
        return Err(Error::EmptyJet);
    }
    let total: FourVector = particles.iter().map(RawParticle::four_vector).sum();
    Ok(JetSummary { jet_pt: total.pt(), jet_energy: total.e, jet_axis: (total.eta(), total.phi()) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct JetRecord {
    pub particles: Vec<RawParticle>,
    pub jet_pt: f64,
    pub jet_energy: f64,
    pub jet_axis: (f64, f64),
    pub label: Option<u32>,
}

impl JetRecord {
    /// Builds a record with the summary recomputed from the particles and
    /// validates it.
    pub fn new(particles: Vec<RawParticle>, label: Option<u32>) -> Result<Self> {
        let s = jet_summary(&particles)?;
        let jet = Self { particles, jet_pt: s.jet_pt, jet_energy: s.jet_energy, jet_axis: s.jet_axis, label };
        jet.validate()?;
        Ok(jet)
    }

    /// Particle invariants, summary consistency, and the requirement that no
    /// constituent carries more pt or energy than the jet.
    pub fn validate(&self) -> Result<()> {
        let s = jet_summary(&self.particles)?;
        for (i, p) in self.particles.iter().enumerate() {
            p.validate(i)?;
        }
        let close = |a: f64, b: f64| (a - b).abs() <= REL_TOL * a.abs().max(b.abs()).max(1e-12);
        if !close(s.jet_pt, self.jet_pt) || !close(s.jet_energy, self.jet_energy) {
            return Err(Error::Internal("jet summary inconsistent with particles".into()));
        }
        if !(self.jet_pt > 0.0) {
            return Err(Error::Internal(format!("jet pt {} is not positive", self.jet_pt)));
        }
        for (index, p) in self.particles.iter().enumerate() {
            if p.pt > self.jet_pt * (1.0 + REL_TOL) {
                return Err(Error::NonPhysical {
                    index,
                    reason: format!("pt {} exceeds jet pt {}", p.pt, self.jet_pt),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn four_vectors(&self) -> Vec<FourVector> {
        self.particles.iter().map(RawParticle::four_vector).collect()
    }

    /// `n × 2` (η, φ) coordinates.
    pub fn coords(&self) -> Vec<[f64; 2]> {
        self.particles.iter().map(|p| [p.eta, p.phi]).collect()
    }
}

/// The eight per-particle inputs of the tokenizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureVector {
    pub eta: f64,
    pub phi: f64,
    pub mass: f64,
    pub ln_pt: f64,
    pub ln_e: f64,
    pub ln_pt_rel: f64,
    pub ln_e_rel: f64,
    pub delta_r_jet: f64,
}

pub const FEATURE_DIM: usize = 8;

impl FeatureVector {
    pub fn to_array(&self) -> [f64; FEATURE_DIM] {
        [self.eta, self.phi, self.mass, self.ln_pt, self.ln_e, self.ln_pt_rel, self.ln_e_rel, self.delta_r_jet]
    }
}

pub fn derive_features(jet: &JetRecord) -> Result<Vec<FeatureVector>> {
    if jet.particles.is_empty() {
        return Err(Error::EmptyJet);
    }
    if !(jet.jet_pt > 0.0 && jet.jet_energy > 0.0) {
        return Err(Error::Internal("jet pt and energy must be positive".into()));
    }
    let (axis_eta, axis_phi) = jet.jet_axis;
    jet.particles
        .iter()
        .enumerate()
        .map(|(index, p)| {
            if !(p.pt > 0.0 && p.energy > 0.0) {
                return Err(Error::NonPhysical { index, reason: "non-physical particle".into() });
            }
            Ok(FeatureVector {
                eta: p.eta,
                phi: p.phi,
                mass: p.mass,
                ln_pt: p.pt.ln(),
                ln_e: p.energy.ln(),
                ln_pt_rel: (p.pt / jet.jet_pt).ln(),
                ln_e_rel: (p.energy / jet.jet_energy).ln(),
                delta_r_jet: delta_r(p.eta, p.phi, axis_eta, axis_phi),
            })
        })
        .collect()
}
