//! Physics augmentations: azimuthal rotation, angular smearing and
//! longitudinal boosts.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{wrap_phi, JetRecord, RawParticle};
use crate::error::{Error, Result};
use crate::rng;

fn rebuild(jet: &JetRecord, particles: Vec<RawParticle>) -> Result<JetRecord> {
    let s = super::jet_summary(&particles)?;
    Ok(JetRecord { particles, jet_pt: s.jet_pt, jet_energy: s.jet_energy, jet_axis: s.jet_axis, label: jet.label })
}

/// Rotates every particle about the beam axis by `angle`.
pub fn augment_rotate(jet: &JetRecord, angle: f64) -> Result<JetRecord> {
    if angle == 0.0 {
        return Ok(jet.clone());
    }
    let ps = jet.particles.iter().map(|p| RawParticle { phi: wrap_phi(p.phi + angle), ..*p }).collect();
    rebuild(jet, ps)
}

/// Adds independent N(0, σ²) noise to each particle's η and φ, keeping pt and
/// mass and recomputing the energy on shell.
pub fn augment_smear(jet: &JetRecord, sigma: f64, seed: u64) -> Result<JetRecord> {
    if sigma == 0.0 {
        return Ok(jet.clone());
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("smear sigma: {e}")))?;
    let mut r = rng::stream(seed, rng::stream_id(&[0x53AE]));
    let ps = jet
        .particles
        .iter()
        .map(|p| {
            let eta = p.eta + noise.sample(&mut r);
            let phi = p.phi + noise.sample(&mut r);
            RawParticle::on_shell(p.pt, eta, phi, p.mass)
        })
        .collect();
    rebuild(jet, ps)
}

/// Exact longitudinal boost by rapidity `delta_rapidity`.
pub fn augment_boost(jet: &JetRecord, delta_rapidity: f64) -> Result<JetRecord> {
    if delta_rapidity == 0.0 {
        return Ok(jet.clone());
    }
    let (ch, sh) = (delta_rapidity.cosh(), delta_rapidity.sinh());
    let ps = jet
        .particles
        .iter()
        .map(|p| {
            let pz = p.pt * p.eta.sinh();
            let e = p.energy * ch + pz * sh;
            let pz2 = pz * ch + p.energy * sh;
            if !(e > 0.0) {
                return Err(Error::Internal(format!("boosted energy {e} is not positive")));
            }
            Ok(RawParticle { pt: p.pt, eta: (pz2 / p.pt).asinh(), phi: p.phi, energy: e, mass: p.mass })
        })
        .collect::<Result<Vec<_>>>()?;
    rebuild(jet, ps)
}

/// Random combination of the three augmentations applied during training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub rotate: bool,
    pub smear_sigma: f64,
    pub max_boost: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { rotate: true, smear_sigma: 0.01, max_boost: 0.5 }
    }
}

impl AugmentConfig {
    pub fn apply(&self, jet: &JetRecord, seed: u64) -> Result<JetRecord> {
        let mut r = rng::stream(seed, rng::stream_id(&[0xA06]));
        let mut out = jet.clone();
        if self.rotate {
            out = augment_rotate(&out, r.gen_range(-PI..PI))?;
        }
        if self.smear_sigma > 0.0 {
            out = augment_smear(&out, self.smear_sigma, r.gen())?;
        }
        if self.max_boost > 0.0 {
            out = augment_boost(&out, r.gen_range(-self.max_boost..=self.max_boost))?;
        }
        Ok(out)
    }
}
