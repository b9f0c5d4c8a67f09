//! Pairwise physics features between token groups and their embedding
//! into per-head attention biases.

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::jetdata::{delta_r, FourVector};
use crate::nn::Mlp;

pub const PAIR_CHANNELS: usize = 4;
const LOG_EPS: f64 = 1e-8;

/// `c × c × 4` tensor of (ΔR, kT, z, m²) for every ordered token pair,
/// stored row-major over pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct PairFeatures {
    pub c: usize,
    pub data: Vec<[f64; PAIR_CHANNELS]>,
}

impl PairFeatures {
    pub fn get(&self, i: usize, j: usize) -> [f64; PAIR_CHANNELS] {
        self.data[i * self.c + j]
    }

    /// `(ln(ΔR+ε), ln(kT+ε), ln(z+ε), ln(max(m², ε)))` per pair, as a
    /// `c² × 4` matrix ready for the bias MLP.
    pub fn log_transformed(&self) -> Tensor {
        let mut out = Vec::with_capacity(self.data.len() * PAIR_CHANNELS);
        for &[dr, kt, z, m2] in &self.data {
            out.extend([(dr + LOG_EPS).ln(), (kt + LOG_EPS).ln(), (z + LOG_EPS).ln(), m2.max(LOG_EPS).ln()]);
        }
        Tensor::from_vec(self.data.len(), PAIR_CHANNELS, out)
    }

    /// Pair features of the tokens in `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> PairFeatures {
        let data = idx.iter().flat_map(|&i| idx.iter().map(move |&j| (i, j))).map(|(i, j)| self.get(i, j)).collect();
        PairFeatures { c: idx.len(), data }
    }
}

pub fn compute_pair_features(groups: &[FourVector]) -> Result<PairFeatures> {
    let c = groups.len();
    if c == 0 {
        return Err(Error::Shape("pair features need at least one token".into()));
    }
    if let Some(bad) = groups.iter().position(|g| !(g.e > 0.0)) {
        return Err(Error::NonPhysical { index: bad, reason: "group energy must be positive".into() });
    }
    let dirs: Vec<(f64, f64, f64)> = groups.iter().map(|g| (g.eta(), g.phi(), g.pt())).collect();
    let mut data = vec![[0.0; PAIR_CHANNELS]; c * c];
    for i in 0..c {
        for j in i..c {
            let (ei, pi, pti) = dirs[i];
            let (ej, pj, ptj) = dirs[j];
            let dr = if i == j { 0.0 } else { delta_r(ei, pi, ej, pj) };
            let lo = pti.min(ptj);
            let kt = lo * dr;
            let z = lo / (pti + ptj);
            let m2 = (groups[i] + groups[j]).mass2();
            // Filled once per unordered pair so the tensor is exactly symmetric.
            data[i * c + j] = [dr, kt, z, m2];
            data[j * c + i] = [dr, kt, z, m2];
        }
    }
    Ok(PairFeatures { c, data })
}

/// Pointwise MLP from the log-transformed pair features to one bias per
/// head; returns a `c² × heads` node.
pub fn bias_embed(g: &mut Graph, pairs: &PairFeatures, mlp: &Mlp) -> Result<Var> {
    let x = g.constant(pairs.log_transformed());
    mlp.forward(g, x)
}

/// Per-head `(r + c) × (r + c)` bias matrices with zero rows and columns for
/// the `r` leading register slots.
pub fn padded_head_biases(g: &mut Graph, bias: Var, c: usize, heads: usize, registers: usize) -> Result<Vec<Var>> {
    if g.shape(bias) != (c * c, heads) {
        return Err(Error::Shape(format!("bias {:?} for {c} tokens and {heads} heads", g.shape(bias))));
    }
    let l = registers + c;
    (0..heads)
        .map(|h| {
            let map = (0..l * l)
                .map(|k| {
                    let (i, j) = (k / l, k % l);
                    (i >= registers && j >= registers).then(|| ((i - registers) * c + (j - registers)) * heads + h)
                })
                .collect();
            g.gather(bias, l, l, map)
        })
        .collect()
}
