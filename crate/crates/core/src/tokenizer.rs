//! Particle-group tokenizer: farthest point sampling picks group centers,
//! k-nearest neighbours in (η, φ) form the groups, member features are
//! taken relative to the center, and a shared MLP with max pooling embeds
//! each group.

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::jetdata::{derive_features, wrap_phi, FourVector, JetRecord, FEATURE_DIM};
use crate::nn::Mlp;
use crate::params::ParamStore;
use crate::rng::Rng;

/// How the first farthest-point center is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StartRule {
    HighestPt,
    LowestIndex,
}

impl std::str::FromStr for StartRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "highest_pt" => Ok(StartRule::HighestPt),
            "lowest_index" => Ok(StartRule::LowestIndex),
            _ => Err(Error::Config(format!("unknown start rule {s:?}"))),
        }
    }
}

impl std::fmt::Display for StartRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StartRule::HighestPt => "highest_pt",
            StartRule::LowestIndex => "lowest_index",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerConfig {
    pub center_ratio: f64,
    pub min_centers: usize,
    pub k: usize,
    pub d: usize,
    /// Hidden widths of the shared group MLP (input 8 and output `d` implied).
    pub mlp_widths: Vec<usize>,
    pub start_rule: StartRule,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { center_ratio: 0.25, min_centers: 4, k: 8, d: 32, mlp_widths: vec![32], start_rule: StartRule::HighestPt }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.center_ratio > 0.0 && self.center_ratio <= 1.0) {
            return Err(Error::Config(format!("tokenizer.center_ratio {} not in (0, 1]", self.center_ratio)));
        }
        if self.k == 0 || self.d == 0 || self.min_centers == 0 {
            return Err(Error::Config("tokenizer k, d and min_centers must be at least 1".into()));
        }
        if self.mlp_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("tokenizer.mlp_widths entries must be positive".into()));
        }
        Ok(())
    }

    pub fn layer_widths(&self) -> Vec<usize> {
        let mut w = vec![FEATURE_DIM];
        w.extend(&self.mlp_widths);
        w.push(self.d);
        w
    }
}

/// Number of group centers for a jet of `n` particles.
pub fn token_count(n: usize, cfg: &TokenizerConfig) -> usize {
    let c = (cfg.center_ratio * n as f64).ceil() as usize;
    c.max(cfg.min_centers).min(n)
}

/// Euclidean (η, φ) distance with wrapped Δφ.
#[inline]
pub fn coord_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    let de = a[0] - b[0];
    let dp = wrap_phi(a[1] - b[1]);
    (de * de + dp * dp).sqrt()
}

pub fn start_index(jet: &JetRecord, rule: StartRule) -> usize {
    match rule {
        StartRule::LowestIndex => 0,
        StartRule::HighestPt => {
            let mut best = 0;
            for (i, p) in jet.particles.iter().enumerate() {
                if p.pt > jet.particles[best].pt {
                    best = i;
                }
            }
            best
        }
    }
}

/// Greedy farthest point sampling starting from `start`; ties go to the
/// lowest index.
pub fn farthest_point_sample(coords: &[[f64; 2]], c: usize, start: usize) -> Result<Vec<usize>> {
    let n = coords.len();
    if c == 0 || c > n {
        return Err(Error::Config(format!("cannot sample {c} centers from {n} points")));
    }
    if start >= n {
        return Err(Error::Config(format!("start index {start} out of {n}")));
    }
    let mut chosen = Vec::with_capacity(c);
    let mut taken = vec![false; n];
    let mut min_dist = vec![f64::INFINITY; n];
    let mut next = start;
    loop {
        chosen.push(next);
        taken[next] = true;
        if chosen.len() == c {
            break;
        }
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = coord_distance(coords[i], coords[next]);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if best.map_or(true, |b| min_dist[i] > min_dist[b]) {
                best = Some(i);
            }
        }
        next = best.expect("c <= n leaves a candidate");
    }
    Ok(chosen)
}

/// The `k` nearest particles to each center, the center first. Groups are
/// padded with the center index when fewer than `k` particles exist.
pub fn knn_group(coords: &[[f64; 2]], centers: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let n = coords.len();
    centers
        .iter()
        .map(|&c| {
            if c >= n {
                return Err(Error::Config(format!("center {c} out of {n}")));
            }
            let mut others: Vec<(f64, usize)> =
                (0..n).filter(|&i| i != c).map(|i| (coord_distance(coords[i], coords[c]), i)).collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut members = Vec::with_capacity(k);
            members.push(c);
            members.extend(others.iter().take(k - 1).map(|&(_, i)| i));
            members.resize(k, c);
            Ok(members)
        })
        .collect()
}

/// Subtracts the center's full feature vector from every member row; the φ
/// difference is wrapped into (−π, π].
pub fn normalize_group(features: &[[f64; FEATURE_DIM]], center: &[f64; FEATURE_DIM]) -> Vec<[f64; FEATURE_DIM]> {
    features
        .iter()
        .map(|row| std::array::from_fn(|j| if j == 1 { wrap_phi(row[j] - center[j]) } else { row[j] - center[j] }))
        .collect()
}

/// Fixed per-channel multipliers applied to normalized features before the
/// group MLP, bringing angular offsets (typically a few hundredths) and the
/// mass difference to order one alongside the log-momentum channels.
pub const FEATURE_SCALE: [f64; FEATURE_DIM] = [10.0, 10.0, 5.0, 1.0, 1.0, 1.0, 1.0, 10.0];

/// Sum of member four-vectors, each distinct particle counted once.
pub fn group_four_vector(jet: &JetRecord, members: &[usize]) -> Result<FourVector> {
    let mut seen: Vec<usize> = Vec::with_capacity(members.len());
    let mut total = FourVector::default();
    for &m in members {
        let p = jet.particles.get(m).ok_or_else(|| Error::Config(format!("member {m} out of {}", jet.len())))?;
        if !seen.contains(&m) {
            seen.push(m);
            total = total + p.four_vector();
        }
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupToken {
    pub center_index: usize,
    pub member_indices: Vec<usize>,
    pub normalized_features: Vec<[f64; FEATURE_DIM]>,
    pub center_coords: [f64; 2],
    pub group_four_vector: FourVector,
    /// Filled by [`GroupEncoder::embed`]; empty otherwise.
    pub embedding: Vec<f64>,
}

/// Geometry of a tokenized jet: everything except the learned embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedJet {
    pub tokens: Vec<GroupToken>,
}

impl TokenizedJet {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn center_coords(&self) -> Vec<[f64; 2]> {
        self.tokens.iter().map(|t| t.center_coords).collect()
    }

    pub fn four_vectors(&self) -> Vec<FourVector> {
        self.tokens.iter().map(|t| t.group_four_vector).collect()
    }

    /// All normalized member rows stacked as a `(c·k) × 8` matrix.
    pub fn stacked_features(&self) -> Tensor {
        let rows: Vec<f64> =
            self.tokens.iter().flat_map(|t| t.normalized_features.iter().flat_map(|r| r.iter().copied())).collect();
        let n = rows.len() / FEATURE_DIM;
        Tensor::from_vec(n, FEATURE_DIM, rows)
    }
}

/// Groups a jet: token count, farthest point sampling, kNN, normalization
/// and group four-vectors.
pub fn group_jet(jet: &JetRecord, cfg: &TokenizerConfig) -> Result<TokenizedJet> {
    let feats: Vec<[f64; FEATURE_DIM]> = derive_features(jet)?.iter().map(|f| f.to_array()).collect();
    let coords = jet.coords();
    let c = token_count(jet.len(), cfg);
    let centers = farthest_point_sample(&coords, c, start_index(jet, cfg.start_rule))?;
    let groups = knn_group(&coords, &centers, cfg.k)?;
    let tokens = centers
        .iter()
        .zip(groups)
        .map(|(&center, members)| {
            let rows: Vec<[f64; FEATURE_DIM]> = members.iter().map(|&m| feats[m]).collect();
            Ok(GroupToken {
                center_index: center,
                normalized_features: normalize_group(&rows, &feats[center]),
                center_coords: coords[center],
                group_four_vector: group_four_vector(jet, &members)?,
                member_indices: members,
                embedding: Vec::new(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(TokenizedJet { tokens })
}

/// Shared point-wise MLP followed by a max over group members.
#[derive(Clone, Debug)]
pub struct GroupEncoder {
    pub mlp: Mlp,
    pub k: usize,
}

impl GroupEncoder {
    pub fn register(store: &mut ParamStore, rng: &mut Rng, cfg: &TokenizerConfig) -> Self {
        Self { mlp: Mlp::register(store, rng, "tokenizer.mlp", &cfg.layer_widths()), k: cfg.k }
    }

    pub fn out_dim(&self) -> usize {
        self.mlp.layers.last().map_or(FEATURE_DIM, |l| l.fan_out)
    }

    /// Encodes `groups` stacked groups of `k` rows each into a `groups × d`
    /// matrix.
    pub fn forward(&self, g: &mut Graph, stacked: Var) -> Result<Var> {
        let (rows, cols) = g.shape(stacked);
        if cols != FEATURE_DIM || rows % self.k != 0 || rows == 0 {
            return Err(Error::Shape(format!("group encoder input {rows}x{cols} with k = {}", self.k)));
        }
        let scale = g.constant(Tensor::row_vector(FEATURE_SCALE.to_vec()));
        let x = g.mul_row(stacked, scale)?;
        let h = self.mlp.forward(g, x)?;
        let pooled: Vec<Var> = (0..rows / self.k)
            .map(|t| {
                let idx: Vec<usize> = (t * self.k..(t + 1) * self.k).collect();
                let grp = g.select_rows(h, &idx)?;
                Ok(g.max_rows(grp))
            })
            .collect::<Result<_>>()?;
        g.concat_rows(&pooled)
    }

    /// Token embeddings of a grouped jet as a graph node.
    pub fn embed_graph(&self, g: &mut Graph, jet: &TokenizedJet) -> Result<Var> {
        let x = g.constant(jet.stacked_features());
        self.forward(g, x)
    }

    /// Fills every token's `embedding` field.
    pub fn embed(&self, store: &ParamStore, jet: &mut TokenizedJet) -> Result<()> {
        let mut g = Graph::new(store, None);
        let e = self.embed_graph(&mut g, jet)?;
        let t = g.value(e);
        for (i, tok) in jet.tokens.iter_mut().enumerate() {
            tok.embedding = t.row(i).to_vec();
        }
        Ok(())
    }
}

/// Full tokenization including embeddings.
pub fn tokenize(jet: &JetRecord, cfg: &TokenizerConfig, encoder: &GroupEncoder, store: &ParamStore) -> Result<TokenizedJet> {
    let mut t = group_jet(jet, cfg)?;
    encoder.embed(store, &mut t)?;
    Ok(t)
}
