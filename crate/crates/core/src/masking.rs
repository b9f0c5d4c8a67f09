//! Context/target split of a tokenized jet.
//!
//! Targets are `M` possibly-overlapping blocks; the context is sampled
//! independently and then stripped of every target token. Under the
//! contiguous strategy blocks are runs in the greedy nearest-neighbour
//! ordering of token centers, so they cover connected (η, φ) regions.

use rand::seq::index;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{Rng, RngSnapshot};
use crate::tokenizer::coord_distance;

const CONTEXT_RETRIES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskStrategy {
    Random,
    Contiguous,
    /// Axis-aligned (η, φ) box with a sampled area fraction and aspect ratio.
    Rectangle,
}

impl std::str::FromStr for MaskStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "contiguous" => Ok(Self::Contiguous),
            "rectangle" => Ok(Self::Rectangle),
            _ => Err(Error::Config(format!("unknown masking strategy {s:?}"))),
        }
    }
}

impl std::fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::Contiguous => "contiguous",
            Self::Rectangle => "rectangle",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskConfig {
    pub num_targets: usize,
    pub target_scale: (f64, f64),
    pub target_aspect: (f64, f64),
    pub context_scale: (f64, f64),
    pub strategy: MaskStrategy,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            num_targets: 1,
            target_scale: (0.15, 0.2),
            target_aspect: (0.75, 1.5),
            context_scale: (0.85, 1.0),
            strategy: MaskStrategy::Contiguous,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, (lo, hi): (f64, f64)| {
            if lo > 0.0 && lo <= hi && hi <= 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("masking.{name} ({lo}, {hi}) must lie within (0, 1]")))
            }
        };
        unit("target_scale", self.target_scale)?;
        unit("context_scale", self.context_scale)?;
        let (a, b) = self.target_aspect;
        if !(a > 0.0 && a <= b && b.is_finite()) {
            return Err(Error::Config(format!("masking.target_aspect ({a}, {b}) invalid")));
        }
        if self.num_targets == 0 {
            return Err(Error::Config("masking.num_targets must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub target_blocks: Vec<Vec<usize>>,
    pub context_indices: Vec<usize>,
    pub strategy: MaskStrategy,
    pub seed_state: RngSnapshot,
}

impl MaskSpec {
    pub fn target_union(&self) -> Vec<usize> {
        let mut u: Vec<usize> = self.target_blocks.iter().flatten().copied().collect();
        u.sort_unstable();
        u.dedup();
        u
    }
}

/// Greedy nearest-neighbour ordering of token centers, starting from the
/// token with the smallest η + φ.
pub fn sequence_tokens(coords: &[[f64; 2]]) -> Vec<usize> {
    let c = coords.len();
    if c == 0 {
        return Vec::new();
    }
    let mut first = 0;
    for i in 1..c {
        if coords[i][0] + coords[i][1] < coords[first][0] + coords[first][1] {
            first = i;
        }
    }
    let mut visited = vec![false; c];
    let mut order = Vec::with_capacity(c);
    let mut cur = first;
    loop {
        visited[cur] = true;
        order.push(cur);
        if order.len() == c {
            break;
        }
        let mut best: Option<(f64, usize)> = None;
        for i in 0..c {
            if visited[i] {
                continue;
            }
            let d = coord_distance(coords[cur], coords[i]);
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        cur = best.expect("unvisited token remains").1;
    }
    order
}

fn block_len(scale: (f64, f64), c: usize, rng: &mut Rng) -> usize {
    let s = if scale.0 == scale.1 { scale.0 } else { rng.gen_range(scale.0..=scale.1) };
    ((s * c as f64).round() as usize).clamp(1, c)
}

fn contiguous_run(order: &[usize], len: usize, rng: &mut Rng) -> Vec<usize> {
    let start = rng.gen_range(0..=order.len() - len);
    order[start..start + len].to_vec()
}

fn random_subset(c: usize, len: usize, rng: &mut Rng) -> Vec<usize> {
    let mut v = index::sample(rng, c, len).into_vec();
    v.sort_unstable();
    v
}

fn rectangle_block(coords: &[[f64; 2]], cfg: &MaskConfig, rng: &mut Rng) -> Vec<usize> {
    let c = coords.len();
    let anchor = rng.gen_range(0..c);
    let s = rng.gen_range(cfg.target_scale.0..=cfg.target_scale.1);
    let r = rng.gen_range(cfg.target_aspect.0..=cfg.target_aspect.1);
    let (mut de, mut dp) = (0.0f64, 0.0f64);
    for p in coords {
        de = de.max((p[0] - coords[anchor][0]).abs());
        dp = dp.max(crate::jetdata::wrap_phi(p[1] - coords[anchor][1]).abs());
    }
    let area = (2.0 * de) * (2.0 * dp) * s;
    let (half_w, half_h) = ((area * r).sqrt() / 2.0, (area / r).sqrt() / 2.0);
    (0..c)
        .filter(|&i| {
            i == anchor
                || ((coords[i][0] - coords[anchor][0]).abs() <= half_w
                    && crate::jetdata::wrap_phi(coords[i][1] - coords[anchor][1]).abs() <= half_h)
        })
        .collect()
}

/// `M` target blocks over `c` tokens.
pub fn sample_target_blocks(
    c: usize,
    order: &[usize],
    coords: &[[f64; 2]],
    cfg: &MaskConfig,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    if c < 2 {
        return Err(Error::Config(format!("masking needs at least 2 tokens, got {c}")));
    }
    Ok((0..cfg.num_targets)
        .map(|_| match cfg.strategy {
            MaskStrategy::Contiguous => {
                let len = block_len(cfg.target_scale, c, rng);
                contiguous_run(order, len, rng)
            }
            MaskStrategy::Random => {
                let len = block_len(cfg.target_scale, c, rng);
                random_subset(c, len, rng)
            }
            MaskStrategy::Rectangle => rectangle_block(coords, cfg, rng),
        })
        .collect())
}

/// Context indices disjoint from every target block; resamples when the
/// overlap removal leaves nothing.
pub fn sample_context(
    c: usize,
    order: &[usize],
    target_blocks: &[Vec<usize>],
    cfg: &MaskConfig,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if c < 2 {
        return Err(Error::Config(format!("masking needs at least 2 tokens, got {c}")));
    }
    let mut is_target = vec![false; c];
    for &t in target_blocks.iter().flatten() {
        is_target[t] = true;
    }
    for _ in 0..CONTEXT_RETRIES {
        let len = block_len(cfg.context_scale, c, rng);
        let candidate = match cfg.strategy {
            MaskStrategy::Contiguous => contiguous_run(order, len, rng),
            MaskStrategy::Random | MaskStrategy::Rectangle => random_subset(c, len, rng),
        };
        let ctx: Vec<usize> = candidate.into_iter().filter(|&i| !is_target[i]).collect();
        if !ctx.is_empty() {
            return Ok(ctx);
        }
    }
    Err(Error::EmptyContext)
}

pub fn sample_masks(coords: &[[f64; 2]], cfg: &MaskConfig, rng: &mut Rng) -> Result<MaskSpec> {
    let c = coords.len();
    if c < 2 {
        return Err(Error::Config(format!("masking needs at least 2 tokens, got {c}")));
    }
    let seed_state = RngSnapshot::capture(rng);
    let order = match cfg.strategy {
        MaskStrategy::Contiguous => sequence_tokens(coords),
        _ => (0..c).collect(),
    };
    let target_blocks = sample_target_blocks(c, &order, coords, cfg, rng)?;
    let context_indices = sample_context(c, &order, &target_blocks, cfg, rng)?;
    Ok(MaskSpec { target_blocks, context_indices, strategy: cfg.strategy, seed_state })
}
