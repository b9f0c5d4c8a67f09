//! Scalar reference implementations and finite-difference helpers shared by
//! the integration tests. Nothing here touches the autograd graph except
//! the gradient checker, which only reads values.
#![allow(dead_code)]

use jetjepa::autograd::{Graph, Tensor, Var};
use jetjepa::params::ParamStore;

pub type M = Vec<Vec<f64>>;

pub fn rows(t: &Tensor) -> M {
    (0..t.rows).map(|r| t.row(r).to_vec()).collect()
}

pub fn param(store: &ParamStore, name: &str) -> M {
    let id = store.id(name).unwrap_or_else(|| panic!("missing parameter {name}"));
    rows(&store.tensor(id))
}

pub fn matmul(a: &M, b: &M) -> M {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| {
                    let mut s = 0.0;
                    for (p, &x) in row.iter().enumerate() {
                        s += x * b[p][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn linear(x: &M, store: &ParamStore, name: &str) -> M {
    let w = param(store, &format!("{name}.weight"));
    let b = param(store, &format!("{name}.bias"));
    let mut y = matmul(x, &w);
    for row in &mut y {
        for (v, bb) in row.iter_mut().zip(&b[0]) {
            *v += bb;
        }
    }
    y
}

pub fn mlp(x: &M, store: &ParamStore, name: &str) -> M {
    let mut h = x.clone();
    let mut i = 0;
    while store.id(&format!("{name}.{i}.weight")).is_some() {
        if i > 0 {
            h = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
        }
        h = linear(&h, store, &format!("{name}.{i}"));
        i += 1;
    }
    h
}

pub fn standardize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
}

pub fn layer_norm(x: &M, store: &ParamStore, name: &str) -> M {
    let g = param(store, &format!("{name}.gamma"));
    let b = param(store, &format!("{name}.beta"));
    x.iter()
        .map(|r| standardize(r).iter().enumerate().map(|(j, v)| v * g[0][j] + b[0][j]).collect())
        .collect()
}

fn cols(x: &M, start: usize, len: usize) -> M {
    x.iter().map(|r| r[start..start + len].to_vec()).collect()
}

/// Plain scaled dot-product attention with an optional additive bias
/// `bias(head, i, j)`.
pub fn attention(q: &M, k: &M, v: &M, heads: usize, bias: &dyn Fn(usize, usize, usize) -> f64) -> M {
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        for i in 0..q.len() {
            let mut logits: Vec<f64> = (0..k.len())
                .map(|j| {
                    let mut s = 0.0;
                    for t in 0..dh {
                        s += q[i][h * dh + t] * k[j][h * dh + t];
                    }
                    s / (dh as f64).sqrt() + bias(h, i, j)
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in &mut logits {
                *l = (*l - m).exp();
                z += *l;
            }
            for j in 0..k.len() {
                for t in 0..dh {
                    out[i][h * dh + t] += logits[j] / z * v[j][h * dh + t];
                }
            }
        }
    }
    out
}

fn feed_forward(x: &M, store: &ParamStore, name: &str) -> M {
    let h = layer_norm(x, store, &format!("{name}.norm2"));
    let h = linear(&h, store, &format!("{name}.fc1"));
    let h: M = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    add(x, &linear(&h, store, &format!("{name}.fc2")))
}

pub fn block(x: &M, store: &ParamStore, name: &str, heads: usize, bias: &dyn Fn(usize, usize, usize) -> f64) -> M {
    let d = x[0].len();
    let h = layer_norm(x, store, &format!("{name}.norm1"));
    let qkv = linear(&h, store, &format!("{name}.qkv"));
    let a = attention(&cols(&qkv, 0, d), &cols(&qkv, d, d), &cols(&qkv, 2 * d, d), heads, bias);
    let x = add(x, &linear(&a, store, &format!("{name}.proj")));
    feed_forward(&x, store, &format!("{name}"))
}

/// ln-transformed pair channels as in the physics bias.
pub fn log_pair(f: [f64; 4]) -> Vec<f64> {
    let e = 1e-8;
    vec![(f[0] + e).ln(), (f[1] + e).ln(), (f[2] + e).ln(), f[3].max(e).ln()]
}

/// Per-pair head biases `[pair][head]` from the scalar MLP.
pub fn pair_bias(store: &ParamStore, pairs: &[[f64; 4]]) -> M {
    let x: M = pairs.iter().map(|&p| log_pair(p)).collect();
    mlp(&x, store, "bias_embed")
}

/// Encoder stack `prefix` applied to tokens that already carry positions.
pub fn encoder(x: &M, store: &ParamStore, prefix: &str, depth: usize, heads: usize, bias: Option<&M>) -> M {
    let c = x.len();
    let regs = store.id(&format!("{prefix}.registers")).map(|_| param(store, &format!("{prefix}.registers"))).unwrap_or_default();
    let r = regs.len();
    let mut h: M = regs.into_iter().chain(x.iter().cloned()).collect();
    let b = |hd: usize, i: usize, j: usize| match bias {
        Some(b) if i >= r && j >= r => b[(i - r) * c + (j - r)][hd],
        _ => 0.0,
    };
    for l in 0..depth {
        h = block(&h, store, &format!("{prefix}.blocks.{l}"), heads, &b);
    }
    h[r..].to_vec()
}

/// Positional-embedder input for raw coordinates.
pub fn scaled(coords: &M) -> M {
    coords.iter().map(|r| r.iter().map(|v| v / jetjepa::backbone::POSITION_SCALE).collect()).collect()
}

pub fn predictor(store: &ParamStore, context: &M, ctx_coords: &M, tgt_coords: &M, depth: usize, heads: usize) -> M {
    let ctx = add(&linear(context, store, "predictor.proj_in"), &mlp(&scaled(ctx_coords), store, "predictor.pos_embed"));
    let token = param(store, "predictor.mask_token");
    let tpos = mlp(&scaled(tgt_coords), store, "predictor.pos_embed");
    let masks: M = tpos.iter().map(|p| p.iter().zip(&token[0]).map(|(a, b)| a + b).collect()).collect();
    let mut h: M = ctx.into_iter().chain(masks).collect();
    for l in 0..depth {
        h = block(&h, store, &format!("predictor.blocks.{l}"), heads, &|_, _, _| 0.0);
    }
    let h = layer_norm(&h, store, "predictor.norm");
    linear(&h[context.len()..].to_vec(), store, "predictor.proj_out")
}

pub fn class_head(store: &ParamStore, tokens: &M, heads: usize, blocks: usize) -> Vec<f64> {
    let d = tokens[0].len();
    let mut cls = param(store, "head.cls_token");
    for b in 0..blocks {
        let name = format!("head.blocks.{b}");
        let z: M = cls.iter().cloned().chain(tokens.iter().cloned()).collect();
        let zn = layer_norm(&z, store, &format!("{name}.norm1"));
        let q = linear(&zn[..1].to_vec(), store, &format!("{name}.q"));
        let kv = linear(&zn, store, &format!("{name}.kv"));
        let a = attention(&q, &cols(&kv, 0, d), &cols(&kv, d, d), heads, &|_, _, _| 0.0);
        cls = add(&cls, &linear(&a, store, &format!("{name}.proj")));
        cls = feed_forward(&cls, store, &name);
    }
    let h = layer_norm(&cls, store, "head.norm");
    mlp(&h, store, "head.mlp")[0].clone()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn flat(m: &M) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

/// Compares reverse-mode parameter gradients of the scalar built by `f`
/// against central differences at the scalar offsets `probes`; returns the
/// worst relative error.
pub fn param_grad_error<F>(store: &ParamStore, probes: &[usize], f: F) -> f64
where
    F: Fn(&mut Graph) -> Var,
{
    let analytic = {
        let mut g = Graph::new(store, None);
        let out = f(&mut g);
        g.param_gradients(out)
    };
    let eval = |s: &ParamStore| {
        let mut g = Graph::new(s, None);
        let out = f(&mut g);
        g.value(out).item()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut s = store.clone();
    for &i in probes {
        let orig = s.data()[i];
        s.data_mut()[i] = orig + h;
        let up = eval(&s);
        s.data_mut()[i] = orig - h;
        let down = eval(&s);
        s.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-4));
        worst = worst.max(err);
    }
    worst
}

/// Scalar offsets of up to `n` parameters under `prefix`, spread evenly.
pub fn probe_offsets(store: &ParamStore, prefix: &str, n: usize) -> Vec<usize> {
    let all: Vec<usize> = store
        .entries()
        .iter()
        .filter(|e| e.name.starts_with(prefix))
        .flat_map(|e| e.offset..e.offset + e.rows * e.cols)
        .collect();
    if all.len() <= n {
        return all;
    }
    (0..n).map(|i| all[i * all.len() / n + (i * 7919) % (all.len() / n).max(1)]).collect()
}

/// A scalar loss touching every output entry with distinct weights.
pub fn probe_loss(g: &mut Graph, out: Var, seed: u64) -> Var {
    let (r, c) = g.shape(out);
    let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let target: Vec<f64> = (0..r * c)
        .map(|_| {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((x >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
        })
        .collect();
    let t = g.constant(Tensor::from_vec(r, c, target));
    let l = g.smooth_l1(out, t, 100.0).unwrap();
    g.scale(l, 100.0)
}
