//! Linear classifiers on fixed embeddings, fitted by damped Newton
//! iterations to a gradient-norm tolerance.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const PROBE_TOLERANCE: f64 = 1e-6;
const MAX_NEWTON_ITERS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeLoss {
    /// Multinomial logistic regression.
    Logistic,
    /// One-vs-rest squared hinge (linear SVM).
    SquaredHinge,
}

impl std::str::FromStr for ProbeLoss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(Self::Logistic),
            "squared_hinge" => Ok(Self::SquaredHinge),
            _ => Err(Error::Config(format!("unknown probe loss {s:?} (expected logistic or squared_hinge)"))),
        }
    }
}

impl std::fmt::Display for ProbeLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Logistic => "logistic",
            Self::SquaredHinge => "squared_hinge",
        })
    }
}

/// A fitted linear model over standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `classes × (dim + 1)`, bias last.
    pub weights: Vec<Vec<f64>>,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl LinearClassifier {
    fn features(&self, x: &[f64]) -> Vec<f64> {
        let mut z: Vec<f64> = x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect();
        z.push(1.0);
        z
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let z = self.features(x);
        self.weights.iter().map(|w| w.iter().zip(&z).map(|(a, b)| a * b).sum()).collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.scores(x))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn standardize(x: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = x[0].len();
    let n = x.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let scale = (0..d)
        .map(|j| {
            let v = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v > 1e-24 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

/// Fits a linear classifier with L2 penalty `reg` on the weights (not the
/// biases). `num_classes` fixes the output width.
pub fn fit_linear(x: &[Vec<f64>], y: &[usize], num_classes: usize, reg: f64, loss: ProbeLoss) -> Result<LinearClassifier> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Shape(format!("{} embeddings for {} labels", x.len(), y.len())));
    }
    let mut present: Vec<usize> = y.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::Config(format!("linear probe needs at least 2 classes in the training labels, found {}", present.len())));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= num_classes) {
        return Err(Error::Config(format!("label {bad} out of range for {num_classes} classes")));
    }
    let (mean, scale) = standardize(x);
    let mut clf = LinearClassifier { mean, scale, weights: Vec::new(), iterations: 0, grad_norm: 0.0 };
    let z: Vec<Vec<f64>> = x.iter().map(|r| clf.features(r)).collect();
    match loss {
        ProbeLoss::Logistic => fit_logistic(&mut clf, &z, y, num_classes, reg),
        ProbeLoss::SquaredHinge => fit_hinge(&mut clf, &z, y, num_classes, reg),
    }
    Ok(clf)
}

fn penalty_mask(p: usize) -> impl Fn(usize) -> f64 {
    move |i| if i + 1 == p { 0.0 } else { 1.0 }
}

fn fit_logistic(clf: &mut LinearClassifier, z: &[Vec<f64>], y: &[usize], k: usize, reg: f64) {
    let p = z[0].len();
    let n = z.len() as f64;
    let dim = k * p;
    let pen = penalty_mask(p);
    let objective = |w: &DVector<f64>| -> f64 {
        let mut total = 0.0;
        for (zi, &yi) in z.iter().zip(y) {
            let s: Vec<f64> = (0..k).map(|c| (0..p).map(|j| w[c * p + j] * zi[j]).sum()).collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - s[yi];
        }
        let r: f64 = (0..dim).map(|i| pen(i % p) * w[i] * w[i]).sum();
        total / n + 0.5 * reg * r
    };
    let mut w = DVector::zeros(dim);
    for it in 0..MAX_NEWTON_ITERS {
        let mut g = DVector::zeros(dim);
        let mut h = DMatrix::zeros(dim, dim);
        for (zi, &yi) in z.iter().zip(y) {
            let s: Vec<f64> = (0..k).map(|c| (0..p).map(|j| w[c * p + j] * zi[j]).sum()).collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let zsum: f64 = e.iter().sum();
            let prob: Vec<f64> = e.iter().map(|v| v / zsum).collect();
            for c in 0..k {
                let r = prob[c] - if c == yi { 1.0 } else { 0.0 };
                for j in 0..p {
                    g[c * p + j] += r * zi[j] / n;
                }
                for c2 in 0..k {
                    let coef = prob[c] * (if c == c2 { 1.0 } else { 0.0 } - prob[c2]) / n;
                    if coef == 0.0 {
                        continue;
                    }
                    for a in 0..p {
                        let ca = coef * zi[a];
                        for b in 0..p {
                            h[(c * p + a, c2 * p + b)] += ca * zi[b];
                        }
                    }
                }
            }
        }
        for i in 0..dim {
            g[i] += reg * pen(i % p) * w[i];
            // The softmax Hessian is singular along the all-classes direction;
            // a tiny ridge keeps the solve well posed.
            h[(i, i)] += reg * pen(i % p) + 1e-10;
        }
        let gn = g.norm();
        clf.iterations = it;
        clf.grad_norm = gn;
        if gn < PROBE_TOLERANCE {
            break;
        }
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&g),
            None => g.clone(),
        };
        let f0 = objective(&w);
        let slope = g.dot(&step);
        let mut t = 1.0;
        loop {
            let cand = &w - t * &step;
            if objective(&cand) <= f0 - 1e-4 * t * slope || t < 1e-10 {
                w = cand;
                break;
            }
            t *= 0.5;
        }
    }
    clf.weights = (0..k).map(|c| (0..p).map(|j| w[c * p + j]).collect()).collect();
}

fn fit_hinge(clf: &mut LinearClassifier, z: &[Vec<f64>], y: &[usize], k: usize, reg: f64) {
    let p = z[0].len();
    let n = z.len() as f64;
    let pen = penalty_mask(p);
    let mut weights = Vec::with_capacity(k);
    let mut worst: f64 = 0.0;
    let mut iters = 0;
    for c in 0..k {
        let t: Vec<f64> = y.iter().map(|&yi| if yi == c { 1.0 } else { -1.0 }).collect();
        let objective = |w: &DVector<f64>| -> f64 {
            let mut s = 0.0;
            for (zi, ti) in z.iter().zip(&t) {
                let m = 1.0 - ti * (0..p).map(|j| w[j] * zi[j]).sum::<f64>();
                if m > 0.0 {
                    s += m * m;
                }
            }
            s / n + 0.5 * reg * (0..p).map(|i| pen(i) * w[i] * w[i]).sum::<f64>()
        };
        let mut w = DVector::zeros(p);
        let mut gn = f64::INFINITY;
        for it in 0..MAX_NEWTON_ITERS {
            let mut g = DVector::zeros(p);
            let mut h = DMatrix::zeros(p, p);
            for (zi, ti) in z.iter().zip(&t) {
                let m = 1.0 - ti * (0..p).map(|j| w[j] * zi[j]).sum::<f64>();
                if m > 0.0 {
                    for a in 0..p {
                        g[a] += -2.0 * m * ti * zi[a] / n;
                        for b in 0..p {
                            h[(a, b)] += 2.0 * zi[a] * zi[b] / n;
                        }
                    }
                }
            }
            for i in 0..p {
                g[i] += reg * pen(i) * w[i];
                h[(i, i)] += reg * pen(i) + 1e-10;
            }
            gn = g.norm();
            iters = iters.max(it);
            if gn < PROBE_TOLERANCE {
                break;
            }
            let step = h.cholesky().map_or_else(|| g.clone(), |ch| ch.solve(&g));
            let f0 = objective(&w);
            let slope = g.dot(&step);
            let mut s = 1.0;
            loop {
                let cand = &w - s * &step;
                if objective(&cand) <= f0 - 1e-4 * s * slope || s < 1e-10 {
                    w = cand;
                    break;
                }
                s *= 0.5;
            }
        }
        worst = worst.max(gn);
        weights.push(w.iter().copied().collect());
    }
    clf.weights = weights;
    clf.iterations = iters;
    clf.grad_norm = worst;
}
