//! Exact t-SNE (no tree approximation) for projecting embeddings to 2-D.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const ENTROPY_TOLERANCE: f64 = 1e-5;
pub const MAX_BISECTION_STEPS: usize = 50;
/// Largest allowed rise between recorded KL values once exaggeration is over.
pub const KL_RISE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    /// Upper bound; the effective value is `min(perplexity, ⌊(n-1)/3⌋)`.
    pub perplexity: f64,
    pub iterations: usize,
    pub exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub final_momentum: f64,
    pub record_every: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            exaggeration: 12.0,
            exaggeration_iterations: 250,
            learning_rate: 200.0,
            momentum: 0.5,
            final_momentum: 0.8,
            record_every: 50,
            seed: 0,
        }
    }
}

pub fn effective_perplexity(requested: f64, n: usize) -> f64 {
    requested.min(((n.saturating_sub(1)) / 3) as f64)
}

fn squared_distances(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

/// Input-space affinities.
#[derive(Debug, Clone)]
pub struct Affinities {
    pub n: usize,
    /// Row-stochastic conditionals `p_{j|i}`, `n × n`, zero diagonal.
    pub conditional: Vec<f64>,
    /// Achieved Shannon entropy (nats) of each conditional row.
    pub row_entropy: Vec<f64>,
    /// `(P_cond + P_condᵀ) / 2n`
    pub joint: Vec<f64>,
}

/// Gaussian conditionals with per-row bandwidth found by bisection so each
/// row's entropy is `ln(perplexity)`, then symmetrized.
pub fn conditional_affinities(x: &[Vec<f64>], perplexity: f64) -> Result<Affinities> {
    let n = x.len();
    if n < 4 {
        return Err(Error::Config(format!(
            "t-SNE needs at least 4 points, got {n}"
        )));
    }
    // entropy of a row ranges over [0, ln(n-1)]
    if !(perplexity >= 1.0) || perplexity > (n - 1) as f64 {
        return Err(Error::Config(format!(
            "perplexity {perplexity} outside [1, n-1] for n = {n}"
        )));
    }
    let dist = squared_distances(x);
    let target = perplexity.ln();
    let mut conditional = vec![0.0; n * n];
    let mut row_entropy = vec![0.0; n];
    let mut shifted = vec![0.0; n];
    let mut p = vec![0.0; n];

    for i in 0..n {
        let row = &dist[i * n..(i + 1) * n];
        // shift by the nearest distance; p is invariant and exp() stays bounded
        let d_min = (0..n)
            .filter(|&j| j != i)
            .map(|j| row[j])
            .fold(f64::INFINITY, f64::min);
        for j in 0..n {
            shifted[j] = row[j] - d_min;
        }
        let spread: f64 =
            (0..n).filter(|&j| j != i).map(|j| shifted[j]).sum::<f64>() / (n - 1) as f64;
        let mut beta = if spread > 0.0 { 1.0 / spread } else { 1.0 };
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut entropy = f64::NAN;
        let mut converged = false;
        for _ in 0..MAX_BISECTION_STEPS {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                p[j] = if j == i {
                    0.0
                } else {
                    (-beta * shifted[j]).exp()
                };
                sum += p[j];
                weighted += p[j] * shifted[j];
            }
            entropy = sum.ln() + beta * weighted / sum;
            for v in p.iter_mut() {
                *v /= sum;
            }
            if (entropy - target).abs() < ENTROPY_TOLERANCE {
                converged = true;
                break;
            }
            if entropy > target {
                lo = beta;
                beta = if hi.is_finite() {
                    0.5 * (beta + hi)
                } else {
                    2.0 * beta
                };
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
        }
        if !converged {
            return Err(Error::Bisection {
                row: i,
                entropy,
                target,
            });
        }
        conditional[i * n..(i + 1) * n].copy_from_slice(&p);
        row_entropy[i] = entropy;
    }

    let mut joint = vec![0.0; n * n];
    let denom = 2.0 * n as f64;
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = (conditional[i * n + j] + conditional[j * n + i]) / denom;
        }
    }
    Ok(Affinities {
        n,
        conditional,
        row_entropy,
        joint,
    })
}

/// Student-t kernel `(1 + |y_i - y_j|²)^-1` (zero diagonal) and its sum.
fn student_kernel(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut w = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            w[i * n + j] = v;
            w[j * n + i] = v;
            z += 2.0 * v;
        }
    }
    (w, z)
}

/// `KL(P ‖ Q)` for the low-dimensional layout `y`.
pub fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let n = y.len();
    let (w, z) = student_kernel(y);
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pij = p[i * n + j];
            if i != j && pij > 0.0 {
                kl += pij * (pij * z / w[i * n + j]).ln();
            }
        }
    }
    kl
}

/// `∂KL/∂y_i = 4 Σ_j (p_ij - q_ij)(y_i - y_j)(1 + |y_i - y_j|²)^-1`, with `p`
/// optionally scaled by `exaggeration`.
pub fn kl_gradient(p: &[f64], y: &[[f64; 2]], exaggeration: f64) -> Vec<[f64; 2]> {
    let n = y.len();
    let (w, z) = student_kernel(y);
    let mut grad = vec![[0.0; 2]; n];
    for i in 0..n {
        let mut g = [0.0; 2];
        for j in 0..n {
            if i == j {
                continue;
            }
            let wij = w[i * n + j];
            let coef = (exaggeration * p[i * n + j] - wij / z) * wij;
            g[0] += coef * (y[i][0] - y[j][0]);
            g[1] += coef * (y[i][1] - y[j][1]);
        }
        grad[i] = [4.0 * g[0], 4.0 * g[1]];
    }
    grad
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlRecord {
    pub iteration: usize,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneOutput {
    /// Centered to zero mean per axis.
    pub coords: Vec<[f64; 2]>,
    pub kl_trace: Vec<KlRecord>,
    pub perplexity: f64,
}

/// Gradient descent with momentum and early exaggeration from a seeded
/// `N(0, 1e-4²)` start. KL is recorded every `record_every` iterations; a rise
/// of more than [`KL_RISE_TOLERANCE`] between records after the exaggeration
/// phase aborts the run.
pub fn run_tsne(x: &[Vec<f64>], cfg: &TsneConfig) -> Result<TsneOutput> {
    let n = x.len();
    if cfg.iterations < cfg.exaggeration_iterations || cfg.record_every == 0 {
        return Err(Error::Config(
            "t-SNE iterations must cover the exaggeration phase".into(),
        ));
    }
    let perplexity = effective_perplexity(cfg.perplexity, n);
    if n < 4 || perplexity < 1.0 {
        return Err(Error::Config(format!(
            "t-SNE needs n >= 4 and perplexity in [1, (n-1)/3] (n = {n})"
        )));
    }
    let aff = conditional_affinities(x, perplexity)?;
    let p = aff.joint;

    let mut rng = rng::seeded(cfg.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let mut velocity = vec![[0.0; 2]; n];
    let mut kl_trace: Vec<KlRecord> = Vec::new();

    for iter in 0..cfg.iterations {
        let exaggerating = iter < cfg.exaggeration_iterations;
        let exaggeration = if exaggerating { cfg.exaggeration } else { 1.0 };
        let momentum = if exaggerating {
            cfg.momentum
        } else {
            cfg.final_momentum
        };
        let grad = kl_gradient(&p, &y, exaggeration);
        for ((yi, vi), gi) in y.iter_mut().zip(&mut velocity).zip(&grad) {
            for k in 0..2 {
                vi[k] = momentum * vi[k] - cfg.learning_rate * gi[k];
                yi[k] += vi[k];
            }
        }
        if y.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::TsneNonFinite(iter + 1));
        }
        let done = iter + 1;
        if done % cfg.record_every == 0 {
            let kl = kl_divergence(&p, &y);
            if let Some(prev) = kl_trace.last() {
                if prev.iteration > cfg.exaggeration_iterations && kl > prev.kl + KL_RISE_TOLERANCE
                {
                    return Err(Error::KlIncrease {
                        iteration: done,
                        previous: prev.kl,
                        current: kl,
                    });
                }
            }
            kl_trace.push(KlRecord {
                iteration: done,
                kl,
            });
        }
    }

    for axis in 0..2 {
        let mean = y.iter().map(|v| v[axis]).sum::<f64>() / n as f64;
        y.iter_mut().for_each(|v| v[axis] -= mean);
    }
    Ok(TsneOutput {
        coords: y,
        kl_trace,
        perplexity,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedPoint {
    pub patient_id: String,
    pub y1: f64,
    pub y2: f64,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Embedding2D {
    pub points: Vec<EmbeddedPoint>,
}

impl Embedding2D {
    pub fn new(patient_ids: &[String], labels: &[u8], coords: &[[f64; 2]]) -> Result<Self> {
        if patient_ids.len() != coords.len() || labels.len() != coords.len() {
            return Err(Error::Shape("embedding columns differ in length".into()));
        }
        let points = patient_ids
            .iter()
            .zip(labels)
            .zip(coords)
            .map(|((id, &label), c)| EmbeddedPoint {
                patient_id: id.clone(),
                y1: c[0],
                y2: c[1],
                label,
            })
            .collect();
        Ok(Embedding2D { points })
    }
}

/// Share of points whose nearest neighbour (Euclidean, in `coords`) has the
/// same group.
pub fn nearest_neighbor_purity(coords: &[[f64; 2]], groups: &[u8]) -> f64 {
    let n = coords.len();
    let hits = (0..n)
        .filter(|&i| {
            let nearest = (0..n)
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    let da = (coords[a][0] - coords[i][0]).powi(2)
                        + (coords[a][1] - coords[i][1]).powi(2);
                    let db = (coords[b][0] - coords[i][0]).powi(2)
                        + (coords[b][1] - coords[i][1]).powi(2);
                    da.total_cmp(&db)
                })
                .expect("at least two points");
            groups[nearest] == groups[i]
        })
        .count();
    hits as f64 / n as f64
}
