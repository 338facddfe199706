//! Single-layer GRU encoder with a linear classification head.
//!
//! Cell:
//!
//! ```text
//! z_t = σ(W_z x_t + U_z h_{t-1} + b_z)
//! r_t = σ(W_r x_t + U_r h_{t-1} + b_r)
//! ĥ_t = tanh(W_h x_t + U_h (r_t ⊙ h_{t-1}) + b_h)
//! h_t = (1 - z_t) ⊙ h_{t-1} + z_t ⊙ ĥ_t
//! ```
//!
//! `h_0 = 0`, every input row is processed (padding included), and the final
//! hidden state is the patient embedding. The head computes
//! `logit = w · (h_T ⊕ statics) + b`. Matrices are row-major, `hidden × input`
//! for `W_*` and `hidden × hidden` for `U_*`. All arithmetic is `f64`.

use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub hidden_dim: usize,
    pub input_dim: usize,
    pub w_z: Vec<f64>,
    pub w_r: Vec<f64>,
    pub w_h: Vec<f64>,
    pub u_z: Vec<f64>,
    pub u_r: Vec<f64>,
    pub u_h: Vec<f64>,
    pub b_z: Vec<f64>,
    pub b_r: Vec<f64>,
    pub b_h: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// Weights over `embedding ⊕ statics`.
    pub w: Vec<f64>,
    pub b: f64,
}

/// All trainable weights. Gradients use the same type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub gru: GruParams,
    pub head: HeadParams,
}

pub const TENSOR_NAMES: [&str; 11] = [
    "w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h", "head.w", "head.b",
];

impl ModelParams {
    pub fn zeros(hidden_dim: usize, input_dim: usize, static_dim: usize) -> Self {
        let wx = vec![0.0; hidden_dim * input_dim];
        let uh = vec![0.0; hidden_dim * hidden_dim];
        let b = vec![0.0; hidden_dim];
        ModelParams {
            gru: GruParams {
                hidden_dim,
                input_dim,
                w_z: wx.clone(),
                w_r: wx.clone(),
                w_h: wx,
                u_z: uh.clone(),
                u_r: uh.clone(),
                u_h: uh,
                b_z: b.clone(),
                b_r: b.clone(),
                b_h: b,
            },
            head: HeadParams {
                w: vec![0.0; hidden_dim + static_dim],
                b: 0.0,
            },
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(hidden_dim: usize, input_dim: usize, static_dim: usize, seed: u64) -> Result<Self> {
        if hidden_dim == 0 || input_dim == 0 {
            return Err(Error::Config("GRU dimensions must be at least 1".into()));
        }
        let mut p = Self::zeros(hidden_dim, input_dim, static_dim);
        let mut rng = rng::seeded(seed);
        let mut fill = |dst: &mut [f64], fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for v in dst {
                *v = dist.sample(&mut rng);
            }
        };
        let g = &mut p.gru;
        fill(&mut g.w_z, input_dim, hidden_dim);
        fill(&mut g.w_r, input_dim, hidden_dim);
        fill(&mut g.w_h, input_dim, hidden_dim);
        fill(&mut g.u_z, hidden_dim, hidden_dim);
        fill(&mut g.u_r, hidden_dim, hidden_dim);
        fill(&mut g.u_h, hidden_dim, hidden_dim);
        let head_in = p.head.w.len();
        fill(&mut p.head.w, head_in, 1);
        Ok(p)
    }

    pub fn hidden_dim(&self) -> usize {
        self.gru.hidden_dim
    }

    pub fn input_dim(&self) -> usize {
        self.gru.input_dim
    }

    pub fn static_dim(&self) -> usize {
        self.head.w.len() - self.gru.hidden_dim
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.hidden_dim(), self.input_dim(), self.static_dim())
    }

    /// Parameter tensors in [`TENSOR_NAMES`] order.
    pub fn tensors(&self) -> [&[f64]; 11] {
        let g = &self.gru;
        [
            &g.w_z,
            &g.w_r,
            &g.w_h,
            &g.u_z,
            &g.u_r,
            &g.u_h,
            &g.b_z,
            &g.b_r,
            &g.b_h,
            &self.head.w,
            std::slice::from_ref(&self.head.b),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 11] {
        let g = &mut self.gru;
        [
            &mut g.w_z,
            &mut g.w_r,
            &mut g.w_h,
            &mut g.u_z,
            &mut g.u_r,
            &mut g.u_h,
            &mut g.b_z,
            &mut g.b_r,
            &mut g.b_h,
            &mut self.head.w,
            std::slice::from_mut(&mut self.head.b),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn predict_proba(logit: f64) -> f64 {
    sigmoid(logit)
}

/// Binary cross-entropy on a logit, `max(l, 0) - l·y + ln(1 + e^{-|l|})`.
pub fn bce_loss(logit: f64, label: u8) -> f64 {
    logit.max(0.0) - logit * f64::from(label) + (-logit.abs()).exp().ln_1p()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateActivations {
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub candidate: Vec<f64>,
}

/// One step written into caller-provided buffers.
fn cell_step(
    p: &GruParams,
    x: &[f64],
    h_prev: &[f64],
    z: &mut [f64],
    r: &mut [f64],
    cand: &mut [f64],
    h: &mut [f64],
    rh: &mut [f64],
) {
    let (hd, id) = (p.hidden_dim, p.input_dim);
    z.copy_from_slice(&p.b_z);
    r.copy_from_slice(&p.b_r);
    cand.copy_from_slice(&p.b_h);
    // inputs are mostly zero (padding, unmeasured markers)
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        for i in 0..hd {
            z[i] += p.w_z[i * id + j] * xj;
            r[i] += p.w_r[i * id + j] * xj;
            cand[i] += p.w_h[i * id + j] * xj;
        }
    }
    for i in 0..hd {
        let row = i * hd..(i + 1) * hd;
        z[i] = sigmoid(z[i] + dot(&p.u_z[row.clone()], h_prev));
        r[i] = sigmoid(r[i] + dot(&p.u_r[row], h_prev));
    }
    for k in 0..hd {
        rh[k] = r[k] * h_prev[k];
    }
    for i in 0..hd {
        cand[i] = (cand[i] + dot(&p.u_h[i * hd..(i + 1) * hd], rh)).tanh();
        h[i] = (1.0 - z[i]) * h_prev[i] + z[i] * cand[i];
    }
}

pub fn cell_forward(
    x: &[f64],
    h_prev: &[f64],
    p: &GruParams,
) -> Result<(Vec<f64>, GateActivations)> {
    let hd = p.hidden_dim;
    if x.len() != p.input_dim || h_prev.len() != hd {
        return Err(Error::Shape(format!(
            "cell expects input {} and hidden {}, got {} and {}",
            p.input_dim,
            hd,
            x.len(),
            h_prev.len()
        )));
    }
    let mut gates = GateActivations {
        z: vec![0.0; hd],
        r: vec![0.0; hd],
        candidate: vec![0.0; hd],
    };
    let mut h = vec![0.0; hd];
    let mut rh = vec![0.0; hd];
    cell_step(
        p,
        x,
        h_prev,
        &mut gates.z,
        &mut gates.r,
        &mut gates.candidate,
        &mut h,
        &mut rh,
    );
    if !h.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("GRU hidden state".into()));
    }
    Ok((h, gates))
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub steps: usize,
    pub hidden_dim: usize,
    pub input_dim: usize,
    /// `steps × input`
    pub inputs: Vec<f64>,
    /// `(steps + 1) × hidden`, row 0 is `h_0 = 0`.
    pub hidden: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub candidate: Vec<f64>,
    /// `h_T ⊕ statics`
    pub features: Vec<f64>,
    pub logit: f64,
}

impl ForwardCache {
    pub fn embedding(&self) -> &[f64] {
        let hd = self.hidden_dim;
        &self.hidden[self.steps * hd..]
    }

    pub fn hidden_at(&self, t: usize) -> &[f64] {
        let hd = self.hidden_dim;
        &self.hidden[t * hd..(t + 1) * hd]
    }
}

fn check_input(p: &ModelParams, inputs: &[f64], statics: &[f64]) -> Result<usize> {
    let id = p.input_dim();
    if !inputs.len().is_multiple_of(id) {
        return Err(Error::Shape(format!(
            "input length {} is not a multiple of input_dim {id}",
            inputs.len()
        )));
    }
    if statics.len() != p.static_dim() {
        return Err(Error::Shape(format!(
            "expected {} static features, got {}",
            p.static_dim(),
            statics.len()
        )));
    }
    Ok(inputs.len() / id)
}

/// Runs the encoder over `inputs` (row-major `steps × input_dim`) and the head.
pub fn forward(p: &ModelParams, inputs: &[f64], statics: &[f64]) -> Result<(f64, ForwardCache)> {
    let steps = check_input(p, inputs, statics)?;
    let (hd, id) = (p.hidden_dim(), p.input_dim());
    let mut hidden = vec![0.0; (steps + 1) * hd];
    let mut z = vec![0.0; steps * hd];
    let mut r = vec![0.0; steps * hd];
    let mut cand = vec![0.0; steps * hd];
    let mut rh = vec![0.0; hd];
    for t in 0..steps {
        let (prev, next) = hidden.split_at_mut((t + 1) * hd);
        let gate = t * hd..(t + 1) * hd;
        cell_step(
            &p.gru,
            &inputs[t * id..(t + 1) * id],
            &prev[t * hd..],
            &mut z[gate.clone()],
            &mut r[gate.clone()],
            &mut cand[gate],
            &mut next[..hd],
            &mut rh,
        );
        if !next[..hd].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("GRU hidden state at step {t}")));
        }
    }
    let mut features = hidden[steps * hd..].to_vec();
    features.extend_from_slice(statics);
    let logit = dot(&p.head.w, &features) + p.head.b;
    if !logit.is_finite() {
        return Err(Error::NonFinite("logit".into()));
    }
    let cache = ForwardCache {
        steps,
        hidden_dim: hd,
        input_dim: id,
        inputs: inputs.to_vec(),
        hidden,
        z,
        r,
        candidate: cand,
        features,
        logit,
    };
    Ok((logit, cache))
}

/// Final hidden state only.
pub fn embed(p: &ModelParams, inputs: &[f64]) -> Result<Vec<f64>> {
    let statics = vec![0.0; p.static_dim()];
    let (_, cache) = forward(p, inputs, &statics)?;
    Ok(cache.embedding().to_vec())
}

/// Exact gradient of [`bce_loss`] with respect to every parameter, by
/// reverse-time recursion through the cached activations.
pub fn backward(cache: &ForwardCache, label: u8, p: &ModelParams) -> ModelParams {
    let (hd, id) = (cache.hidden_dim, cache.input_dim);
    let mut g = p.zeros_like();
    let dlogit = predict_proba(cache.logit) - f64::from(label);
    for (gw, f) in g.head.w.iter_mut().zip(&cache.features) {
        *gw = dlogit * f;
    }
    g.head.b = dlogit;

    let mut dh: Vec<f64> = p.head.w[..hd].iter().map(|w| w * dlogit).collect();
    let mut dh_prev = vec![0.0; hd];
    let mut da_z = vec![0.0; hd];
    let mut da_r = vec![0.0; hd];
    let mut da_h = vec![0.0; hd];
    let mut d_rh = vec![0.0; hd];
    let mut rh = vec![0.0; hd];
    let gp = &p.gru;
    let gg = &mut g.gru;

    for t in (0..cache.steps).rev() {
        let h_prev = cache.hidden_at(t);
        let gate = t * hd..(t + 1) * hd;
        let z = &cache.z[gate.clone()];
        let r = &cache.r[gate.clone()];
        let c = &cache.candidate[gate];
        let x = &cache.inputs[t * id..(t + 1) * id];

        for i in 0..hd {
            da_h[i] = dh[i] * z[i] * (1.0 - c[i] * c[i]);
            da_z[i] = dh[i] * (c[i] - h_prev[i]) * z[i] * (1.0 - z[i]);
            dh_prev[i] = dh[i] * (1.0 - z[i]);
            rh[i] = r[i] * h_prev[i];
        }
        d_rh.fill(0.0);
        for i in 0..hd {
            axpy(da_h[i], &gp.u_h[i * hd..(i + 1) * hd], &mut d_rh);
        }
        for k in 0..hd {
            da_r[k] = d_rh[k] * h_prev[k] * r[k] * (1.0 - r[k]);
            dh_prev[k] += d_rh[k] * r[k];
        }
        for i in 0..hd {
            let row = i * hd..(i + 1) * hd;
            axpy(da_z[i], &gp.u_z[row.clone()], &mut dh_prev);
            axpy(da_r[i], &gp.u_r[row], &mut dh_prev);
        }

        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            for i in 0..hd {
                gg.w_z[i * id + j] += da_z[i] * xj;
                gg.w_r[i * id + j] += da_r[i] * xj;
                gg.w_h[i * id + j] += da_h[i] * xj;
            }
        }
        let h_prev_nonzero = h_prev.iter().any(|&v| v != 0.0);
        for i in 0..hd {
            let row = i * hd..(i + 1) * hd;
            if h_prev_nonzero {
                axpy(da_z[i], h_prev, &mut gg.u_z[row.clone()]);
                axpy(da_r[i], h_prev, &mut gg.u_r[row.clone()]);
                axpy(da_h[i], &rh, &mut gg.u_h[row]);
            }
            gg.b_z[i] += da_z[i];
            gg.b_r[i] += da_r[i];
            gg.b_h[i] += da_h[i];
        }
        std::mem::swap(&mut dh, &mut dh_prev);
    }
    g
}

/// Loss and gradient for one example.
pub fn loss_and_gradient(
    p: &ModelParams,
    inputs: &[f64],
    statics: &[f64],
    label: u8,
) -> Result<(f64, ModelParams)> {
    let (logit, cache) = forward(p, inputs, statics)?;
    Ok((bce_loss(logit, label), backward(&cache, label, p)))
}
