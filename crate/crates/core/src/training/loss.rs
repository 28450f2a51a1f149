//! Identity cross-entropy and circle loss.

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tape, Var};

pub const CIRCLE_GAMMA: f64 = 32.0;
pub const CIRCLE_MARGIN: f64 = 0.25;

/// Mean softmax cross-entropy over identity logits.
pub fn identity_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircleParams {
    pub gamma: f64,
    pub margin: f64,
}

impl Default for CircleParams {
    fn default() -> Self {
        Self {
            gamma: CIRCLE_GAMMA,
            margin: CIRCLE_MARGIN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircleOutput {
    pub loss: Var,
    /// Anchors with at least one positive and one negative.
    pub valid_anchors: usize,
    /// Set when no anchor was valid and the loss is a constant zero.
    pub no_pairs: bool,
}

fn log_sum_exp(v: &[f64]) -> (f64, Vec<f64>) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    (max + s.ln(), e.into_iter().map(|x| x / s).collect())
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Scalar circle loss of one anchor from its positive and negative
/// similarities, with gradients with respect to each similarity.
pub fn circle_anchor(sp: &[f64], sn: &[f64], p: CircleParams) -> (f64, Vec<f64>, Vec<f64>) {
    let (g, m) = (p.gamma, p.margin);
    let mut lp = Vec::with_capacity(sp.len());
    let mut dlp = Vec::with_capacity(sp.len());
    for &s in sp {
        let alpha = (1.0 + m - s).max(0.0);
        let dalpha = if 1.0 + m - s > 0.0 { -1.0 } else { 0.0 };
        let delta = s - (1.0 - m);
        lp.push(-g * alpha * delta);
        dlp.push(-g * (dalpha * delta + alpha));
    }
    let mut ln = Vec::with_capacity(sn.len());
    let mut dln = Vec::with_capacity(sn.len());
    for &s in sn {
        let alpha = (s + m).max(0.0);
        let dalpha = if s + m > 0.0 { 1.0 } else { 0.0 };
        let delta = s - m;
        ln.push(g * alpha * delta);
        dln.push(g * (dalpha * delta + alpha));
    }
    let (a, wp) = log_sum_exp(&lp);
    let (b, wn) = log_sum_exp(&ln);
    let z = a + b;
    let outer = sigmoid(z);
    let gp = wp.iter().zip(&dlp).map(|(w, d)| outer * w * d).collect();
    let gn = wn.iter().zip(&dln).map(|(w, d)| outer * w * d).collect();
    (softplus(z), gp, gn)
}

/// Circle loss over within-batch cosine similarities of `embeddings [n, d]`
/// (normalized internally), averaged over anchors with valid pairs.
pub fn circle_loss(tape: &mut Tape, embeddings: Var, labels: &[usize], params: CircleParams) -> Result<CircleOutput> {
    let shape = tape.shape(embeddings).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Dimension {
            op: "circle_loss",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    let (n, d) = (shape[0], shape[1]);
    let z = tape.l2_normalize(embeddings)?;
    let e = tape.data(z).to_vec();
    let dot = |a: usize, b: usize| -> f64 { (0..d).map(|t| e[a * d + t] * e[b * d + t]).sum() };
    let mut sim = vec![0.0; n * n];
    for a in 0..n {
        for b in a..n {
            let s = dot(a, b);
            sim[a * n + b] = s;
            sim[b * n + a] = s;
        }
    }
    let mut dsim = vec![0.0; n * n];
    let mut total = 0.0;
    let mut valid = 0;
    for a in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&j| j != a && labels[j] == labels[a]).collect();
        let neg: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[a]).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let sp: Vec<f64> = pos.iter().map(|&j| sim[a * n + j]).collect();
        let sn: Vec<f64> = neg.iter().map(|&j| sim[a * n + j]).collect();
        let (l, gp, gn) = circle_anchor(&sp, &sn, params);
        total += l;
        valid += 1;
        for (&j, g) in pos.iter().zip(gp).chain(neg.iter().zip(gn)) {
            dsim[a * n + j] += g;
        }
    }
    if valid == 0 {
        let loss = tape.scalar_with_grad(z, 0.0, vec![0.0; n * d]);
        return Ok(CircleOutput {
            loss,
            valid_anchors: 0,
            no_pairs: true,
        });
    }
    let scale = 1.0 / valid as f64;
    let mut dz = vec![0.0; n * d];
    for a in 0..n {
        for j in 0..n {
            let g = dsim[a * n + j] * scale;
            if g == 0.0 {
                continue;
            }
            for t in 0..d {
                dz[a * d + t] += g * e[j * d + t];
                dz[j * d + t] += g * e[a * d + t];
            }
        }
    }
    let loss = tape.scalar_with_grad(z, total * scale, dz);
    Ok(CircleOutput {
        loss,
        valid_anchors: valid,
        no_pairs: false,
    })
}
