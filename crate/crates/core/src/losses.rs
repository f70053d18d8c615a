//! Identity, triplet, center and heatmap-reconstruction losses.
//!
//! Every loss returns its value (as `f64`) together with the gradient with respect
//! to its input, so the trainer can feed the results straight into the backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Act, Mat, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the reconstruction term.
    pub alpha: f64,
    /// Weight of the center term.
    pub beta: f64,
    pub triplet_margin: f64,
    pub smooth_eps: f64,
    pub center_lr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.0005,
            triplet_margin: 0.3,
            smooth_eps: 0.1,
            center_lr: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: f64, f: &str| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!("losses.{f}"), "must be finite and >= 0"))
            }
        };
        nonneg(self.alpha, "alpha")?;
        nonneg(self.beta, "beta")?;
        nonneg(self.triplet_margin, "triplet_margin")?;
        nonneg(self.center_lr, "center_lr")?;
        if !(0.0..1.0).contains(&self.smooth_eps) {
            return Err(Error::config("losses.smooth_eps", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

fn f<T: Real>(v: T) -> f64 {
    v.to_f64().unwrap()
}

/// Label-smoothed cross entropy: target `1 - eps` on the true class and
/// `eps / (C - 1)` elsewhere, averaged over the batch.
pub fn id_loss<T: Real>(logits: &Mat<T>, labels: &[usize], eps: f64) -> (f64, Mat<T>) {
    let (n, c) = (logits.rows, logits.cols);
    assert_eq!(n, labels.len());
    let off = if c > 1 { eps / (c - 1) as f64 } else { 0.0 };
    let on = if c > 1 { 1.0 - eps } else { 1.0 };
    let mut grad = Mat::zeros(n, c);
    let mut total = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let m = row.iter().map(|&v| f(v)).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| (f(v) - m).exp()).sum();
        let lse = m + z.ln();
        let g = grad.row_mut(i);
        for j in 0..c {
            let t = if j == labels[i] { on } else { off };
            let logp = f(row[j]) - lse;
            total -= t * logp;
            g[j] = T::from_f64c((logp.exp() - t) / n as f64);
        }
    }
    (total / n as f64, grad)
}

fn sq_dists<T: Real>(x: &Mat<T>) -> Vec<f64> {
    let n = x.rows;
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = x.row(i).iter().zip(x.row(j)).map(|(&a, &b)| (f(a) - f(b)).powi(2)).sum();
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

const DIST_FLOOR: f64 = 1e-12;

/// Pairwise Euclidean distances, floored so the gradient exists at zero.
pub fn pairwise_distances<T: Real>(x: &Mat<T>) -> Vec<f64> {
    sq_dists(x).into_iter().map(|s| s.max(DIST_FLOOR).sqrt()).collect()
}

/// Batch-hard triplet loss over Euclidean distances.
pub fn triplet_loss<T: Real>(x: &Mat<T>, labels: &[usize], margin: f64) -> Result<(f64, Mat<T>)> {
    let n = x.rows;
    assert_eq!(n, labels.len());
    let d = pairwise_distances(x);
    let mut grad = Mat::zeros(n, x.cols);
    let mut total = 0.0;
    for a in 0..n {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            if labels[j] == labels[a] {
                if pos.is_none_or(|p| d[a * n + j] > d[a * n + p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|q| d[a * n + j] < d[a * n + q]) {
                neg = Some(j);
            }
        }
        let (p, q) = match (pos, neg) {
            (Some(p), Some(q)) => (p, q),
            _ => {
                return Err(Error::TripletBatch(format!(
                    "anchor {a} (label {}) lacks a positive or a negative",
                    labels[a]
                )))
            }
        };
        let (dp, dn) = (d[a * n + p], d[a * n + q]);
        let h = dp - dn + margin;
        if h <= 0.0 {
            continue;
        }
        total += h;
        let s = 1.0 / n as f64;
        for k in 0..x.cols {
            let xa = f(x.row(a)[k]);
            let gp = (xa - f(x.row(p)[k])) / dp * s;
            let gn = (xa - f(x.row(q)[k])) / dn * s;
            let r = grad.row_mut(a);
            r[k] = T::from_f64c(f(r[k]) + gp - gn);
            let r = grad.row_mut(p);
            r[k] = T::from_f64c(f(r[k]) - gp);
            let r = grad.row_mut(q);
            r[k] = T::from_f64c(f(r[k]) + gn);
        }
    }
    Ok((total / n as f64, grad))
}

/// Per-class centers, updated outside the main optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterState {
    pub centers: Mat<f32>,
    pub update_lr: f64,
}

impl CenterState {
    pub fn new(n_classes: usize, dim: usize, update_lr: f64) -> Self {
        Self {
            centers: Mat::zeros(n_classes, dim),
            update_lr,
        }
    }

    /// `c_j -= lr * sum_i (c_j - x_i) / (1 + n_j)` for each class `j` in the batch.
    pub fn update<T: Real>(&mut self, x: &Mat<T>, labels: &[usize]) {
        let dim = x.cols;
        let mut delta = std::collections::BTreeMap::<usize, (Vec<f64>, usize)>::new();
        for (i, &y) in labels.iter().enumerate() {
            let e = delta.entry(y).or_insert_with(|| (vec![0.0; dim], 0));
            let c = self.centers.row(y);
            for k in 0..dim {
                e.0[k] += c[k] as f64 - f(x.row(i)[k]);
            }
            e.1 += 1;
        }
        for (y, (d, cnt)) in delta {
            let c = self.centers.row_mut(y);
            for k in 0..dim {
                c[k] -= (self.update_lr * d[k] / (1 + cnt) as f64) as f32;
            }
        }
    }
}

/// Half the mean squared distance from each embedding to its class center.
pub fn center_loss<T: Real>(x: &Mat<T>, labels: &[usize], state: &CenterState) -> (f64, Mat<T>) {
    let n = x.rows;
    assert_eq!(n, labels.len());
    let mut grad = Mat::zeros(n, x.cols);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let c = state.centers.row(y);
        let g = grad.row_mut(i);
        for k in 0..x.cols {
            let diff = f(x.row(i)[k]) - c[k] as f64;
            total += 0.5 * diff * diff;
            g[k] = T::from_f64c(diff / n as f64);
        }
    }
    (total / n as f64, grad)
}

/// Mean binary cross entropy from logits; the gradient is with respect to the logits.
pub fn recon_loss<T: Real>(logits: &Act<T>, target: &Act<T>) -> Result<(f64, Act<T>)> {
    if (logits.c, logits.n, logits.h, logits.w) != (target.c, target.n, target.h, target.w) {
        return Err(Error::Shape(format!(
            "reconstruction {}x{}x{}x{} vs target {}x{}x{}x{}",
            logits.c, logits.n, logits.h, logits.w, target.c, target.n, target.h, target.w
        )));
    }
    let count = logits.data.len() as f64;
    let mut grad = Act::zeros(logits.c, logits.n, logits.h, logits.w);
    let mut total = 0.0;
    for ((g, &z), &t) in grad.data.iter_mut().zip(&logits.data).zip(&target.data) {
        let (z, t) = (f(z), f(t));
        total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        *g = T::from_f64c((1.0 / (1.0 + (-z).exp()) - t) / count);
    }
    Ok((total / count, grad))
}

/// Mean binary cross entropy between probabilities and targets.
pub fn bce_mean(probs: &[f64], target: &[f64]) -> f64 {
    let s: f64 = probs
        .iter()
        .zip(target)
        .map(|(&r, &t)| -(t * r.ln() + (1.0 - t) * (1.0 - r).ln()))
        .sum();
    s / probs.len() as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub id: f64,
    pub triplet: f64,
    pub center: f64,
    /// Absent when reconstruction is inactive.
    pub hr: Option<f64>,
}

/// `id + triplet + beta * center + alpha * hr`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    for (name, v) in [
        ("id", Some(parts.id)),
        ("triplet", Some(parts.triplet)),
        ("center", Some(parts.center)),
        ("hr", parts.hr),
    ] {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss(name));
            }
        }
    }
    Ok(parts.id + parts.triplet + w.beta * parts.center + w.alpha * parts.hr.unwrap_or(0.0))
}
