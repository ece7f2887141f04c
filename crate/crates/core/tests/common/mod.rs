//! Reference implementations used as test oracles. Written from the loss
//! definitions directly, sharing no code with the library.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Ce,
    NegCe,
    Entropy,
}

pub const ALL_LOSSES: [Loss; 3] = [Loss::Ce, Loss::NegCe, Loss::Entropy];

/// Probabilities over the admissible entries, computed via log-sum-exp.
pub fn softmax(z: &[f64], mask: &[bool]) -> Vec<f64> {
    let lse = {
        let m = z
            .iter()
            .zip(mask)
            .filter(|p| *p.1)
            .map(|p| *p.0)
            .fold(f64::NEG_INFINITY, f64::max);
        m + z
            .iter()
            .zip(mask)
            .filter(|p| *p.1)
            .map(|p| (p.0 - m).exp())
            .sum::<f64>()
            .ln()
    };
    z.iter()
        .zip(mask)
        .map(|(&v, &m)| if m { (v - lse).exp() } else { 0.0 })
        .collect()
}

pub fn loss_of_logits(kind: Loss, z: &[f64], mask: &[bool], target: usize) -> f64 {
    let p = softmax(z, mask);
    match kind {
        Loss::Ce => -p[target].ln(),
        Loss::NegCe => {
            let rest: f64 = p
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != target)
                .map(|(_, v)| v)
                .sum();
            -rest.ln()
        }
        Loss::Entropy => -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>(),
    }
}

/// Central differences of `f` at `x` with step `h`, over the coordinates
/// where `active` is true (others are reported as 0).
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], active: &[bool], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            if !active[i] {
                return 0.0;
            }
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, with a tiny floor on the denominator.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-8)
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    v.iter().map(|x| x / n).collect()
}

/// A random gradient-check instance: head, input, mask and target.
#[derive(Debug, Clone)]
pub struct Instance {
    pub classes: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub x_unit: Vec<f64>,
    pub mask: Vec<bool>,
    pub target: usize,
}

impl Instance {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let classes = rng.random_range(2..=10);
        let dim = rng.random_range(1..=64);
        let weights = (0..classes * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x_unit = if norm(&x) > 1e-6 { unit(&x) } else { vec![1.0 / (dim as f64).sqrt(); dim] };
        let mut mask: Vec<bool> = (0..classes).map(|_| rng.random_bool(0.7)).collect();
        let target = rng.random_range(0..classes);
        mask[target] = true;
        let other = (target + 1 + rng.random_range(0..classes - 1)) % classes;
        mask[other] = true;
        Self {
            classes,
            dim,
            weights,
            x_unit,
            mask,
            target,
        }
    }

    pub fn logits(&self, weights: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|k| {
                weights[k * self.dim..(k + 1) * self.dim]
                    .iter()
                    .zip(&self.x_unit)
                    .map(|(w, x)| w * x)
                    .sum()
            })
            .collect()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mean and 95% half-width using the normal quantile and an `n − 1` variance.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}
