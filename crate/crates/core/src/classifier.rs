//! Linear head over ℓ2-normalized features.
//!
//! Scores are `W · x̂ (+ b)` with `x̂ = x / ‖x‖`. Probabilities come from a
//! softmax restricted to a mask of admissible classes; excluded classes get
//! probability exactly zero and zero gradient.
//!
//! Three per-sample losses are provided, each returning its value and its
//! gradient with respect to the logits:
//!
//! * cross-entropy `−log p_y`,
//! * negative cross-entropy `−log(1 − p_ȳ)` for a complementary label `ȳ`,
//! * Shannon entropy `−Σ p_k log p_k` (minimized to sharpen predictions).
//!
//! [`sgd_train`] minimizes a weighted sum of per-term averages of these with
//! full-batch SGD and heavy-ball momentum.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Floor applied inside every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
/// Vectors shorter than this are left unnormalized.
pub const NORM_GUARD: f64 = 1e-12;
pub const INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    classes: usize,
    dim: usize,
    /// Row-major `classes × dim`.
    weights: Vec<f64>,
    bias: Option<Vec<f64>>,
}

impl ClassifierParams {
    pub fn zeros(classes: usize, dim: usize, with_bias: bool) -> Self {
        Self {
            classes,
            dim,
            weights: vec![0.0; classes * dim],
            bias: with_bias.then(|| vec![0.0; classes]),
        }
    }

    /// Gaussian weights with standard deviation [`INIT_STD`]; bias starts at 0.
    pub fn init(classes: usize, dim: usize, with_bias: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let mut p = Self::zeros(classes, dim, with_bias);
        for w in &mut p.weights {
            *w = normal.sample(&mut rng);
        }
        p
    }

    pub fn from_weights(classes: usize, dim: usize, weights: Vec<f64>, bias: Option<Vec<f64>>) -> Result<Self> {
        if weights.len() != classes * dim {
            return Err(Error::contract(format!(
                "weights have {} entries, expected {classes}×{dim}",
                weights.len()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != classes {
                return Err(Error::contract(format!("bias has {} entries, expected {classes}", b.len())));
            }
        }
        if weights.iter().chain(bias.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite classifier parameter".into()));
        }
        Ok(Self { classes, dim, weights, bias })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.weights[class * self.dim..(class + 1) * self.dim]
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    /// Logits for an input that is already unit-normalized.
    pub fn logits_normalized(&self, x_unit: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x_unit.len(), self.dim);
        let mut z: Vec<f64> = self
            .weights
            .chunks_exact(self.dim)
            .map(|row| row.iter().zip(x_unit).map(|(w, x)| w * x).sum())
            .collect();
        if let Some(b) = &self.bias {
            for (zk, bk) in z.iter_mut().zip(b) {
                *zk += bk;
            }
        }
        z
    }
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("l2_normalize: non-finite input".into()));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < NORM_GUARD {
        return Ok(v.to_vec());
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// `W · l2_normalize(x) (+ b)`.
pub fn logits(params: &ClassifierParams, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.dim {
        return Err(Error::contract(format!(
            "input of dim {} for a head of dim {}",
            x.len(),
            params.dim
        )));
    }
    Ok(params.logits_normalized(&l2_normalize(x)?))
}

/// Probabilities over a set of admissible classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    pub probs: Vec<f64>,
    pub mask: Vec<bool>,
}

impl ProbVector {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn admissible(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Highest admissible probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax_masked(&self.probs, &self.mask)
    }
}

pub(crate) fn argmax_masked(values: &[f64], mask: &[bool]) -> usize {
    let mut best: Option<usize> = None;
    for (k, &v) in values.iter().enumerate() {
        if !mask[k] {
            continue;
        }
        match best {
            Some(b) if values[b] >= v => {}
            _ => best = Some(k),
        }
    }
    best.expect("at least one admissible class")
}

/// Argmax with lowest-index tie-breaking.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

pub fn all_admissible(classes: usize) -> Vec<bool> {
    vec![true; classes]
}

pub fn masked_softmax(z: &[f64], mask: &[bool]) -> Result<ProbVector> {
    if z.len() != mask.len() {
        return Err(Error::contract(format!(
            "{} logits with a mask of {}",
            z.len(),
            mask.len()
        )));
    }
    let max = z
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::contract("masked_softmax: no admissible class"));
    }
    let mut probs: Vec<f64> = z
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { (v - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    Ok(ProbVector {
        probs,
        mask: mask.to_vec(),
    })
}

/// Loss value and gradient w.r.t. the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// The probability floor was hit.
    pub clamped: bool,
}

fn check_target(p: &ProbVector, k: usize, what: &str) -> Result<()> {
    if k >= p.len() || !p.mask[k] {
        return Err(Error::contract(format!("{what} {k} is not an admissible class")));
    }
    Ok(())
}

/// Cross-entropy `−log p[y]`; gradient `p − onehot(y)` on admissible classes.
pub fn ce_loss_grad(p: &ProbVector, y: usize) -> Result<LossGrad> {
    check_target(p, y, "label")?;
    let py = p.probs[y];
    let clamped = py < PROB_FLOOR;
    let grad = p
        .probs
        .iter()
        .zip(&p.mask)
        .enumerate()
        .map(|(k, (&pk, &m))| match (m, k == y) {
            (false, _) => 0.0,
            (true, true) => pk - 1.0,
            (true, false) => pk,
        })
        .collect();
    Ok(LossGrad {
        loss: -py.max(PROB_FLOOR).ln(),
        grad,
        clamped,
    })
}

/// Negative cross-entropy `−log(1 − p[ȳ])`; gradient
/// `p[ȳ]/(1 − p[ȳ]) · (onehot(ȳ) − p)` on admissible classes.
pub fn negce_loss_grad(p: &ProbVector, ybar: usize) -> Result<LossGrad> {
    check_target(p, ybar, "negative label")?;
    let q = p.probs[ybar];
    let rest = 1.0 - q;
    let clamped = rest < PROB_FLOOR;
    let scale = q / rest.max(PROB_FLOOR);
    let grad = p
        .probs
        .iter()
        .zip(&p.mask)
        .enumerate()
        .map(|(k, (&pk, &m))| {
            if !m {
                0.0
            } else if k == ybar {
                scale * (1.0 - pk)
            } else {
                -scale * pk
            }
        })
        .collect();
    Ok(LossGrad {
        loss: -rest.max(PROB_FLOOR).ln(),
        grad,
        clamped,
    })
}

/// Entropy of the admissible distribution; gradient `−p_j (log p_j + H)`.
pub fn entropy_loss_grad(p: &ProbVector) -> Result<LossGrad> {
    if p.admissible() == 0 {
        return Err(Error::contract("entropy of an empty distribution"));
    }
    let plogp = |pk: f64| if pk > 0.0 { pk * pk.ln() } else { 0.0 };
    let h: f64 = -p
        .probs
        .iter()
        .zip(&p.mask)
        .filter(|(_, &m)| m)
        .map(|(&pk, _)| plogp(pk))
        .sum::<f64>();
    let grad = p
        .probs
        .iter()
        .zip(&p.mask)
        .map(|(&pk, &m)| {
            if !m || pk <= 0.0 {
                0.0
            } else {
                -pk * (pk.ln() + h)
            }
        })
        .collect();
    Ok(LossGrad {
        loss: h.max(0.0),
        grad,
        clamped: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    NegativeCrossEntropy,
    MinEntropy,
}

/// One sample inside a loss term. `x` must already be unit-normalized.
#[derive(Debug, Clone)]
pub struct TermItem<'a> {
    pub x: &'a [f64],
    pub mask: Vec<bool>,
    /// Label for CE, negative label for NegCE, ignored for MinEnt.
    pub target: usize,
}

/// `weight · mean_i loss(item_i)`. Empty terms contribute nothing.
#[derive(Debug, Clone)]
pub struct LossTerm<'a> {
    pub kind: LossKind,
    pub weight: f64,
    pub items: Vec<TermItem<'a>>,
}

impl<'a> LossTerm<'a> {
    pub fn new(kind: LossKind, weight: f64) -> Self {
        Self {
            kind,
            weight,
            items: Vec::new(),
        }
    }

    pub fn push(&mut self, x: &'a [f64], mask: Vec<bool>, target: usize) {
        self.items.push(TermItem { x, mask, target });
    }
}

/// Objective value, weight gradient, bias gradient and number of clamped
/// loss evaluations.
pub type ValueGrad = (f64, Vec<f64>, Option<Vec<f64>>, usize);

#[derive(Debug, Clone, Default)]
pub struct Objective<'a> {
    pub terms: Vec<LossTerm<'a>>,
}

impl<'a> Objective<'a> {
    pub fn with(mut self, term: LossTerm<'a>) -> Self {
        self.terms.push(term);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.terms.iter().all(|t| t.items.is_empty() || t.weight == 0.0)
    }

    fn check(&self, params: &ClassifierParams) -> Result<()> {
        for t in &self.terms {
            for it in &t.items {
                if it.x.len() != params.dim || it.mask.len() != params.classes {
                    return Err(Error::contract(format!(
                        "sample of dim {} / mask {} for a {}×{} head",
                        it.x.len(),
                        it.mask.len(),
                        params.classes,
                        params.dim
                    )));
                }
            }
        }
        Ok(())
    }

    /// Objective value and its gradient w.r.t. weights and bias.
    pub fn value_and_grad(&self, params: &ClassifierParams) -> Result<ValueGrad> {
        let (c, d) = (params.classes, params.dim);
        let mut gw = vec![0.0; c * d];
        let mut gb = params.bias.as_ref().map(|_| vec![0.0; c]);
        let mut total = 0.0;
        let mut clamped = 0;
        for term in &self.terms {
            if term.items.is_empty() || term.weight == 0.0 {
                continue;
            }
            let scale = term.weight / term.items.len() as f64;
            for it in &term.items {
                let p = masked_softmax(&params.logits_normalized(it.x), &it.mask)?;
                let lg = match term.kind {
                    LossKind::CrossEntropy => ce_loss_grad(&p, it.target)?,
                    LossKind::NegativeCrossEntropy => negce_loss_grad(&p, it.target)?,
                    LossKind::MinEntropy => entropy_loss_grad(&p)?,
                };
                clamped += lg.clamped as usize;
                total += scale * lg.loss;
                for (k, &g) in lg.grad.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let g = scale * g;
                    for (w, x) in gw[k * d..(k + 1) * d].iter_mut().zip(it.x) {
                        *w += g * x;
                    }
                    if let Some(b) = gb.as_mut() {
                        b[k] += g;
                    }
                }
            }
        }
        Ok((total, gw, gb, clamped))
    }
}

/// Full-batch SGD hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            steps: 100,
            learning_rate: 0.01,
            momentum: 0.9,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ClassifierParams,
    /// Objective value before each step.
    pub objective_trace: Vec<f64>,
    /// Number of floor-clamped loss evaluations.
    pub clamped: usize,
}

/// Runs `spec.steps` momentum-SGD updates (`v ← μv + g`, `θ ← θ − ηv`).
pub fn sgd_train(params: &ClassifierParams, objective: &Objective<'_>, spec: &TrainSpec) -> Result<TrainOutcome> {
    spec.validate()?;
    objective.check(params)?;
    let mut p = params.clone();
    let mut vw = vec![0.0; p.weights.len()];
    let mut vb = p.bias.as_ref().map(|b| vec![0.0; b.len()]);
    let mut trace = Vec::with_capacity(spec.steps);
    let mut clamped = 0;
    for step in 0..spec.steps {
        let (value, gw, gb, c) = objective.value_and_grad(&p)?;
        if !value.is_finite() {
            return Err(Error::Training { step, value });
        }
        trace.push(value);
        clamped += c;
        for ((w, v), g) in p.weights.iter_mut().zip(&mut vw).zip(&gw) {
            *v = spec.momentum * *v + g;
            *w -= spec.learning_rate * *v;
        }
        if let (Some(b), Some(vb), Some(gb)) = (p.bias.as_mut(), vb.as_mut(), gb.as_ref()) {
            for ((bk, v), g) in b.iter_mut().zip(vb.iter_mut()).zip(gb) {
                *v = spec.momentum * *v + g;
                *bk -= spec.learning_rate * *v;
            }
        }
        if p.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Training { step, value: f64::NAN });
        }
    }
    Ok(TrainOutcome {
        params: p,
        objective_trace: trace,
        clamped,
    })
}
