//! Successive exclusion of negative pseudo-labels.
//!
//! One run on an episode:
//!
//! 1. Fit the head on the support set with cross-entropy (stage 0).
//! 2. Repeat for at most `c − 1` rounds: for every pool sample with at least
//!    two candidate classes left, compute its probabilities over the remaining
//!    candidates and take the least likely class as a negative label if its
//!    probability is `≤ δ`; otherwise the sample is rejected this round. All
//!    samples are scored against the same classifier, then the head is updated
//!    once on negative cross-entropy over the new (sample, class) pairs plus
//!    `λ` times the entropy of those samples' candidate distributions. A round
//!    that assigns nothing ends the loop.
//! 3. Samples left with exactly one candidate get it as a positive label; the
//!    head is updated on cross-entropy plus `λ`·entropy over them.
//! 4. Queries are predicted by argmax over all classes.
//!
//! Every training stage also carries the support cross-entropy unless
//! [`MusicConfig::anchor_support`] is off.

use serde::{Deserialize, Serialize};

use crate::classifier::{
    all_admissible, argmax, l2_normalize, masked_softmax, sgd_train, ClassifierParams, LossKind,
    LossTerm, Objective, ProbVector, TrainSpec,
};
use crate::episode::Episode;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Mode {
    Full,
    /// Skip the final positive stage.
    OnlyNeg,
    /// Run the exclusion loop only to harvest positives, then retrain from the
    /// stage-0 head on support + positives.
    OnlyPos,
    /// Always take the argmin class (no reject threshold).
    NoDelta,
    /// Entropy weight forced to zero.
    NoMinent,
    /// Alternate one negative round with one thresholded positive pass.
    AlternatingNegFirst,
    AlternatingPosFirst,
    /// Stage 0 only; the pool is ignored.
    SupportOnly,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::OnlyNeg => "only_neg",
            Mode::OnlyPos => "only_pos",
            Mode::NoDelta => "no_delta",
            Mode::NoMinent => "no_minent",
            Mode::AlternatingNegFirst => "alternating_neg_first",
            Mode::AlternatingPosFirst => "alternating_pos_first",
            Mode::SupportOnly => "support_only",
        }
    }
}

/// How the reject threshold evolves as candidates are removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DeltaSchedule {
    /// The same `δ` in every round.
    Fixed,
    /// `1 / (number of remaining candidates)`; ignores [`MusicConfig::delta`].
    Admissible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MusicConfig {
    /// Reject threshold; `None` means `1/c`.
    pub delta: Option<f64>,
    pub delta_schedule: DeltaSchedule,
    pub minent_weight: f64,
    pub mode: Mode,
    /// Confidence needed by the thresholded positive passes.
    pub pos_threshold: f64,
    pub train: TrainSpec,
    /// Keep the support cross-entropy in every stage.
    pub anchor_support: bool,
    pub bias: bool,
}

impl Default for MusicConfig {
    fn default() -> Self {
        Self {
            delta: None,
            delta_schedule: DeltaSchedule::Fixed,
            minent_weight: 1.0,
            mode: Mode::Full,
            pos_threshold: 0.7,
            train: TrainSpec::default(),
            anchor_support: true,
            bias: false,
        }
    }
}

impl MusicConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some(d) = self.delta {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::Config(format!("delta {d} outside (0, 1]")));
            }
        }
        if !(self.minent_weight >= 0.0 && self.minent_weight.is_finite()) {
            return Err(Error::Config(format!(
                "minent_weight must be non-negative, got {}",
                self.minent_weight
            )));
        }
        if !(0.0..=1.0).contains(&self.pos_threshold) {
            return Err(Error::Config(format!(
                "pos_threshold {} outside [0, 1]",
                self.pos_threshold
            )));
        }
        Ok(())
    }

    pub fn resolved_delta(&self, classes: usize) -> f64 {
        self.delta.unwrap_or(1.0 / classes as f64)
    }

    fn delta_for(&self, classes: usize, admissible: usize) -> f64 {
        match self.delta_schedule {
            DeltaSchedule::Fixed => self.resolved_delta(classes),
            DeltaSchedule::Admissible => 1.0 / admissible as f64,
        }
    }

    fn reject_active(&self) -> bool {
        self.mode != Mode::NoDelta
    }

    pub fn effective_minent(&self) -> f64 {
        if self.mode == Mode::NoMinent {
            0.0
        } else {
            self.minent_weight
        }
    }
}

/// One negative label handed out by the loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub iteration: usize,
    pub sample: usize,
    pub class: usize,
    /// Candidate-restricted probability of `class` when it was picked.
    pub prob: f64,
}

/// Per-sample exclusion sets and the assignment log.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoState {
    classes: usize,
    excluded: Vec<Vec<bool>>,
    counts: Vec<usize>,
    positive: Vec<Option<usize>>,
    log: Vec<Assignment>,
}

impl PseudoState {
    pub fn new(samples: usize, classes: usize) -> Self {
        Self {
            classes,
            excluded: vec![vec![false; classes]; samples],
            counts: vec![0; samples],
            positive: vec![None; samples],
            log: Vec::new(),
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn samples(&self) -> usize {
        self.counts.len()
    }

    pub fn exclusions(&self, sample: usize) -> &[bool] {
        &self.excluded[sample]
    }

    pub fn excluded_count(&self, sample: usize) -> usize {
        self.counts[sample]
    }

    pub fn admissible_mask(&self, sample: usize) -> Vec<bool> {
        self.excluded[sample].iter().map(|e| !e).collect()
    }

    pub fn positive(&self, sample: usize) -> Option<usize> {
        self.positive[sample]
    }

    pub fn log(&self) -> &[Assignment] {
        &self.log
    }

    /// Records `class` as a negative label of `sample`.
    pub fn exclude(&mut self, a: Assignment) -> Result<()> {
        let u = a.sample;
        if u >= self.samples() || a.class >= self.classes {
            return Err(Error::contract(format!("assignment {a:?} out of range")));
        }
        if self.excluded[u][a.class] {
            return Err(Error::contract(format!(
                "class {} already excluded for sample {u}",
                a.class
            )));
        }
        if self.counts[u] >= self.classes - 1 {
            return Err(Error::contract(format!("sample {u} has no class left to exclude")));
        }
        self.excluded[u][a.class] = true;
        self.counts[u] += 1;
        if self.counts[u] == self.classes - 1 {
            self.positive[u] = self.excluded[u].iter().position(|e| !e);
        }
        self.log.push(a);
        Ok(())
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        for u in 0..self.samples() {
            let n = self.excluded[u].iter().filter(|&&e| e).count();
            if n != self.counts[u] || n > self.classes - 1 {
                return Err(Error::contract(format!("sample {u}: bad exclusion count {n}")));
            }
            let expect = (n == self.classes - 1)
                .then(|| self.excluded[u].iter().position(|e| !e))
                .flatten();
            if self.positive[u] != expect {
                return Err(Error::contract(format!("sample {u}: positive label inconsistent")));
            }
            let logged = self.log.iter().filter(|a| a.sample == u).count();
            if logged != n {
                return Err(Error::contract(format!("sample {u}: log has {logged} entries, {n} exclusions")));
            }
        }
        Ok(())
    }

    pub fn assigned_in(&self, iteration: usize) -> impl Iterator<Item = &Assignment> {
        self.log.iter().filter(move |a| a.iteration == iteration)
    }
}

/// Samples whose exclusion set is complete, with their remaining class.
pub fn extract_positives(state: &PseudoState) -> Vec<(usize, usize)> {
    (0..state.samples())
        .filter_map(|u| state.positive(u).map(|k| (u, k)))
        .collect()
}

/// The least likely candidate if its probability is at most `delta`, else
/// `None` (reject). Ties go to the lowest class index.
pub fn select_negative(p: &ProbVector, exclusions: &[bool], delta: f64, reject_active: bool) -> Result<Option<usize>> {
    if exclusions.len() != p.len() || p.mask.iter().zip(exclusions).any(|(m, e)| m == e) {
        return Err(Error::contract("probability mask must be the complement of the exclusion set"));
    }
    if p.admissible() < 2 {
        return Err(Error::contract("select_negative needs at least two candidate classes"));
    }
    let mut best: Option<usize> = None;
    for k in 0..p.len() {
        if !p.mask[k] {
            continue;
        }
        match best {
            Some(b) if p.probs[b] <= p.probs[k] => {}
            _ => best = Some(k),
        }
    }
    let k = best.expect("admissible class exists");
    Ok((!reject_active || p.probs[k] <= delta).then_some(k))
}

/// An episode with every feature vector unit-normalized once.
#[derive(Debug, Clone)]
pub struct NormalizedEpisode {
    pub classes: usize,
    pub dim: usize,
    pub support: Vec<(Vec<f64>, usize)>,
    pub pool: Vec<Vec<f64>>,
    pub queries: Vec<(Vec<f64>, usize)>,
    pub init_seed: u64,
}

impl NormalizedEpisode {
    pub fn new(episode: &Episode) -> Result<Self> {
        let dim = episode.dim();
        let norm = |f: &Vec<f64>| -> Result<Vec<f64>> {
            if f.len() != dim {
                return Err(Error::contract("inconsistent feature dimensions in episode"));
            }
            l2_normalize(f)
        };
        Ok(Self {
            classes: episode.ways,
            dim,
            support: episode
                .support
                .iter()
                .map(|s| Ok((norm(&s.features)?, s.label)))
                .collect::<Result<_>>()?,
            pool: episode.unlabeled.iter().map(|u| norm(&u.features)).collect::<Result<_>>()?,
            queries: episode
                .queries
                .iter()
                .map(|q| Ok((norm(&q.features)?, q.label)))
                .collect::<Result<_>>()?,
            init_seed: episode.init_seed,
        })
    }

    fn support_term(&self) -> LossTerm<'_> {
        let mut t = LossTerm::new(LossKind::CrossEntropy, 1.0);
        for (x, y) in &self.support {
            t.push(x, all_admissible(self.classes), *y);
        }
        t
    }

    fn query_accuracy(&self, params: &ClassifierParams) -> f64 {
        if self.queries.is_empty() {
            return 0.0;
        }
        let correct = self
            .queries
            .iter()
            .filter(|(x, y)| argmax(&params.logits_normalized(x)) == *y)
            .count();
        correct as f64 / self.queries.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "round")]
pub enum StageKind {
    Support,
    Negative(usize),
    ThresholdPositive(usize),
    Positive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSnapshot {
    pub stage: StageKind,
    /// Query accuracy of the head after this stage.
    pub query_accuracy: f64,
    /// Samples labeled by this stage.
    pub labeled: usize,
}

#[derive(Debug, Clone)]
pub struct MusicResult {
    pub params: ClassifierParams,
    pub pseudo: PseudoState,
    pub snapshots: Vec<StageSnapshot>,
    pub predictions: Vec<usize>,
    /// Rounds of the exclusion loop that assigned at least one label.
    pub negative_iterations: usize,
    /// Pool samples whose stage-0 top probability reached `pos_threshold`,
    /// with that argmax class. A positive-labeling baseline for diagnostics.
    pub threshold_baseline: Vec<(usize, usize)>,
    /// Positive labels of each thresholded pass (alternating modes only).
    pub threshold_passes: Vec<Vec<(usize, usize)>>,
    /// Positive labels used by the final positive stage.
    pub positives_used: Vec<(usize, usize)>,
    pub clamped_losses: usize,
}

struct Run<'e> {
    ep: &'e NormalizedEpisode,
    cfg: &'e MusicConfig,
    snapshots: Vec<StageSnapshot>,
    clamped: usize,
}

impl<'e> Run<'e> {
    fn train(&mut self, params: &ClassifierParams, obj: &Objective<'_>) -> Result<ClassifierParams> {
        let out = sgd_train(params, obj, &self.cfg.train)?;
        self.clamped += out.clamped;
        Ok(out.params)
    }

    fn snapshot(&mut self, stage: StageKind, params: &ClassifierParams, labeled: usize) {
        self.snapshots.push(StageSnapshot {
            stage,
            query_accuracy: self.ep.query_accuracy(params),
            labeled,
        });
    }

    fn base_objective(&self) -> Objective<'e> {
        let mut obj = Objective::default();
        if self.cfg.anchor_support {
            obj.terms.push(self.ep.support_term());
        }
        obj
    }

    /// CE + λ·entropy over positively labeled pool samples, all classes admissible.
    fn positive_objective(&self, labels: &[(usize, usize)]) -> Objective<'e> {
        let c = self.ep.classes;
        let mut ce = LossTerm::new(LossKind::CrossEntropy, 1.0);
        let mut ent = LossTerm::new(LossKind::MinEntropy, self.cfg.effective_minent());
        for &(u, k) in labels {
            ce.push(&self.ep.pool[u], all_admissible(c), k);
            ent.push(&self.ep.pool[u], all_admissible(c), k);
        }
        self.base_objective().with(ce).with(ent)
    }

    fn threshold_labels(&self, params: &ClassifierParams) -> Result<Vec<(usize, usize)>> {
        let mut out = Vec::new();
        for (u, x) in self.ep.pool.iter().enumerate() {
            let p = masked_softmax(&params.logits_normalized(x), &all_admissible(self.ep.classes))?;
            let k = p.argmax();
            if p.probs[k] >= self.cfg.pos_threshold {
                out.push((u, k));
            }
        }
        Ok(out)
    }

    fn negative_round(&mut self, params: &ClassifierParams, state: &mut PseudoState, iteration: usize) -> Result<(ClassifierParams, usize)> {
        let (next, assigned) = run_negative_iteration_inner(self.ep, params, state, self.cfg, iteration, &mut self.clamped)?;
        if assigned > 0 {
            self.snapshot(StageKind::Negative(iteration), &next, assigned);
        }
        Ok((next, assigned))
    }
}

fn run_negative_iteration_inner(
    ep: &NormalizedEpisode,
    params: &ClassifierParams,
    state: &mut PseudoState,
    cfg: &MusicConfig,
    iteration: usize,
    clamped: &mut usize,
) -> Result<(ClassifierParams, usize)> {
    let c = ep.classes;
    if state.samples() != ep.pool.len() || state.classes() != c {
        return Err(Error::contract("pseudo-label state does not match the episode"));
    }
    // Score every sample against the same head before any update.
    let mut picked = Vec::new();
    for (u, x) in ep.pool.iter().enumerate() {
        let admissible = c - state.excluded_count(u);
        if admissible < 2 {
            continue;
        }
        let mask = state.admissible_mask(u);
        let p = masked_softmax(&params.logits_normalized(x), &mask)?;
        let delta = cfg.delta_for(c, admissible);
        if let Some(k) = select_negative(&p, state.exclusions(u), delta, cfg.reject_active())? {
            picked.push((Assignment { iteration, sample: u, class: k, prob: p.probs[k] }, mask));
        }
    }
    if picked.is_empty() {
        return Ok((params.clone(), 0));
    }

    let mut obj = Objective::default();
    if cfg.anchor_support {
        obj.terms.push(ep.support_term());
    }
    let mut neg = LossTerm::new(LossKind::NegativeCrossEntropy, 1.0);
    let mut ent = LossTerm::new(LossKind::MinEntropy, cfg.effective_minent());
    for (a, mask) in &picked {
        neg.push(&ep.pool[a.sample], mask.clone(), a.class);
        ent.push(&ep.pool[a.sample], mask.clone(), a.class);
    }
    let obj = obj.with(neg).with(ent);
    let out = sgd_train(params, &obj, &cfg.train)?;
    *clamped += out.clamped;

    let assigned = picked.len();
    for (a, _) in picked {
        state.exclude(a)?;
    }
    Ok((out.params, assigned))
}

/// One exclusion round: assigns negative labels against `params`, records
/// them in `state`, and returns the updated head with the number assigned.
/// When nothing is assigned the head is returned unchanged.
pub fn run_negative_iteration(
    episode: &NormalizedEpisode,
    params: &ClassifierParams,
    state: &mut PseudoState,
    cfg: &MusicConfig,
    iteration: usize,
) -> Result<(ClassifierParams, usize)> {
    let mut clamped = 0;
    run_negative_iteration_inner(episode, params, state, cfg, iteration, &mut clamped)
}

/// Argmax class per query (raw features), lowest index on ties.
pub fn predict(params: &ClassifierParams, queries: &[Vec<f64>]) -> Result<Vec<usize>> {
    queries
        .iter()
        .map(|q| crate::classifier::logits(params, q).map(|z| argmax(&z)))
        .collect()
}

/// Runs the configured mode on one episode.
pub fn run_music(episode: &Episode, cfg: &MusicConfig) -> Result<MusicResult> {
    run_music_normalized(&NormalizedEpisode::new(episode)?, cfg)
}

pub fn run_music_normalized(ep: &NormalizedEpisode, cfg: &MusicConfig) -> Result<MusicResult> {
    cfg.validate()?;
    let c = ep.classes;
    if c < 2 {
        return Err(Error::Config("an episode needs at least two classes".into()));
    }
    let mut run = Run {
        ep,
        cfg,
        snapshots: Vec::new(),
        clamped: 0,
    };
    let mut state = PseudoState::new(ep.pool.len(), c);
    let init = ClassifierParams::init(c, ep.dim, cfg.bias, ep.init_seed);

    let support_obj = Objective::default().with(ep.support_term());
    let stage0 = run.train(&init, &support_obj)?;
    run.snapshot(StageKind::Support, &stage0, 0);
    let threshold_baseline = run.threshold_labels(&stage0)?;

    let mut params = stage0.clone();
    let mut negative_iterations = 0;
    let mut threshold_passes = Vec::new();
    let mut positives_used = Vec::new();
    let max_rounds = c - 1;

    match cfg.mode {
        Mode::SupportOnly => {}
        Mode::Full | Mode::NoDelta | Mode::NoMinent | Mode::OnlyNeg | Mode::OnlyPos => {
            for iteration in 1..=max_rounds {
                let (next, assigned) = run.negative_round(&params, &mut state, iteration)?;
                if assigned == 0 {
                    break;
                }
                params = next;
                negative_iterations += 1;
            }
            if cfg.mode != Mode::OnlyNeg {
                let positives = extract_positives(&state);
                if !positives.is_empty() {
                    let start = if cfg.mode == Mode::OnlyPos { &stage0 } else { &params };
                    let obj = run.positive_objective(&positives);
                    params = run.train(start, &obj)?;
                    run.snapshot(StageKind::Positive, &params, positives.len());
                } else if cfg.mode == Mode::OnlyPos {
                    params = stage0.clone();
                }
                positives_used = positives;
            }
        }
        Mode::AlternatingNegFirst | Mode::AlternatingPosFirst => {
            let pos_first = cfg.mode == Mode::AlternatingPosFirst;
            for round in 1..=max_rounds {
                if pos_first {
                    params = threshold_pass(&mut run, &params, round, &mut threshold_passes)?;
                }
                let (next, assigned) = run.negative_round(&params, &mut state, round)?;
                if assigned == 0 {
                    break;
                }
                params = next;
                negative_iterations += 1;
                if !pos_first {
                    params = threshold_pass(&mut run, &params, round, &mut threshold_passes)?;
                }
            }
        }
    }

    let predictions = ep
        .queries
        .iter()
        .map(|(x, _)| argmax(&params.logits_normalized(x)))
        .collect();
    Ok(MusicResult {
        params,
        pseudo: state,
        snapshots: run.snapshots,
        predictions,
        negative_iterations,
        threshold_baseline,
        threshold_passes,
        positives_used,
        clamped_losses: run.clamped,
    })
}

fn threshold_pass(
    run: &mut Run<'_>,
    params: &ClassifierParams,
    round: usize,
    passes: &mut Vec<Vec<(usize, usize)>>,
) -> Result<ClassifierParams> {
    let labels = run.threshold_labels(params)?;
    let next = if labels.is_empty() {
        params.clone()
    } else {
        let obj = run.positive_objective(&labels);
        let next = run.train(params, &obj)?;
        run.snapshot(StageKind::ThresholdPositive(round), &next, labels.len());
        next
    };
    passes.push(labels);
    Ok(next)
}
