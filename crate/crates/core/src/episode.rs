//! N-way K-shot episode sampling.
//!
//! Each episode draws `ways` classes, then per class `shots` support records,
//! `unlabeled_per_class` pool records and `queries_per_class` query records,
//! all disjoint. The pool is shuffled once; every later pass walks it in that
//! fixed order.
//!
//! Randomness for episode `i` comes from a stream seeded by
//! `(base_seed, i)`, so episodes can be sampled in any order or in parallel.

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::feature_store::FeatureStore;
use crate::rng;
use crate::{Error, Result};

const SAMPLE_TAG: u64 = 0x5a3b_1e00;
const INIT_TAG: u64 = 0x1417_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    /// Queries are never seen during adaptation.
    Inductive,
    /// Queries join the unlabeled pool.
    Transductive,
    /// The pool also holds samples from classes outside the episode.
    Distractive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub ways: usize,
    pub shots: usize,
    pub unlabeled_per_class: usize,
    pub queries_per_class: usize,
    pub setting: Setting,
    /// Only used in the distractive setting.
    pub distractor_classes: usize,
    /// Pool records per distractor class; `None` means `unlabeled_per_class`.
    pub distractor_unlabeled_per_class: Option<usize>,
    pub episodes: usize,
    pub base_seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            ways: 5,
            shots: 1,
            unlabeled_per_class: 30,
            queries_per_class: 15,
            setting: Setting::Inductive,
            distractor_classes: 3,
            distractor_unlabeled_per_class: None,
            episodes: 600,
            base_seed: 0,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ways == 0 || self.shots == 0 || self.queries_per_class == 0 || self.episodes == 0 {
            return Err(Error::Config(
                "ways, shots, queries_per_class and episodes must be positive".into(),
            ));
        }
        if self.setting == Setting::Distractive && self.distractor_classes == 0 {
            return Err(Error::Config(
                "distractive setting needs at least one distractor class".into(),
            ));
        }
        Ok(())
    }

    pub fn per_class_needed(&self) -> usize {
        self.shots + self.unlabeled_per_class + self.queries_per_class
    }

    pub fn distractor_per_class(&self) -> usize {
        self.distractor_unlabeled_per_class
            .unwrap_or(self.unlabeled_per_class)
    }

    fn active_distractors(&self) -> usize {
        match self.setting {
            Setting::Distractive => self.distractor_classes,
            _ => 0,
        }
    }
}

/// Hidden ground truth of a pool sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Truth {
    /// Episode label in `0..ways`.
    Class(usize),
    /// A record from a class outside the episode.
    Distractor,
}

impl Truth {
    pub fn class(self) -> Option<usize> {
        match self {
            Truth::Class(k) => Some(k),
            Truth::Distractor => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub record: usize,
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolSample {
    pub record: usize,
    pub features: Vec<f64>,
    pub truth: Truth,
    /// Transductive pools include the query records themselves.
    pub is_query: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub index: u64,
    pub ways: usize,
    pub support: Vec<LabeledSample>,
    pub unlabeled: Vec<PoolSample>,
    pub queries: Vec<LabeledSample>,
    /// Episode label → store class id.
    pub class_map: Vec<u32>,
    pub distractor_class_ids: Vec<u32>,
    /// Seed for the classifier's weight initialization.
    pub init_seed: u64,
}

impl Episode {
    pub fn dim(&self) -> usize {
        self.support.first().map_or(0, |s| s.features.len())
    }

    /// Builds an episode from in-memory parts. Mostly useful in tests and for
    /// callers that bring their own sampling.
    pub fn from_parts(
        ways: usize,
        support: Vec<(Vec<f64>, usize)>,
        unlabeled: Vec<(Vec<f64>, Truth)>,
        queries: Vec<(Vec<f64>, usize)>,
        init_seed: u64,
    ) -> Result<Self> {
        let dim = support
            .first()
            .map(|s| s.0.len())
            .ok_or_else(|| Error::contract("episode needs a support set"))?;
        let mut next = 0usize;
        let mut record = || {
            next += 1;
            next - 1
        };
        let check = |f: &Vec<f64>| -> Result<()> {
            if f.len() != dim {
                return Err(Error::contract(format!(
                    "feature of dim {} in an episode of dim {dim}",
                    f.len()
                )));
            }
            Ok(())
        };
        let mut sup = Vec::new();
        for (features, label) in support {
            check(&features)?;
            if label >= ways {
                return Err(Error::contract(format!("support label {label} >= ways {ways}")));
            }
            sup.push(LabeledSample {
                record: record(),
                features,
                label,
            });
        }
        let mut pool = Vec::new();
        for (features, truth) in unlabeled {
            check(&features)?;
            pool.push(PoolSample {
                record: record(),
                features,
                truth,
                is_query: false,
            });
        }
        let mut qs = Vec::new();
        for (features, label) in queries {
            check(&features)?;
            if label >= ways {
                return Err(Error::contract(format!("query label {label} >= ways {ways}")));
            }
            qs.push(LabeledSample {
                record: record(),
                features,
                label,
            });
        }
        Ok(Self {
            index: 0,
            ways,
            support: sup,
            unlabeled: pool,
            queries: qs,
            class_map: (0..ways as u32).collect(),
            distractor_class_ids: Vec::new(),
            init_seed,
        })
    }
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Draws episode `episode_index` of the run described by `cfg`.
pub fn sample_episode(store: &FeatureStore, cfg: &EpisodeConfig, episode_index: u64) -> Result<Episode> {
    cfg.validate()?;
    let by_class = store.indices_by_class();
    let need = cfg.per_class_needed();
    let mut eligible: Vec<usize> = (0..store.num_classes())
        .filter(|&c| by_class[c].len() >= need)
        .collect();
    if eligible.len() < cfg.ways {
        return Err(Error::Sampling(format!(
            "{} classes have >= {need} records, {} needed ({} short)",
            eligible.len(),
            cfg.ways,
            cfg.ways - eligible.len()
        )));
    }

    let mut rng = rng::stream(cfg.base_seed, episode_index, SAMPLE_TAG);
    eligible.shuffle(&mut rng);
    let chosen: Vec<usize> = eligible[..cfg.ways].to_vec();

    let n_distract = cfg.active_distractors();
    let mut distractors = Vec::new();
    if n_distract > 0 {
        let per = cfg.distractor_per_class();
        let mut candidates: Vec<usize> = (0..store.num_classes())
            .filter(|c| !chosen.contains(c) && by_class[*c].len() >= per)
            .collect();
        if candidates.len() < n_distract {
            return Err(Error::Sampling(format!(
                "{} distractor classes with >= {per} records available, {n_distract} needed ({} short)",
                candidates.len(),
                n_distract - candidates.len()
            )));
        }
        candidates.sort_unstable();
        candidates.shuffle(&mut rng);
        distractors = candidates[..n_distract].to_vec();
    }

    let mut support = Vec::with_capacity(cfg.ways * cfg.shots);
    let mut pool = Vec::new();
    let mut queries = Vec::with_capacity(cfg.ways * cfg.queries_per_class);
    for (label, &class) in chosen.iter().enumerate() {
        let picks: Vec<usize> = by_class[class]
            .choose_multiple(&mut rng, need)
            .copied()
            .collect();
        let (s, rest) = picks.split_at(cfg.shots);
        let (u, q) = rest.split_at(cfg.unlabeled_per_class);
        support.extend(s.iter().map(|&r| LabeledSample {
            record: r,
            features: to_f64(store.vector(r)),
            label,
        }));
        pool.extend(u.iter().map(|&r| PoolSample {
            record: r,
            features: to_f64(store.vector(r)),
            truth: Truth::Class(label),
            is_query: false,
        }));
        queries.extend(q.iter().map(|&r| LabeledSample {
            record: r,
            features: to_f64(store.vector(r)),
            label,
        }));
    }
    for &class in &distractors {
        let picks = by_class[class].choose_multiple(&mut rng, cfg.distractor_per_class());
        pool.extend(picks.map(|&r| PoolSample {
            record: r,
            features: to_f64(store.vector(r)),
            truth: Truth::Distractor,
            is_query: false,
        }));
    }
    if cfg.setting == Setting::Transductive {
        pool.extend(queries.iter().map(|q| PoolSample {
            record: q.record,
            features: q.features.clone(),
            truth: Truth::Class(q.label),
            is_query: true,
        }));
    }
    pool.shuffle(&mut rng);

    Ok(Episode {
        index: episode_index,
        ways: cfg.ways,
        support,
        unlabeled: pool,
        queries,
        class_map: chosen.iter().map(|&c| c as u32).collect(),
        distractor_class_ids: distractors.iter().map(|&c| c as u32).collect(),
        init_seed: rng::derive_seed(cfg.base_seed, episode_index, INIT_TAG),
    })
}
