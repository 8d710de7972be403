//! Synthetic/hand-labelled batch mixing.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::manifest::{DatasetManifest, ReviewStatus, Source};
use crate::stats::normalise_counts;
use crate::taxonomy::ClassId;

pub const DEFAULT_RATIO: f64 = 0.4;

/// Guards the balanced-strategy floor against values like 3.9999999.
const ROUNDING_EPS: f64 = 1e-9;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixStrategy {
    Homogeneous,
    BalancedHeterogeneous,
    #[default]
    WeightedRandom,
}

impl MixStrategy {
    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "homogeneous" => Some(MixStrategy::Homogeneous),
            "balanced_heterogeneous" | "balanced" => Some(MixStrategy::BalancedHeterogeneous),
            "weighted_random" | "weighted" => Some(MixStrategy::WeightedRandom),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct MixConfig {
    pub ratio_synthetic: f64,
    pub strategy: MixStrategy,
    pub batch_size: usize,
    pub seed: u64,
    /// Draw each slot independently instead of per-source epochs.
    #[serde(default)]
    pub with_replacement: bool,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig {
            ratio_synthetic: DEFAULT_RATIO,
            strategy: MixStrategy::WeightedRandom,
            batch_size: 16,
            seed: 0,
            with_replacement: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MixError {
    #[error("synthetic ratio must lie in [0, 1], got {0}")]
    InvalidRatio(f64),
    #[error("batch size must be at least 1")]
    EmptyBatch,
    #[error("no {0} samples in the manifest but the ratio gives them nonzero weight")]
    MissingSource(Source),
    #[error("no pixel counts for record '{0}'")]
    MissingCounts(String),
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct BatchEntry {
    pub id: String,
    pub source: Source,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct BatchPlan {
    pub index: u64,
    pub entries: Vec<BatchEntry>,
}

impl BatchPlan {
    pub fn synthetic_count(&self) -> usize {
        self.entries.iter().filter(|e| e.source == Source::Synthetic).count()
    }
}

#[derive(Clone, Debug)]
struct SourcePool {
    source: Source,
    ids: Vec<String>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl SourcePool {
    fn new(source: Source, mut ids: Vec<String>, seed: u64, stream: u64) -> Self {
        ids.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let len = ids.len();
        SourcePool {
            source,
            ids,
            order: (0..len).collect(),
            cursor: len,
            rng,
        }
    }

    fn draw(&mut self, with_replacement: bool) -> BatchEntry {
        let index = if with_replacement {
            self.rng.random_range(0..self.ids.len())
        } else {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            self.cursor += 1;
            self.order[self.cursor - 1]
        };
        BatchEntry {
            id: self.ids[index].clone(),
            source: self.source,
        }
    }
}

/// Deterministic batch stream over the synthetic and hand-labelled records of
/// a manifest. Pseudo-labelled records are never mixed in.
#[derive(Clone, Debug)]
pub struct Sampler {
    config: MixConfig,
    synthetic: SourcePool,
    labelled: SourcePool,
    rng: ChaCha8Rng,
    emitted: u64,
}

pub fn make_sampler(manifest: &DatasetManifest, config: MixConfig) -> Result<Sampler, MixError> {
    let eligible = |source| -> Vec<String> {
        manifest
            .by_source(source)
            .filter(|r| r.review_status != ReviewStatus::Rejected)
            .map(|r| r.id.clone())
            .collect()
    };
    Sampler::from_ids(eligible(Source::Synthetic), eligible(Source::HandLabelled), config)
}

impl Sampler {
    pub fn from_ids(synthetic: Vec<String>, labelled: Vec<String>, config: MixConfig) -> Result<Self, MixError> {
        let r = config.ratio_synthetic;
        if !(0.0..=1.0).contains(&r) {
            return Err(MixError::InvalidRatio(r));
        }
        if config.batch_size == 0 {
            return Err(MixError::EmptyBatch);
        }
        if r > 0.0 && synthetic.is_empty() {
            return Err(MixError::MissingSource(Source::Synthetic));
        }
        if r < 1.0 && labelled.is_empty() {
            return Err(MixError::MissingSource(Source::HandLabelled));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(0);
        Ok(Sampler {
            config,
            synthetic: SourcePool::new(Source::Synthetic, synthetic, config.seed, 1),
            labelled: SourcePool::new(Source::HandLabelled, labelled, config.seed, 2),
            rng,
            emitted: 0,
        })
    }

    pub fn config(&self) -> &MixConfig {
        &self.config
    }

    pub fn batches_emitted(&self) -> u64 {
        self.emitted
    }

    /// Synthetic slots in balanced batch `b`. Successive floors of the running
    /// target keep the long-run count exact.
    pub fn balanced_synthetic_count(ratio: f64, batch_size: usize, b: u64) -> usize {
        let per = ratio * batch_size as f64;
        let upto = |n: u64| libm::floor(n as f64 * per + ROUNDING_EPS) as u64;
        (upto(b + 1) - upto(b)) as usize
    }

    fn draw(&mut self, synthetic: bool) -> BatchEntry {
        let replace = self.config.with_replacement;
        if synthetic {
            self.synthetic.draw(replace)
        } else {
            self.labelled.draw(replace)
        }
    }

    pub fn next_batch(&mut self) -> BatchPlan {
        let size = self.config.batch_size;
        let r = self.config.ratio_synthetic;
        let mut entries = Vec::with_capacity(size);
        match self.config.strategy {
            MixStrategy::Homogeneous => {
                let synthetic = self.rng.random_bool(r);
                for _ in 0..size {
                    entries.push(self.draw(synthetic));
                }
            }
            MixStrategy::BalancedHeterogeneous => {
                let n_syn = Self::balanced_synthetic_count(r, size, self.emitted);
                let mut slots: Vec<bool> = (0..size).map(|i| i < n_syn).collect();
                slots.shuffle(&mut self.rng);
                for synthetic in slots {
                    entries.push(self.draw(synthetic));
                }
            }
            MixStrategy::WeightedRandom => {
                for _ in 0..size {
                    let synthetic = self.rng.random_bool(r);
                    entries.push(self.draw(synthetic));
                }
            }
        }
        let plan = BatchPlan {
            index: self.emitted,
            entries,
        };
        self.emitted += 1;
        plan
    }
}

impl Iterator for Sampler {
    type Item = BatchPlan;

    fn next(&mut self) -> Option<BatchPlan> {
        Some(self.next_batch())
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct SeenPixelReport {
    pub ratio_synthetic: f64,
    /// ratio * synthetic share + (1 - ratio) * labelled share.
    pub analytic: BTreeMap<ClassId, f64>,
    /// Shares among pixels of the images a simulated stream actually drew,
    /// weighted by the drawn image fractions per source.
    pub empirical: BTreeMap<ClassId, f64>,
    pub images_drawn: u64,
    pub synthetic_image_fraction: f64,
}

fn pooled_share<'a>(
    ids: impl Iterator<Item = &'a String>,
    counts: &BTreeMap<String, BTreeMap<ClassId, u64>>,
) -> Result<BTreeMap<ClassId, u64>, MixError> {
    let mut pooled = BTreeMap::new();
    for id in ids {
        let c = counts.get(id).ok_or_else(|| MixError::MissingCounts(id.clone()))?;
        for (&class, &n) in c {
            *pooled.entry(class).or_insert(0) += n;
        }
    }
    Ok(pooled)
}

fn combine(
    ratio: f64,
    synthetic: &BTreeMap<ClassId, f64>,
    labelled: &BTreeMap<ClassId, f64>,
) -> BTreeMap<ClassId, f64> {
    let mut out = BTreeMap::new();
    for &class in synthetic.keys().chain(labelled.keys()) {
        let s = synthetic.get(&class).copied().unwrap_or(0.0);
        let l = labelled.get(&class).copied().unwrap_or(0.0);
        let v = if ratio == 0.0 {
            l
        } else if ratio == 1.0 {
            s
        } else {
            ratio * s + (1.0 - ratio) * l
        };
        out.insert(class, v);
    }
    out
}

/// Expected and simulated per-class pixel proportions seen in training.
/// `pixel_counts` maps record id to its per-class pixel counts.
pub fn seen_pixel_report(
    manifest: &DatasetManifest,
    config: MixConfig,
    pixel_counts: &BTreeMap<String, BTreeMap<ClassId, u64>>,
    n_batches: u64,
) -> Result<SeenPixelReport, MixError> {
    let mut sampler = make_sampler(manifest, config)?;
    let share = |pool: &SourcePool| -> Result<BTreeMap<ClassId, f64>, MixError> {
        Ok(normalise_counts(&pooled_share(pool.ids.iter(), pixel_counts)?).unwrap_or_default())
    };
    let syn_share = share(&sampler.synthetic)?;
    let lab_share = share(&sampler.labelled)?;
    let analytic = combine(config.ratio_synthetic, &syn_share, &lab_share);

    let mut drawn_syn: BTreeMap<ClassId, u64> = BTreeMap::new();
    let mut drawn_lab: BTreeMap<ClassId, u64> = BTreeMap::new();
    let (mut n_syn, mut n_lab) = (0u64, 0u64);
    for _ in 0..n_batches {
        for entry in sampler.next_batch().entries {
            let counts = pixel_counts
                .get(&entry.id)
                .ok_or_else(|| MixError::MissingCounts(entry.id.clone()))?;
            let (target, n) = if entry.source == Source::Synthetic {
                (&mut drawn_syn, &mut n_syn)
            } else {
                (&mut drawn_lab, &mut n_lab)
            };
            *n += 1;
            for (&class, &c) in counts {
                *target.entry(class).or_insert(0) += c;
            }
        }
    }
    let drawn = n_syn + n_lab;
    let fraction = if drawn == 0 { 0.0 } else { n_syn as f64 / drawn as f64 };
    let empirical = combine(
        fraction,
        &normalise_counts(&drawn_syn).unwrap_or_default(),
        &normalise_counts(&drawn_lab).unwrap_or_default(),
    );
    Ok(SeenPixelReport {
        ratio_synthetic: config.ratio_synthetic,
        analytic,
        empirical,
        images_drawn: drawn,
        synthetic_image_fraction: fraction,
    })
}
