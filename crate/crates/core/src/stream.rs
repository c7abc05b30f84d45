//! Evaluation streams: corrupted target domains delivered in i.i.d., Dirichlet
//! label-correlated, or label-sorted order, optionally as a back-to-back
//! sequence of domains.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corrupt::{corrupt, CorruptionError, CorruptionSpec};
use crate::data::Dataset;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum StreamError {
    #[error("domain {domain}: budget {budget} exceeds dataset size {available}")]
    Budget {
        domain: usize,
        budget: usize,
        available: usize,
    },
    #[error("domain {domain}: batch size {batch_size} exceeds budget {budget}")]
    BatchLargerThanBudget {
        domain: usize,
        batch_size: usize,
        budget: usize,
    },
    #[error("batch size must be at least 1")]
    BatchSize,
    #[error("Dirichlet concentration must be positive and finite, got {0}")]
    Delta(f64),
    #[error("stream has no domains")]
    NoDomains,
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Corruption(#[from] CorruptionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StreamOrdering {
    Iid,
    /// Label-correlated order; smaller `delta` concentrates each class in fewer batches.
    Dirichlet { delta: f64 },
    /// Stable sort by label.
    Sorted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub corruption: CorruptionSpec,
    pub budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub ordering: StreamOrdering,
    pub batch_size: usize,
    pub domains: Vec<DomainSpec>,
    #[serde(default)]
    pub seed: u64,
}

impl StreamSpec {
    pub fn validate(&self, available: usize) -> Result<(), StreamError> {
        if self.batch_size == 0 {
            return Err(StreamError::BatchSize);
        }
        if self.domains.is_empty() {
            return Err(StreamError::NoDomains);
        }
        if let StreamOrdering::Dirichlet { delta } = self.ordering {
            if !(delta > 0.0 && delta.is_finite()) {
                return Err(StreamError::Delta(delta));
            }
        }
        for (domain, d) in self.domains.iter().enumerate() {
            d.corruption.validate()?;
            if d.budget > available {
                return Err(StreamError::Budget {
                    domain,
                    budget: d.budget,
                    available,
                });
            }
            if self.batch_size > d.budget {
                return Err(StreamError::BatchLargerThanBudget {
                    domain,
                    batch_size: self.batch_size,
                    budget: d.budget,
                });
            }
        }
        Ok(())
    }
}

/// Ground-truth labels of a batch. Only the metrics path reads these; the
/// adaptation API takes images alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeldOutLabels(Vec<usize>);

impl HeldOutLabels {
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: HeldOutLabels,
    /// Dataset indices of the samples, in batch order.
    pub sample_ids: Vec<usize>,
    pub domain_id: usize,
    pub batch_index: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }
}

/// SplitMix64 step, used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Symmetric Dirichlet sample drawn in log space so tiny concentrations do not
/// underflow: `Gamma(a) = Gamma(a + 1) · U^(1/a)`.
pub fn sample_dirichlet(alpha: f64, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("positive shape");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / alpha
        })
        .collect();
    let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

/// Each class splits its samples over `slots` timeline slots by a
/// Dirichlet(delta) proportion vector. Slots already holding their share
/// (`n / slots` samples) get no further classes, which keeps slots close to
/// batch size; the split itself cuts the shuffled class at the cumulative
/// proportions.
fn dirichlet_order(ids: &[usize], labels: &[usize], slots: usize, delta: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n_classes = ids.iter().map(|&i| labels[i] + 1).max().unwrap_or(0);
    let mut by_class = vec![Vec::new(); n_classes];
    for &i in ids {
        by_class[labels[i]].push(i);
    }
    let capacity = ids.len() as f64 / slots as f64;
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); slots];
    for members in &mut by_class {
        if members.is_empty() {
            continue;
        }
        members.shuffle(rng);
        let mut p = sample_dirichlet(delta, slots, rng);
        for (w, b) in p.iter_mut().zip(&buckets) {
            if b.len() as f64 >= capacity {
                *w = 0.0;
            }
        }
        let z: f64 = p.iter().sum();
        if z > 0.0 {
            p.iter_mut().for_each(|w| *w /= z);
        } else {
            // every open slot drew a negligible weight: fall back to the open slots uniformly
            let open: Vec<bool> = buckets.iter().map(|b| (b.len() as f64) < capacity).collect();
            let n_open = open.iter().filter(|&&o| o).count().max(1) as f64;
            p = open.iter().map(|&o| if o { 1.0 / n_open } else { 0.0 }).collect();
        }
        let n = members.len();
        let last = p.iter().rposition(|&w| w > 0.0).unwrap_or(slots - 1);
        let mut start = 0;
        let mut acc = 0.0;
        for (s, w) in p.iter().enumerate() {
            acc += w;
            let end = if s == last { n } else { ((acc * n as f64) as usize).min(n) };
            if end > start {
                buckets[s].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
    }
    let mut out = Vec::with_capacity(ids.len());
    for b in &mut buckets {
        b.shuffle(rng);
        out.extend_from_slice(b);
    }
    out
}

/// Realize a stream. Deterministic in `(dataset, spec)`; each domain's samples
/// are a permutation of a budget-sized subset of the dataset, and batches never
/// span two domains.
pub fn make_stream(dataset: &Dataset, spec: &StreamSpec) -> Result<Vec<Batch>, StreamError> {
    spec.validate(dataset.len())?;
    let b = spec.batch_size;
    let sample_shape = dataset.sample_shape().to_vec();
    let mut batches = Vec::new();
    for (domain_id, domain) in spec.domains.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, domain_id as u64));
        let mut ids: Vec<usize> = (0..dataset.len()).collect();
        ids.shuffle(&mut rng);
        ids.truncate(domain.budget);
        let order = match spec.ordering {
            StreamOrdering::Iid => ids,
            StreamOrdering::Sorted => {
                let mut s = ids;
                s.sort_by_key(|&i| dataset.labels()[i]);
                s
            }
            StreamOrdering::Dirichlet { delta } => {
                dirichlet_order(&ids, dataset.labels(), domain.budget.div_ceil(b), delta, &mut rng)
            }
        };
        for chunk in order.chunks(b) {
            let mut images = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let img = Tensor::new(sample_shape.clone(), dataset.sample(i).to_vec()).expect("sample shape");
                let cs = CorruptionSpec {
                    seed: mix_seed(mix_seed(domain.corruption.seed, domain_id as u64), i as u64),
                    ..domain.corruption
                };
                images.push(corrupt(&img, &cs)?);
            }
            batches.push(Batch {
                images: Tensor::stack(&images).expect("equal shapes"),
                labels: HeldOutLabels(chunk.iter().map(|&i| dataset.labels()[i]).collect()),
                sample_ids: chunk.to_vec(),
                domain_id,
                batch_index: batches.len(),
            });
        }
    }
    Ok(batches)
}

fn histogram(labels: &[usize]) -> Vec<usize> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut h = vec![0; k];
    for &l in labels {
        h[l] += 1;
    }
    h
}

/// Natural-log entropy of the empirical label histogram.
pub fn shannon_label_entropy(labels: &[usize]) -> Result<f64, StreamError> {
    if labels.is_empty() {
        return Err(StreamError::EmptyBatch);
    }
    let n = labels.len() as f64;
    Ok(histogram(labels)
        .into_iter()
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum())
}

/// Fraction of the batch taken by its most frequent label.
pub fn max_class_fraction(labels: &[usize]) -> Result<f64, StreamError> {
    if labels.is_empty() {
        return Err(StreamError::EmptyBatch);
    }
    Ok(*histogram(labels).iter().max().unwrap_or(&0) as f64 / labels.len() as f64)
}

/// Total-variation distance between the batch label histogram and `reference`
/// (a probability vector over classes).
pub fn label_tv_distance(labels: &[usize], reference: &[f64]) -> Result<f64, StreamError> {
    if labels.is_empty() {
        return Err(StreamError::EmptyBatch);
    }
    let h = histogram(labels);
    let n = labels.len() as f64;
    let k = h.len().max(reference.len());
    Ok(0.5
        * (0..k)
            .map(|c| {
                let p = h.get(c).map_or(0.0, |&v| v as f64 / n);
                (p - reference.get(c).copied().unwrap_or(0.0)).abs()
            })
            .sum::<f64>())
}
