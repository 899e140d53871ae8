//! Deterministic and probabilistic plan metrics plus the two baselines.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Additive smoothing for plan KL.
pub const KL_EPS: f64 = 1e-6;

/// Grouping key: latent (start state, goal state).
pub type Key = (usize, usize);

fn check_aligned(preds: &[Vec<usize>], gts: &[Vec<usize>]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    if preds.is_empty() {
        return Err(Error::invalid("no instances to score"));
    }
    for (p, g) in preds.iter().zip(gts) {
        if p.len() != g.len() || p.is_empty() {
            return Err(Error::invalid(format!("plan lengths differ: {} vs {}", p.len(), g.len())));
        }
    }
    Ok(())
}

/// Keeps the first `n` actions of each plan.
pub fn score_prefix(plans: &[Vec<usize>], n: usize) -> Vec<Vec<usize>> {
    plans.iter().map(|p| p[..n.min(p.len())].to_vec()).collect()
}

pub fn success_rate(preds: &[Vec<usize>], gts: &[Vec<usize>]) -> Result<f64> {
    check_aligned(preds, gts)?;
    let hits = preds.iter().zip(gts).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

pub fn mean_accuracy(preds: &[Vec<usize>], gts: &[Vec<usize>]) -> Result<f64> {
    check_aligned(preds, gts)?;
    let total: f64 = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| p.iter().zip(g).filter(|(a, b)| a == b).count() as f64 / p.len() as f64)
        .sum();
    Ok(total / preds.len() as f64)
}

pub fn mean_iou(preds: &[Vec<usize>], gts: &[Vec<usize>]) -> Result<f64> {
    check_aligned(preds, gts)?;
    let total: f64 = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            let p: BTreeSet<_> = p.iter().collect();
            let g: BTreeSet<_> = g.iter().collect();
            p.intersection(&g).count() as f64 / p.union(&g).count() as f64
        })
        .sum();
    Ok(total / preds.len() as f64)
}

/// Unique ground-truth plans per key with their empirical frequencies.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruthModes {
    pub modes: BTreeMap<Key, BTreeMap<Vec<usize>, f64>>,
}

impl GroundTruthModes {
    pub fn from_instances<'a>(items: impl IntoIterator<Item = (Key, &'a [usize])>) -> Self {
        let mut counts: BTreeMap<Key, BTreeMap<Vec<usize>, f64>> = BTreeMap::new();
        for (key, plan) in items {
            *counts.entry(key).or_default().entry(plan.to_vec()).or_default() += 1.0;
        }
        for m in counts.values_mut() {
            let total: f64 = m.values().sum();
            m.values_mut().for_each(|v| *v /= total);
        }
        Self { modes: counts }
    }

    pub fn keys(&self) -> impl Iterator<Item = &Key> {
        self.modes.keys()
    }
}

/// Sampled plans per key.
pub type SamplesByKey = BTreeMap<Key, Vec<Vec<usize>>>;

fn frequencies(samples: &[Vec<usize>]) -> HashMap<&[usize], f64> {
    let mut f: HashMap<&[usize], f64> = HashMap::new();
    for s in samples {
        *f.entry(s.as_slice()).or_default() += 1.0;
    }
    let n = samples.len() as f64;
    f.values_mut().for_each(|v| *v /= n);
    f
}

fn samples_for<'a>(samples: &'a SamplesByKey, key: &Key) -> Result<&'a [Vec<usize>]> {
    match samples.get(key) {
        Some(s) if !s.is_empty() => Ok(s),
        _ => Err(Error::invalid(format!("no samples for key {key:?}"))),
    }
}

/// `KL(p || q)` of two distributions over plans, each smoothed by adding
/// `eps` to every plan in the union support and renormalising.
pub fn smoothed_kl(p: &[(Vec<usize>, f64)], q: &[(Vec<usize>, f64)], eps: f64) -> f64 {
    let pm: BTreeMap<&[usize], f64> = p.iter().map(|(k, v)| (k.as_slice(), *v)).collect();
    let qm: BTreeMap<&[usize], f64> = q.iter().map(|(k, v)| (k.as_slice(), *v)).collect();
    let support: BTreeSet<&[usize]> = pm.keys().chain(qm.keys()).copied().collect();
    let n = support.len() as f64;
    let zp = pm.values().sum::<f64>() + eps * n;
    let zq = qm.values().sum::<f64>() + eps * n;
    support
        .iter()
        .map(|s| {
            let a = (pm.get(s).copied().unwrap_or(0.0) + eps) / zp;
            let b = (qm.get(s).copied().unwrap_or(0.0) + eps) / zq;
            a * (a / b).ln()
        })
        .sum()
}

/// Mean over ground-truth keys of `KL(gt || predicted)`.
pub fn plan_kl(samples: &SamplesByKey, gt: &GroundTruthModes, eps: f64) -> Result<f64> {
    if gt.modes.is_empty() {
        return Err(Error::invalid("no ground-truth keys"));
    }
    let mut total = 0.0;
    for (key, modes) in &gt.modes {
        let pred: Vec<(Vec<usize>, f64)> = frequencies(samples_for(samples, key)?)
            .into_iter()
            .map(|(k, v)| (k.to_vec(), v))
            .collect();
        let gt: Vec<(Vec<usize>, f64)> = modes.iter().map(|(k, v)| (k.clone(), *v)).collect();
        total += smoothed_kl(&gt, &pred, eps);
    }
    Ok(total / gt.modes.len() as f64)
}

/// Mean negative log of the sampled frequency of each instance's plan,
/// floored at `1 / (10 K)`.
pub fn plan_nll(samples: &SamplesByKey, instances: &[(Key, Vec<usize>)]) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::invalid("no instances to score"));
    }
    let mut cache: HashMap<Key, HashMap<&[usize], f64>> = HashMap::new();
    let mut total = 0.0;
    for (key, plan) in instances {
        let s = samples_for(samples, key)?;
        let floor = 1.0 / (10.0 * s.len() as f64);
        let freq = cache.entry(*key).or_insert_with(|| frequencies(s));
        let f = freq.get(plan.as_slice()).copied().unwrap_or(0.0);
        total -= f.max(floor).ln();
    }
    Ok(total / instances.len() as f64)
}

/// Mean over keys of the fraction of samples equal to some GT mode.
pub fn mode_precision(samples: &SamplesByKey, gt: &GroundTruthModes) -> Result<f64> {
    mean_over_keys(gt, |key, modes| {
        let s = samples_for(samples, key)?;
        Ok(s.iter().filter(|p| modes.contains_key(*p)).count() as f64 / s.len() as f64)
    })
}

/// Mean over keys of the fraction of GT modes hit by some sample.
pub fn mode_recall(samples: &SamplesByKey, gt: &GroundTruthModes) -> Result<f64> {
    mean_over_keys(gt, |key, modes| {
        let s: BTreeSet<&Vec<usize>> = samples_for(samples, key)?.iter().collect();
        Ok(modes.keys().filter(|m| s.contains(m)).count() as f64 / modes.len() as f64)
    })
}

fn mean_over_keys(gt: &GroundTruthModes, f: impl Fn(&Key, &BTreeMap<Vec<usize>, f64>) -> Result<f64>) -> Result<f64> {
    if gt.modes.is_empty() {
        return Err(Error::invalid("no ground-truth keys"));
    }
    let mut total = 0.0;
    for (k, m) in &gt.modes {
        total += f(k, m)?;
    }
    Ok(total / gt.modes.len() as f64)
}

/// Mean pairwise `1 - cos` between concatenated one-hot encodings of the
/// samples of one key. For two plans of length T the cosine is the number
/// of matching positions over T.
pub fn pairwise_cos_dist(samples: &[Vec<usize>]) -> f64 {
    let k = samples.len();
    if k < 2 {
        return 0.0;
    }
    let t = samples[0].len();
    let mut same_pairs = 0.0;
    for step in 0..t {
        let mut counts: HashMap<usize, f64> = HashMap::new();
        for s in samples {
            *counts.entry(s[step]).or_default() += 1.0;
        }
        same_pairs += counts.values().map(|n| n * (n - 1.0) / 2.0).sum::<f64>();
    }
    let pairs = (k * (k - 1)) as f64 / 2.0;
    1.0 - same_pairs / (pairs * t as f64)
}

/// Mean over keys of [`pairwise_cos_dist`].
pub fn cos_dist(samples: &SamplesByKey) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no sample sets"));
    }
    Ok(samples.values().map(|s| pairwise_cos_dist(s)).sum::<f64>() / samples.len() as f64)
}

/// Mean number of distinct plans per `(start, goal)` key.
pub fn diversity_stats<'a>(items: impl IntoIterator<Item = (Key, &'a [usize])>) -> f64 {
    let gt = GroundTruthModes::from_instances(items);
    if gt.modes.is_empty() {
        return 0.0;
    }
    gt.modes.values().map(|m| m.len() as f64).sum::<f64>() / gt.modes.len() as f64
}

/// Uniform i.i.d. action ids.
pub fn baseline_random(n: usize, horizon: usize, num_actions: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..horizon).map(|_| rng.random_range(0..num_actions)).collect())
        .collect()
}

/// Copies the plan of the training instance whose concatenated
/// `(v_start, v_goal)` is closest in Euclidean distance; ties keep the
/// earliest training instance.
pub fn baseline_retrieval(train: &[(&[f64], &[f64], &[usize])], queries: &[(&[f64], &[f64])]) -> Result<Vec<Vec<usize>>> {
    if train.is_empty() {
        return Err(Error::invalid("retrieval needs at least one training instance"));
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    Ok(queries
        .iter()
        .map(|(s, g)| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, (ts, tg, _)) in train.iter().enumerate() {
                let d = dist(s, ts) + dist(g, tg);
                if d < best_d {
                    best = i;
                    best_d = d;
                }
            }
            train[best].2.to_vec()
        })
        .collect())
}
