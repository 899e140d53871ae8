use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::deterministic_plans;
use crate::error::{Error, Result};
use crate::metrics::{self, score_prefix, GroundTruthModes, Key, SamplesByKey, KL_EPS};
use crate::model::Model;
use crate::planner::{self, draw_noise, plans_for_noise};
use crate::synthdata::{CuratedDataset, PlanInstance, Split};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Samples per (start, goal) key for the distribution metrics.
    pub k: usize,
    /// Minimum samples per instance used for Viterbi and mode decoding.
    pub decode_k: usize,
    pub seed: u64,
    /// Only the zero-noise, single-sample evaluation.
    pub deterministic: bool,
    pub baselines: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 1500,
            decode_k: 100,
            seed: 0,
            deterministic: false,
            baselines: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub method: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<MetricRow>,
    pub horizon: usize,
    pub protocol: String,
    pub config_hash: String,
}

impl Report {
    pub fn get(&self, metric: &str, method: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.method == method)
            .map(|r| r.value)
    }

    fn push(&mut self, metric: &str, method: &str, value: f64) {
        self.rows.push(MetricRow {
            metric: metric.into(),
            method: method.into(),
            value,
        });
    }

    pub fn csv_header() -> &'static str {
        "metric,method,value,T,protocol,config_hash\n"
    }

    /// Rows without the header line.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.metric, r.method, r.value, self.horizon, self.protocol, self.config_hash
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        format!("{}{}", Self::csv_header(), self.csv_rows())
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("T={} protocol={} config={}\n", self.horizon, self.protocol, self.config_hash);
        let _ = writeln!(out, "{:<14} {:<14} {:>12}", "method", "metric", "value");
        for r in &self.rows {
            let _ = writeln!(out, "{:<14} {:<14} {:>12.6}", r.method, r.metric, r.value);
        }
        out
    }
}

pub(crate) fn short_hash(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
}

fn push_plan_metrics(r: &mut Report, method: &str, preds: &[Vec<usize>], gts: &[Vec<usize>]) -> Result<()> {
    r.push("sr", method, metrics::success_rate(preds, gts)?);
    r.push("macc", method, metrics::mean_accuracy(preds, gts)?);
    r.push("miou", method, metrics::mean_iou(preds, gts)?);
    Ok(())
}

fn push_distribution_metrics(
    r: &mut Report,
    method: &str,
    samples: &SamplesByKey,
    gt: &GroundTruthModes,
    keyed: &[(Key, Vec<usize>)],
) -> Result<()> {
    r.push("kl", method, metrics::plan_kl(samples, gt, KL_EPS)?);
    r.push("nll", method, metrics::plan_nll(samples, keyed)?);
    r.push("mode_prec", method, metrics::mode_precision(samples, gt)?);
    r.push("mode_rec", method, metrics::mode_recall(samples, gt)?);
    r.push("cos_dist", method, metrics::cos_dist(samples)?);
    Ok(())
}

/// Samples for one test instance: `n` plans from a generator seeded by the
/// evaluation seed and the instance's position in the test split.
fn instance_samples(model: &Model, inst: &PlanInstance, n: usize, seed: u64, index: usize) -> Result<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let z = draw_noise(&mut rng, n, model.config.d_noise);
    plans_for_noise(model, &inst.v_start, &inst.v_goal, &z)
}

/// Scores a model on the test split.
///
/// Distribution metrics use `k` samples per (start, goal) key, spread
/// round-robin over the key's test instances. Each instance is decoded
/// (Viterbi over the sample marginal with training-split transitions, and
/// mode selection) from its own samples, topped up to `decode_k`. The
/// zero-noise single-sample variant is always reported as `deterministic`.
pub fn evaluate(model: &Model, ds: &CuratedDataset, cfg: &EvalConfig) -> Result<Report> {
    if model.config.horizon != ds.meta.horizon || model.config.num_actions != ds.meta.num_actions {
        return Err(Error::invalid(format!(
            "checkpoint is for T={} with {} actions, dataset has T={} with {}",
            model.config.horizon, model.config.num_actions, ds.meta.horizon, ds.meta.num_actions
        )));
    }
    let test: Vec<&PlanInstance> = ds.split(Split::Test).collect();
    if test.is_empty() {
        return Err(Error::invalid("dataset has no test instances"));
    }
    if cfg.k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let scored = ds.scored_len();
    let gts = score_prefix(&test.iter().map(|i| i.actions.clone()).collect::<Vec<_>>(), scored);
    let keyed: Vec<(Key, Vec<usize>)> = test.iter().zip(&gts).map(|(i, g)| (i.key(), g.clone())).collect();
    let gt = GroundTruthModes::from_instances(keyed.iter().map(|(k, p)| (*k, p.as_slice())));
    let mut by_key: BTreeMap<Key, Vec<usize>> = BTreeMap::new();
    for (i, inst) in test.iter().enumerate() {
        by_key.entry(inst.key()).or_default().push(i);
    }

    let mut report = Report {
        rows: Vec::new(),
        horizon: ds.meta.horizon,
        protocol: ds.meta.protocol.as_str().to_string(),
        config_hash: short_hash(&[
            &model.config.to_text(),
            &format!("{:016x}", model.params.fingerprint(|_| true)),
            &format!("{cfg:?}"),
            &format!("{:?}", ds.meta),
            &test.len().to_string(),
        ]),
    };

    if !cfg.deterministic {
        let train_plans: Vec<Vec<usize>> = ds.split(Split::Train).map(|i| i.actions.clone()).collect();
        let transitions = planner::estimate_transitions(&train_plans, ds.meta.num_actions)?;
        let mut per_instance: Vec<Vec<Vec<usize>>> = vec![Vec::new(); test.len()];
        let mut samples: SamplesByKey = BTreeMap::new();
        for (key, members) in &by_key {
            let m = members.len();
            for (slot, &i) in members.iter().enumerate() {
                let share = cfg.k / m + usize::from(slot < cfg.k % m);
                per_instance[i] = instance_samples(model, test[i], share.max(cfg.decode_k).max(1), cfg.seed, i)?;
            }
            let set = (0..cfg.k)
                .map(|j| per_instance[members[j % m]][j / m][..scored].to_vec())
                .collect();
            samples.insert(*key, set);
        }
        let mut viterbi = Vec::with_capacity(test.len());
        let mut mode = Vec::with_capacity(test.len());
        for plans in &per_instance {
            let emissions = planner::marginal_distribution(plans, ds.meta.num_actions)?;
            viterbi.push(planner::viterbi_decode(&emissions, &transitions)?[..scored].to_vec());
            mode.push(planner::mode_select(plans)?[..scored].to_vec());
        }
        push_plan_metrics(&mut report, "viterbi", &viterbi, &gts)?;
        push_plan_metrics(&mut report, "mode", &mode, &gts)?;
        push_distribution_metrics(&mut report, "samples", &samples, &gt, &keyed)?;
    }

    let det = score_prefix(&deterministic_plans(model, &test)?, scored);
    push_plan_metrics(&mut report, "deterministic", &det, &gts)?;
    let det_samples: SamplesByKey = by_key.iter().map(|(k, members)| (*k, vec![det[members[0]].clone()])).collect();
    push_distribution_metrics(&mut report, "deterministic", &det_samples, &gt, &keyed)?;

    if cfg.baselines {
        let random = metrics::baseline_random(test.len(), scored, ds.meta.num_actions, cfg.seed);
        push_plan_metrics(&mut report, "random", &random, &gts)?;
        let train: Vec<(&[f64], &[f64], &[usize])> = ds
            .split(Split::Train)
            .map(|i| (i.v_start.as_slice(), i.v_goal.as_slice(), i.actions.as_slice()))
            .collect();
        if !train.is_empty() {
            let queries: Vec<(&[f64], &[f64])> = test.iter().map(|i| (i.v_start.as_slice(), i.v_goal.as_slice())).collect();
            let retrieved = score_prefix(&metrics::baseline_retrieval(&train, &queries)?, scored);
            push_plan_metrics(&mut report, "retrieval", &retrieved, &gts)?;
        }
    }
    Ok(report)
}
