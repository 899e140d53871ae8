//! Plan sampling and decoding.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax_plans, Model};

/// Smoothing added inside logarithms during Viterbi decoding.
pub const VITERBI_EPS: f64 = 1e-12;

/// Forward passes per inference batch when sampling.
const SAMPLE_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct PlanSampleSet {
    pub plans: Vec<Vec<usize>>,
    /// `[K, d_noise]`
    pub noises: Array2<f64>,
}

/// `[k, dim]` standard normal draws.
pub fn draw_noise(rng: &mut ChaCha8Rng, k: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((k, dim), |_| StandardNormal.sample(rng))
}

/// Argmax plans for each row of `noises`, all conditioned on the same
/// start and goal features.
pub fn plans_for_noise(model: &Model, v_start: &[f64], v_goal: &[f64], noises: &Array2<f64>) -> Result<Vec<Vec<usize>>> {
    let dim = model.config.input_dim;
    if v_start.len() != dim || v_goal.len() != dim {
        return Err(Error::Shape {
            op: "sample_plans",
            lhs: vec![v_start.len(), v_goal.len()],
            rhs: vec![dim],
        });
    }
    let mut plans = Vec::with_capacity(noises.nrows());
    let mut row = 0;
    while row < noises.nrows() {
        let n = SAMPLE_CHUNK.min(noises.nrows() - row);
        let vs = Array1::from(v_start.to_vec()).broadcast((n, dim)).unwrap().to_owned();
        let vg = Array1::from(v_goal.to_vec()).broadcast((n, dim)).unwrap().to_owned();
        let z = noises.slice(ndarray::s![row..row + n, ..]).to_owned();
        let (logits, _) = model.infer(&vs, &vg, &z)?;
        plans.extend(argmax_plans(&logits));
        row += n;
    }
    Ok(plans)
}

/// `k` plans from independent standard normal noise seeded by `seed`.
pub fn sample_plans(model: &Model, v_start: &[f64], v_goal: &[f64], k: usize, seed: u64) -> Result<PlanSampleSet> {
    if k == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noises = draw_noise(&mut rng, k, model.config.d_noise);
    let plans = plans_for_noise(model, v_start, v_goal, &noises)?;
    Ok(PlanSampleSet { plans, noises })
}

/// The single plan produced with zero noise.
pub fn deterministic_plan(model: &Model, v_start: &[f64], v_goal: &[f64]) -> Result<Vec<usize>> {
    let z = Array2::zeros((1, model.config.d_noise));
    Ok(plans_for_noise(model, v_start, v_goal, &z)?.remove(0))
}

/// `[T, n]` per-step action frequencies.
pub fn marginal_distribution(plans: &[Vec<usize>], num_actions: usize) -> Result<Array2<f64>> {
    let first = plans.first().ok_or_else(|| Error::invalid("empty sample set"))?;
    let t = first.len();
    let mut out = Array2::zeros((t, num_actions));
    for plan in plans {
        if plan.len() != t {
            return Err(Error::invalid("samples of unequal length"));
        }
        for (s, &a) in plan.iter().enumerate() {
            if a >= num_actions {
                return Err(Error::invalid(format!("action id {a} outside vocabulary of {num_actions}")));
            }
            out[[s, a]] += 1.0;
        }
    }
    out /= plans.len() as f64;
    Ok(out)
}

/// Counts successive pairs, L1-normalises each row (empty rows stay zero)
/// and applies a row-wise softmax with unit temperature.
pub fn estimate_transitions(plans: &[Vec<usize>], num_actions: usize) -> Result<Array2<f64>> {
    let mut counts = Array2::<f64>::zeros((num_actions, num_actions));
    for plan in plans {
        for pair in plan.windows(2) {
            if pair[0] >= num_actions || pair[1] >= num_actions {
                return Err(Error::invalid(format!("action id outside vocabulary of {num_actions}")));
            }
            counts[[pair[0], pair[1]]] += 1.0;
        }
    }
    for mut row in counts.rows_mut() {
        let total = row.sum();
        if total > 0.0 {
            row /= total;
        }
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let z = row.sum();
        row /= z;
    }
    Ok(counts)
}

/// Most probable sequence under emissions `[T, n]` and transitions
/// `[n, n]`, starting from a uniform prior. Ties go to the lower action id.
pub fn viterbi_decode(emissions: &Array2<f64>, transitions: &Array2<f64>) -> Result<Vec<usize>> {
    let (t, n) = emissions.dim();
    if transitions.dim() != (n, n) || t == 0 {
        return Err(Error::Shape {
            op: "viterbi_decode",
            lhs: emissions.shape().to_vec(),
            rhs: transitions.shape().to_vec(),
        });
    }
    let log_b = emissions.mapv(|x| (x + VITERBI_EPS).ln());
    let log_a = transitions.mapv(|x| (x + VITERBI_EPS).ln());
    let mut score = log_b.row(0).to_owned();
    let mut back = Array2::<usize>::zeros((t, n));
    for s in 1..t {
        let mut next = Array1::zeros(n);
        for j in 0..n {
            let mut best = 0;
            let mut best_v = score[0] + log_a[[0, j]];
            for i in 1..n {
                let v = score[i] + log_a[[i, j]];
                if v > best_v {
                    best = i;
                    best_v = v;
                }
            }
            next[j] = best_v + log_b[[s, j]];
            back[[s, j]] = best;
        }
        score = next;
    }
    let mut last = 0;
    for j in 1..n {
        if score[j] > score[last] {
            last = j;
        }
    }
    let mut path = vec![last; t];
    for s in (1..t).rev() {
        path[s - 1] = back[[s, path[s]]];
    }
    Ok(path)
}

/// Most frequent full plan; ties go to the earliest first occurrence.
pub fn mode_select(plans: &[Vec<usize>]) -> Result<Vec<usize>> {
    if plans.is_empty() {
        return Err(Error::invalid("empty sample set"));
    }
    let mut counts: HashMap<&[usize], (usize, usize)> = HashMap::new();
    for (i, p) in plans.iter().enumerate() {
        counts.entry(p.as_slice()).or_insert((0, i)).0 += 1;
    }
    let (best, _) = counts
        .into_iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
        .unwrap();
    Ok(best.to_vec())
}

/// Checks that every row is a probability distribution.
pub fn is_row_stochastic(m: &Array2<f64>, tol: f64) -> bool {
    m.axis_iter(Axis(0))
        .all(|r| r.iter().all(|&x| x >= 0.0) && (r.sum() - 1.0).abs() <= tol)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMethod {
    Viterbi,
    Mode,
}

/// One line of a decoded-plan export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedPlan {
    pub instance_id: String,
    pub horizon: usize,
    pub plan: Vec<usize>,
    pub method: DecodeMethod,
}
