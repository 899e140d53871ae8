//! Training objectives. Every loss is summed over plan steps and averaged
//! over the batch.

use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayD, Axis, IxDyn};

use crate::diffcore::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub contrastive: f64,
    pub action: f64,
    pub adversarial: f64,
    pub diversity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            contrastive: 1.0,
            action: 1.0,
            adversarial: 0.1,
            diversity: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::invalid(format!("loss weight {name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("contrastive", self.contrastive),
            ("action", self.action),
            ("adversarial", self.adversarial),
            ("diversity", self.diversity),
        ]
    }
}

/// One-hot `[b, T, n]` targets from action ids.
pub fn one_hot(plans: &[Vec<usize>], n: usize) -> Result<ArrayD<f64>> {
    let t = plans.first().map_or(0, Vec::len);
    let mut out = ArrayD::zeros(IxDyn(&[plans.len(), t, n]));
    for (b, plan) in plans.iter().enumerate() {
        if plan.len() != t {
            return Err(Error::invalid("plans of unequal length in one batch"));
        }
        for (s, &a) in plan.iter().enumerate() {
            if a >= n {
                return Err(Error::invalid(format!("action id {a} outside vocabulary of {n}")));
            }
            out[[b, s, a]] = 1.0;
        }
    }
    Ok(out)
}

fn batch_size(g: &Graph, x: Var) -> f64 {
    g.shape(x)[0] as f64
}

/// `-sum_t log softmax_j(l_j . v_t)[positive_t]` with the whole vocabulary
/// as negatives. `state_preds: [b, T, d]`, `vocabulary: [V, d]`, and
/// `positives[b][t]` indexes the vocabulary.
pub fn contrastive_loss(g: &mut Graph, state_preds: Var, vocabulary: Var, positives: &[Vec<usize>]) -> Result<Var> {
    let v = g.shape(vocabulary)[0];
    let mask = one_hot(positives, v)?;
    let s = g.shape(state_preds);
    if mask.shape()[..2] != s[..2] {
        return Err(Error::Shape {
            op: "contrastive_loss",
            lhs: s.to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    let vt = g.transpose(vocabulary)?;
    let scores = g.matmul(state_preds, vt)?;
    let logp = g.log_softmax(scores, 2)?;
    pick_negative_mean(g, logp, mask)
}

/// Cross-entropy of `[b, T, n]` logits against one-hot targets.
pub fn action_ce_loss(g: &mut Graph, logits: Var, targets: &ArrayD<f64>) -> Result<Var> {
    if g.shape(logits) != targets.shape() {
        return Err(Error::Shape {
            op: "action_ce_loss",
            lhs: g.shape(logits).to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let last = targets.ndim() - 1;
    for row in targets.lanes(Axis(last)) {
        let ones = row.iter().filter(|&&x| x == 1.0).count();
        if ones != 1 || row.iter().any(|&x| x != 0.0 && x != 1.0) {
            return Err(Error::invalid("action targets must be one-hot rows"));
        }
    }
    let logp = g.log_softmax(logits, last)?;
    pick_negative_mean(g, logp, targets.clone())
}

fn pick_negative_mean(g: &mut Graph, logp: Var, mask: ArrayD<f64>) -> Result<Var> {
    let b = batch_size(g, logp);
    let mask = g.constant(mask)?;
    let picked = g.mul(logp, mask)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / b)
}

/// `-(log C(real) + log(1 - C(fake)))` from critic logits `[b, 1]`.
pub fn critic_loss(g: &mut Graph, real_logit: Var, fake_logit: Var) -> Result<Var> {
    let b = batch_size(g, real_logit);
    let real = g.log_sigmoid(real_logit)?;
    let neg = g.scale(fake_logit, -1.0)?;
    let fake = g.log_sigmoid(neg)?;
    let both = g.add(real, fake)?;
    let total = g.sum(both)?;
    g.scale(total, -1.0 / b)
}

/// Non-saturating generator loss `-log C(fake)`.
pub fn generator_loss(g: &mut Graph, fake_logit: Var) -> Result<Var> {
    let b = batch_size(g, fake_logit);
    let l = g.log_sigmoid(fake_logit)?;
    let total = g.sum(l)?;
    g.scale(total, -1.0 / b)
}

/// Which pair of noise draws the diversity term is applied to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RegPair {
    /// The pair with the largest output-to-noise distance ratio.
    #[default]
    Max,
    /// The pair with the smallest ratio, i.e. the largest (least negative)
    /// per-pair loss.
    Min,
}

impl FromStr for RegPair {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(RegPair::Max),
            "min" => Ok(RegPair::Min),
            _ => Err(Error::invalid(format!("reg_pair must be max or min, got {s:?}"))),
        }
    }
}

impl fmt::Display for RegPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegPair::Max => "max",
            RegPair::Min => "min",
        })
    }
}

/// Pair `(i, j, ratio)` maximising `|out_i - out_j|_1 / |z_i - z_j|_1`.
/// Pairs with identical noise are skipped; ties keep the first pair.
pub fn max_ratio_pair(outputs: &[ArrayD<f64>], noises: &[ArrayD<f64>]) -> Result<(usize, usize, f64)> {
    select_pair(outputs, noises, RegPair::Max)
}

/// Pair `(i, j, ratio)` chosen by `which`; ties keep the first pair.
pub fn select_pair(outputs: &[ArrayD<f64>], noises: &[ArrayD<f64>], which: RegPair) -> Result<(usize, usize, f64)> {
    if outputs.len() < 2 || outputs.len() != noises.len() {
        return Err(Error::invalid(format!(
            "diversity term needs at least two samples with matching noise, got {} outputs and {} noises",
            outputs.len(),
            noises.len()
        )));
    }
    let l1 = |a: &ArrayD<f64>, b: &ArrayD<f64>| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>();
    let mut best: Option<(usize, usize, f64)> = None;
    for i in 0..outputs.len() {
        for j in i + 1..outputs.len() {
            let dz = l1(&noises[i], &noises[j]);
            if dz == 0.0 {
                continue;
            }
            let r = l1(&outputs[i], &outputs[j]) / dz;
            let better = match which {
                RegPair::Max => best.is_none_or(|(_, _, b)| r > b),
                RegPair::Min => best.is_none_or(|(_, _, b)| r < b),
            };
            if better {
                best = Some((i, j, r));
            }
        }
    }
    best.ok_or_else(|| Error::invalid("all noise samples are identical"))
}

/// `-max_{i<j} |out_i - out_j|_1 / |z_i - z_j|_1`. Only the winning pair
/// is differentiated.
pub fn diversity_reg_loss(g: &mut Graph, outputs: &[Var], noises: &[ArrayD<f64>]) -> Result<Var> {
    let values: Vec<ArrayD<f64>> = outputs.iter().map(|&v| g.value(v).clone()).collect();
    let (i, j, _) = max_ratio_pair(&values, noises)?;
    pair_ratio_loss(g, outputs[i], outputs[j], &noises[i], &noises[j])
}

/// `-|a - b|_1 / |za - zb|_1` for one chosen pair.
pub fn pair_ratio_loss(g: &mut Graph, a: Var, b: Var, za: &ArrayD<f64>, zb: &ArrayD<f64>) -> Result<Var> {
    let dz: f64 = za.iter().zip(zb.iter()).map(|(x, y)| (x - y).abs()).sum();
    if dz == 0.0 {
        return Err(Error::invalid("diversity pair has identical noise"));
    }
    let diff = g.sub(a, b)?;
    let abs = g.abs(diff)?;
    let total = g.sum(abs)?;
    g.scale(total, -1.0 / dz)
}

/// Loss terms for one batch; a term may be absent only when its weight is 0.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub contrastive: Option<Var>,
    pub action: Option<Var>,
    pub generator: Option<Var>,
    pub diversity: Option<Var>,
}

pub fn total_loss(g: &mut Graph, terms: &LossTerms, weights: &LossWeights) -> Result<Var> {
    weights.validate()?;
    let pairs = [
        (terms.contrastive, weights.contrastive, "contrastive"),
        (terms.action, weights.action, "action"),
        (terms.generator, weights.adversarial, "adversarial"),
        (terms.diversity, weights.diversity, "diversity"),
    ];
    let mut total = g.scalar(0.0)?;
    for (term, w, name) in pairs {
        match term {
            Some(v) => {
                let scaled = g.scale(v, w)?;
                total = g.add(total, scaled)?;
            }
            None if w != 0.0 => return Err(Error::invalid(format!("{name} term missing with weight {w}"))),
            None => {}
        }
    }
    Ok(total)
}
