//! Training loop: alternating generator and critic updates with a stepped
//! learning-rate schedule and validation-based model selection.

mod eval;

pub use eval::{evaluate, EvalConfig, MetricRow, Report};

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{self, KeyValues};
use crate::diffcore::{adam_step, AdamConfig, AdamState, Bound, Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{self, LossTerms, LossWeights, RegPair};
use crate::metrics::{score_prefix, success_rate};
use crate::model::{argmax_plans, is_critic_param, is_generator_param, Model, ModelConfig};
use crate::planner::draw_noise;
use crate::synthdata::{CuratedDataset, PlanInstance, Split};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Noise draws per instance for the diversity term.
    pub s_reg: usize,
    /// Pair of draws the diversity term is applied to.
    pub reg_pair: RegPair,
    /// Instances per batch that receive the diversity term.
    pub reg_batch: usize,
    /// Critic updates per generator update.
    pub critic_steps: usize,
    pub d: usize,
    pub memory_slots: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_noise: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 7e-4,
            lr_decay: 0.65,
            decay_every: 40,
            batch_size: 32,
            seed: 0,
            weights: LossWeights::default(),
            s_reg: 20,
            reg_pair: RegPair::Max,
            reg_batch: 4,
            critic_steps: 1,
            d: 128,
            memory_slots: 128,
            layers: 2,
            heads: 8,
            d_noise: 32,
        }
    }
}

const TRAIN_KEYS: [&str; 19] = [
    "epochs",
    "lr",
    "lr_decay",
    "decay_every",
    "batch_size",
    "seed",
    "lambda1",
    "lambda2",
    "lambda3",
    "lambda4",
    "s_reg",
    "reg_pair",
    "reg_batch",
    "critic_steps",
    "d",
    "memory_slots",
    "layers",
    "heads",
    "d_noise",
];

impl TrainConfig {
    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = epoch.checked_div(self.decay_every).unwrap_or(0);
        self.lr * self.lr_decay.powi(k as i32)
    }

    /// Without the adversarial and diversity terms nothing teaches the
    /// model to use its noise input, so such runs train and decode with
    /// `z = 0` (the deterministic variant).
    pub fn uses_noise(&self) -> bool {
        self.weights.adversarial > 0.0 || self.weights.diversity > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite() && self.lr_decay > 0.0) {
            return Err(Error::invalid("lr and lr_decay must be positive"));
        }
        if self.weights.diversity > 0.0 && (self.s_reg < 2 || self.reg_batch == 0) {
            return Err(Error::invalid("the diversity term needs s_reg >= 2 and reg_batch >= 1"));
        }
        Ok(())
    }

    pub fn model_config(&self, ds: &CuratedDataset) -> ModelConfig {
        ModelConfig {
            d: self.d,
            memory_slots: self.memory_slots,
            layers: self.layers,
            heads: self.heads,
            d_noise: self.d_noise,
            input_dim: ds.meta.input_dim,
            num_actions: ds.meta.num_actions,
            horizon: ds.meta.horizon,
        }
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.reject_unknown(&TRAIN_KEYS)?;
        macro_rules! set {
            ($field:expr, $key:literal) => {
                if let Some(v) = kv.get($key)? {
                    $field = v;
                }
            };
        }
        set!(self.epochs, "epochs");
        set!(self.lr, "lr");
        set!(self.lr_decay, "lr_decay");
        set!(self.decay_every, "decay_every");
        set!(self.batch_size, "batch_size");
        set!(self.seed, "seed");
        set!(self.weights.contrastive, "lambda1");
        set!(self.weights.action, "lambda2");
        set!(self.weights.adversarial, "lambda3");
        set!(self.weights.diversity, "lambda4");
        set!(self.s_reg, "s_reg");
        set!(self.reg_pair, "reg_pair");
        set!(self.reg_batch, "reg_batch");
        set!(self.critic_steps, "critic_steps");
        set!(self.d, "d");
        set!(self.memory_slots, "memory_slots");
        set!(self.layers, "layers");
        set!(self.heads, "heads");
        set!(self.d_noise, "d_noise");
        Ok(())
    }

    pub fn to_text(&self) -> String {
        config::render(&[
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            ("decay_every", self.decay_every.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("lambda1", self.weights.contrastive.to_string()),
            ("lambda2", self.weights.action.to_string()),
            ("lambda3", self.weights.adversarial.to_string()),
            ("lambda4", self.weights.diversity.to_string()),
            ("s_reg", self.s_reg.to_string()),
            ("reg_pair", self.reg_pair.to_string()),
            ("reg_batch", self.reg_batch.to_string()),
            ("critic_steps", self.critic_steps.to_string()),
            ("d", self.d.to_string()),
            ("memory_slots", self.memory_slots.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("d_noise", self.d_noise.to_string()),
        ])
    }
}

/// Per-epoch means of the loss components.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub contrastive: f64,
    pub action: f64,
    pub generator: f64,
    pub critic: f64,
    pub reg: f64,
    pub total: f64,
    pub val_sr: f64,
    pub lr: f64,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,contrastive,action,generator,critic,reg,total,val_sr,lr\n");
    for e in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            e.epoch, e.contrastive, e.action, e.generator, e.critic, e.reg, e.total, e.val_sr, e.lr
        );
    }
    out
}

pub struct TrainOutcome {
    /// Parameters with the best validation SR (the initial model when no
    /// epoch ran).
    pub best: Model,
    pub best_epoch: Option<usize>,
    pub best_val_sr: f64,
    /// Parameters after the last epoch.
    pub last: Model,
    pub log: Vec<EpochLog>,
}

impl TrainOutcome {
    /// Writes the best checkpoint and `train_log.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.best.save(dir)?;
        let path = dir.join("train_log.csv");
        std::fs::write(&path, log_csv(&self.log)).map_err(|e| Error::io(&path, e))
    }
}

/// Stacked features of a batch of instances.
pub(crate) struct BatchArrays {
    pub v_start: Array2<f64>,
    pub v_goal: Array2<f64>,
    /// `[b, T, input_dim]`
    pub lang: Array3<f64>,
    pub plans: Vec<Vec<usize>>,
}

pub(crate) fn stack(instances: &[&PlanInstance]) -> BatchArrays {
    let b = instances.len();
    let dim = instances[0].v_start.len();
    let t = instances[0].actions.len();
    let mut v_start = Array2::zeros((b, dim));
    let mut v_goal = Array2::zeros((b, dim));
    let mut lang = Array3::zeros((b, t, dim));
    for (i, inst) in instances.iter().enumerate() {
        v_start.row_mut(i).assign(&ndarray::ArrayView1::from(&inst.v_start[..]));
        v_goal.row_mut(i).assign(&ndarray::ArrayView1::from(&inst.v_goal[..]));
        for (s, l) in inst.lang_features.iter().enumerate() {
            lang.slice_mut(s![i, s, ..]).assign(&ndarray::ArrayView1::from(&l[..]));
        }
    }
    BatchArrays {
        v_start,
        v_goal,
        lang,
        plans: instances.iter().map(|i| i.actions.clone()).collect(),
    }
}

/// Zero-noise argmax plans for a list of instances.
pub fn deterministic_plans(model: &Model, instances: &[&PlanInstance]) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(256) {
        let b = stack(chunk);
        let z = Array2::zeros((chunk.len(), model.config.d_noise));
        let (logits, _) = model.infer(&b.v_start, &b.v_goal, &z)?;
        out.extend(argmax_plans(&logits));
    }
    Ok(out)
}

/// Validation SR with zero-noise decoding, scored on the first
/// `scored` actions.
pub fn validation_sr(model: &Model, instances: &[&PlanInstance], scored: usize) -> Result<f64> {
    if instances.is_empty() {
        return Ok(0.0);
    }
    let preds = deterministic_plans(model, instances)?;
    let gts: Vec<Vec<usize>> = instances.iter().map(|i| i.actions.clone()).collect();
    success_rate(&score_prefix(&preds, scored), &score_prefix(&gts, scored))
}

#[derive(Default)]
struct StepLosses {
    contrastive: f64,
    action: f64,
    generator: f64,
    critic: f64,
    reg: f64,
    total: f64,
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    model: Model,
    adam: AdamState,
    rng: ChaCha8Rng,
    vocab: ArrayD<f64>,
}

impl Trainer<'_> {
    fn noise(&mut self, rows: usize) -> Array2<f64> {
        if self.cfg.uses_noise() {
            draw_noise(&mut self.rng, rows, self.model.config.d_noise)
        } else {
            Array2::zeros((rows, self.model.config.d_noise))
        }
    }

    fn generator_step(&mut self, batch: &BatchArrays, lr: f64, out: &mut StepLosses) -> Result<()> {
        let w = self.cfg.weights;
        let b = batch.plans.len();
        let z = self.noise(b);
        let reg_plan = if w.diversity > 0.0 { Some(self.pick_reg_pairs(batch)?) } else { None };

        let model = &self.model;
        let mut g = Graph::new();
        let p = model.bind(&mut g, is_generator_param)?;
        let vs = g.constant(batch.v_start.clone().into_dyn())?;
        let vg = g.constant(batch.v_goal.clone().into_dyn())?;
        let zv = g.constant(z.into_dyn())?;
        let fwd = model.forward(&mut g, &p, vs, vg, zv)?;
        let mut terms = LossTerms::default();
        if w.contrastive > 0.0 {
            let raw = g.constant(self.vocab.clone())?;
            let vocab = model.embed_language(&mut g, &p, raw)?;
            let l = losses::contrastive_loss(&mut g, fwd.state_preds, vocab, &batch.plans)?;
            out.contrastive = g.item(l);
            terms.contrastive = Some(l);
        }
        if w.action > 0.0 {
            let targets = losses::one_hot(&batch.plans, model.config.num_actions)?;
            let l = losses::action_ce_loss(&mut g, fwd.action_logits, &targets)?;
            out.action = g.item(l);
            terms.action = Some(l);
        }
        if w.adversarial > 0.0 {
            let fake = model.critic_logit(&mut g, &p, fwd.state_preds)?;
            let l = losses::generator_loss(&mut g, fake)?;
            out.generator = g.item(l);
            terms.generator = Some(l);
        }
        if let Some((idx, za, zb)) = reg_plan {
            let l = reg_term(model, &mut g, &p, batch, &idx, &za, &zb)?;
            out.reg = g.item(l);
            terms.diversity = Some(l);
        }
        let total = losses::total_loss(&mut g, &terms, &w)?;
        out.total = g.item(total);
        g.backward(total)?;
        let grads = p.grads(&g);
        adam_step(&mut self.model.params, &grads, &mut self.adam, lr)
    }

    /// For each of the first `reg_batch` instances, draws `s_reg` noise
    /// vectors, runs them without gradients and keeps the pair chosen by
    /// `reg_pair`.
    fn pick_reg_pairs(&mut self, batch: &BatchArrays) -> Result<(Vec<usize>, Array2<f64>, Array2<f64>)> {
        let r = self.cfg.reg_batch.min(batch.plans.len());
        let s = self.cfg.s_reg;
        let dn = self.model.config.d_noise;
        let z = draw_noise(&mut self.rng, r * s, dn);
        let rep = |x: &Array2<f64>| {
            let rows: Vec<usize> = (0..r * s).map(|k| k / s).collect();
            x.select(Axis(0), &rows)
        };
        let (_, states) = self.model.infer(&rep(&batch.v_start), &rep(&batch.v_goal), &z)?;
        let mut idx = Vec::with_capacity(r);
        let mut za = Array2::zeros((r, dn));
        let mut zb = Array2::zeros((r, dn));
        for i in 0..r {
            let outs: Vec<ArrayD<f64>> = (0..s).map(|k| states.index_axis(Axis(0), i * s + k).to_owned().into_dyn()).collect();
            let zs: Vec<ArrayD<f64>> = (0..s).map(|k| z.row(i * s + k).to_owned().into_dyn()).collect();
            let (a, b, _) = losses::select_pair(&outs, &zs, self.cfg.reg_pair)?;
            idx.push(i);
            za.row_mut(i).assign(&z.row(i * s + a));
            zb.row_mut(i).assign(&z.row(i * s + b));
        }
        Ok((idx, za, zb))
    }

    /// One critic update against fakes from the current generator with
    /// fresh noise.
    fn critic_step(&mut self, batch: &BatchArrays, lr: f64) -> Result<f64> {
        let b = batch.plans.len();
        let z = self.noise(b);
        let (_, fake) = self.model.infer(&batch.v_start, &batch.v_goal, &z)?;
        let model = &self.model;
        let mut g = Graph::new();
        let p = model.bind(&mut g, is_critic_param)?;
        let lang = g.constant(batch.lang.clone().into_dyn())?;
        let real = model.embed_language(&mut g, &p, lang)?;
        let fake = g.constant(fake.into_dyn())?;
        let rl = model.critic_logit(&mut g, &p, real)?;
        let fl = model.critic_logit(&mut g, &p, fake)?;
        let loss = losses::critic_loss(&mut g, rl, fl)?;
        let value = g.item(loss);
        g.backward(loss)?;
        let grads = p.grads(&g);
        adam_step(&mut self.model.params, &grads, &mut self.adam, lr)?;
        Ok(value)
    }
}

/// Mean over the chosen instances of `-|out_a - out_b|_1 / |z_a - z_b|_1`,
/// re-running the selected pairs with gradients.
fn reg_term(
    model: &Model,
    g: &mut Graph,
    p: &Bound,
    batch: &BatchArrays,
    idx: &[usize],
    za: &Array2<f64>,
    zb: &Array2<f64>,
) -> Result<Var> {
    let r = idx.len();
    let vs = batch.v_start.select(Axis(0), idx);
    let vg = batch.v_goal.select(Axis(0), idx);
    let both = |a: &Array2<f64>| ndarray::concatenate![Axis(0), a.view(), a.view()];
    let vs = g.constant(both(&vs).into_dyn())?;
    let vg = g.constant(both(&vg).into_dyn())?;
    let z = ndarray::concatenate![Axis(0), za.view(), zb.view()];
    let zv = g.constant(z.into_dyn())?;
    let out = model.forward(g, p, vs, vg, zv)?;
    let mut total = g.scalar(0.0)?;
    for i in 0..r {
        let a = g.slice(out.state_preds, 0, i, i + 1)?;
        let b = g.slice(out.state_preds, 0, r + i, r + i + 1)?;
        let zai = za.row(i).to_owned().into_dyn();
        let zbi = zb.row(i).to_owned().into_dyn();
        let l = losses::pair_ratio_loss(g, a, b, &zai, &zbi)?;
        total = g.add(total, l)?;
    }
    g.scale(total, 1.0 / r as f64)
}

fn diverged(epoch: usize, step: usize, l: &StepLosses) -> Error {
    Error::Diverged {
        epoch,
        step,
        contrastive: l.contrastive,
        action: l.action,
        generator: l.generator,
        critic: l.critic,
        reg: l.reg,
    }
}

/// Trains a fresh model on the dataset's training split.
pub fn train(ds: &CuratedDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let model = Model::new(cfg.model_config(ds), cfg.seed)?;
    train_from(model, ds, cfg)
}

pub fn train_from(model: Model, ds: &CuratedDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.vocab.len() != ds.meta.num_actions {
        return Err(Error::invalid("dataset vocabulary does not cover every action"));
    }
    let train: Vec<&PlanInstance> = ds.split(Split::Train).collect();
    let val: Vec<&PlanInstance> = ds.split(Split::Val).collect();
    if train.is_empty() && cfg.epochs > 0 {
        return Err(Error::invalid("dataset has no training instances"));
    }
    let dim = ds.meta.input_dim;
    let vocab = ArrayD::from_shape_vec(IxDyn(&[ds.vocab.len(), dim]), ds.vocab_matrix().concat())
        .map_err(|_| Error::invalid("vocabulary features have the wrong width"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut trainer = Trainer {
        cfg,
        adam: AdamState::new(&model.params, AdamConfig::default()),
        model,
        rng,
        vocab,
    };
    let scored = ds.scored_len();
    let mut best = trainer.model.clone();
    let mut best_epoch = None;
    let mut best_val_sr = f64::NEG_INFINITY;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut trainer.rng);
        let mut sums = EpochLog {
            epoch,
            lr,
            ..Default::default()
        };
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (step, chunk) in batches.iter().enumerate() {
            let insts: Vec<&PlanInstance> = chunk.iter().map(|&i| train[i]).collect();
            let batch = stack(&insts);
            let mut l = StepLosses::default();
            let res = trainer.generator_step(&batch, lr, &mut l).and_then(|_| {
                if cfg.weights.adversarial > 0.0 {
                    for _ in 0..cfg.critic_steps {
                        l.critic = trainer.critic_step(&batch, lr)?;
                    }
                }
                Ok(())
            });
            match res {
                Err(Error::NonFinite { .. }) => return Err(diverged(epoch, step, &l)),
                Err(e) => return Err(e),
                Ok(()) if ![l.total, l.critic].iter().all(|x| x.is_finite()) => {
                    return Err(diverged(epoch, step, &l))
                }
                Ok(()) => {}
            }
            sums.contrastive += l.contrastive;
            sums.action += l.action;
            sums.generator += l.generator;
            sums.critic += l.critic;
            sums.reg += l.reg;
            sums.total += l.total;
        }
        let n = batches.len().max(1) as f64;
        for x in [
            &mut sums.contrastive,
            &mut sums.action,
            &mut sums.generator,
            &mut sums.critic,
            &mut sums.reg,
            &mut sums.total,
        ] {
            *x /= n;
        }
        sums.val_sr = validation_sr(&trainer.model, &val, scored)?;
        if sums.val_sr > best_val_sr {
            best_val_sr = sums.val_sr;
            best_epoch = Some(epoch);
            best = trainer.model.clone();
        }
        log.push(sums);
    }
    if best_epoch.is_none() {
        best_val_sr = validation_sr(&best, &val, scored)?;
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_sr,
        last: trainer.model,
        log,
    })
}
