//! Criteria that need trained models. Models are trained once and shared
//! between criteria; every run uses fixed seeds.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use procplan::losses::LossWeights;
use procplan::model::Model;
use procplan::synthdata::{self, CuratedDataset, Protocol, WorldConfig};
use procplan::training::{self, EvalConfig, Report, TrainConfig};

use crate::Verdict;

const WORLD_SEED: u64 = 1;
const SPLIT_SEED: u64 = 1;
const TRAIN_SEED: u64 = 0;
const EVAL_SEED: u64 = 0;
const HORIZON: usize = 3;

/// Epoch budget of the comparison runs. The learning-rate schedule is
/// compressed by the same factor as the epoch count.
const TREND_EPOCHS: usize = 40;
const TREND_DECAY_EVERY: usize = 8;

/// One SR point, the largest drop a cumulative addition may cause.
const SR_NOISE: f64 = 0.005;

fn world(multimodality: usize) -> &'static CuratedDataset {
    static WORLDS: OnceLock<Mutex<HashMap<usize, &'static CuratedDataset>>> = OnceLock::new();
    let mut worlds = WORLDS.get_or_init(Default::default).lock().unwrap();
    worlds.entry(multimodality).or_insert_with(|| {
        let cfg = WorldConfig {
            multimodality,
            ..WorldConfig::default()
        };
        let w = synthdata::generate_world(&cfg, WORLD_SEED).unwrap();
        Box::leak(Box::new(synthdata::curate(&w, Protocol::One, HORIZON, SPLIT_SEED)))
    })
}

struct Run {
    model: Model,
    report: Report,
    train_secs: f64,
}

impl Run {
    fn get(&self, metric: &str, method: &str) -> f64 {
        self.report
            .get(metric, method)
            .unwrap_or_else(|| panic!("report has no {metric}/{method} row"))
    }
}

#[derive(Clone, Copy)]
enum Setup {
    /// Full objective, 200 epochs, single-path world.
    Learnability,
    /// Action cross-entropy only.
    ActionOnly,
    /// Contrastive and action terms; the deterministic variant.
    Deterministic,
    /// All four terms.
    Full,
    /// All terms but the diversity regulariser.
    NoReg,
    /// All four terms without memory slots.
    NoMemory,
}

impl Setup {
    fn key(self) -> &'static str {
        match self {
            Setup::Learnability => "learnability",
            Setup::ActionOnly => "action-only",
            Setup::Deterministic => "deterministic",
            Setup::Full => "full",
            Setup::NoReg => "no-reg",
            Setup::NoMemory => "no-memory",
        }
    }

    fn multimodality(self) -> usize {
        match self {
            Setup::Learnability => 1,
            _ => 2,
        }
    }

    fn train_config(self) -> TrainConfig {
        let full = LossWeights::default();
        let base = TrainConfig {
            seed: TRAIN_SEED,
            epochs: TREND_EPOCHS,
            decay_every: TREND_DECAY_EVERY,
            ..TrainConfig::default()
        };
        match self {
            Setup::Learnability => TrainConfig {
                seed: TRAIN_SEED,
                ..TrainConfig::default()
            },
            Setup::ActionOnly => TrainConfig {
                weights: LossWeights {
                    contrastive: 0.0,
                    adversarial: 0.0,
                    diversity: 0.0,
                    ..full
                },
                ..base
            },
            Setup::Deterministic => TrainConfig {
                weights: LossWeights {
                    adversarial: 0.0,
                    diversity: 0.0,
                    ..full
                },
                ..base
            },
            Setup::Full => base,
            Setup::NoReg => TrainConfig {
                weights: LossWeights {
                    diversity: 0.0,
                    ..full
                },
                ..base
            },
            Setup::NoMemory => TrainConfig {
                memory_slots: 0,
                ..base
            },
        }
    }
}

fn eval_config() -> EvalConfig {
    EvalConfig {
        seed: EVAL_SEED,
        ..EvalConfig::default()
    }
}

fn run(setup: Setup) -> Arc<Run> {
    static RUNS: OnceLock<Mutex<HashMap<&'static str, Arc<Run>>>> = OnceLock::new();
    let runs = RUNS.get_or_init(Default::default);
    if let Some(r) = runs.lock().unwrap().get(setup.key()) {
        return r.clone();
    }
    let ds = world(setup.multimodality());
    let cfg = setup.train_config();
    let t = Instant::now();
    let out = training::train(ds, &cfg).unwrap();
    let train_secs = t.elapsed().as_secs_f64();
    let eval = EvalConfig {
        deterministic: !cfg.uses_noise(),
        ..eval_config()
    };
    let report = training::evaluate(&out.best, ds, &eval).unwrap();
    let r = Arc::new(Run {
        model: out.best,
        report,
        train_secs,
    });
    runs.lock().unwrap().insert(setup.key(), r.clone());
    r
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

pub fn c5_learnability() -> Verdict {
    let r = run(Setup::Learnability);
    let ds = world(1);
    let scored = ds.scored_len() as i32;
    let chance = (1.0 / ds.meta.num_actions as f64).powi(scored);
    let random = r.get("sr", "random").max(chance);
    let sr = r.get("sr", "viterbi");
    let miou = r.get("miou", "viterbi");
    let pass = sr >= 20.0 * random && miou >= 0.70;
    Verdict::new(
        pass,
        format!(
            "m=1 world, 200 epochs: test SR {} (need >= 20 x random {:.2e}), mIoU {:.3} (need >= 0.70), mAcc {:.3}; trained in {:.0}s (target 900s)",
            pct(sr),
            random,
            miou,
            r.get("macc", "viterbi"),
            r.train_secs
        ),
    )
}

pub fn c6_loss_ablation() -> Verdict {
    let rows = [
        ("L_a", run(Setup::ActionOnly).get("sr", "deterministic")),
        ("+L_l", run(Setup::Deterministic).get("sr", "deterministic")),
        ("+L_adv+L_reg", run(Setup::Full).get("sr", "mode")),
        ("+viterbi", run(Setup::Full).get("sr", "viterbi")),
    ];
    let steps_ok = rows.windows(2).all(|w| w[1].1 - w[0].1 >= -SR_NOISE);
    let full = rows[3].1;
    let best = rows.iter().all(|r| full >= r.1);
    Verdict::new(
        steps_ok && best,
        format!(
            "test SR {} (each step >= -{} points, last the best)",
            rows.iter().map(|(n, v)| format!("{n} {}", pct(*v))).collect::<Vec<_>>().join(", "),
            pct(SR_NOISE)
        ),
    )
}

pub fn c7_memory() -> Verdict {
    let none = run(Setup::NoMemory).get("sr", "viterbi");
    let full = run(Setup::Full).get("sr", "viterbi");
    Verdict::new(
        none < full,
        format!("test SR with 0 memory slots {} vs 128 slots {}", pct(none), pct(full)),
    )
}

pub fn c8_probabilistic() -> Verdict {
    let p = run(Setup::Full);
    let d = run(Setup::Deterministic);
    let (pk, pn) = (p.get("kl", "samples"), p.get("nll", "samples"));
    let (dk, dn) = (d.get("kl", "deterministic"), d.get("nll", "deterministic"));
    Verdict::new(
        pk < dk && pn < dn,
        format!(
            "probabilistic (K={}) KL {pk:.3} NLL {pn:.3} vs deterministic (z=0, K=1) KL {dk:.3} NLL {dn:.3}; probabilistic ModeRec {:.3}",
            eval_config().k,
            p.get("mode_rec", "samples")
        ),
    )
}

pub fn c9_regulariser() -> Verdict {
    let with = run(Setup::Full);
    let without = run(Setup::NoReg);
    let (wk, wn) = (with.get("kl", "samples"), with.get("nll", "samples"));
    let (ok, on) = (without.get("kl", "samples"), without.get("nll", "samples"));
    Verdict::new(
        ok >= wk && on >= wn,
        format!("without regulariser KL {ok:.3} NLL {on:.3}; with KL {wk:.3} NLL {wn:.3}"),
    )
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn c10_sample_count() -> Verdict {
    let r = run(Setup::Full);
    let ds = world(2);
    let ks = [150, 500, 1500];
    let seeds = 10;
    let mut stats = Vec::new();
    for k in ks {
        let kls: Vec<f64> = (0..seeds)
            .map(|s| {
                let cfg = EvalConfig {
                    k,
                    decode_k: 1,
                    seed: 1000 + s,
                    deterministic: false,
                    baselines: false,
                };
                training::evaluate(&r.model, ds, &cfg).unwrap().get("kl", "samples").unwrap()
            })
            .collect();
        stats.push(mean_std(&kls));
    }
    let mean_ok = stats[2].0 <= stats[0].0;
    let std_ok = stats.windows(2).all(|w| w[1].1 < w[0].1);
    Verdict::new(
        mean_ok && std_ok,
        format!(
            "KL mean (std) over {seeds} sampling seeds: {}",
            ks.iter()
                .zip(&stats)
                .map(|(k, (m, s))| format!("K={k} {m:.3} ({s:.3})"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}
