use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use procplan::diffcore::{Bound, Graph, ParamStore};
use procplan::losses::{self, LossTerms, LossWeights};
use procplan::metrics::{self, GroundTruthModes, SamplesByKey};
use procplan::model::{is_critic_param, is_generator_param, Model, ModelConfig};
use procplan::planner::{self, VITERBI_EPS};
use procplan::synthdata::{
    self, CuratedDataset, DatasetMeta, PlanInstance, Protocol, Split, VocabEntry, WorldConfig,
};

use crate::Verdict;

// ---------------------------------------------------------------- C1

#[derive(Clone, Copy, Debug, PartialEq)]
enum LossPath {
    Contrastive,
    Action,
    Generator,
    Diversity,
    Critic,
    Total,
}

const PATHS: [LossPath; 6] = [
    LossPath::Contrastive,
    LossPath::Action,
    LossPath::Generator,
    LossPath::Diversity,
    LossPath::Critic,
    LossPath::Total,
];

struct Case {
    model: Model,
    path: LossPath,
    vs: ArrayD<f64>,
    vg: ArrayD<f64>,
    /// Three noise draws, `[b, d_noise]` each.
    z: Vec<ArrayD<f64>>,
    vocab: ArrayD<f64>,
    /// `[b, T, input_dim]` language features of the target plans.
    lang: ArrayD<f64>,
    plans: Vec<Vec<usize>>,
    weights: LossWeights,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    let n = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_case(rng: &mut ChaCha8Rng, path: LossPath) -> Case {
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let d = heads * rng.random_range(1..=16 / heads);
    let d = if d % 2 == 1 { d + heads.max(1) } else { d }.min(16);
    let d = d - d % heads;
    let cfg = ModelConfig {
        d,
        memory_slots: rng.random_range(0..=4),
        layers: rng.random_range(1..=2),
        heads,
        d_noise: rng.random_range(1..=4),
        input_dim: rng.random_range(2..=6),
        num_actions: rng.random_range(2..=5),
        horizon: rng.random_range(1..=3),
    };
    let model = Model::new(cfg.clone(), rng.random()).unwrap();
    let b = rng.random_range(1..=3);
    let plans: Vec<Vec<usize>> = (0..b)
        .map(|_| (0..cfg.horizon).map(|_| rng.random_range(0..cfg.num_actions)).collect())
        .collect();
    let vocab = uniform(rng, &[cfg.num_actions, cfg.input_dim]);
    let mut lang = ArrayD::zeros(IxDyn(&[b, cfg.horizon, cfg.input_dim]));
    for (i, p) in plans.iter().enumerate() {
        for (t, &a) in p.iter().enumerate() {
            for k in 0..cfg.input_dim {
                lang[[i, t, k]] = vocab[[a, k]] + 0.1 * rng.random_range(-1.0..1.0);
            }
        }
    }
    let weights = LossWeights {
        contrastive: rng.random_range(0.5..1.5),
        action: rng.random_range(0.5..1.5),
        adversarial: rng.random_range(0.05..1.0),
        diversity: rng.random_range(0.05..1.0),
    };
    Case {
        vs: uniform(rng, &[b, cfg.input_dim]),
        vg: uniform(rng, &[b, cfg.input_dim]),
        z: (0..3).map(|_| uniform(rng, &[b, cfg.d_noise])).collect(),
        model,
        path,
        vocab,
        lang,
        plans,
        weights,
    }
}

/// Loss of the case under `params`; with `grads`, also the gradients of
/// the parameters that the path trains.
fn case_loss(c: &Case, params: &ParamStore, grads: bool) -> (f64, Vec<Option<ArrayD<f64>>>) {
    let m = &c.model;
    let critic = c.path == LossPath::Critic;
    let mut g = Graph::new();
    let p = Bound::new(&mut g, params, |n| {
        grads && if critic { is_critic_param(n) } else { is_generator_param(n) }
    })
    .unwrap();
    let vs = g.constant(c.vs.clone()).unwrap();
    let vg = g.constant(c.vg.clone()).unwrap();
    let mut outs = Vec::new();
    for z in &c.z {
        let z = g.constant(z.clone()).unwrap();
        outs.push(m.forward(&mut g, &p, vs, vg, z).unwrap());
    }
    let n = m.config.num_actions;
    let contrastive = |g: &mut Graph| {
        let raw = g.constant(c.vocab.clone()).unwrap();
        let vocab = m.embed_language(g, &p, raw).unwrap();
        losses::contrastive_loss(g, outs[0].state_preds, vocab, &c.plans).unwrap()
    };
    let action = |g: &mut Graph| {
        losses::action_ce_loss(g, outs[0].action_logits, &losses::one_hot(&c.plans, n).unwrap()).unwrap()
    };
    let generator = |g: &mut Graph| {
        let fake = m.critic_logit(g, &p, outs[0].state_preds).unwrap();
        losses::generator_loss(g, fake).unwrap()
    };
    let diversity = |g: &mut Graph| {
        let firsts: Vec<_> = outs.iter().map(|o| g.slice(o.state_preds, 0, 0, 1).unwrap()).collect();
        let zs: Vec<ArrayD<f64>> = c.z.iter().map(|z| z.index_axis(Axis(0), 0).to_owned()).collect();
        losses::diversity_reg_loss(g, &firsts, &zs).unwrap()
    };
    let loss = match c.path {
        LossPath::Contrastive => contrastive(&mut g),
        LossPath::Action => action(&mut g),
        LossPath::Generator => generator(&mut g),
        LossPath::Diversity => diversity(&mut g),
        LossPath::Critic => {
            let lang = g.constant(c.lang.clone()).unwrap();
            let real = m.embed_language(&mut g, &p, lang).unwrap();
            let rl = m.critic_logit(&mut g, &p, real).unwrap();
            let fl = m.critic_logit(&mut g, &p, outs[0].state_preds).unwrap();
            losses::critic_loss(&mut g, rl, fl).unwrap()
        }
        LossPath::Total => {
            let terms = LossTerms {
                contrastive: Some(contrastive(&mut g)),
                action: Some(action(&mut g)),
                generator: Some(generator(&mut g)),
                diversity: Some(diversity(&mut g)),
            };
            losses::total_loss(&mut g, &terms, &c.weights).unwrap()
        }
    };
    let value = g.item(loss);
    if grads {
        g.backward(loss).unwrap();
        (value, p.grads(&g))
    } else {
        (value, Vec::new())
    }
}

#[derive(Default)]
struct GradStats {
    probes: usize,
    max_rel: f64,
    kinks: usize,
    unresolved: usize,
    failures: Vec<String>,
}

const REL_TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;
/// Central differences of a loss of size |f| carry a rounding error of
/// roughly eps_mach * |f| / STEP ~ 2e-11 |f|; disagreements below this bound
/// are not resolvable and the relative test does not apply.
const FD_NOISE: f64 = 1e-8;

fn probe(c: &Case, f0: f64, id: procplan::diffcore::ParamId, k: usize, analytic: f64, stats: &mut GradStats) {
    let eval = |delta: f64| {
        let mut p = c.model.params.clone();
        p.get_mut(id).as_slice_mut().unwrap()[k] += delta;
        case_loss(c, &p, false).0
    };
    let (fp, fm) = (eval(STEP), eval(-STEP));
    let numeric = (fp - fm) / (2.0 * STEP);
    let err = (analytic - numeric).abs();
    if err <= FD_NOISE * f0.abs().max(1.0) {
        stats.probes += 1;
        stats.unresolved += usize::from(err > REL_TOL * analytic.abs().max(numeric.abs()));
        return;
    }
    let rel = err / analytic.abs().max(numeric.abs());
    if rel < REL_TOL {
        stats.probes += 1;
        stats.max_rel = stats.max_rel.max(rel);
        return;
    }
    // A probe that straddles a ReLU kink, an |x| kink or a switch of the
    // selected diversity pair has different one-sided slopes; the function
    // is not differentiable there and the probe is discarded.
    let right = (fp - f0) / STEP;
    let left = (f0 - fm) / STEP;
    if (right - left).abs() > 1e-3 * right.abs().max(left.abs()).max(1e-3) {
        stats.kinks += 1;
        return;
    }
    stats.probes += 1;
    stats.max_rel = stats.max_rel.max(rel);
    stats.failures.push(format!(
        "{:?} {}[{k}]: analytic {analytic:e} numeric {numeric:e}",
        c.path,
        c.model.params.name(id)
    ));
}

pub fn c1_gradients() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let mut stats = GradStats::default();
    let mut covered = BTreeMap::new();
    for i in 0..200 {
        let c = random_case(&mut rng, PATHS[i % PATHS.len()]);
        *covered.entry(format!("{:?}", c.path)).or_insert(0) += 1;
        let (f0, grads) = case_loss(&c, &c.model.params, true);
        let trains = |n: &str| {
            if c.path == LossPath::Critic {
                is_critic_param(n)
            } else {
                is_generator_param(n)
            }
        };
        for (id, name, value) in c.model.params.iter() {
            if !trains(name) {
                continue;
            }
            for _ in 0..2 {
                let k = rng.random_range(0..value.len());
                let analytic = grads[id.0].as_ref().map_or(0.0, |g| g.as_slice().unwrap()[k]);
                probe(&c, f0, id, k, analytic, &mut stats);
            }
        }
    }
    let pass = stats.failures.is_empty() && stats.probes > 5000;
    let mut detail = format!(
        "200 configs ({}), {} probes, max rel err {:.2e} (tol {REL_TOL:e}), {} near-zero gradients within finite-difference rounding, {} non-differentiable probes skipped",
        covered.iter().map(|(k, v)| format!("{k}:{v}")).collect::<Vec<_>>().join(" "),
        stats.probes,
        stats.max_rel,
        stats.unresolved,
        stats.kinks
    );
    if let Some(f) = stats.failures.first() {
        detail.push_str(&format!("; {} failures, first: {f}", stats.failures.len()));
        if std::env::var_os("C1_VERBOSE").is_some() {
            eprintln!("{}", stats.failures.join("\n"));
        }
    }
    Verdict::new(pass, detail)
}

// ---------------------------------------------------------------- C2

fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows, cols));
    for mut r in m.rows_mut() {
        for x in r.iter_mut() {
            *x = if rng.random_bool(0.2) { 0.0 } else { rng.random::<f64>() };
        }
        let s = r.sum();
        if s > 0.0 {
            r /= s;
        }
    }
    m
}

/// Highest-scoring sequence by enumeration. Scores are summed in the same
/// order as the recursion; among equal scores the sequence that is
/// smallest when read from the last step backwards wins.
fn exhaustive_viterbi(em: &Array2<f64>, tr: &Array2<f64>) -> Vec<usize> {
    let (t, n) = em.dim();
    let lb = em.mapv(|x| (x + VITERBI_EPS).ln());
    let la = tr.mapv(|x| (x + VITERBI_EPS).ln());
    let mut best: Option<(f64, Vec<usize>)> = None;
    for code in 0..n.pow(t as u32) {
        let seq: Vec<usize> = (0..t).map(|s| code / n.pow(s as u32) % n).collect();
        let mut score = lb[[0, seq[0]]];
        for s in 1..t {
            score = score + la[[seq[s - 1], seq[s]]] + lb[[s, seq[s]]];
        }
        let better = match &best {
            None => true,
            Some((b, bs)) => {
                score > *b || (score == *b && seq.iter().rev().lt(bs.iter().rev()))
            }
        };
        if better {
            best = Some((score, seq));
        }
    }
    best.unwrap().1
}

pub fn c2_viterbi() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    let mut agree = 0;
    let mut first_miss = None;
    for i in 0..1000 {
        let t = rng.random_range(1..=4);
        let n = rng.random_range(1..=6);
        let em = random_rows(&mut rng, t, n);
        let tr = random_rows(&mut rng, n, n);
        let got = planner::viterbi_decode(&em, &tr).unwrap();
        let want = exhaustive_viterbi(&em, &tr);
        if got == want {
            agree += 1;
        } else if first_miss.is_none() {
            first_miss = Some(format!("case {i}: {got:?} vs {want:?}"));
        }
    }
    let mut detail = format!("{agree}/1000 instances (T<=4, N_a<=6) match exhaustive search");
    if let Some(m) = first_miss {
        detail.push_str(&format!("; first mismatch {m}"));
    }
    Verdict::new(agree == 1000, detail)
}

// ---------------------------------------------------------------- C3

pub fn c3_transitions() -> Verdict {
    let m = planner::estimate_transitions(&[vec![0, 1, 2], vec![0, 1, 3]], 4).unwrap();
    let stated = [0.1749, 0.4754, 0.1749, 0.1749];
    // Counts (0, 2, 0, 0) -> L1 (0, 1, 0, 0) -> softmax.
    let e = 1f64.exp();
    let oracle = [1.0 / (e + 3.0), e / (e + 3.0), 1.0 / (e + 3.0), 1.0 / (e + 3.0)];
    let row: Vec<f64> = m.row(0).to_vec();
    let worst = row.iter().zip(stated).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let oracle_err = row.iter().zip(oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let stochastic = planner::is_row_stochastic(&m, 1e-12);
    Verdict::new(
        worst < 1e-3 && oracle_err < 1e-15 && stochastic,
        format!(
            "row 0 = ({:.4}, {:.4}, {:.4}, {:.4}); max dev from stated {worst:.1e} (tol 1e-3), from closed form {oracle_err:.1e}",
            row[0], row[1], row[2], row[3]
        ),
    )
}

// ---------------------------------------------------------------- C4

struct Checks {
    failed: Vec<String>,
    count: usize,
}

impl Checks {
    fn eq(&mut self, what: &str, got: f64, want: f64, tol: f64) {
        self.count += 1;
        let within = (got - want).abs() <= tol;
        if !within {
            self.failed.push(format!("{what}: {got} vs {want}"));
        }
    }

    fn holds(&mut self, what: &str, ok: bool) {
        self.count += 1;
        if !ok {
            self.failed.push(what.to_string());
        }
    }
}

fn v(plans: &[&[usize]]) -> Vec<Vec<usize>> {
    plans.iter().map(|p| p.to_vec()).collect()
}

fn keyed(items: &[(usize, &[usize])]) -> GroundTruthModes {
    GroundTruthModes::from_instances(items.iter().map(|(k, p)| ((*k, 0), *p)))
}

fn samples(k: usize, plans: Vec<Vec<usize>>) -> SamplesByKey {
    BTreeMap::from([((k, 0), plans)])
}

/// One-hot cosine distance computed with explicit vectors.
fn cos_dist_oracle(plans: &[Vec<usize>], n: usize) -> f64 {
    let enc = |p: &Vec<usize>| {
        let mut x = vec![0.0; p.len() * n];
        for (t, &a) in p.iter().enumerate() {
            x[t * n + a] = 1.0;
        }
        x
    };
    let mut total = 0.0;
    let mut pairs = 0.0;
    for i in 0..plans.len() {
        for j in i + 1..plans.len() {
            let (a, b) = (enc(&plans[i]), enc(&plans[j]));
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            total += 1.0 - dot / (na * nb);
            pairs += 1.0;
        }
    }
    total / pairs
}

fn world_stat(m: usize, noise: f64) -> f64 {
    let cfg = WorldConfig {
        multimodality: m,
        noise_scale: noise,
        videos_per_task: 60,
        input_dim: 8,
        ..WorldConfig::default()
    };
    let ds = synthdata::curate_protocol1(&synthdata::generate_world(&cfg, 4).unwrap(), 3, 4);
    metrics::diversity_stats(ds.instances.iter().map(|i| (i.key(), i.actions.as_slice())))
}

pub fn c4_metrics() -> Verdict {
    let mut c = Checks { failed: Vec::new(), count: 0 };
    let sr = |p: &[&[usize]], g: &[&[usize]]| metrics::success_rate(&v(p), &v(g)).unwrap();
    let macc = |p: &[&[usize]], g: &[&[usize]]| metrics::mean_accuracy(&v(p), &v(g)).unwrap();
    let miou = |p: &[&[usize]], g: &[&[usize]]| metrics::mean_iou(&v(p), &v(g)).unwrap();

    c.eq("SR identical", sr(&[&[1, 2, 3], &[4, 5, 6]], &[&[1, 2, 3], &[4, 5, 6]]), 1.0, 0.0);
    c.eq("SR one of two", sr(&[&[1, 2, 3], &[4, 5, 6]], &[&[1, 2, 3], &[4, 5, 7]]), 0.5, 0.0);
    let p2 = metrics::success_rate(
        &metrics::score_prefix(&v(&[&[1, 2, 3]]), 2),
        &metrics::score_prefix(&v(&[&[1, 2, 9]]), 2),
    )
    .unwrap();
    c.eq("SR protocol 2 prefix", p2, 1.0, 0.0);
    c.eq("mAcc [1,2,3] vs [1,3,2]", macc(&[&[1, 2, 3]], &[&[1, 3, 2]]), 1.0 / 3.0, 1e-15);
    c.eq("mAcc identical", macc(&[&[1, 2, 3]], &[&[1, 2, 3]]), 1.0, 0.0);
    c.eq("mAcc disjoint", macc(&[&[1, 2, 3]], &[&[4, 5, 6]]), 0.0, 0.0);
    c.eq("mIoU {1,2,3} vs {1,2,4}", miou(&[&[1, 2, 3]], &[&[1, 2, 4]]), 0.5, 0.0);
    c.eq("mIoU repeats", miou(&[&[1, 1, 2]], &[&[2, 1, 2]]), 1.0, 0.0);
    c.eq("mIoU [1,1,1] vs [1,2,3]", miou(&[&[1, 1, 1]], &[&[1, 2, 3]]), 1.0 / 3.0, 1e-15);

    // KL
    let gt = keyed(&[(0, &[1, 2]), (0, &[3, 4])]);
    c.eq(
        "KL pred == gt",
        metrics::plan_kl(&samples(0, v(&[&[3, 4], &[1, 2]])), &gt, metrics::KL_EPS).unwrap(),
        0.0,
        1e-15,
    );
    let eps = metrics::KL_EPS;
    let z = 1.0 + 2.0 * eps;
    let (pa, qa, qb) = ((0.5 + eps) / z, (1.0 + eps) / z, eps / z);
    let closed = pa * (pa / qa).ln() + pa * (pa / qb).ln();
    let kl = metrics::plan_kl(&samples(0, v(&[&[1, 2]])), &gt, eps).unwrap();
    c.eq("KL {A,B} vs {A}", kl, closed, 1e-12);
    c.holds("KL {A,B} vs {A} is large", kl > 5.0);

    // NLL
    let inst = vec![((0, 0), vec![1, 2])];
    c.eq(
        "NLL frequency 1",
        metrics::plan_nll(&samples(0, vec![vec![1, 2]; 10]), &inst).unwrap(),
        0.0,
        1e-15,
    );
    c.eq(
        "NLL absent -> floor",
        metrics::plan_nll(&samples(0, vec![vec![5, 5]; 10]), &inst).unwrap(),
        -(1.0f64 / 100.0).ln(),
        1e-12,
    );
    let balanced: Vec<Vec<usize>> = (0..1000).map(|i| if i % 2 == 0 { vec![1, 2] } else { vec![3, 4] }).collect();
    let two = vec![((0, 0), vec![1, 2]), ((0, 0), vec![3, 4])];
    c.eq(
        "NLL balanced two modes",
        metrics::plan_nll(&samples(0, balanced), &two).unwrap(),
        2f64.ln(),
        1e-12,
    );

    // Mode precision / recall
    let all = samples(0, v(&[&[1, 2], &[3, 4]]));
    c.eq("ModePrec enumerate", metrics::mode_precision(&all, &gt).unwrap(), 1.0, 0.0);
    c.eq("ModeRec enumerate", metrics::mode_recall(&all, &gt).unwrap(), 1.0, 0.0);
    let none = samples(0, v(&[&[9, 9]]));
    c.eq("ModePrec none", metrics::mode_precision(&none, &gt).unwrap(), 0.0, 0.0);
    c.eq("ModeRec none", metrics::mode_recall(&none, &gt).unwrap(), 0.0, 0.0);
    let one = samples(0, v(&[&[1, 2], &[1, 2], &[1, 2]]));
    c.eq("ModePrec one mode", metrics::mode_precision(&one, &gt).unwrap(), 1.0, 0.0);
    c.eq("ModeRec one mode", metrics::mode_recall(&one, &gt).unwrap(), 0.5, 0.0);

    // CosDist
    c.eq("CosDist identical", metrics::pairwise_cos_dist(&v(&[&[1, 2], &[1, 2], &[1, 2]])), 0.0, 0.0);
    c.eq("CosDist disjoint T=2", metrics::pairwise_cos_dist(&v(&[&[0, 1], &[1, 0]])), 1.0, 0.0);

    // Diversity statistic
    c.eq("diversity m=1", world_stat(1, 0.1), 1.0, 0.0);
    c.eq("diversity m=3 noise 0", world_stat(3, 0.0), 3.0, 0.0);

    // Baselines
    let n_a = 7;
    let preds = metrics::baseline_random(20_000, 3, n_a, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let gts: Vec<Vec<usize>> = (0..20_000).map(|_| (0..3).map(|_| rng.random_range(0..n_a)).collect()).collect();
    let p = 1.0 / n_a as f64;
    let sigma = (p * (1.0 - p) / (3.0 * 20_000.0)).sqrt();
    c.eq("random mAcc ~ 1/N_a", metrics::mean_accuracy(&preds, &gts).unwrap(), p, 2.0 * sigma);
    let feats: Vec<(Vec<f64>, Vec<f64>, Vec<usize>)> = (0..50)
        .map(|i| {
            let a: Vec<f64> = (0..4).map(|_| rng.random()).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.random()).collect();
            (a, b, vec![i % 5, (i + 1) % 5])
        })
        .collect();
    let train: Vec<(&[f64], &[f64], &[usize])> = feats.iter().map(|(a, b, p)| (&a[..], &b[..], &p[..])).collect();
    let queries: Vec<(&[f64], &[f64])> = feats.iter().map(|(a, b, _)| (&a[..], &b[..])).collect();
    let got = metrics::baseline_retrieval(&train, &queries).unwrap();
    let gts: Vec<Vec<usize>> = feats.iter().map(|f| f.2.clone()).collect();
    c.eq("retrieval self SR", metrics::success_rate(&got, &gts).unwrap(), 1.0, 0.0);
    c.holds("retrieval deterministic", got == metrics::baseline_retrieval(&train, &queries).unwrap());

    // Random prediction sets: SR <= mAcc <= 1, SR <= mIoU, KL(p,p)=0,
    // CosDist matches the explicit one-hot computation.
    let mut bad_order = 0;
    let mut bad_kl = 0;
    let mut bad_cos = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=8);
        let t = rng.random_range(1..=4);
        let n_a = rng.random_range(2..=4);
        let mut draw = || -> Vec<Vec<usize>> {
            (0..n).map(|_| (0..t).map(|_| rng.random_range(0..n_a)).collect()).collect()
        };
        let (p, g) = (draw(), draw());
        let s = metrics::success_rate(&p, &g).unwrap();
        let a = metrics::mean_accuracy(&p, &g).unwrap();
        let u = metrics::mean_iou(&p, &g).unwrap();
        if !(s <= a && a <= 1.0 && s <= u) {
            bad_order += 1;
        }
        let modes = GroundTruthModes::from_instances(p.iter().map(|x| ((0, 0), x.as_slice())));
        if metrics::plan_kl(&samples(0, p.clone()), &modes, eps).unwrap().abs() > 1e-12 {
            bad_kl += 1;
        }
        if n > 1 && (metrics::pairwise_cos_dist(&p) - cos_dist_oracle(&p, n_a)).abs() > 1e-12 {
            bad_cos += 1;
        }
    }
    c.eq("random sets violating SR<=mAcc<=1, SR<=mIoU", bad_order as f64, 0.0, 0.0);
    c.eq("random sets with KL(p,p) != 0", bad_kl as f64, 0.0, 0.0);
    c.eq("random sets with CosDist != one-hot oracle", bad_cos as f64, 0.0, 0.0);

    let mut detail = format!("{}/{} fixture checks hold", c.count - c.failed.len(), c.count);
    if !c.failed.is_empty() {
        detail.push_str(&format!("; failed: {}", c.failed.join("; ")));
    }
    Verdict::new(c.failed.is_empty(), detail)
}

// ---------------------------------------------------------------- C11

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_procplan"))
        .args(args)
        .env_remove("PROCPLAN_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).into_owned())
    }
}

fn pipeline(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    fs::write(dir.join("world.cfg"), "input_dim = 24\n").unwrap();
    fs::write(
        dir.join("train.cfg"),
        "d = 16\nmemory_slots = 8\nheads = 2\nd_noise = 4\ns_reg = 6\nbatch_size = 16\n",
    )
    .unwrap();
    run_cli(&[
        "gen-data", "--seed", "11", "--config", &p("world.cfg"), "--tasks", "2", "--videos", "16", "--out",
        &p("data.jsonl"),
    ])?;
    run_cli(&[
        "train", "--seed", "12", "--config", &p("train.cfg"), "--data", &p("data.jsonl"), "--out", &p("ckpt"),
        "--epochs", "3",
    ])?;
    run_cli(&[
        "eval", "--seed", "13", "--data", &p("data.jsonl"), "--checkpoint", &p("ckpt"), "--k", "40", "--csv",
        &p("eval.csv"),
    ])?;
    let files = [
        "data.jsonl",
        "ckpt/model.cfg",
        "ckpt/params.manifest",
        "ckpt/params.bin",
        "ckpt/train_log.csv",
        "eval.csv",
    ];
    files
        .iter()
        .map(|f| fs::read(dir.join(f)).map(|b| (f.to_string(), b)).map_err(|e| format!("{f}: {e}")))
        .collect()
}

pub fn c11_determinism() -> Verdict {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ra, rb) = match (pipeline(a.path()), pipeline(b.path())) {
        (Ok(x), Ok(y)) => (x, y),
        (Err(e), _) | (_, Err(e)) => return Verdict::new(false, format!("pipeline failed: {e}")),
    };
    let differing: Vec<&str> = ra.iter().zip(&rb).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();
    let bytes: usize = ra.iter().map(|f| f.1.len()).sum();
    Verdict::new(
        differing.is_empty(),
        if differing.is_empty() {
            format!("gen-data, train and eval outputs byte-identical across two runs ({} files, {bytes} bytes)", ra.len())
        } else {
            format!("differing outputs: {}", differing.join(", "))
        },
    )
}

// ---------------------------------------------------------------- C12

/// Finite doubles with arbitrary exponent and mantissa bits, including
/// subnormals and signed zero.
fn any_finite(rng: &mut ChaCha8Rng) -> f64 {
    match rng.random_range(0..8) {
        0 => -0.0,
        1 => f64::from_bits(rng.random_range(1..1u64 << 52)),
        2 => f64::MAX * if rng.random() { 1.0 } else { -1.0 },
        _ => loop {
            let x = f64::from_bits(rng.random());
            if x.is_finite() {
                break x;
            }
        },
    }
}

fn bits(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

fn dataset_round_trip(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let dim = 6;
    let n_a = 5;
    let t = 3;
    let vocab: Vec<VocabEntry> = (0..n_a)
        .map(|a| VocabEntry {
            action_id: a,
            label: format!("step \"{a}\"\t\u{e9}"),
            lang_feature: (0..dim).map(|_| any_finite(rng)).collect(),
        })
        .collect();
    let instances: Vec<PlanInstance> = (0..100)
        .map(|i| PlanInstance {
            id: format!("v{i}/w{}", rng.random_range(0..9)),
            split: [Split::Train, Split::Val, Split::Test][i % 3],
            video_id: rng.random_range(0..usize::MAX >> 1),
            task_id: rng.random_range(0..4),
            v_start: (0..dim).map(|_| any_finite(rng)).collect(),
            v_goal: (0..dim).map(|_| any_finite(rng)).collect(),
            actions: (0..t).map(|_| rng.random_range(0..n_a)).collect(),
            lang_features: (0..t).map(|_| (0..dim).map(|_| any_finite(rng)).collect()).collect(),
            start_state_id: rng.random_range(0..1000),
            goal_state_id: rng.random_range(0..1000),
        })
        .collect();
    let ds = CuratedDataset {
        meta: DatasetMeta {
            input_dim: dim,
            num_actions: n_a,
            protocol: Protocol::Two,
            horizon: t,
        },
        vocab,
        instances,
    };
    let mut buf = Vec::new();
    synthdata::write_dataset_to(&ds, &mut buf).map_err(|e| e.to_string())?;
    let back = synthdata::read_dataset_from(&buf[..], Path::new("<memory>")).map_err(|e| e.to_string())?;
    let same_bits = ds.instances.iter().zip(&back.instances).all(|(a, b)| {
        bits(&a.v_start) == bits(&b.v_start)
            && bits(&a.v_goal) == bits(&b.v_goal)
            && a.lang_features.iter().zip(&b.lang_features).all(|(x, y)| bits(x) == bits(y))
    }) && ds.vocab.iter().zip(&back.vocab).all(|(a, b)| bits(&a.lang_feature) == bits(&b.lang_feature));
    if back != ds || !same_bits || back.instances.len() != 100 {
        return Err("dataset differs after round trip".into());
    }
    let mut again = Vec::new();
    synthdata::write_dataset_to(&back, &mut again).map_err(|e| e.to_string())?;
    if again != buf {
        return Err("re-serialised dataset is not byte-identical".into());
    }
    Ok(ds.instances.len())
}

fn checkpoint_round_trip(rng: &mut ChaCha8Rng, dir: &Path) -> Result<usize, String> {
    let mut scalars = 0;
    for i in 0..100 {
        let heads = rng.random_range(1..=2);
        let cfg = ModelConfig {
            d: heads * rng.random_range(1..=4) * 2,
            memory_slots: rng.random_range(0..=3),
            layers: rng.random_range(1..=2),
            heads,
            d_noise: rng.random_range(1..=3),
            input_dim: rng.random_range(1..=5),
            num_actions: rng.random_range(1..=4),
            horizon: rng.random_range(1..=3),
        };
        let mut model = Model::new(cfg, rng.random()).map_err(|e| e.to_string())?;
        let ids: Vec<_> = model.params.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            for x in model.params.get_mut(id).iter_mut() {
                if rng.random_bool(0.5) {
                    *x = any_finite(rng);
                }
            }
        }
        let path = dir.join(format!("m{i}"));
        model.save(&path).map_err(|e| e.to_string())?;
        let back = Model::load(&path).map_err(|e| e.to_string())?;
        if back.config != model.config {
            return Err(format!("model {i}: config differs"));
        }
        for ((_, na, a), (_, nb, b)) in model.params.iter().zip(back.params.iter()) {
            if na != nb || a.shape() != b.shape() || a.iter().zip(b.iter()).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Err(format!("model {i}: parameter {na} differs"));
            }
        }
        scalars += model.params.num_scalars();
    }
    Ok(scalars)
}

pub fn c12_round_trip() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC12);
    let dir = tempfile::tempdir().unwrap();
    match (dataset_round_trip(&mut rng), checkpoint_round_trip(&mut rng, dir.path())) {
        (Ok(n), Ok(s)) => Verdict::new(
            true,
            format!("{n} random instances and 100 random checkpoints ({s} scalars) round-trip bit-exactly"),
        ),
        (Err(e), _) | (_, Err(e)) => Verdict::new(false, e),
    }
}
