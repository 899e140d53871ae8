//! Command-line front end.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::Model;
use crate::planner::{self, DecodeMethod, DecodedPlan};
use crate::synthdata::{self, CuratedDataset, Protocol, Split, WorldConfig};
use crate::training::{self, EvalConfig, Report, TrainConfig};

pub const SEED_ENV: &str = "PROCPLAN_SEED";

#[derive(Debug, Parser)]
#[command(name = "procplan", version, about = "Probabilistic procedure planning on synthetic instructional data")]
pub struct Cli {
    /// Random seed (defaults to $PROCPLAN_SEED, then 0).
    #[arg(long, global = true, env = SEED_ENV)]
    pub seed: Option<u64>,

    /// Flat `key = value` config file for the command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world and write a curated dataset.
    GenData(GenDataArgs),
    /// Train a planner and write the best-validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Sample and decode plans for test instances (JSON lines).
    Sample(SampleArgs),
    /// Run an ablation grid and write a combined CSV.
    Ablate(AblateArgs),
    /// Print the transition matrix estimated from the training split.
    Transitions(TransitionsArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long)]
    pub actions_per_task: Option<usize>,
    /// Videos per task.
    #[arg(long)]
    pub videos: Option<usize>,
    #[arg(long)]
    pub multimodality: Option<usize>,
    /// Observation noise standard deviation.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, default_value = "1", value_parser = ["1", "2"])]
    pub protocol: String,
    #[arg(long, default_value_t = 3)]
    pub horizon: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Must match the dataset's horizon when given.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lambda3: Option<f64>,
    #[arg(long)]
    pub lambda4: Option<f64>,
    #[arg(long)]
    pub memory_size: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Decode {
    Viterbi,
    Mode,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Samples per (start, goal) key.
    #[arg(long)]
    pub k: Option<usize>,
    /// Minimum samples per instance for decoding.
    #[arg(long)]
    pub decode_k: Option<usize>,
    #[arg(long, value_enum, default_value_t = Decode::Viterbi)]
    pub decode: Decode,
    /// Zero noise and a single sample.
    #[arg(long)]
    pub deterministic: bool,
    /// CSV output path (default: eval.csv in the checkpoint directory).
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = Decode::Viterbi)]
    pub decode: Decode,
    /// Decode at most this many test instances.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Output path (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    /// Cumulative loss terms and decoding.
    Losses,
    /// Memory sizes 0, 64, 128, 256.
    Memory,
    /// Sample counts 150, 500, 1500, 2500.
    K,
    /// Viterbi versus mode decoding.
    Decode,
    /// With and without the diversity regulariser.
    Reg,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub grid: Grid,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Samples per key for evaluation.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TransitionsArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output path (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn load_config(path: &Option<PathBuf>) -> Result<KeyValues> {
    match path {
        Some(p) => KeyValues::read(p),
        None => Ok(KeyValues::default()),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

/// Runs one parsed command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let kv = load_config(&cli.config)?;
    match cli.command {
        Command::GenData(a) => gen_data(a, seed, &kv, out),
        Command::Train(a) => train(a, cli.seed, &kv, out),
        Command::Eval(a) => eval(a, seed, &kv, out),
        Command::Sample(a) => sample(a, seed, &kv, out),
        Command::Ablate(a) => ablate(a, cli.seed, &kv, out),
        Command::Transitions(a) => transitions(a, &kv, out),
    }
}

fn gen_data(a: GenDataArgs, seed: u64, kv: &KeyValues, out: &mut dyn Write) -> Result<()> {
    let mut world = WorldConfig {
        horizon: a.horizon,
        ..WorldConfig::default()
    };
    world.apply(kv)?;
    if let Some(v) = a.tasks {
        world.tasks = v;
    }
    if let Some(v) = a.actions_per_task {
        world.actions_per_task = v;
    }
    if let Some(v) = a.videos {
        world.videos_per_task = v;
    }
    if let Some(v) = a.multimodality {
        world.multimodality = v;
    }
    if let Some(v) = a.noise {
        world.noise_scale = v;
    }
    let protocol = Protocol::parse(&a.protocol)?;
    let w = synthdata::generate_world(&world, seed)?;
    let ds = synthdata::curate(&w, protocol, a.horizon, seed);
    synthdata::write_dataset(&ds, &a.out)?;
    let stats = metrics::diversity_stats(ds.instances.iter().map(|i| (i.key(), i.actions.as_slice())));
    let count = |s| ds.split(s).count();
    emit(
        out,
        &format!(
            "wrote {} instances (train {}, val {}, test {}) to {}\ndiversity_stats: {:?}\n",
            ds.instances.len(),
            count(Split::Train),
            count(Split::Val),
            count(Split::Test),
            a.out.display(),
            stats
        ),
    )
}

/// Config-file values, with `--seed` taking precedence over `seed = ...`.
fn train_config(seed: Option<u64>, kv: &KeyValues) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    cfg.apply(kv)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn train(a: TrainArgs, seed: Option<u64>, kv: &KeyValues, out: &mut dyn Write) -> Result<()> {
    let ds = synthdata::read_dataset(&a.data)?;
    if let Some(t) = a.horizon {
        if t != ds.meta.horizon {
            return Err(Error::invalid(format!("--horizon {t} but the dataset was curated for T={}", ds.meta.horizon)));
        }
    }
    let mut cfg = train_config(seed, kv)?;
    let set = |dst: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut cfg.weights.contrastive, a.lambda1);
    set(&mut cfg.weights.action, a.lambda2);
    set(&mut cfg.weights.adversarial, a.lambda3);
    set(&mut cfg.weights.diversity, a.lambda4);
    set(&mut cfg.lr, a.lr);
    for (dst, v) in [
        (&mut cfg.epochs, a.epochs),
        (&mut cfg.memory_slots, a.memory_size),
        (&mut cfg.layers, a.layers),
        (&mut cfg.heads, a.heads),
        (&mut cfg.batch_size, a.batch_size),
    ] {
        if let Some(v) = v {
            *dst = v;
        }
    }
    let outcome = training::train(&ds, &cfg)?;
    outcome.save(&a.out)?;
    write_file(&a.out.join("train.cfg"), &cfg.to_text())?;
    let best = match outcome.best_epoch {
        Some(e) => format!("epoch {e}"),
        None => "initial parameters".to_string(),
    };
    emit(
        out,
        &format!(
            "trained {} epochs; best validation SR {:.4} at {}\ncheckpoint: {}\n",
            outcome.log.len(),
            outcome.best_val_sr,
            best,
            a.out.display()
        ),
    )
}

fn eval_config(seed: u64, kv: &KeyValues) -> Result<EvalConfig> {
    kv.reject_unknown(&["k", "decode_k"])?;
    let mut cfg = EvalConfig {
        seed,
        ..EvalConfig::default()
    };
    if let Some(k) = kv.get("k")? {
        cfg.k = k;
    }
    if let Some(k) = kv.get("decode_k")? {
        cfg.decode_k = k;
    }
    Ok(cfg)
}

/// Drops the decoding rows of the method that was not requested.
fn select_decode(report: &mut Report, decode: Decode) {
    let skip = match decode {
        Decode::Viterbi => "mode",
        Decode::Mode => "viterbi",
    };
    report.rows.retain(|r| r.method != skip);
}

fn eval(a: EvalArgs, seed: u64, kv: &KeyValues, out: &mut dyn Write) -> Result<()> {
    let ds = synthdata::read_dataset(&a.data)?;
    let model = Model::load(&a.checkpoint)?;
    let mut cfg = eval_config(seed, kv)?;
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(k) = a.decode_k {
        cfg.decode_k = k;
    }
    cfg.deterministic = a.deterministic;
    let mut report = training::evaluate(&model, &ds, &cfg)?;
    select_decode(&mut report, a.decode);
    let csv = a.csv.unwrap_or_else(|| a.checkpoint.join("eval.csv"));
    write_file(&csv, &report.to_csv())?;
    emit(out, &report.to_table())
}

fn sample(a: SampleArgs, seed: u64, kv: &KeyValues, out: &mut dyn Write) -> Result<()> {
    kv.reject_unknown(&[])?;
    let ds = synthdata::read_dataset(&a.data)?;
    let model = Model::load(&a.checkpoint)?;
    let train_plans: Vec<Vec<usize>> = ds.split(Split::Train).map(|i| i.actions.clone()).collect();
    let trans = planner::estimate_transitions(&train_plans, ds.meta.num_actions)?;
    let mut text = String::new();
    let test: Vec<_> = ds.split(Split::Test).collect();
    for (i, inst) in test.iter().take(a.limit.unwrap_or(usize::MAX)).enumerate() {
        let set = planner::sample_plans(&model, &inst.v_start, &inst.v_goal, a.k, seed.wrapping_add(i as u64))?;
        let (plan, method) = match a.decode {
            Decode::Viterbi => {
                let em = planner::marginal_distribution(&set.plans, ds.meta.num_actions)?;
                (planner::viterbi_decode(&em, &trans)?, DecodeMethod::Viterbi)
            }
            Decode::Mode => (planner::mode_select(&set.plans)?, DecodeMethod::Mode),
        };
        let rec = DecodedPlan {
            instance_id: inst.id.clone(),
            horizon: ds.meta.horizon,
            plan,
            method,
        };
        text.push_str(&serde_json::to_string(&rec).map_err(|e| Error::invalid(e.to_string()))?);
        text.push('\n');
    }
    match a.out {
        Some(p) => write_file(&p, &text),
        None => emit(out, &text),
    }
}

pub const ABLATE_HEADER: &str = "grid,setting,sr,macc,miou,kl,nll,mode_prec,mode_rec,cos_dist,T,protocol,config_hash\n";

fn ablate_row(grid: &str, setting: &str, r: &Report, plan_method: &str, dist_method: &str) -> String {
    let v = |m: &str, method: &str| r.get(m, method).map_or(String::from("nan"), |x| x.to_string());
    format!(
        "{grid},{setting},{},{},{},{},{},{},{},{},{},{},{}\n",
        v("sr", plan_method),
        v("macc", plan_method),
        v("miou", plan_method),
        v("kl", dist_method),
        v("nll", dist_method),
        v("mode_prec", dist_method),
        v("mode_rec", dist_method),
        v("cos_dist", dist_method),
        r.horizon,
        r.protocol,
        r.config_hash
    )
}

/// Runs an ablation grid and returns its CSV.
pub fn run_grid(ds: &CuratedDataset, grid: Grid, base: &TrainConfig, eval: &EvalConfig) -> Result<String> {
    let name = format!("{grid:?}").to_lowercase();
    let mut csv = String::from(ABLATE_HEADER);
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match grid {
        Grid::Losses => {
            let la = with(&|c| c.weights = crate::losses::LossWeights { contrastive: 0.0, action: 1.0, adversarial: 0.0, diversity: 0.0 });
            let lal = with(&|c| {
                c.weights.adversarial = 0.0;
                c.weights.diversity = 0.0;
            });
            for (setting, cfg) in [("la", &la), ("la+ll", &lal)] {
                let m = training::train(ds, cfg)?.best;
                let r = training::evaluate(&m, ds, &EvalConfig { deterministic: true, ..eval.clone() })?;
                csv.push_str(&ablate_row(&name, setting, &r, "deterministic", "deterministic"));
            }
            let m = training::train(ds, base)?.best;
            let r = training::evaluate(&m, ds, eval)?;
            csv.push_str(&ablate_row(&name, "la+ll+adv+reg/mode", &r, "mode", "samples"));
            csv.push_str(&ablate_row(&name, "la+ll+adv+reg/viterbi", &r, "viterbi", "samples"));
        }
        Grid::Memory => {
            for n in [0, 64, 128, 256] {
                let m = training::train(ds, &with(&|c| c.memory_slots = n))?.best;
                let r = training::evaluate(&m, ds, eval)?;
                csv.push_str(&ablate_row(&name, &n.to_string(), &r, "viterbi", "samples"));
            }
        }
        Grid::K => {
            let m = training::train(ds, base)?.best;
            for k in [150, 500, 1500, 2500] {
                let r = training::evaluate(&m, ds, &EvalConfig { k, ..eval.clone() })?;
                csv.push_str(&ablate_row(&name, &k.to_string(), &r, "viterbi", "samples"));
            }
        }
        Grid::Decode => {
            let m = training::train(ds, base)?.best;
            let r = training::evaluate(&m, ds, eval)?;
            for method in ["viterbi", "mode"] {
                csv.push_str(&ablate_row(&name, method, &r, method, "samples"));
            }
        }
        Grid::Reg => {
            for (setting, cfg) in [("with_reg", base.clone()), ("without_reg", with(&|c| c.weights.diversity = 0.0))] {
                let m = training::train(ds, &cfg)?.best;
                let r = training::evaluate(&m, ds, eval)?;
                csv.push_str(&ablate_row(&name, setting, &r, "viterbi", "samples"));
            }
        }
    }
    Ok(csv)
}

fn ablate(a: AblateArgs, seed: Option<u64>, kv: &KeyValues, out: &mut dyn Write) -> Result<()> {
    let ds = synthdata::read_dataset(&a.data)?;
    let mut base = train_config(seed, kv)?;
    if let Some(e) = a.epochs {
        base.epochs = e;
    }
    let mut eval = EvalConfig {
        seed: base.seed,
        ..EvalConfig::default()
    };
    if let Some(k) = a.k {
        eval.k = k;
    }
    let csv = run_grid(&ds, a.grid, &base, &eval)?;
    write_file(&a.out, &csv)?;
    emit(out, &csv)
}

fn transitions(a: TransitionsArgs, kv: &KeyValues, out: &mut dyn Write) -> Result<()> {
    kv.reject_unknown(&[])?;
    let ds = synthdata::read_dataset(&a.data)?;
    let plans: Vec<Vec<usize>> = ds.split(Split::Train).map(|i| i.actions.clone()).collect();
    let m = planner::estimate_transitions(&plans, ds.meta.num_actions)?;
    let mut text = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(text, "{}", cells.join(","));
    }
    match a.out {
        Some(p) => write_file(&p, &text),
        None => emit(out, &text),
    }
}
