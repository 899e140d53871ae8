//! Synthetic instructional videos, plan curation and the dataset file format.
//!
//! Each task is a tree of latent states: a trunk that forks into several
//! branches. An edge at depth `k` carries `multimodality` parallel actions
//! when `k % horizon == 0` and a single action otherwise, so every window of
//! `horizon` consecutive edges is connected by exactly `multimodality`
//! action sequences.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{self, KeyValues};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub tasks: usize,
    pub actions_per_task: usize,
    pub videos_per_task: usize,
    pub multimodality: usize,
    /// Spacing of the multi-action edges; normally the planning horizon.
    pub horizon: usize,
    /// Edges before the fork.
    pub trunk_len: usize,
    /// Edges on each branch after the fork.
    pub branch_len: usize,
    pub branches: usize,
    /// Standard deviation of the visual observation noise.
    pub noise_scale: f64,
    /// Standard deviation of the language feature noise.
    pub lang_noise_scale: f64,
    pub input_dim: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            tasks: 5,
            actions_per_task: 12,
            videos_per_task: 200,
            multimodality: 2,
            horizon: 3,
            trunk_len: 3,
            branch_len: 3,
            branches: 2,
            noise_scale: 0.1,
            lang_noise_scale: 0.0,
            input_dim: 512,
        }
    }
}

const WORLD_KEYS: [&str; 11] = [
    "tasks",
    "actions_per_task",
    "videos_per_task",
    "multimodality",
    "horizon",
    "trunk_len",
    "branch_len",
    "branches",
    "noise_scale",
    "lang_noise_scale",
    "input_dim",
];

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.multimodality == 0 {
            return Err(Error::invalid("multimodality must be at least 1"));
        }
        if self.multimodality > self.actions_per_task {
            return Err(Error::invalid(format!(
                "multimodality {} needs that many distinct actions per edge but tasks have only {}",
                self.multimodality, self.actions_per_task
            )));
        }
        if self.tasks == 0 || self.horizon == 0 || self.input_dim == 0 || self.branches == 0 {
            return Err(Error::invalid("tasks, horizon, branches and input_dim must be positive"));
        }
        if self.trunk_len + self.branch_len == 0 {
            return Err(Error::invalid("videos need at least one step"));
        }
        if !(self.noise_scale >= 0.0 && self.lang_noise_scale >= 0.0) {
            return Err(Error::invalid("noise scales must be non-negative"));
        }
        Ok(())
    }

    pub fn video_len(&self) -> usize {
        self.trunk_len + self.branch_len
    }

    pub fn num_actions(&self) -> usize {
        self.tasks * self.actions_per_task
    }

    /// Overrides fields from a key-value file; unknown keys are rejected.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.reject_unknown(&WORLD_KEYS)?;
        let set = |dst: &mut usize, k: &str| -> Result<()> {
            if let Some(v) = kv.get(k)? {
                *dst = v;
            }
            Ok(())
        };
        set(&mut self.tasks, "tasks")?;
        set(&mut self.actions_per_task, "actions_per_task")?;
        set(&mut self.videos_per_task, "videos_per_task")?;
        set(&mut self.multimodality, "multimodality")?;
        set(&mut self.horizon, "horizon")?;
        set(&mut self.trunk_len, "trunk_len")?;
        set(&mut self.branch_len, "branch_len")?;
        set(&mut self.branches, "branches")?;
        set(&mut self.input_dim, "input_dim")?;
        if let Some(v) = kv.get("noise_scale")? {
            self.noise_scale = v;
        }
        if let Some(v) = kv.get("lang_noise_scale")? {
            self.lang_noise_scale = v;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        config::render(&[
            ("tasks", self.tasks.to_string()),
            ("actions_per_task", self.actions_per_task.to_string()),
            ("videos_per_task", self.videos_per_task.to_string()),
            ("multimodality", self.multimodality.to_string()),
            ("horizon", self.horizon.to_string()),
            ("trunk_len", self.trunk_len.to_string()),
            ("branch_len", self.branch_len.to_string()),
            ("branches", self.branches.to_string()),
            ("noise_scale", self.noise_scale.to_string()),
            ("lang_noise_scale", self.lang_noise_scale.to_string()),
            ("input_dim", self.input_dim.to_string()),
        ])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    /// Parallel actions, distinct within an edge.
    pub actions: Vec<usize>,
    /// Probability of taking each parallel action.
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskGraph {
    pub task_id: usize,
    pub actions: Vec<usize>,
    pub root: usize,
    /// Edges grouped by source state; each state has one outgoing edge
    /// except the fork state (one per branch) and the leaves (none).
    pub edges: Vec<Edge>,
    /// Probability of each branch at the fork.
    pub branch_probs: Vec<f64>,
    pub fork: usize,
}

impl TaskGraph {
    fn outgoing(&self, state: usize) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.from == state)
    }

    /// Every action sequence leading from `start` to `goal`.
    pub fn paths_between(&self, start: usize, goal: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut stack = vec![(start, Vec::new())];
        while let Some((state, prefix)) = stack.pop() {
            if state == goal {
                out.push(prefix);
                continue;
            }
            for e in self.outgoing(state) {
                for &a in &e.actions {
                    let mut p = prefix.clone();
                    p.push(a);
                    stack.push((e.to, p));
                }
            }
        }
        out.sort();
        out
    }

    /// All `(start, goal)` state pairs exactly `len` edges apart.
    pub fn pairs_at_distance(&self, len: usize) -> Vec<(usize, usize)> {
        let mut states: BTreeSet<usize> = BTreeSet::new();
        for e in &self.edges {
            states.insert(e.from);
            states.insert(e.to);
        }
        let mut pairs = Vec::new();
        for &s in &states {
            let mut frontier = BTreeSet::from([s]);
            for _ in 0..len {
                frontier = frontier
                    .iter()
                    .flat_map(|&x| self.outgoing(x).map(|e| e.to))
                    .collect();
            }
            pairs.extend(frontier.into_iter().map(|g| (s, g)));
        }
        pairs
    }

    /// Mean number of distinct plans over state pairs `len` edges apart.
    pub fn average_unique_paths(&self, len: usize) -> f64 {
        let pairs = self.pairs_at_distance(len);
        if pairs.is_empty() {
            return 0.0;
        }
        let total: usize = pairs.iter().map(|&(s, g)| self.paths_between(s, g).len()).sum();
        total as f64 / pairs.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoStep {
    pub action: usize,
    pub lang: Vec<f64>,
    pub visual: Vec<f64>,
    /// Latent state reached after the action.
    pub state: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub video_id: usize,
    pub task_id: usize,
    pub start_state: usize,
    pub v0: Vec<f64>,
    pub steps: Vec<VideoStep>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub graphs: Vec<TaskGraph>,
    pub videos: Vec<SyntheticVideo>,
    /// Canonical language feature per action id.
    pub action_anchors: Vec<Vec<f64>>,
    pub state_anchors: Vec<Vec<f64>>,
}

impl World {
    pub fn num_actions(&self) -> usize {
        self.action_anchors.len()
    }

    pub fn vocabulary(&self) -> Vec<VocabEntry> {
        self.action_anchors
            .iter()
            .enumerate()
            .map(|(a, f)| VocabEntry {
                action_id: a,
                label: action_label(&self.config, a),
                lang_feature: f.clone(),
            })
            .collect()
    }
}

pub fn action_label(cfg: &WorldConfig, action: usize) -> String {
    format!("task{}-step{}", action / cfg.actions_per_task, action % cfg.actions_per_task)
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            scale * e
        })
        .collect()
}

fn noisy(anchor: &[f64], rng: &mut ChaCha8Rng, scale: f64) -> Vec<f64> {
    if scale == 0.0 {
        return anchor.to_vec();
    }
    anchor.iter().zip(gaussian(rng, anchor.len(), scale)).map(|(a, e)| a + e).collect()
}

fn random_probs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

fn pick(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn build_graph(cfg: &WorldConfig, task: usize, next_state: &mut usize, rng: &mut ChaCha8Rng) -> TaskGraph {
    let actions: Vec<usize> = (task * cfg.actions_per_task..(task + 1) * cfg.actions_per_task).collect();
    let mut pool: Vec<usize> = Vec::new();
    let mut draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<usize> {
        // cycle through shuffled copies of the task's actions so slots stay
        // distinct until the task runs out, and parallel actions never repeat
        let mut out: Vec<usize> = Vec::with_capacity(n);
        while out.len() < n {
            if pool.is_empty() {
                pool = actions.clone();
                pool.shuffle(rng);
            }
            let a = pool.pop().unwrap();
            if !out.contains(&a) {
                out.push(a);
            }
        }
        out
    };
    let mut fresh = || {
        *next_state += 1;
        *next_state - 1
    };
    let root = fresh();
    let mut edges = Vec::new();
    let mut edge = |rng: &mut ChaCha8Rng, from: usize, depth: usize, to: usize| {
        let m = if depth.is_multiple_of(cfg.horizon) { cfg.multimodality } else { 1 };
        Edge {
            from,
            to,
            actions: draw(rng, m),
            probs: random_probs(rng, m),
        }
    };
    let mut state = root;
    for depth in 0..cfg.trunk_len {
        let to = fresh();
        edges.push(edge(rng, state, depth, to));
        state = to;
    }
    let fork = state;
    let branches = if cfg.branch_len == 0 { 0 } else { cfg.branches };
    for _ in 0..branches {
        let mut s = fork;
        for depth in cfg.trunk_len..cfg.video_len() {
            let to = fresh();
            edges.push(edge(rng, s, depth, to));
            s = to;
        }
    }
    TaskGraph {
        task_id: task,
        actions,
        root,
        edges,
        branch_probs: random_probs(rng, branches.max(1)),
        fork,
    }
}

/// Builds task graphs, anchor features and videos reproducibly from `seed`.
pub fn generate_world(cfg: &WorldConfig, seed: u64) -> Result<World> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next_state = 0;
    let graphs: Vec<TaskGraph> = (0..cfg.tasks).map(|t| build_graph(cfg, t, &mut next_state, &mut rng)).collect();
    let action_anchors: Vec<Vec<f64>> = (0..cfg.num_actions()).map(|_| gaussian(&mut rng, cfg.input_dim, 1.0)).collect();
    let state_anchors: Vec<Vec<f64>> = (0..next_state).map(|_| gaussian(&mut rng, cfg.input_dim, 1.0)).collect();

    let mut videos = Vec::with_capacity(cfg.tasks * cfg.videos_per_task);
    for graph in &graphs {
        for _ in 0..cfg.videos_per_task {
            let video_id = videos.len();
            let mut vr = ChaCha8Rng::seed_from_u64(seed);
            vr.set_stream(video_id as u64 + 1);
            let branch = pick(&mut vr, &graph.branch_probs);
            let v0 = noisy(&state_anchors[graph.root], &mut vr, cfg.noise_scale);
            let mut steps = Vec::with_capacity(cfg.video_len());
            let mut state = graph.root;
            loop {
                let out: Vec<&Edge> = graph.outgoing(state).collect();
                let Some(e) = (if state == graph.fork && !out.is_empty() { out.get(branch) } else { out.first() }) else {
                    break;
                };
                let action = e.actions[pick(&mut vr, &e.probs)];
                state = e.to;
                steps.push(VideoStep {
                    action,
                    lang: noisy(&action_anchors[action], &mut vr, cfg.lang_noise_scale),
                    visual: noisy(&state_anchors[state], &mut vr, cfg.noise_scale),
                    state,
                });
            }
            videos.push(SyntheticVideo {
                video_id,
                task_id: graph.task_id,
                start_state: graph.root,
                v0,
                steps,
            });
        }
    }
    Ok(World {
        config: cfg.clone(),
        graphs,
        videos,
        action_anchors,
        state_anchors,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl Protocol {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Self::One),
            "2" => Ok(Self::Two),
            _ => Err(Error::invalid(format!("protocol must be 1 or 2, got {s}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::One => "1",
            Self::Two => "2",
        }
    }

    /// Fraction of videos assigned to training (the rest is test).
    pub fn train_fraction(self) -> f64 {
        match self {
            Self::One => 0.7,
            Self::Two => 0.85,
        }
    }
}

/// Fraction of training videos held out for validation.
pub const VAL_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub action_id: usize,
    pub label: String,
    pub lang_feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanInstance {
    pub id: String,
    pub split: Split,
    pub video_id: usize,
    pub task_id: usize,
    pub v_start: Vec<f64>,
    pub v_goal: Vec<f64>,
    pub actions: Vec<usize>,
    pub lang_features: Vec<Vec<f64>>,
    pub start_state_id: usize,
    pub goal_state_id: usize,
}

impl PlanInstance {
    pub fn key(&self) -> (usize, usize) {
        (self.start_state_id, self.goal_state_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub input_dim: usize,
    #[serde(rename = "N_a")]
    pub num_actions: usize,
    pub protocol: Protocol,
    #[serde(rename = "T")]
    pub horizon: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CuratedDataset {
    pub meta: DatasetMeta,
    pub vocab: Vec<VocabEntry>,
    pub instances: Vec<PlanInstance>,
}

impl CuratedDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &PlanInstance> {
        self.instances.iter().filter(move |i| i.split == split)
    }

    /// Number of leading actions that are scored at evaluation.
    pub fn scored_len(&self) -> usize {
        match self.meta.protocol {
            Protocol::One => self.meta.horizon,
            Protocol::Two => self.meta.horizon.saturating_sub(1),
        }
    }

    pub fn vocab_matrix(&self) -> Vec<Vec<f64>> {
        self.vocab.iter().map(|v| v.lang_feature.clone()).collect()
    }
}

/// Assigns splits to video ids: `train_fraction` train (of which
/// [`VAL_FRACTION`] goes to validation), the rest test.
fn assign_splits(videos: &[SyntheticVideo], train_fraction: f64, seed: u64) -> BTreeMap<usize, Split> {
    let mut ids: Vec<usize> = videos.iter().map(|v| v.video_id).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ids.len() as f64 * train_fraction).round() as usize;
    let n_val = (n_train as f64 * VAL_FRACTION).round() as usize;
    ids.iter()
        .enumerate()
        .map(|(i, &id)| {
            let split = if i < n_val {
                Split::Val
            } else if i < n_train {
                Split::Train
            } else {
                Split::Test
            };
            (id, split)
        })
        .collect()
}

/// Window starting at tuple index `t` (1-based): start is `v_t`, goal is
/// `v_{t+T}`, targets are actions `t+1..=t+T`.
fn window(video: &SyntheticVideo, t: usize, horizon: usize, split: Split) -> PlanInstance {
    let steps = &video.steps[t..t + horizon];
    PlanInstance {
        id: format!("{}:{}", video.video_id, t),
        split,
        video_id: video.video_id,
        task_id: video.task_id,
        v_start: video.steps[t - 1].visual.clone(),
        v_goal: video.steps[t + horizon - 1].visual.clone(),
        actions: steps.iter().map(|s| s.action).collect(),
        lang_features: steps.iter().map(|s| s.lang.clone()).collect(),
        start_state_id: video.steps[t - 1].state,
        goal_state_id: video.steps[t + horizon - 1].state,
    }
}

/// Number of complete windows in a video with `n` steps.
pub fn window_count(n: usize, horizon: usize) -> usize {
    n.saturating_sub(horizon)
}

fn meta(world: &World, protocol: Protocol, horizon: usize) -> DatasetMeta {
    DatasetMeta {
        input_dim: world.config.input_dim,
        num_actions: world.num_actions(),
        protocol,
        horizon,
    }
}

/// Every sliding window of `horizon + 1` observations.
pub fn curate_protocol1(world: &World, horizon: usize, split_seed: u64) -> CuratedDataset {
    let splits = assign_splits(&world.videos, Protocol::One.train_fraction(), split_seed);
    let mut instances = Vec::new();
    for v in &world.videos {
        for t in 1..=window_count(v.steps.len(), horizon) {
            instances.push(window(v, t, horizon, splits[&v.video_id]));
        }
    }
    CuratedDataset {
        meta: meta(world, Protocol::One, horizon),
        vocab: world.vocabulary(),
        instances,
    }
}

/// One random window per eligible video.
pub fn curate_protocol2(world: &World, horizon: usize, seed: u64) -> CuratedDataset {
    let splits = assign_splits(&world.videos, Protocol::Two.train_fraction(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut instances = Vec::new();
    for v in &world.videos {
        let n = window_count(v.steps.len(), horizon);
        if n > 0 {
            let t = rng.random_range(1..=n);
            instances.push(window(v, t, horizon, splits[&v.video_id]));
        }
    }
    CuratedDataset {
        meta: meta(world, Protocol::Two, horizon),
        vocab: world.vocabulary(),
        instances,
    }
}

pub fn curate(world: &World, protocol: Protocol, horizon: usize, seed: u64) -> CuratedDataset {
    match protocol {
        Protocol::One => curate_protocol1(world, horizon, seed),
        Protocol::Two => curate_protocol2(world, horizon, seed),
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    Meta(DatasetMeta),
    Vocab(VocabEntry),
    Instance(PlanInstance),
}

/// Writes every float in scientific notation with 17 significant digits.
struct ExactFloats;

impl serde_json::ser::Formatter for ExactFloats {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

fn write_record(out: &mut impl Write, record: &Record) -> io::Result<()> {
    let mut ser = serde_json::Serializer::with_formatter(&mut *out, ExactFloats);
    record.serialize(&mut ser).map_err(io::Error::other)?;
    out.write_all(b"\n")
}

pub fn write_dataset_to(ds: &CuratedDataset, out: &mut impl Write) -> io::Result<()> {
    write_record(out, &Record::Meta(ds.meta.clone()))?;
    for v in &ds.vocab {
        write_record(out, &Record::Vocab(v.clone()))?;
    }
    for i in &ds.instances {
        write_record(out, &Record::Instance(i.clone()))?;
    }
    Ok(())
}

pub fn write_dataset(ds: &CuratedDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset_to(ds, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_dataset_from(reader: impl BufRead, source: &Path) -> Result<CuratedDataset> {
    let err = |line: usize, msg: String| Error::Parse {
        path: source.to_path_buf(),
        line,
        msg,
    };
    let mut meta = None;
    let mut vocab = Vec::new();
    let mut instances = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| err(i + 1, e.to_string()))?;
        match record {
            Record::Meta(m) => {
                if meta.is_some() {
                    return Err(err(i + 1, "second meta record".into()));
                }
                meta = Some(m);
            }
            Record::Vocab(_) | Record::Instance(_) if meta.is_none() => {
                return Err(err(i + 1, "record before meta header".into()));
            }
            Record::Vocab(v) => {
                let m = meta.as_ref().unwrap();
                if v.lang_feature.len() != m.input_dim || v.action_id != vocab.len() {
                    return Err(err(i + 1, format!("vocab entry {} is malformed", v.action_id)));
                }
                vocab.push(v);
            }
            Record::Instance(inst) => {
                let m = meta.as_ref().unwrap();
                let ok = inst.v_start.len() == m.input_dim
                    && inst.v_goal.len() == m.input_dim
                    && inst.actions.len() == m.horizon
                    && inst.lang_features.len() == m.horizon
                    && inst.lang_features.iter().all(|l| l.len() == m.input_dim)
                    && inst.actions.iter().all(|&a| a < m.num_actions);
                if !ok {
                    return Err(err(i + 1, format!("instance {} does not match the header", inst.id)));
                }
                instances.push(inst);
            }
        }
    }
    let meta = meta.ok_or_else(|| err(0, "missing meta header".into()))?;
    if !vocab.is_empty() && vocab.len() != meta.num_actions {
        return Err(err(0, format!("{} vocab entries for {} actions", vocab.len(), meta.num_actions)));
    }
    Ok(CuratedDataset { meta, vocab, instances })
}

pub fn read_dataset(path: &Path) -> Result<CuratedDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset_from(BufReader::new(file), path)
}
