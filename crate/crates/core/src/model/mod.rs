//! Memory-augmented non-autoregressive transformer planner.
//!
//! The decoder sees `T + 1` query positions: the embedded start observation,
//! `T - 1` learned queries and the embedded goal observation, each with a
//! fixed sinusoidal position added. The same noise vector is appended to
//! every position and projected back to the model width. Each block runs
//! self-attention, cross-attention onto a learned memory bank shared by all
//! blocks, and a feed-forward layer (post-norm residuals). Positions
//! `0..T` feed the action head and the state head.

mod layers;

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::config::{self, KeyValues};
use crate::diffcore::{checkpoint, Bound, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use layers::{Attention, Init, Linear, Mlp, Norm, ParamSource};

pub const GENERATOR_PREFIX: &str = "gen.";
pub const CRITIC_PREFIX: &str = "critic.";

pub fn is_generator_param(name: &str) -> bool {
    name.starts_with(GENERATOR_PREFIX)
}

pub fn is_critic_param(name: &str) -> bool {
    name.starts_with(CRITIC_PREFIX)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Model width.
    pub d: usize,
    /// Number of memory slots; 0 removes cross-attention.
    pub memory_slots: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_noise: usize,
    /// Width of the raw observation and language features.
    pub input_dim: usize,
    pub num_actions: usize,
    pub horizon: usize,
}

impl ModelConfig {
    pub fn new(num_actions: usize, horizon: usize) -> Self {
        Self {
            d: 128,
            memory_slots: 128,
            layers: 2,
            heads: 8,
            d_noise: 32,
            input_dim: 512,
            num_actions,
            horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "model width {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        if self.num_actions == 0 || self.d == 0 || self.input_dim == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        Ok(())
    }

    pub fn ffn_width(&self) -> usize {
        4 * self.d
    }

    pub fn to_text(&self) -> String {
        config::render(&[
            ("d", self.d.to_string()),
            ("memory_slots", self.memory_slots.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("d_noise", self.d_noise.to_string()),
            ("input_dim", self.input_dim.to_string()),
            ("num_actions", self.num_actions.to_string()),
            ("horizon", self.horizon.to_string()),
        ])
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        const KEYS: [&str; 8] = [
            "d",
            "memory_slots",
            "layers",
            "heads",
            "d_noise",
            "input_dim",
            "num_actions",
            "horizon",
        ];
        kv.reject_unknown(&KEYS)?;
        let req = |k: &str| -> Result<usize> {
            kv.get::<usize>(k)?
                .ok_or_else(|| Error::invalid(format!("model config is missing {k}")))
        };
        let cfg = Self {
            d: req("d")?,
            memory_slots: req("memory_slots")?,
            layers: req("layers")?,
            heads: req("heads")?,
            d_noise: req("d_noise")?,
            input_dim: req("input_dim")?,
            num_actions: req("num_actions")?,
            horizon: req("horizon")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Fixed sinusoidal embedding: entry `2i` is `sin(pos / 10000^(2i/d))`,
/// entry `2i+1` the cosine of the same argument.
pub fn positional_embedding(position: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let i2 = (j - j % 2) as f64;
            let arg = position as f64 / 10000f64.powf(i2 / d as f64);
            if j % 2 == 0 {
                arg.sin()
            } else {
                arg.cos()
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
struct Block {
    self_attn: Attention,
    norm1: Norm,
    cross_attn: Option<(Attention, Norm)>,
    ffn: Mlp,
    norm3: Norm,
}

#[derive(Clone, Debug)]
struct Layout {
    embed_v: Mlp,
    embed_l: Mlp,
    queries: Option<ParamId>,
    memory: Option<ParamId>,
    noise_proj: Linear,
    blocks: Vec<Block>,
    head_a: Mlp,
    head_v: Mlp,
    critic: Mlp,
}

impl Layout {
    fn build(cfg: &ModelConfig, src: &mut impl ParamSource) -> Result<Self> {
        let d = cfg.d;
        let embed_widths = [cfg.input_dim, 256, d];
        let embed_v = Mlp::new(src, "gen.embed_v", &embed_widths)?;
        let embed_l = Mlp::new(src, "gen.embed_l", &embed_widths)?;
        let queries = if cfg.horizon > 1 {
            Some(src.param("gen.queries", &[cfg.horizon - 1, d], Init::Normal(1.0))?)
        } else {
            None
        };
        let memory = if cfg.memory_slots > 0 {
            Some(src.param("gen.memory", &[cfg.memory_slots, d], Init::Normal(1.0))?)
        } else {
            None
        };
        let noise_proj = Linear::new(src, "gen.noise_proj", d + cfg.d_noise, d)?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let name = format!("gen.block{i}");
            let cross_attn = if cfg.memory_slots > 0 {
                Some((
                    Attention::new(src, &format!("{name}.cross_attn"), d, cfg.heads)?,
                    Norm::new(src, &format!("{name}.norm2"), d)?,
                ))
            } else {
                None
            };
            blocks.push(Block {
                self_attn: Attention::new(src, &format!("{name}.self_attn"), d, cfg.heads)?,
                norm1: Norm::new(src, &format!("{name}.norm1"), d)?,
                cross_attn,
                ffn: Mlp::new(src, &format!("{name}.ffn"), &[d, cfg.ffn_width(), d])?,
                norm3: Norm::new(src, &format!("{name}.norm3"), d)?,
            });
        }
        Ok(Self {
            embed_v,
            embed_l,
            queries,
            memory,
            noise_proj,
            blocks,
            head_a: Mlp::new(src, "gen.head_a", &[d, d, cfg.num_actions])?,
            head_v: Mlp::new(src, "gen.head_v", &[d, d, d])?,
            critic: Mlp::new(src, "critic.mlp", &[cfg.horizon * d, 256, 64, 32, 1])?,
        })
    }
}

struct Initialiser<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl ParamSource for Initialiser<'_> {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Glorot(fan_in, fan_out) => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-a, a).unwrap();
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut self.rng);
                    std * e
                })
                .collect::<Vec<f64>>(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        self.store
            .insert(name, ArrayD::from_shape_vec(IxDyn(shape), values).unwrap())
    }
}

struct Lookup<'a> {
    store: &'a ParamStore,
    used: usize,
}

impl ParamSource for Lookup<'_> {
    fn param(&mut self, name: &str, shape: &[usize], _: Init) -> Result<ParamId> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| Error::invalid(format!("checkpoint is missing parameter {name}")))?;
        let found = self.store.get(id).shape();
        if found != shape {
            return Err(Error::Shape {
                op: "load_checkpoint",
                lhs: shape.to_vec(),
                rhs: found.to_vec(),
            });
        }
        self.used += 1;
        Ok(id)
    }
}

/// Outputs of one decoder pass over a batch.
#[derive(Clone, Copy, Debug)]
pub struct PlanOutputs {
    /// `[b, T, num_actions]`
    pub action_logits: Var,
    /// `[b, T, d]`
    pub state_preds: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = Layout::build(
            &config,
            &mut Initialiser {
                store: &mut params,
                rng: ChaCha8Rng::seed_from_u64(seed),
            },
        )?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut lookup = Lookup {
            store: &params,
            used: 0,
        };
        let layout = Layout::build(&config, &mut lookup)?;
        if lookup.used != params.len() {
            return Err(Error::invalid(format!(
                "checkpoint holds {} parameters, model expects {}",
                params.len(),
                lookup.used
            )));
        }
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Writes `model.cfg`, `params.manifest` and `params.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = dir.join("model.cfg");
        fs::write(&cfg, self.config.to_text()).map_err(|e| Error::io(&cfg, e))?;
        checkpoint::write_params(
            &self.params,
            &dir.join("params.manifest"),
            &dir.join("params.bin"),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = ModelConfig::from_kv(&KeyValues::read(&dir.join("model.cfg"))?)?;
        let params = checkpoint::read_params(&dir.join("params.manifest"), &dir.join("params.bin"))?;
        Self::from_params(config, params)
    }

    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Result<Bound> {
        Bound::new(g, &self.params, trainable)
    }

    /// Observation MLP: `[.., input_dim] -> [.., d]`.
    pub fn embed_observation(&self, g: &mut Graph, p: &Bound, raw: Var) -> Result<Var> {
        self.check_last_dim("embed_observation", g, raw, self.config.input_dim)?;
        self.layout.embed_v.forward(g, p, raw)
    }

    /// Language MLP (separate weights): `[.., input_dim] -> [.., d]`.
    pub fn embed_language(&self, g: &mut Graph, p: &Bound, raw: Var) -> Result<Var> {
        self.check_last_dim("embed_language", g, raw, self.config.input_dim)?;
        self.layout.embed_l.forward(g, p, raw)
    }

    fn check_last_dim(&self, op: &'static str, g: &Graph, x: Var, want: usize) -> Result<()> {
        let s = g.shape(x);
        if s.last() != Some(&want) {
            return Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![want],
            });
        }
        Ok(())
    }

    /// `[b, T+1, d]` queries: start, learned, goal, plus positions.
    pub fn build_query(&self, g: &mut Graph, p: &Bound, start: Var, goal: Var) -> Result<Var> {
        let (b, d, t) = (g.shape(start)[0], self.config.d, self.config.horizon);
        let start = g.reshape(start, &[b, 1, d])?;
        let goal = g.reshape(goal, &[b, 1, d])?;
        let mut parts = vec![start];
        if let Some(q) = self.layout.queries {
            let q = g.reshape(p.var(q), &[1, t - 1, d])?;
            let fan = g.constant(ArrayD::zeros(IxDyn(&[b, 1, 1])))?;
            parts.push(g.add(q, fan)?);
        }
        parts.push(goal);
        let seq = g.concat(&parts, 1)?;
        let pos = g.constant(positional_table(t + 1, d))?;
        g.add(seq, pos)
    }

    /// Appends `z: [b, d_noise]` to every position and projects back to `d`.
    pub fn inject_noise(&self, g: &mut Graph, p: &Bound, queries: Var, z: Var) -> Result<Var> {
        let s = g.shape(queries).to_vec();
        let (b, l) = (s[0], s[1]);
        let z = g.reshape(z, &[b, 1, self.config.d_noise])?;
        let fan = g.constant(ArrayD::zeros(IxDyn(&[1, l, 1])))?;
        let z = g.add(z, fan)?;
        let x = g.concat(&[queries, z], 2)?;
        self.layout.noise_proj.forward(g, p, x)
    }

    /// Runs all blocks. Also returns each block's cross-attention weights
    /// `[heads, b*(T+1), n]` (empty without memory).
    pub fn decoder_forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<(Var, Vec<Var>)> {
        let memory = self.layout.memory.map(|m| p.var(m));
        let mut weights = Vec::new();
        let mut x = x;
        for block in &self.layout.blocks {
            let a = block.self_attn.self_attend(g, p, x)?;
            let r = g.add(x, a)?;
            x = block.norm1.forward(g, p, r)?;
            if let (Some((attn, norm)), Some(mem)) = (&block.cross_attn, memory) {
                let (a, w) = attn.cross_attend(g, p, x, mem)?;
                weights.push(w);
                let r = g.add(x, a)?;
                x = norm.forward(g, p, r)?;
            }
            let f = block.ffn.forward(g, p, x)?;
            let r = g.add(x, f)?;
            x = block.norm3.forward(g, p, r)?;
        }
        Ok((x, weights))
    }

    /// Action logits and state predictions from decoder positions `0..T`.
    pub fn heads(&self, g: &mut Graph, p: &Bound, hidden: Var) -> Result<PlanOutputs> {
        let aligned = g.slice(hidden, 1, 0, self.config.horizon)?;
        Ok(PlanOutputs {
            action_logits: self.layout.head_a.forward(g, p, aligned)?,
            state_preds: self.layout.head_v.forward(g, p, aligned)?,
        })
    }

    /// Full generator pass on raw features `[b, input_dim]` and noise
    /// `[b, d_noise]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        v_start: Var,
        v_goal: Var,
        z: Var,
    ) -> Result<PlanOutputs> {
        let start = self.embed_observation(g, p, v_start)?;
        let goal = self.embed_observation(g, p, v_goal)?;
        let q = self.build_query(g, p, start, goal)?;
        let qz = self.inject_noise(g, p, q, z)?;
        let (hidden, _) = self.decoder_forward(g, p, qz)?;
        self.heads(g, p, hidden)
    }

    /// Critic logit for `[b, T, d]` state sequences, flattened over time.
    pub fn critic_logit(&self, g: &mut Graph, p: &Bound, states: Var) -> Result<Var> {
        let s = g.shape(states).to_vec();
        let width = self.config.horizon * self.config.d;
        if s.len() != 3 || s[1] * s[2] != width {
            return Err(Error::Shape {
                op: "critic",
                lhs: s,
                rhs: vec![self.config.horizon, self.config.d],
            });
        }
        let flat = g.reshape(states, &[s[0], width])?;
        self.layout.critic.forward(g, p, flat)
    }

    /// Critic score in (0, 1), shape `[b, 1]`.
    pub fn critic_forward(&self, g: &mut Graph, p: &Bound, states: Var) -> Result<Var> {
        let logit = self.critic_logit(g, p, states)?;
        g.sigmoid(logit)
    }

    /// Inference without gradients. Returns `(logits [b,T,A], states [b,T,d])`.
    pub fn infer(
        &self,
        v_start: &Array2<f64>,
        v_goal: &Array2<f64>,
        z: &Array2<f64>,
    ) -> Result<(Array3<f64>, Array3<f64>)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, |_| false)?;
        let vs = g.constant(v_start.clone().into_dyn())?;
        let vg = g.constant(v_goal.clone().into_dyn())?;
        let z = g.constant(z.clone().into_dyn())?;
        let out = self.forward(&mut g, &p, vs, vg, z)?;
        let to3 = |v: Var| g.value(v).clone().into_dimensionality().unwrap();
        Ok((to3(out.action_logits), to3(out.state_preds)))
    }
}

/// `[len, d]` table of positional embeddings.
pub fn positional_table(len: usize, d: usize) -> ArrayD<f64> {
    let values: Vec<f64> = (0..len).flat_map(|p| positional_embedding(p, d)).collect();
    ArrayD::from_shape_vec(IxDyn(&[len, d]), values).unwrap()
}

/// Row-wise argmax over the last axis of `[b, T, A]` logits; ties go to
/// the lower action id.
pub fn argmax_plans(logits: &Array3<f64>) -> Vec<Vec<usize>> {
    logits
        .outer_iter()
        .map(|plan| {
            plan.axis_iter(Axis(0))
                .map(|row| {
                    let mut best = 0;
                    for (a, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = a;
                        }
                    }
                    best
                })
                .collect()
        })
        .collect()
}
