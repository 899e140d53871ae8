use crate::diffcore::{Bound, Graph, ParamId, Var};
use crate::error::Result;

/// Registers a parameter of the given shape and returns its id. During
/// construction this initialises the value; when loading it looks the name
/// up and validates the shape.
pub(crate) trait ParamSource {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId>;
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    /// Glorot uniform over (fan_in, fan_out).
    Glorot(usize, usize),
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(src: &mut impl ParamSource, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            w: src.param(&format!("{name}.w"), &[fan_in, fan_out], Init::Glorot(fan_in, fan_out))?,
            b: src.param(&format!("{name}.b"), &[fan_out], Init::Zeros)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.w))?;
        g.add(y, p.var(self.b))
    }
}

/// Linear layers with ReLU between consecutive layers (none after the last).
#[derive(Clone, Debug)]
pub(crate) struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(src: &mut impl ParamSource, name: &str, widths: &[usize]) -> Result<Self> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(src, &format!("{name}.{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = g.relu(x)?;
            }
            x = layer.forward(g, p, x)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    pub fn new(src: &mut impl ParamSource, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: src.param(&format!("{name}.gamma"), &[d], Init::Ones)?,
            beta: src.param(&format!("{name}.beta"), &[d], Init::Zeros)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.layer_norm(x)?;
        let y = g.mul(y, p.var(self.gamma))?;
        g.add(y, p.var(self.beta))
    }
}

/// Multi-head scaled dot-product attention built from graph primitives.
#[derive(Clone, Debug)]
pub(crate) struct Attention {
    heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attention {
    pub fn new(src: &mut impl ParamSource, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            heads,
            q: Linear::new(src, &format!("{name}.q"), d, d)?,
            k: Linear::new(src, &format!("{name}.k"), d, d)?,
            v: Linear::new(src, &format!("{name}.v"), d, d)?,
            o: Linear::new(src, &format!("{name}.o"), d, d)?,
        })
    }

    /// Self-attention over `x: [b, l, d]`, no mask.
    pub fn self_attend(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let (b, l, d) = dims3(g, x);
        let h = self.heads;
        let dh = d / h;
        let split = |g: &mut Graph, t: Var| -> Result<Var> {
            let t = g.reshape(t, &[b, l, h, dh])?;
            let t = g.permute(t, &[0, 2, 1, 3])?;
            g.reshape(t, &[b * h, l, dh])
        };
        let q = self.q.forward(g, p, x)?;
        let q = split(g, q)?;
        let k = self.k.forward(g, p, x)?;
        let k = split(g, k)?;
        let v = self.v.forward(g, p, x)?;
        let v = split(g, v)?;
        let (ctx, _) = attend(g, q, k, v, dh)?;
        let ctx = g.reshape(ctx, &[b, h, l, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, l, d])?;
        self.o.forward(g, p, ctx)
    }

    /// Cross-attention from `x: [b, l, d]` onto a shared `memory: [n, d]`.
    /// Returns the output and the attention weights `[heads, b*l, n]`.
    pub fn cross_attend(&self, g: &mut Graph, p: &Bound, x: Var, memory: Var) -> Result<(Var, Var)> {
        let (b, l, d) = dims3(g, x);
        let n = g.shape(memory)[0];
        let h = self.heads;
        let dh = d / h;
        let q = self.q.forward(g, p, x)?;
        let q = g.reshape(q, &[b, l, h, dh])?;
        let q = g.permute(q, &[2, 0, 1, 3])?;
        let q = g.reshape(q, &[h, b * l, dh])?;
        let mem_split = |g: &mut Graph, t: Var| -> Result<Var> {
            let t = g.reshape(t, &[n, h, dh])?;
            g.permute(t, &[1, 0, 2])
        };
        let k = self.k.forward(g, p, memory)?;
        let k = mem_split(g, k)?;
        let v = self.v.forward(g, p, memory)?;
        let v = mem_split(g, v)?;
        let (ctx, weights) = attend(g, q, k, v, dh)?;
        let ctx = g.reshape(ctx, &[h, b, l, dh])?;
        let ctx = g.permute(ctx, &[1, 2, 0, 3])?;
        let ctx = g.reshape(ctx, &[b, l, d])?;
        Ok((self.o.forward(g, p, ctx)?, weights))
    }
}

/// softmax(q k^T / sqrt(dh)) v over batched `[batch, rows, dh]` operands.
fn attend(g: &mut Graph, q: Var, k: Var, v: Var, dh: usize) -> Result<(Var, Var)> {
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let weights = g.softmax(scores, 2)?;
    Ok((g.matmul(weights, v)?, weights))
}

fn dims3(g: &Graph, x: Var) -> (usize, usize, usize) {
    let s = g.shape(x);
    (s[0], s[1], s[2])
}
