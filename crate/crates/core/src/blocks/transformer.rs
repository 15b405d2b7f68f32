use tencore::Var;

use crate::error::{AtPath, Error, Result};
use crate::params::{join, Builder, Ctx};

use super::{Dense, NORM_EPS};

const POS_EMBED_STD: f64 = 0.02;

/// Splits a feature map into non-overlapping `patch × patch` tiles, projects
/// each flattened tile to `dim` and adds a learned position embedding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchEmbed {
    pub channels: usize,
    pub dim: usize,
    pub patch: usize,
    /// Spatial extent of the incoming (square) feature map.
    pub size: usize,
}

impl PatchEmbed {
    pub fn new(channels: usize, dim: usize, patch: usize, size: usize) -> Result<Self> {
        if patch == 0 || size % patch != 0 {
            return Err(Error::config(format!(
                "patch size {patch} does not divide feature map size {size}"
            )));
        }
        Ok(Self {
            channels,
            dim,
            patch,
            size,
        })
    }

    pub fn grid(&self) -> usize {
        self.size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    fn proj(&self) -> Dense {
        Dense::new(self.channels * self.patch * self.patch, self.dim)
    }

    pub fn declare(&self, b: &mut Builder, path: &str) -> Result<()> {
        self.proj().declare(b, &join(path, "proj"))?;
        b.normal(join(path, "pos_embed"), &[self.tokens(), self.dim], POS_EMBED_STD)
    }

    /// `[B, C, H, W] -> [B, N, D]`, tokens in row-major patch order.
    pub fn forward(&self, ctx: &mut Ctx, path: &str, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        let expected = [shape[0], self.channels, self.size, self.size];
        if shape != expected {
            return Err(Error::config(format!(
                "{path}: expected input {expected:?}, got {shape:?}"
            )));
        }
        let (b, c, g, p) = (shape[0], self.channels, self.grid(), self.patch);
        let t = &mut ctx.tape;
        let tiles = t.reshape(x, &[b, c, g, p, g, p]).at(path)?;
        let tiles = t.permute(tiles, &[0, 2, 4, 1, 3, 5]).at(path)?;
        let flat = t.reshape(tiles, &[b, g * g, c * p * p]).at(path)?;
        let tokens = self.proj().forward(ctx, &join(path, "proj"), flat)?;
        let pos = ctx.param(&join(path, "pos_embed"))?;
        ctx.tape.add(tokens, pos).at(path)
    }

    pub fn param_count(&self) -> usize {
        self.proj().param_count() + self.tokens() * self.dim
    }
}

/// Multi-head scaled dot-product self-attention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Msa {
    pub dim: usize,
    pub heads: usize,
}

impl Msa {
    pub fn new(dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "embedding dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self { dim, heads })
    }

    fn proj(&self) -> Dense {
        Dense::new(self.dim, self.dim)
    }

    pub fn declare(&self, b: &mut Builder, path: &str) -> Result<()> {
        for name in ["query", "key", "value", "out"] {
            self.proj().declare(b, &join(path, name))?;
        }
        Ok(())
    }

    /// Returns the output `[B, N, D]` and the attention weights
    /// `[B * heads, N, N]`.
    pub fn forward_with_weights(&self, ctx: &mut Ctx, path: &str, z: Var) -> Result<(Var, Var)> {
        let shape = ctx.tape.shape(z).to_vec();
        let [b, n, d] = shape[..] else {
            return Err(Error::config(format!("{path}: expected [B, N, D], got {shape:?}")));
        };
        let (h, dh) = (self.heads, self.dim / self.heads);
        let split = |ctx: &mut Ctx, name: &str| -> Result<Var> {
            let y = self.proj().forward(ctx, &join(path, name), z)?;
            let t = &mut ctx.tape;
            let y = t.reshape(y, &[b, n, h, dh]).at(path)?;
            let y = t.permute(y, &[0, 2, 1, 3]).at(path)?;
            t.reshape(y, &[b * h, n, dh]).at(path)
        };
        let q = split(ctx, "query")?;
        let k = split(ctx, "key")?;
        let v = split(ctx, "value")?;
        let t = &mut ctx.tape;
        let kt = t.transpose(k, 1, 2).at(path)?;
        let scores = t.matmul(q, kt).at(path)?;
        let scores = t.scale(scores, 1.0 / (dh as f64).sqrt()).at(path)?;
        let weights = t.softmax(scores, 2).at(path)?;
        let mixed = t.matmul(weights, v).at(path)?;
        let mixed = t.reshape(mixed, &[b, h, n, dh]).at(path)?;
        let mixed = t.permute(mixed, &[0, 2, 1, 3]).at(path)?;
        let mixed = t.reshape(mixed, &[b, n, d]).at(path)?;
        let out = self.proj().forward(ctx, &join(path, "out"), mixed)?;
        Ok((out, weights))
    }

    pub fn forward(&self, ctx: &mut Ctx, path: &str, z: Var) -> Result<Var> {
        Ok(self.forward_with_weights(ctx, path, z)?.0)
    }

    pub fn param_count(&self) -> usize {
        4 * self.proj().param_count()
    }
}

/// Two-layer GELU perceptron with a dropout site after the activation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub dim: usize,
    pub hidden: usize,
}

impl Mlp {
    pub fn declare(&self, b: &mut Builder, path: &str) -> Result<()> {
        Dense::new(self.dim, self.hidden).declare(b, &join(path, "fc1"))?;
        Dense::new(self.hidden, self.dim).declare(b, &join(path, "fc2"))
    }

    pub fn forward(&self, ctx: &mut Ctx, path: &str, z: Var) -> Result<Var> {
        let h = Dense::new(self.dim, self.hidden).forward(ctx, &join(path, "fc1"), z)?;
        let h = ctx.tape.gelu(h).at(path)?;
        let h = ctx.dropout(path, h)?;
        Dense::new(self.hidden, self.dim).forward(ctx, &join(path, "fc2"), h)
    }

    pub fn param_count(&self) -> usize {
        Dense::new(self.dim, self.hidden).param_count() + Dense::new(self.hidden, self.dim).param_count()
    }
}

/// Pre-norm residual layer: `z' = z + MSA(LN(z))`, `out = z' + MLP(LN(z'))`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransformerLayer {
    pub attn: Msa,
    pub mlp: Mlp,
}

impl TransformerLayer {
    pub fn new(dim: usize, heads: usize, mlp_hidden: usize) -> Result<Self> {
        Ok(Self {
            attn: Msa::new(dim, heads)?,
            mlp: Mlp {
                dim,
                hidden: mlp_hidden,
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.attn.dim
    }

    pub fn declare(&self, b: &mut Builder, path: &str) -> Result<()> {
        declare_layer_norm(b, &join(path, "norm1"), self.dim())?;
        self.attn.declare(b, &join(path, "attn"))?;
        declare_layer_norm(b, &join(path, "norm2"), self.dim())?;
        self.mlp.declare(b, &join(path, "mlp"))
    }

    pub fn forward(&self, ctx: &mut Ctx, path: &str, z: Var) -> Result<Var> {
        let h = layer_norm(ctx, &join(path, "norm1"), z)?;
        let h = self.attn.forward(ctx, &join(path, "attn"), h)?;
        let z = ctx.tape.add(z, h).at(path)?;
        let h = layer_norm(ctx, &join(path, "norm2"), z)?;
        let h = self.mlp.forward(ctx, &join(path, "mlp"), h)?;
        ctx.tape.add(z, h).at(path)
    }

    pub fn param_count(&self) -> usize {
        4 * self.dim() + self.attn.param_count() + self.mlp.param_count()
    }
}

/// Layers applied in sequence under `<path>.<i>`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TransformerStack {
    pub layers: Vec<TransformerLayer>,
}

impl TransformerStack {
    pub fn declare(&self, b: &mut Builder, path: &str) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.declare(b, &join(path, &i.to_string()))?;
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &mut Ctx, path: &str, mut z: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            z = layer.forward(ctx, &join(path, &i.to_string()), z)?;
        }
        Ok(z)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(TransformerLayer::param_count).sum()
    }
}

pub(crate) fn declare_layer_norm(b: &mut Builder, path: &str, dim: usize) -> Result<()> {
    b.constant(join(path, "weight"), &[dim], 1.0)?;
    b.constant(join(path, "bias"), &[dim], 0.0)
}

pub(crate) fn layer_norm(ctx: &mut Ctx, path: &str, x: Var) -> Result<Var> {
    let g = ctx.param(&join(path, "weight"))?;
    let b = ctx.param(&join(path, "bias"))?;
    ctx.tape.layer_norm(x, g, b, NORM_EPS).at(path)
}
