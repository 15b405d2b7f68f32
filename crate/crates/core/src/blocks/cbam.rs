use tencore::{PoolKind, Var};

use crate::error::{AtPath, Error, Result};
use crate::params::{join, Builder, Ctx};

use super::Dense;

/// Convolutional block attention: channel gating from a shared MLP over the
/// average- and max-pooled descriptors, then spatial gating from a k×k conv
/// over the channel-wise mean and max maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cbam {
    pub channels: usize,
    pub ratio: usize,
    pub spatial_kernel: usize,
}

impl Cbam {
    pub fn new(channels: usize, ratio: usize, spatial_kernel: usize) -> Result<Self> {
        if ratio == 0 || channels % ratio != 0 {
            return Err(Error::config(format!(
                "cbam: {channels} channels not divisible by reduction ratio {ratio}"
            )));
        }
        if spatial_kernel % 2 == 0 {
            return Err(Error::config(format!(
                "cbam: spatial kernel {spatial_kernel} must be odd"
            )));
        }
        Ok(Self {
            channels,
            ratio,
            spatial_kernel,
        })
    }

    fn hidden(&self) -> usize {
        self.channels / self.ratio
    }

    fn fc1(&self) -> Dense {
        Dense::new(self.channels, self.hidden())
    }

    fn fc2(&self) -> Dense {
        Dense::new(self.hidden(), self.channels)
    }

    pub fn declare(&self, b: &mut Builder, path: &str) -> Result<()> {
        self.fc1().declare(b, &join(path, "mlp.fc1"))?;
        self.fc2().declare(b, &join(path, "mlp.fc2"))?;
        let k = self.spatial_kernel;
        b.kaiming(join(path, "spatial.weight"), &[1, 2, k, k], 2 * k * k)
    }

    /// Channel gate `[B, C, 1, 1]`.
    pub fn channel_attention(&self, ctx: &mut Ctx, path: &str, f: Var) -> Result<Var> {
        let shape = ctx.tape.shape(f).to_vec();
        let (b, c) = (shape[0], shape[1]);
        if c != self.channels {
            return Err(Error::config(format!(
                "{path}: expected {} channels, got {c}",
                self.channels
            )));
        }
        let t = &mut ctx.tape;
        let avg = t.global_pool(f, PoolKind::Avg).at(path)?;
        let max = t.global_pool(f, PoolKind::Max).at(path)?;
        // both descriptors go through the shared MLP as one batch of 2B rows
        let both = t.concat(&[avg, max], 0).at(path)?;
        let both = t.reshape(both, &[2 * b, c]).at(path)?;
        let h = self.fc1().forward(ctx, &join(path, "mlp.fc1"), both)?;
        let h = ctx.tape.relu(h).at(path)?;
        let h = self.fc2().forward(ctx, &join(path, "mlp.fc2"), h)?;
        let t = &mut ctx.tape;
        let a = t.narrow(h, 0, 0, b).at(path)?;
        let m = t.narrow(h, 0, b, b).at(path)?;
        let logits = t.add(a, m).at(path)?;
        let gate = t.sigmoid(logits).at(path)?;
        t.reshape(gate, &[b, c, 1, 1]).at(path)
    }

    /// Spatial gate `[B, 1, H, W]`.
    pub fn spatial_attention(&self, ctx: &mut Ctx, path: &str, f: Var) -> Result<Var> {
        let w = ctx.param(&join(path, "spatial.weight"))?;
        let t = &mut ctx.tape;
        let mean = t.mean_axis(f, 1).at(path)?;
        let max = t.max_axis(f, 1).at(path)?;
        let stacked = t.concat(&[mean, max], 1).at(path)?;
        let logits = t
            .conv2d(stacked, w, None, 1, self.spatial_kernel / 2)
            .at(path)?;
        t.sigmoid(logits).at(path)
    }

    pub fn forward(&self, ctx: &mut Ctx, path: &str, f: Var) -> Result<Var> {
        let mc = self.channel_attention(ctx, path, f)?;
        let refined = ctx.tape.mul(f, mc).at(path)?;
        let ms = self.spatial_attention(ctx, path, refined)?;
        ctx.tape.mul(refined, ms).at(path)
    }

    pub fn param_count(&self) -> usize {
        let k = self.spatial_kernel;
        self.fc1().param_count() + self.fc2().param_count() + 2 * k * k
    }
}
