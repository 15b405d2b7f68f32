//! Building blocks: convolution units, normalization, the double-convolution
//! block, CBAM attention, patch embedding and transformer layers.
//!
//! Every block follows the same pattern: `declare` creates its parameters
//! under a path prefix, `forward` reads them back from a [`Ctx`], and
//! `param_count` gives the closed-form scalar count of what `declare` stores.

mod cbam;
mod transformer;

pub use cbam::Cbam;
pub use transformer::{Mlp, Msa, PatchEmbed, TransformerLayer, TransformerStack};
pub(crate) use transformer::{declare_layer_norm, layer_norm};

use serde::{Deserialize, Serialize};
use tencore::{NormLayout, Tensor, Var};

use crate::error::{AtPath, Error, Result};
use crate::params::{join, Builder, Ctx};

pub(crate) const NORM_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

/// Fully connected layer over the last axis, weight stored `[out, in]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs }
    }

    pub fn declare(&self, b: &mut Builder, path: &str) -> Result<()> {
        b.kaiming(join(path, "weight"), &[self.outputs, self.inputs], self.inputs)?;
        b.constant(join(path, "bias"), &[self.outputs], 0.0)
    }

    pub fn forward(&self, ctx: &mut Ctx, path: &str, x: Var) -> Result<Var> {
        let w = ctx.param(&join(path, "weight"))?;
        let b = ctx.param(&join(path, "bias"))?;
        let t = &mut ctx.tape;
        let wt = t.transpose(w, 0, 1).at(path)?;
        t.linear(x, wt, Some(b)).at(path)
    }

    pub fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

/// Standard 2-D convolution with bias and "same" padding for stride 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl Conv {
    pub fn new(cin: usize, cout: usize, kernel: usize) -> Self {
        Self { cin, cout, kernel }
    }

    pub fn declare(&self, b: &mut Builder, path: &str) -> Result<()> {
        let k = self.kernel;
        b.kaiming(join(path, "weight"), &[self.cout, self.cin, k, k], self.cin * k * k)?;
        b.constant(join(path, "bias"), &[self.cout], 0.0)
    }

    pub fn forward(&self, ctx: &mut Ctx, path: &str, x: Var) -> Result<Var> {
        let w = ctx.param(&join(path, "weight"))?;
        let b = ctx.param(&join(path, "bias"))?;
        ctx.tape.conv2d(x, w, Some(b), 1, self.kernel / 2).at(path)
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel + self.cout
    }
}

/// Depthwise k×k convolution followed by a pointwise 1×1 convolution, both
/// with bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dsc {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl Dsc {
    pub fn new(cin: usize, cout: usize, kernel: usize) -> Self {
        Self { cin, cout, kernel }
    }

    pub fn declare(&self, b: &mut Builder, path: &str) -> Result<()> {
        let k = self.kernel;
        b.kaiming(join(path, "depthwise.weight"), &[self.cin, 1, k, k], k * k)?;
        b.constant(join(path, "depthwise.bias"), &[self.cin], 0.0)?;
        b.kaiming(join(path, "pointwise.weight"), &[self.cout, self.cin, 1, 1], self.cin)?;
        b.constant(join(path, "pointwise.bias"), &[self.cout], 0.0)
    }

    pub fn forward(&self, ctx: &mut Ctx, path: &str, x: Var) -> Result<Var> {
        let dw = ctx.param(&join(path, "depthwise.weight"))?;
        let db = ctx.param(&join(path, "depthwise.bias"))?;
        let pw = ctx.param(&join(path, "pointwise.weight"))?;
        let pb = ctx.param(&join(path, "pointwise.bias"))?;
        let h = ctx
            .tape
            .depthwise_conv2d(x, dw, Some(db), 1, self.kernel / 2)
            .at(&join(path, "depthwise"))?;
        ctx.tape
            .conv2d(h, pw, Some(pb), 1, 0)
            .at(&join(path, "pointwise"))
    }

    pub fn param_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        self.cin * k2 + self.cin + self.cin * self.cout + self.cout
    }

    /// The standard convolution kernel computing exactly the same map:
    /// `w[o, i] = pw[o, i] * dw[i]`, `b[o] = pb[o] + sum_i pw[o, i] * db[i]`.
    pub fn expand(&self, dw: &Tensor, db: &Tensor, pw: &Tensor, pb: &Tensor) -> (Tensor, Tensor) {
        let (cin, cout, k2) = (self.cin, self.cout, self.kernel * self.kernel);
        let mut w = vec![0.0; cout * cin * k2];
        let mut b = pb.data().to_vec();
        for o in 0..cout {
            for i in 0..cin {
                let p = pw.data()[o * cin + i];
                for t in 0..k2 {
                    w[(o * cin + i) * k2 + t] = p * dw.data()[i * k2 + t];
                }
                b[o] += p * db.data()[i];
            }
        }
        let shape = [cout, cin, self.kernel, self.kernel];
        (
            Tensor::new(shape, w).expect("expanded kernel shape"),
            Tensor::new([cout], b).expect("expanded bias shape"),
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    #[default]
    Standard,
    Dsc,
}

/// A convolution of either kind behind one interface.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvUnit {
    Standard(Conv),
    Dsc(Dsc),
}

impl ConvUnit {
    pub fn new(kind: ConvKind, cin: usize, cout: usize, kernel: usize) -> Self {
        match kind {
            ConvKind::Standard => ConvUnit::Standard(Conv::new(cin, cout, kernel)),
            ConvKind::Dsc => ConvUnit::Dsc(Dsc::new(cin, cout, kernel)),
        }
    }

    pub fn declare(&self, b: &mut Builder, path: &str) -> Result<()> {
        match self {
            ConvUnit::Standard(c) => c.declare(b, path),
            ConvUnit::Dsc(c) => c.declare(b, path),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, path: &str, x: Var) -> Result<Var> {
        match self {
            ConvUnit::Standard(c) => c.forward(ctx, path, x),
            ConvUnit::Dsc(c) => c.forward(ctx, path, x),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            ConvUnit::Standard(c) => c.param_count(),
            ConvUnit::Dsc(c) => c.param_count(),
        }
    }
}

/// Normalization applied after each convolution inside conv blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NormKind {
    None,
    /// Statistics over batch and spatial axes per channel, with running
    /// estimates for inference.
    #[default]
    Batch,
    Group {
        groups: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Norm {
    pub kind: NormKind,
    pub channels: usize,
}

impl Norm {
    pub fn new(kind: NormKind, channels: usize) -> Result<Self> {
        if let NormKind::Group { groups } = kind {
            if groups == 0 || channels % groups != 0 {
                return Err(Error::config(format!(
                    "group norm: {channels} channels not divisible into {groups} groups"
                )));
            }
        }
        Ok(Self { kind, channels })
    }

    pub fn declare(&self, b: &mut Builder, path: &str) -> Result<()> {
        if self.kind == NormKind::None {
            return Ok(());
        }
        b.constant(join(path, "weight"), &[self.channels], 1.0)?;
        b.constant(join(path, "bias"), &[self.channels], 0.0)?;
        if self.kind == NormKind::Batch {
            b.buffer(join(path, "running_mean"), Tensor::zeros([self.channels]))?;
            b.buffer(join(path, "running_var"), Tensor::ones([self.channels]))?;
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &mut Ctx, path: &str, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        let [_, c, h, w] = shape[..] else {
            return Err(Error::config(format!("{path}: expected rank-4 input, got {shape:?}")));
        };
        let xhat = match self.kind {
            NormKind::None => return Ok(x),
            NormKind::Group { groups } => {
                let layout = NormLayout::Chunks {
                    size: c / groups * h * w,
                };
                ctx.tape.standardize(x, layout, NORM_EPS).at(path)?.0
            }
            NormKind::Batch if ctx.mode().batch_stats => {
                let layout = NormLayout::Channels {
                    channels: c,
                    inner: h * w,
                };
                let (y, stats) = ctx.tape.standardize(x, layout, NORM_EPS).at(path)?;
                ctx.record_stats(path.to_string(), stats);
                y
            }
            NormKind::Batch => {
                let mean = ctx.buffer(&join(path, "running_mean"))?;
                let var = ctx.buffer(&join(path, "running_var"))?;
                let shift = mean.map(|m| -m).reshape([1, c, 1, 1]).at(path)?;
                let inv = var
                    .map(|v| 1.0 / (v + NORM_EPS).sqrt())
                    .reshape([1, c, 1, 1])
                    .at(path)?;
                let (shift, inv) = (ctx.tape.constant(shift), ctx.tape.constant(inv));
                let centred = ctx.tape.add(x, shift).at(path)?;
                ctx.tape.mul(centred, inv).at(path)?
            }
        };
        let gamma = ctx.param(&join(path, "weight"))?;
        let beta = ctx.param(&join(path, "bias"))?;
        let t = &mut ctx.tape;
        let gamma = t.reshape(gamma, &[1, c, 1, 1]).at(path)?;
        let beta = t.reshape(beta, &[1, c, 1, 1]).at(path)?;
        let scaled = t.mul(xhat, gamma).at(path)?;
        t.add(scaled, beta).at(path)
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            NormKind::None => 0,
            _ => 2 * self.channels,
        }
    }
}

/// Two (conv → norm → ReLU) stages with an optional trailing CBAM.
#[derive(Clone, Debug, PartialEq)]
pub struct DoubleConv {
    pub conv1: ConvUnit,
    pub norm1: Norm,
    pub conv2: ConvUnit,
    pub norm2: Norm,
    pub cbam: Option<Cbam>,
}

impl DoubleConv {
    pub fn new(
        cin: usize,
        cmid: usize,
        cout: usize,
        kind: ConvKind,
        norm: NormKind,
        cbam: Option<Cbam>,
    ) -> Result<Self> {
        if let Some(c) = &cbam {
            if c.channels != cout {
                return Err(Error::config(format!(
                    "cbam over {} channels after a block producing {cout}",
                    c.channels
                )));
            }
        }
        Ok(Self {
            conv1: ConvUnit::new(kind, cin, cmid, 3),
            norm1: Norm::new(norm, cmid)?,
            conv2: ConvUnit::new(kind, cmid, cout, 3),
            norm2: Norm::new(norm, cout)?,
            cbam,
        })
    }

    pub fn declare(&self, b: &mut Builder, path: &str) -> Result<()> {
        self.conv1.declare(b, &join(path, "conv1"))?;
        self.norm1.declare(b, &join(path, "norm1"))?;
        self.conv2.declare(b, &join(path, "conv2"))?;
        self.norm2.declare(b, &join(path, "norm2"))?;
        if let Some(c) = &self.cbam {
            c.declare(b, &join(path, "cbam"))?;
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &mut Ctx, path: &str, x: Var) -> Result<Var> {
        let mut h = x;
        for (conv, norm, name) in [
            (&self.conv1, &self.norm1, "1"),
            (&self.conv2, &self.norm2, "2"),
        ] {
            h = conv.forward(ctx, &join(path, &format!("conv{name}")), h)?;
            h = norm.forward(ctx, &join(path, &format!("norm{name}")), h)?;
            h = ctx.tape.relu(h).at(path)?;
        }
        match &self.cbam {
            Some(c) => c.forward(ctx, &join(path, "cbam"), h),
            None => Ok(h),
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.norm1.param_count()
            + self.conv2.param_count()
            + self.norm2.param_count()
            + self.cbam.as_ref().map_or(0, Cbam::param_count)
    }
}
