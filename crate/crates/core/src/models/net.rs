use tencore::{NormStats, PoolKind, Tensor, Var};

use crate::blocks::{
    declare_layer_norm, layer_norm, Cbam, Conv, ConvKind, ConvUnit, DoubleConv, Norm, PatchEmbed, TransformerLayer,
    TransformerStack, BN_MOMENTUM,
};
use crate::error::{AtPath, Error, Result};
use crate::params::{join, Builder, Ctx, Mode, ParamStore};

use super::config::{ModelConfig, ModelKind};

#[derive(Clone)]
struct Transformer {
    embed: PatchEmbed,
    stack: TransformerStack,
}

#[derive(Clone)]
struct DecoderBlock {
    conv: DoubleConv,
    /// Encoder output (0 = stem) concatenated before the convs.
    skip: Option<usize>,
}

#[derive(Clone)]
struct Decoder {
    proj: Option<(ConvUnit, Norm)>,
    blocks: Vec<DecoderBlock>,
    head: Conv,
}

/// The layer structure implied by a configuration. Holds no weights.
#[derive(Clone)]
struct Architecture {
    stem: DoubleConv,
    downs: Vec<DoubleConv>,
    transformer: Option<Transformer>,
    decoder: Decoder,
}

impl Architecture {
    fn new(kind: ModelKind, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate(kind)?;
        let conv_kind = if cfg.dsc { ConvKind::Dsc } else { ConvKind::Standard };
        let cbam = |c: usize| -> Result<Option<Cbam>> {
            cfg.cbam
                .then(|| Cbam::new(c, cfg.cbam_ratio, cfg.cbam_kernel))
                .transpose()
        };
        let w = &cfg.encoder_widths;
        let stem = DoubleConv::new(cfg.in_frames, w[0], w[0], ConvKind::Standard, cfg.norm, cbam(w[0])?)?;
        let downs = (1..w.len())
            .map(|i| DoubleConv::new(w[i - 1], w[i], w[i], ConvKind::Standard, cfg.norm, cbam(w[i])?))
            .collect::<Result<Vec<_>>>()?;
        let stages = cfg.stages();

        if kind == ModelKind::Unet {
            // classic U: each block concatenates the encoder output one level up
            let mut blocks = Vec::new();
            let mut cin = w[stages];
            for level in (0..stages).rev() {
                let conv = DoubleConv::new(cin + w[level], w[level], w[level], ConvKind::Standard, cfg.norm, None)?;
                blocks.push(DecoderBlock {
                    conv,
                    skip: Some(level),
                });
                cin = w[level];
            }
            return Ok(Self {
                stem,
                downs,
                transformer: None,
                decoder: Decoder {
                    proj: None,
                    blocks,
                    head: Conv::new(cin, cfg.out_frames, 1),
                },
            });
        }

        let embed = PatchEmbed::new(w[stages], cfg.embed_dim, cfg.patch_size, cfg.image_size >> stages)?;
        let layers = (0..cfg.depth)
            .map(|_| TransformerLayer::new(cfg.embed_dim, cfg.heads, cfg.mlp_ratio * cfg.embed_dim))
            .collect::<Result<Vec<_>>>()?;
        let dec = &cfg.decoder_widths;
        let proj = (
            ConvUnit::new(conv_kind, cfg.embed_dim, dec[0], 3),
            Norm::new(cfg.norm, dec[0])?,
        );
        let total_up = cfg.upsamplings();
        let mut blocks = Vec::new();
        let mut cin = dec[0];
        for (j, &width) in dec.iter().enumerate() {
            // resolution after this block is image_size / 2^level
            let level = total_up - (j + 1);
            let skip = (1..=stages).contains(&level).then_some(level);
            let skip_ch = skip.map_or(0, |s| w[s]);
            let conv = DoubleConv::new(cin + skip_ch, width, width, conv_kind, cfg.norm, cbam(width)?)?;
            blocks.push(DecoderBlock { conv, skip });
            cin = width;
        }
        Ok(Self {
            stem,
            downs,
            transformer: Some(Transformer {
                embed,
                stack: TransformerStack { layers },
            }),
            decoder: Decoder {
                proj: Some(proj),
                blocks,
                head: Conv::new(cin, cfg.out_frames, 1),
            },
        })
    }

    fn declare(&self, b: &mut Builder) -> Result<()> {
        self.stem.declare(b, "encoder.stem")?;
        for (i, d) in self.downs.iter().enumerate() {
            d.declare(b, &format!("encoder.down{}", i + 1))?;
        }
        if let Some(t) = &self.transformer {
            t.embed.declare(b, "transformer.embed")?;
            t.stack.declare(b, "transformer.layers")?;
            declare_layer_norm(b, "transformer.norm", t.embed.dim)?;
        }
        if let Some((conv, norm)) = &self.decoder.proj {
            conv.declare(b, "decoder.proj.conv")?;
            norm.declare(b, "decoder.proj.norm")?;
        }
        for (j, blk) in self.decoder.blocks.iter().enumerate() {
            blk.conv.declare(b, &format!("decoder.up{}", j + 1))?;
        }
        // zero head: an untrained network predicts the zero map
        let head = self.decoder.head;
        b.constant("decoder.head.weight".into(), &[head.cout, head.cin, 1, 1], 0.0)?;
        b.constant("decoder.head.bias".into(), &[head.cout], 0.0)
    }

    fn param_count(&self) -> usize {
        let mut n = self.stem.param_count() + self.downs.iter().map(DoubleConv::param_count).sum::<usize>();
        if let Some(t) = &self.transformer {
            n += t.embed.param_count() + t.stack.param_count() + 2 * t.embed.dim;
        }
        if let Some((conv, norm)) = &self.decoder.proj {
            n += conv.param_count() + norm.param_count();
        }
        n + self.decoder.blocks.iter().map(|b| b.conv.param_count()).sum::<usize>() + self.decoder.head.param_count()
    }
}

/// A network with its weights.
#[derive(Clone)]
pub struct Model {
    kind: ModelKind,
    cfg: ModelConfig,
    arch: Architecture,
    params: ParamStore,
    buffers: ParamStore,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("kind", &self.kind)
            .field("params", &self.params.len())
            .finish()
    }
}

/// Named intermediate shapes recorded during a forward pass.
pub type ShapeTrace = Vec<(String, Vec<usize>)>;

impl Model {
    /// Builds `kind` from `cfg` (resolved for the kind) with weights drawn
    /// from `seed`.
    pub fn build(kind: ModelKind, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let cfg = cfg.resolved(kind);
        let arch = Architecture::new(kind, &cfg)?;
        let mut b = Builder::new(seed);
        arch.declare(&mut b)?;
        Ok(Self {
            kind,
            cfg,
            arch,
            params: b.params,
            buffers: b.buffers,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut ParamStore {
        &mut self.buffers
    }

    /// Closed-form parameter count from the layer structure.
    pub fn declared_param_count(&self) -> usize {
        self.arch.param_count()
    }

    pub fn context(&self, mode: Mode, seed: u64) -> Ctx<'_> {
        Ctx::new(&self.params, &self.buffers, mode, seed)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.cfg;
        if shape.len() != 4 || shape[1..] != [c.in_frames, c.image_size, c.image_size] {
            return Err(Error::config(format!(
                "model expects input [B, {}, {}, {}], got {shape:?}",
                c.in_frames, c.image_size, c.image_size
            )));
        }
        Ok(())
    }

    /// Forward on an existing context; `x` is `[B, T_in, H, W]`.
    pub fn forward_var(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        self.forward_traced(ctx, x, &mut None)
    }

    fn forward_traced(&self, ctx: &mut Ctx, x: Var, trace: &mut Option<ShapeTrace>) -> Result<Var> {
        self.check_input(ctx.tape.shape(x))?;
        let mut note = |ctx: &Ctx, name: &str, v: Var| {
            if let Some(t) = trace.as_mut() {
                t.push((name.to_string(), ctx.tape.shape(v).to_vec()));
            }
        };
        let mut feats = vec![self.arch.stem.forward(ctx, "encoder.stem", x)?];
        note(ctx, "encoder.stem", feats[0]);
        for (i, d) in self.arch.downs.iter().enumerate() {
            let path = format!("encoder.down{}", i + 1);
            let pooled = ctx.tape.pool2d(feats[i], PoolKind::Max, 2, 2).at(&path)?;
            let h = d.forward(ctx, &path, pooled)?;
            note(ctx, &path, h);
            feats.push(h);
        }
        let mut h = *feats.last().expect("stem output");
        if let Some(t) = &self.arch.transformer {
            let z = t.embed.forward(ctx, "transformer.embed", h)?;
            note(ctx, "transformer.tokens", z);
            let z = t.stack.forward(ctx, "transformer.layers", z)?;
            let z = layer_norm(ctx, "transformer.norm", z)?;
            let (b, g, d) = (ctx.tape.shape(z)[0], t.embed.grid(), t.embed.dim);
            let path = "transformer.grid";
            let z = ctx.tape.permute(z, &[0, 2, 1]).at(path)?;
            h = ctx.tape.reshape(z, &[b, d, g, g]).at(path)?;
            note(ctx, path, h);
        }
        if let Some((conv, norm)) = &self.arch.decoder.proj {
            h = conv.forward(ctx, "decoder.proj.conv", h)?;
            h = norm.forward(ctx, "decoder.proj.norm", h)?;
            h = ctx.tape.relu(h).at("decoder.proj")?;
        }
        for (j, blk) in self.arch.decoder.blocks.iter().enumerate() {
            let path = format!("decoder.up{}", j + 1);
            h = ctx.tape.upsample_bilinear2x(h).at(&path)?;
            if let Some(s) = blk.skip {
                h = ctx.tape.concat(&[h, feats[s]], 1).at(&path)?;
            }
            h = blk.conv.forward(ctx, &path, h)?;
            h = ctx.dropout(&path, h)?;
            note(ctx, &path, h);
        }
        let head = self.arch.decoder.head;
        h = head.forward(ctx, "decoder.head", h)?;
        Ok(h)
    }

    /// Forward on a fresh context. `x` is `[B, T_in, H, W]`.
    pub fn predict(&self, x: &Tensor, mode: Mode, seed: u64) -> Result<Tensor> {
        if !x.is_finite() {
            return Err(Error::data("non-finite values in model input"));
        }
        let mut ctx = self.context(mode, seed);
        let xv = ctx.input(x.clone());
        let y = self.forward_var(&mut ctx, xv)?;
        Ok(ctx.tape.value(y).clone())
    }

    /// Deterministic inference (running statistics, no dropout).
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.predict(x, Mode::eval(), 0)
    }

    /// Shapes of the encoder stages, tokens, token grid and decoder blocks
    /// for a batch of one.
    pub fn shape_trace(&self) -> Result<ShapeTrace> {
        let c = &self.cfg;
        let mut ctx = self.context(Mode::eval(), 0);
        let x = ctx.input(Tensor::zeros([1, c.in_frames, c.image_size, c.image_size]));
        let mut trace = Some(Vec::new());
        let y = self.forward_traced(&mut ctx, x, &mut trace)?;
        let mut trace = trace.expect("trace enabled");
        trace.push(("output".into(), ctx.tape.shape(y).to_vec()));
        Ok(trace)
    }

    /// Folds batch statistics from a training pass into the running
    /// estimates (momentum 0.1, unbiased variance).
    pub fn update_running_stats(&mut self, stats: &[(String, NormStats)]) -> Result<()> {
        for (path, s) in stats {
            let n = s.count as f64;
            let correction = if s.count > 1 { n / (n - 1.0) } else { 1.0 };
            for (name, fresh) in [
                ("running_mean", s.mean.clone()),
                ("running_var", s.var.iter().map(|v| v * correction).collect()),
            ] {
                let key = join(path, name);
                let i = self
                    .buffers
                    .position(&key)
                    .ok_or_else(|| Error::config(format!("missing buffer {key}")))?;
                let buf = self.buffers.tensor_mut(i);
                for (r, f) in buf.data_mut().iter_mut().zip(&fresh) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * f;
                }
            }
        }
        Ok(())
    }
}

/// Repeats the last input frame `out_frames` times: `[B, T_in, H, W] ->
/// [B, out_frames, H, W]`.
pub fn persistence(x: &Tensor, out_frames: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || out_frames == 0 {
        return Err(Error::config(format!(
            "persistence expects [B, T, H, W] input and at least one output frame, got {s:?}"
        )));
    }
    let (b, t, plane) = (s[0], s[1], s[2] * s[3]);
    let mut data = Vec::with_capacity(b * out_frames * plane);
    for n in 0..b {
        let last = &x.data()[(n * t + t - 1) * plane..(n * t + t) * plane];
        for _ in 0..out_frames {
            data.extend_from_slice(last);
        }
    }
    Tensor::new([b, out_frames, s[2], s[3]], data).map_err(|e| Error::at("persistence", e))
}
