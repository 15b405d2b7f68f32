use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::NormKind;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    AaTransunet,
    Transunet,
    Unet,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::AaTransunet, ModelKind::Transunet, ModelKind::Unet];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::AaTransunet => "aa_transunet",
            ModelKind::Transunet => "transunet",
            ModelKind::Unet => "unet",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown model {s:?} (expected aa_transunet, transunet or unet)"
                ))
            })
    }
}

/// Declarative description of a network. Input frames enter as channels and
/// the head emits one channel per output frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_frames: usize,
    pub out_frames: usize,
    /// Height and width of the (square) input frames.
    pub image_size: usize,
    /// Stem width followed by one width per 2× downsampling stage.
    pub encoder_widths: Vec<usize>,
    /// One width per 2× upsampling block of the decoder.
    pub decoder_widths: Vec<usize>,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    /// Number of transformer layers.
    pub depth: usize,
    pub mlp_ratio: usize,
    pub dsc: bool,
    pub cbam: bool,
    pub cbam_ratio: usize,
    pub cbam_kernel: usize,
    pub dropout: f64,
    pub norm: NormKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::precipitation()
    }
}

impl ModelConfig {
    /// Full-size precipitation setup: 12 input frames, 1 output, 288×288.
    pub fn precipitation() -> Self {
        Self {
            in_frames: 12,
            out_frames: 1,
            image_size: 288,
            encoder_widths: vec![64, 128, 256, 512],
            decoder_widths: vec![256, 128, 64, 16],
            patch_size: 2,
            embed_dim: 512,
            heads: 8,
            depth: 1,
            mlp_ratio: 4,
            dsc: true,
            cbam: true,
            cbam_ratio: 16,
            cbam_kernel: 7,
            dropout: 0.0,
            norm: NormKind::Batch,
        }
    }

    /// Full-size cloud-cover setup: 4 input frames, 6 outputs, 256×256.
    pub fn cloud() -> Self {
        Self {
            in_frames: 4,
            out_frames: 6,
            image_size: 256,
            ..Self::precipitation()
        }
    }

    /// Desk-scale configuration: widths divided by 8, 64×64 frames.
    pub fn tiny() -> Self {
        Self {
            in_frames: 4,
            out_frames: 1,
            image_size: 64,
            encoder_widths: vec![8, 16, 32, 64],
            decoder_widths: vec![32, 16, 8, 4],
            embed_dim: 64,
            cbam_ratio: 4,
            ..Self::precipitation()
        }
    }

    /// Smallest configuration that exercises every block.
    pub fn smoke() -> Self {
        Self {
            in_frames: 2,
            out_frames: 1,
            image_size: 32,
            encoder_widths: vec![8, 16, 32],
            decoder_widths: vec![16, 8, 4],
            embed_dim: 32,
            heads: 4,
            cbam_ratio: 4,
            ..Self::precipitation()
        }
    }

    pub fn template(name: &str) -> Result<Self> {
        match name {
            "precipitation" => Ok(Self::precipitation()),
            "cloud" => Ok(Self::cloud()),
            "tiny" => Ok(Self::tiny()),
            "smoke" => Ok(Self::smoke()),
            _ => Err(Error::config(format!(
                "unknown template {name:?} (expected precipitation, cloud, tiny or smoke)"
            ))),
        }
    }

    /// Number of 2× downsampling stages in the CNN encoder.
    pub fn stages(&self) -> usize {
        self.encoder_widths.len().saturating_sub(1)
    }

    /// Decoder blocks needed to return from the token grid to full size.
    pub fn upsamplings(&self) -> usize {
        self.stages() + self.patch_size.trailing_zeros() as usize
    }

    /// Side of the square token grid.
    pub fn token_grid(&self) -> usize {
        (self.image_size >> self.stages()) / self.patch_size.max(1)
    }

    /// The configuration as `kind` actually uses it: the plain TransUNet and
    /// the UNet drop depthwise-separable convolutions and attention modules.
    pub fn resolved(&self, kind: ModelKind) -> Self {
        let mut cfg = self.clone();
        if kind != ModelKind::AaTransunet {
            cfg.dsc = false;
            cfg.cbam = false;
        }
        cfg
    }

    pub fn validate(&self, kind: ModelKind) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if self.in_frames == 0 || self.out_frames == 0 {
            return fail("in_frames and out_frames must be at least 1".into());
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return fail(format!("bad encoder widths {:?}", self.encoder_widths));
        }
        let down = 1usize << self.stages();
        if self.image_size == 0 || self.image_size % down != 0 {
            return fail(format!(
                "image size {} not divisible by the encoder downsampling factor {down}",
                self.image_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if kind == ModelKind::Unet {
            return Ok(());
        }
        if !self.patch_size.is_power_of_two() {
            return fail(format!("patch size {} must be a power of two", self.patch_size));
        }
        if self.image_size % (down * self.patch_size) != 0 {
            return fail(format!(
                "image size {} not divisible by downsampling {down} times patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.decoder_widths.len() != self.upsamplings() || self.decoder_widths.contains(&0) {
            return fail(format!(
                "need {} positive decoder widths to undo {} downsamplings and patch size {}, got {:?}",
                self.upsamplings(),
                self.stages(),
                self.patch_size,
                self.decoder_widths
            ));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be positive".into());
        }
        Ok(())
    }
}
