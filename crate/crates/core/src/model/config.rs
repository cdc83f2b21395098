use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputMode {
    /// Raw samples go through the strided convolution stack.
    Waveform,
    /// Precomputed frames (MFCC or similar) are projected directly.
    Features,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Strides and kernel widths of the reference waveform encoder.
pub const REFERENCE_STRIDES: [usize; 7] = [5, 2, 2, 2, 2, 2, 2];
pub const REFERENCE_KERNELS: [usize; 7] = [10, 3, 3, 3, 3, 2, 2];

pub fn reference_conv(channels: usize) -> Vec<ConvLayer> {
    REFERENCE_KERNELS
        .iter()
        .zip(REFERENCE_STRIDES.iter())
        .map(|(&kernel, &stride)| ConvLayer {
            channels,
            kernel,
            stride,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub conv: Vec<ConvLayer>,
    pub input_mode: InputMode,
    /// Frame dimension in features mode; ignored for waveforms.
    pub input_dim: usize,
    pub num_layers: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub layerdrop_prob: f64,
    pub proj_dim: usize,
    pub tau: f64,
    pub codebook_sizes: Vec<usize>,
    pub pos_conv_kernel: usize,
    pub pos_conv_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            conv: reference_conv(32),
            input_mode: InputMode::Features,
            input_dim: 39,
            num_layers: 2,
            embed_dim: 64,
            ffn_dim: 256,
            num_heads: 2,
            layerdrop_prob: 0.0,
            proj_dim: 32,
            tau: 0.1,
            codebook_sizes: vec![100],
            pos_conv_kernel: 16,
            pos_conv_groups: 4,
        }
    }
}

impl ModelConfig {
    fn preset(layers: usize, embed: usize, ffn: usize, heads: usize, proj: usize, drop: f64) -> Self {
        Self {
            conv: reference_conv(512),
            input_mode: InputMode::Waveform,
            input_dim: 1,
            num_layers: layers,
            embed_dim: embed,
            ffn_dim: ffn,
            num_heads: heads,
            layerdrop_prob: drop,
            proj_dim: proj,
            tau: 0.1,
            codebook_sizes: vec![500],
            pos_conv_kernel: 128,
            pos_conv_groups: 16,
        }
    }

    pub fn base() -> Self {
        Self::preset(12, 768, 3072, 8, 256, 0.05)
    }

    pub fn large() -> Self {
        Self::preset(24, 1024, 4096, 16, 768, 0.0)
    }

    pub fn x_large() -> Self {
        Self::preset(48, 1280, 5120, 16, 1024, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("ffn_dim", self.ffn_dim),
            ("num_heads", self.num_heads),
            ("proj_dim", self.proj_dim),
            ("pos_conv_kernel", self.pos_conv_kernel),
            ("pos_conv_groups", self.pos_conv_groups),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        if self.embed_dim % self.pos_conv_groups != 0 {
            return bad(format!(
                "embed_dim {} not divisible by {} positional groups",
                self.embed_dim, self.pos_conv_groups
            ));
        }
        if !(0.0..1.0).contains(&self.layerdrop_prob) {
            return bad(format!("layerdrop_prob {} outside [0, 1)", self.layerdrop_prob));
        }
        if self.codebook_sizes.is_empty() || self.codebook_sizes.contains(&0) {
            return bad("need at least one codebook, each with C >= 1".into());
        }
        match self.input_mode {
            InputMode::Features if self.input_dim == 0 => bad("input_dim must be at least 1".into()),
            InputMode::Waveform if self.conv.is_empty() => {
                bad("waveform input needs at least one conv layer".into())
            }
            InputMode::Waveform
                if self
                    .conv
                    .iter()
                    .any(|c| c.channels == 0 || c.kernel == 0 || c.stride == 0) =>
            {
                bad("conv layers need channels, kernel and stride >= 1".into())
            }
            _ => Ok(()),
        }
    }

    /// Width of the rows entering the input projection.
    pub fn frontend_dim(&self) -> usize {
        match self.input_mode {
            InputMode::Features => self.input_dim,
            InputMode::Waveform => self.conv.last().map_or(1, |c| c.channels),
        }
    }

    /// Output frames for `len` input rows (samples or feature frames).
    pub fn num_frames(&self, len: usize) -> Option<usize> {
        match self.input_mode {
            InputMode::Features => (len > 0).then_some(len),
            InputMode::Waveform => conv_output_len(&self.conv, len),
        }
    }

    /// Product of the conv strides (samples per output frame).
    pub fn total_stride(&self) -> usize {
        self.conv.iter().map(|c| c.stride).product()
    }

    /// Samples seen by one output frame.
    pub fn receptive_field(&self) -> usize {
        let mut r = 1;
        let mut jump = 1;
        for c in &self.conv {
            r += (c.kernel - 1) * jump;
            jump *= c.stride;
        }
        r
    }
}

/// Applies `floor((L - kernel) / stride) + 1` layer by layer.
pub fn conv_output_len(layers: &[ConvLayer], mut len: usize) -> Option<usize> {
    for c in layers {
        if len < c.kernel {
            return None;
        }
        len = (len - c.kernel) / c.stride + 1;
    }
    Some(len)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight on masked frames; unmasked frames get `1 - alpha`.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}
