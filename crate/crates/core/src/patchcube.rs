//! Space-time cube tokenization.
//!
//! Patches are ordered time-major, then row-major over the spatial grid, so
//! the flat token index is `t * s_tok + row * grid_w + col`. Within a patch,
//! values are ordered `(dt, dy, dx, channel)`.

use ndarray::{Array2, Array3, Array4, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::clipio::{ClipSpec, VideoClip};
use crate::error::{Error, Result};
use crate::nn::Linear;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEmbedding {
    /// Fixed sinusoidal table.
    #[default]
    Sinusoidal,
    /// Sinusoidal initialization, then trained.
    Learnable,
    /// No positional signal at all.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub clip: ClipSpec,
    pub temporal_patch: usize,
    pub spatial_patch: usize,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
    #[serde(default)]
    pub pos_embedding: PosEmbedding,
    /// Whether the shared decoder mask token is updated during training.
    #[serde(default = "default_true")]
    pub train_mask_token: bool,
    /// Allows reconstruction from zero kept slots.
    #[serde(default)]
    pub allow_unconditional: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// 224x224x16 input, `[2, 16, 16]` cubes, 768-wide encoder.
    pub fn paper() -> Self {
        Self {
            clip: ClipSpec::paper(),
            temporal_patch: 2,
            spatial_patch: 16,
            embed_dim: 768,
            encoder_depth: 12,
            encoder_heads: 12,
            decoder_dim: 384,
            decoder_depth: 4,
            decoder_heads: 6,
            mlp_ratio: 4,
            pos_embedding: PosEmbedding::Sinusoidal,
            train_mask_token: true,
            allow_unconditional: false,
        }
    }

    /// 64x64x16 input with 8-pixel cubes; small enough for CPU training.
    pub fn toy() -> Self {
        Self {
            clip: ClipSpec::toy(),
            spatial_patch: 8,
            embed_dim: 96,
            encoder_depth: 4,
            // head width 48 in both stacks
            encoder_heads: 2,
            decoder_dim: 48,
            decoder_depth: 2,
            decoder_heads: 1,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.clip.validate()?;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.temporal_patch == 0 || self.spatial_patch == 0 {
            return bad("patch sizes must be positive".into());
        }
        if self.clip.frames % self.temporal_patch != 0 {
            return bad(format!(
                "frames {} not divisible by temporal patch {}",
                self.clip.frames, self.temporal_patch
            ));
        }
        if self.clip.height % self.spatial_patch != 0 || self.clip.width % self.spatial_patch != 0 {
            return bad(format!(
                "{}x{} not divisible by spatial patch {}",
                self.clip.height, self.clip.width, self.spatial_patch
            ));
        }
        if self.embed_dim == 0 || self.decoder_dim == 0 || self.mlp_ratio == 0 {
            return bad("widths must be positive".into());
        }
        if self.encoder_heads == 0 || self.embed_dim % self.encoder_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by {} encoder heads",
                self.embed_dim, self.encoder_heads
            ));
        }
        if self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            return bad(format!(
                "decoder_dim {} not divisible by {} decoder heads",
                self.decoder_dim, self.decoder_heads
            ));
        }
        Ok(())
    }

    pub fn t_tok(&self) -> usize {
        self.clip.frames / self.temporal_patch
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.clip.height / self.spatial_patch, self.clip.width / self.spatial_patch)
    }

    pub fn s_tok(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn num_tokens(&self) -> usize {
        self.t_tok() * self.s_tok()
    }

    /// Pixel values per cube.
    pub fn patch_len(&self) -> usize {
        self.temporal_patch * self.spatial_patch * self.spatial_patch * self.clip.channels
    }
}

/// Embedded tokens, `[t_tok, s_tok, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub tokens: Array3<f64>,
}

impl TokenGrid {
    pub fn t_tok(&self) -> usize {
        self.tokens.len_of(Axis(0))
    }
    pub fn s_tok(&self) -> usize {
        self.tokens.len_of(Axis(1))
    }
    pub fn dim(&self) -> usize {
        self.tokens.len_of(Axis(2))
    }
    /// `[t_tok * s_tok, dim]` view in flat token order.
    pub fn flat(&self) -> ndarray::ArrayView2<'_, f64> {
        let (t, s, d) = self.tokens.dim();
        self.tokens.view().into_shape_with_order((t * s, d)).expect("contiguous token grid")
    }
}

/// Pixel cubes, `[t_tok, s_tok, patch_len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelPatches {
    pub patches: Array3<f64>,
}

impl PixelPatches {
    pub fn flat(&self) -> ndarray::ArrayView2<'_, f64> {
        let (t, s, p) = self.patches.dim();
        self.patches.view().into_shape_with_order((t * s, p)).expect("contiguous patches")
    }

    pub fn from_flat(flat: Array2<f64>, t_tok: usize, s_tok: usize) -> Self {
        let p = flat.ncols();
        let flat = flat.as_standard_layout().into_owned();
        Self {
            patches: flat.into_shape_with_order((t_tok, s_tok, p)).expect("t_tok * s_tok rows"),
        }
    }
}

fn check_pixels(pixels: &ArrayView4<'_, f64>, cfg: &ModelConfig) -> Result<()> {
    let (t, h, w, c) = pixels.dim();
    let clip = &cfg.clip;
    for (axis, expected, actual) in [
        ("frames", clip.frames, t),
        ("height", clip.height, h),
        ("width", clip.width, w),
        ("channels", clip.channels, c),
    ] {
        if expected != actual {
            return Err(Error::DimensionMismatch {
                axis,
                expected,
                actual,
            });
        }
    }
    Ok(())
}

pub fn patchify(clip: &VideoClip, cfg: &ModelConfig) -> Result<PixelPatches> {
    patchify_pixels(clip.pixels.view(), cfg)
}

pub fn patchify_pixels(pixels: ArrayView4<'_, f64>, cfg: &ModelConfig) -> Result<PixelPatches> {
    check_pixels(&pixels, cfg)?;
    let (tp, sp, c) = (cfg.temporal_patch, cfg.spatial_patch, cfg.clip.channels);
    let (_, gw) = cfg.grid();
    let mut patches = Array3::zeros((cfg.t_tok(), cfg.s_tok(), cfg.patch_len()));
    for ((t, s, j), v) in patches.indexed_iter_mut() {
        let (dt, rem) = (j / (sp * sp * c), j % (sp * sp * c));
        let (dy, rem) = (rem / (sp * c), rem % (sp * c));
        let (dx, ch) = (rem / c, rem % c);
        let (row, col) = (s / gw, s % gw);
        *v = pixels[[t * tp + dt, row * sp + dy, col * sp + dx, ch]];
    }
    Ok(PixelPatches { patches })
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(patches: &PixelPatches, cfg: &ModelConfig) -> Result<Array4<f64>> {
    let (t, s, p) = patches.patches.dim();
    for (axis, expected, actual) in [
        ("t_tok", cfg.t_tok(), t),
        ("s_tok", cfg.s_tok(), s),
        ("patch_len", cfg.patch_len(), p),
    ] {
        if expected != actual {
            return Err(Error::DimensionMismatch {
                axis,
                expected,
                actual,
            });
        }
    }
    let (tp, sp, c) = (cfg.temporal_patch, cfg.spatial_patch, cfg.clip.channels);
    let (_, gw) = cfg.grid();
    let clip = &cfg.clip;
    let mut pixels = Array4::zeros((clip.frames, clip.height, clip.width, clip.channels));
    for ((f, y, x, ch), v) in pixels.indexed_iter_mut() {
        let (tt, dt) = (f / tp, f % tp);
        let (row, dy) = (y / sp, y % sp);
        let (col, dx) = (x / sp, x % sp);
        *v = patches.patches[[tt, row * gw + col, ((dt * sp + dy) * sp + dx) * c + ch]];
    }
    Ok(pixels)
}

/// Linear map of every non-overlapping cube to a token.
pub fn cube_embed(clip: &VideoClip, embed: &Linear, cfg: &ModelConfig) -> Result<TokenGrid> {
    if embed.input_dim() != cfg.patch_len() {
        return Err(Error::DimensionMismatch {
            axis: "embedding input",
            expected: cfg.patch_len(),
            actual: embed.input_dim(),
        });
    }
    let patches = patchify(clip, cfg)?;
    let tokens = embed.forward(&patches.flat());
    Ok(TokenGrid {
        tokens: tokens
            .into_shape_with_order((cfg.t_tok(), cfg.s_tok(), embed.output_dim()))
            .expect("one token per patch"),
    })
}

/// Sinusoidal table over the flat `(t, s)` index; each row has norm
/// `sqrt(dim / 2)` for even `dim`.
pub fn positional_embedding(num_positions: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((num_positions, dim), |(pos, j)| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * i / dim as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
