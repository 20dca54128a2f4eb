//! Frame-masked autoencoder.
//!
//! Only the visible slots are embedded and encoded. The decoder scatters the
//! projected latents back to their positions, fills every masked position
//! with one shared mask token (zero at initialization), adds its own
//! positional table and predicts the raw pixels of every cube.

use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clipio::{slot_frames, VideoClip};
use crate::error::{Error, Result};
use crate::framemask::{random_frame_mask, FrameMask, MaskLayout};
use crate::nn::{
    backprop_blocks, join, l2_norm, run_blocks, seeded_rng, warmup_cosine, zeros_like, AdamW, AdamWConfig, Block,
    BlockCache, LayerNorm, LayerNormCache, Linear, Params,
};
use crate::patchcube::{patchify, positional_embedding, unpatchify, ModelConfig, PixelPatches, PosEmbedding};

#[derive(Clone, Debug)]
pub struct FrameMae {
    pub config: ModelConfig,
    pub embed: Linear,
    pub encoder_pos: Array2<f64>,
    pub encoder: Vec<Block>,
    pub decoder_embed: Linear,
    pub mask_token: Array1<f64>,
    pub decoder_pos: Array2<f64>,
    pub decoder: Vec<Block>,
    pub decoder_norm: LayerNorm,
    pub head: Linear,
}

impl FrameMae {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed, 100);
        let c = &config;
        let n = c.num_tokens();
        let (encoder_pos, decoder_pos) = match c.pos_embedding {
            PosEmbedding::None => (Array2::zeros((n, c.embed_dim)), Array2::zeros((n, c.decoder_dim))),
            _ => (positional_embedding(n, c.embed_dim), positional_embedding(n, c.decoder_dim)),
        };
        Ok(Self {
            embed: Linear::new(c.patch_len(), c.embed_dim, &mut rng),
            encoder: (0..c.encoder_depth)
                .map(|_| Block::new(c.embed_dim, c.encoder_heads, c.mlp_ratio, &mut rng))
                .collect(),
            decoder_embed: Linear::new(c.embed_dim, c.decoder_dim, &mut rng),
            mask_token: Array1::zeros(c.decoder_dim),
            decoder: (0..c.decoder_depth)
                .map(|_| Block::new(c.decoder_dim, c.decoder_heads, c.mlp_ratio, &mut rng))
                .collect(),
            decoder_norm: LayerNorm::new(c.decoder_dim),
            head: Linear::new(c.decoder_dim, c.patch_len(), &mut rng),
            encoder_pos,
            decoder_pos,
            config,
        })
    }

    fn learnable_pos(&self) -> bool {
        self.config.pos_embedding == PosEmbedding::Learnable
    }

    /// Embeds the visible cubes and adds their encoder positions.
    pub fn embed_visible(&self, patches: ArrayView2<'_, f64>, layout: &MaskLayout) -> Array2<f64> {
        let vis = patches.select(Axis(0), &layout.visible);
        let mut tokens = self.embed.forward(&vis.view());
        tokens += &self.encoder_pos.select(Axis(0), &layout.visible);
        tokens
    }

    /// Encoder blocks over visible tokens only; output shape equals input.
    pub fn encode(&self, visible_tokens: &Array2<f64>) -> Result<Array2<f64>> {
        if visible_tokens.nrows() == 0 {
            return Err(Error::InvalidArgument("encoder needs at least one visible token".into()));
        }
        if visible_tokens.ncols() != self.config.embed_dim {
            return Err(Error::DimensionMismatch {
                axis: "embed_dim",
                expected: self.config.embed_dim,
                actual: visible_tokens.ncols(),
            });
        }
        if visible_tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder input".into()));
        }
        let mut x = visible_tokens.clone();
        for b in &self.encoder {
            x = b.infer(&x.view());
        }
        Ok(x)
    }

    fn decoder_input(&self, latent: &Array2<f64>, layout: &MaskLayout) -> Array2<f64> {
        let z = self.decoder_embed.forward(&latent.view());
        let mut full = Array2::zeros((layout.num_tokens(), self.config.decoder_dim));
        for (row, &i) in z.rows().into_iter().zip(&layout.visible) {
            full.row_mut(i).assign(&row);
        }
        for &i in &layout.masked {
            full.row_mut(i).assign(&self.mask_token);
        }
        full += &self.decoder_pos;
        full
    }

    /// Pixel predictions for every token position, `[t_tok, s_tok, patch_len]`.
    pub fn decode(&self, latent: &Array2<f64>, layout: &MaskLayout) -> Result<PixelPatches> {
        layout.validate()?;
        if layout.num_tokens() != self.config.num_tokens() {
            return Err(Error::DimensionMismatch {
                axis: "tokens",
                expected: self.config.num_tokens(),
                actual: layout.num_tokens(),
            });
        }
        if latent.nrows() != layout.visible.len() {
            return Err(Error::DimensionMismatch {
                axis: "latent rows",
                expected: layout.visible.len(),
                actual: latent.nrows(),
            });
        }
        let mut x = self.decoder_input(latent, layout);
        for b in &self.decoder {
            x = b.infer(&x.view());
        }
        let (normed, _) = self.decoder_norm.forward(&x.view());
        let pred = self.head.forward(&normed.view());
        Ok(PixelPatches::from_flat(pred, layout.t_tok, layout.s_tok))
    }

    /// Full forward pass from flat patches `[t_tok * s_tok, patch_len]`.
    pub fn predict(&self, patches: ArrayView2<'_, f64>, mask: &FrameMask) -> Result<PixelPatches> {
        let layout = self.layout(mask)?;
        let tokens = self.embed_visible(patches, &layout);
        let latent = if tokens.nrows() == 0 && self.config.allow_unconditional {
            tokens
        } else {
            self.encode(&tokens)?
        };
        self.decode(&latent, &layout)
    }

    fn layout(&self, mask: &FrameMask) -> Result<MaskLayout> {
        if mask.t_tok() != self.config.t_tok() {
            return Err(Error::DimensionMismatch {
                axis: "mask length",
                expected: self.config.t_tok(),
                actual: mask.t_tok(),
            });
        }
        Ok(MaskLayout::new(mask, self.config.s_tok()))
    }

    pub(crate) fn forward_train(&self, patches: ArrayView2<'_, f64>, layout: &MaskLayout) -> (Array2<f64>, ForwardCache) {
        let vis = patches.select(Axis(0), &layout.visible);
        let mut tokens = self.embed.forward(&vis.view());
        tokens += &self.encoder_pos.select(Axis(0), &layout.visible);
        let (latent, enc) = run_blocks(&self.encoder, tokens);
        let full = self.decoder_input(&latent, layout);
        let (x, dec) = run_blocks(&self.decoder, full);
        let (normed, norm) = self.decoder_norm.forward(&x.view());
        let pred = self.head.forward(&normed.view());
        let cache = ForwardCache {
            vis,
            enc,
            latent,
            dec,
            norm,
            normed,
        };
        (pred, cache)
    }

    pub(crate) fn backward(&self, cache: &ForwardCache, layout: &MaskLayout, dpred: &Array2<f64>, grads: &mut FrameMae) {
        let dnormed = self.head.backward(&cache.normed.view(), &dpred.view(), &mut grads.head);
        let dx = self.decoder_norm.backward(&cache.norm, &dnormed.view(), &mut grads.decoder_norm);
        let dfull = backprop_blocks(&self.decoder, &cache.dec, dx, &mut grads.decoder);
        if self.learnable_pos() {
            grads.decoder_pos += &dfull;
        }
        if self.config.train_mask_token {
            for &i in &layout.masked {
                grads.mask_token += &dfull.row(i);
            }
        }
        let dz = dfull.select(Axis(0), &layout.visible);
        let dlatent = self.decoder_embed.backward(&cache.latent.view(), &dz.view(), &mut grads.decoder_embed);
        let dtokens = backprop_blocks(&self.encoder, &cache.enc, dlatent, &mut grads.encoder);
        if self.learnable_pos() {
            for (row, &i) in dtokens.rows().into_iter().zip(&layout.visible) {
                let mut g = grads.encoder_pos.row_mut(i);
                g += &row;
            }
        }
        self.embed.backward_params(&cache.vis.view(), &dtokens.view(), &mut grads.embed);
    }

    /// Loss and accumulated gradients for one clip. `weight` scales the
    /// gradient contribution (e.g. `1 / batch`).
    pub fn loss_and_grad(
        &self,
        patches: ArrayView2<'_, f64>,
        mask: &FrameMask,
        scope: LossScope,
        weight: f64,
        grads: &mut FrameMae,
    ) -> Result<f64> {
        let layout = self.layout(mask)?;
        let (pred, cache) = self.forward_train(patches, &layout);
        let rows = scope.rows(&layout)?;
        let (loss, mut dpred) = mse_rows(&pred, patches, &rows);
        dpred *= weight;
        self.backward(&cache, &layout, &dpred, grads);
        Ok(loss)
    }

    /// Clip with `keep_slots` copied verbatim and every other slot replaced by
    /// the clamped prediction.
    pub fn reconstruct_clip(&self, clip: &VideoClip, keep_slots: &[usize]) -> Result<VideoClip> {
        if keep_slots.is_empty() && !self.config.allow_unconditional {
            return Err(Error::InvalidArgument(
                "no kept slots; unconditional reconstruction is disabled".into(),
            ));
        }
        let mask = FrameMask::keeping(self.config.t_tok(), keep_slots)?;
        if mask.masked_count() == 0 {
            clip.check_spec(&self.config.clip)?;
            return Ok(clip.clone());
        }
        let patches = patchify(clip, &self.config)?;
        let pred = self.predict(patches.flat(), &mask)?;
        self.assemble(clip, &pred, &mask)
    }

    /// Writes predicted frames into the masked slots of a copy of `clip`.
    pub fn assemble(&self, clip: &VideoClip, pred: &PixelPatches, mask: &FrameMask) -> Result<VideoClip> {
        let predicted = unpatchify(pred, &self.config)?;
        let mut out = clip.clone();
        for slot in mask.masked_slots() {
            for f in slot_frames(slot, self.config.temporal_patch) {
                out.pixels
                    .index_axis_mut(Axis(0), f)
                    .assign(&predicted.index_axis(Axis(0), f).mapv(|v| v.clamp(0.0, 1.0)));
            }
        }
        Ok(out)
    }

    pub fn fingerprint(&self) -> String {
        crate::checkpoint::fingerprint(crate::checkpoint::FRAMEMAE_KIND, &self.config, self)
    }
}

pub(crate) struct ForwardCache {
    vis: Array2<f64>,
    enc: Vec<BlockCache>,
    latent: Array2<f64>,
    dec: Vec<BlockCache>,
    norm: LayerNormCache,
    normed: Array2<f64>,
}

impl Params for FrameMae {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.embed.visit(&join(prefix, "embed"), f);
        if self.learnable_pos() {
            f(&join(prefix, "encoder.pos_embed"), self.encoder_pos.view().into_dyn());
        }
        for (i, b) in self.encoder.iter().enumerate() {
            b.visit(&join(prefix, &format!("encoder.{i}")), f);
        }
        self.decoder_embed.visit(&join(prefix, "decoder.embed"), f);
        f(&join(prefix, "decoder.mask_token"), self.mask_token.view().into_dyn());
        if self.learnable_pos() {
            f(&join(prefix, "decoder.pos_embed"), self.decoder_pos.view().into_dyn());
        }
        for (i, b) in self.decoder.iter().enumerate() {
            b.visit(&join(prefix, &format!("decoder.{i}")), f);
        }
        self.decoder_norm.visit(&join(prefix, "decoder.norm"), f);
        self.head.visit(&join(prefix, "decoder.head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        let learnable = self.learnable_pos();
        self.embed.visit_mut(&join(prefix, "embed"), f);
        if learnable {
            f(&join(prefix, "encoder.pos_embed"), self.encoder_pos.view_mut().into_dyn());
        }
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("encoder.{i}")), f);
        }
        self.decoder_embed.visit_mut(&join(prefix, "decoder.embed"), f);
        f(&join(prefix, "decoder.mask_token"), self.mask_token.view_mut().into_dyn());
        if learnable {
            f(&join(prefix, "decoder.pos_embed"), self.decoder_pos.view_mut().into_dyn());
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("decoder.{i}")), f);
        }
        self.decoder_norm.visit_mut(&join(prefix, "decoder.norm"), f);
        self.head.visit_mut(&join(prefix, "decoder.head"), f);
    }
}

/// Which token positions the reconstruction loss averages over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    #[default]
    MaskedOnly,
    All,
}

impl LossScope {
    fn rows(self, layout: &MaskLayout) -> Result<Vec<usize>> {
        match self {
            LossScope::MaskedOnly if layout.masked.is_empty() => Err(Error::InvalidArgument(
                "masked-only loss with nothing masked".into(),
            )),
            LossScope::MaskedOnly => Ok(layout.masked.clone()),
            LossScope::All => Ok((0..layout.num_tokens()).collect()),
        }
    }
}

/// Mean squared error over `rows` and its gradient w.r.t. `pred`.
fn mse_rows(pred: &Array2<f64>, target: ArrayView2<'_, f64>, rows: &[usize]) -> (f64, Array2<f64>) {
    let count = (rows.len() * pred.ncols()) as f64;
    let mut grad = Array2::zeros(pred.dim());
    let mut sum = 0.0;
    for &r in rows {
        for ((g, &p), &t) in grad.row_mut(r).iter_mut().zip(pred.row(r)).zip(target.row(r)) {
            let d = p - t;
            sum += d * d;
            *g = 2.0 * d / count;
        }
    }
    (sum / count, grad)
}

/// Mean squared error between predicted and target cubes over the slots
/// selected by `scope`.
pub fn reconstruction_loss(pred: &PixelPatches, target: &PixelPatches, mask: &FrameMask, scope: LossScope) -> Result<f64> {
    if pred.patches.dim() != target.patches.dim() {
        return Err(Error::InvalidArgument(format!(
            "prediction shape {:?} differs from target {:?}",
            pred.patches.dim(),
            target.patches.dim()
        )));
    }
    let (t, s, _) = pred.patches.dim();
    if mask.t_tok() != t {
        return Err(Error::DimensionMismatch {
            axis: "mask length",
            expected: t,
            actual: mask.t_tok(),
        });
    }
    let layout = MaskLayout::new(mask, s);
    let rows = scope.rows(&layout)?;
    let p = pred.flat().to_owned();
    Ok(mse_rows(&p, target.flat(), &rows).0)
}

/// How many slots each pretraining clip hides.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskSchedule {
    Fixed { masked: usize },
    /// Uniform draw from `choices` per clip and step.
    Mixed { choices: Vec<usize> },
}

impl MaskSchedule {
    fn draw(&self, rng: &mut impl Rng) -> usize {
        match self {
            MaskSchedule::Fixed { masked } => *masked,
            MaskSchedule::Mixed { choices } => choices[rng.random_range(0..choices.len())],
        }
    }

    fn validate(&self, t_tok: usize) -> Result<()> {
        let counts: &[usize] = match self {
            MaskSchedule::Fixed { masked } => std::slice::from_ref(masked),
            MaskSchedule::Mixed { choices } => choices,
        };
        if counts.is_empty() || counts.iter().any(|&m| m == 0 || m > t_tok) {
            return Err(Error::InvalidConfig(format!(
                "mask counts {counts:?} must lie in 1..={t_tok}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_fraction: f64,
    pub optimizer: AdamWConfig,
    pub mask: MaskSchedule,
    pub loss_scope: LossScope,
    /// Observer is told to checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 1.5e-4,
            min_lr: 0.0,
            warmup_fraction: 0.05,
            optimizer: AdamWConfig::default(),
            mask: MaskSchedule::Fixed { masked: 3 },
            loss_scope: LossScope::MaskedOnly,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Model, optimizer moments and the step counter. Randomness at step `s` is
/// drawn from stream `s` of `seed`, so `(seed, step)` is the whole rng state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: FrameMae,
    pub optimizer: AdamW,
    pub step: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn new(config: ModelConfig, hp: &PretrainConfig, seed: u64) -> Result<Self> {
        let model = FrameMae::new(config, seed)?;
        let optimizer = AdamW::new(hp.optimizer, &model);
        Ok(Self {
            model,
            optimizer,
            step: 0,
            seed,
        })
    }

    /// One optimizer step on a batch drawn from `patches`.
    pub fn train_step(&mut self, patches: &[PixelPatches], hp: &PretrainConfig) -> Result<StepLog> {
        let t_tok = self.model.config.t_tok();
        let mut rng = seeded_rng(self.seed, 1_000 + self.step as u64);
        let batch: Vec<usize> = if hp.batch_size <= patches.len() {
            index::sample(&mut rng, patches.len(), hp.batch_size).into_vec()
        } else {
            (0..hp.batch_size).map(|_| rng.random_range(0..patches.len())).collect()
        };
        let weight = 1.0 / batch.len() as f64;
        let mut grads = zeros_like(&self.model);
        let mut loss = 0.0;
        for &i in &batch {
            let masked = hp.mask.draw(&mut rng);
            let mask = random_frame_mask(t_tok, masked, &mut rng)?;
            loss += weight * self.model.loss_and_grad(patches[i].flat(), &mask, hp.loss_scope, weight, &mut grads)?;
        }
        let warmup = (hp.warmup_fraction * hp.steps as f64).ceil() as usize;
        let lr = warmup_cosine(self.step, hp.steps, warmup, hp.lr, hp.min_lr);
        let grad_norm = l2_norm(&grads);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                lr,
                grad_norm,
            });
        }
        self.optimizer.step(&mut self.model, &grads, lr);
        let log = StepLog {
            step: self.step,
            loss,
            lr,
            grad_norm,
        };
        self.step += 1;
        Ok(log)
    }
}

/// Runs `hp.steps` steps from a fresh initialization. `observer` sees every
/// step; `checkpoint_due` tells it when a periodic checkpoint is requested.
pub fn pretrain(
    dataset: &[VideoClip],
    config: &ModelConfig,
    hp: &PretrainConfig,
    seed: u64,
    mut observer: impl FnMut(&TrainState, &StepLog, bool) -> Result<()>,
) -> Result<(TrainState, Vec<StepLog>)> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("pretraining dataset is empty".into()));
    }
    if hp.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    hp.mask.validate(config.t_tok())?;
    if matches!(hp.loss_scope, LossScope::MaskedOnly) && matches!(hp.mask, MaskSchedule::Fixed { masked: 0 }) {
        return Err(Error::InvalidConfig("masked-only loss needs masked slots".into()));
    }
    let patches = dataset
        .iter()
        .map(|c| patchify(c, config))
        .collect::<Result<Vec<_>>>()?;
    let mut state = TrainState::new(config.clone(), hp, seed)?;
    let mut trace = Vec::with_capacity(hp.steps);
    for _ in 0..hp.steps {
        let log = state.train_step(&patches, hp)?;
        let due = hp.checkpoint_every > 0 && state.step % hp.checkpoint_every == 0;
        observer(&state, &log, due)?;
        trace.push(log);
    }
    Ok((state, trace))
}

/// Mean masked-only loss over every clip and every listed mask.
pub fn mean_masked_loss(model: &FrameMae, dataset: &[VideoClip], masks: &[FrameMask]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for clip in dataset {
        let target = patchify(clip, &model.config)?;
        for mask in masks {
            let pred = model.predict(target.flat(), mask)?;
            total += reconstruction_loss(&pred, &target, mask, LossScope::MaskedOnly)?;
            n += 1;
        }
    }
    Ok(total / n as f64)
}
