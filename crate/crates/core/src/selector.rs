//! Key-slot selector.
//!
//! Frozen encoder features of the full clip are standardized, projected per
//! token, max pooled over the spatial axis to one vector per temporal slot,
//! flattened, and classified by an MLP into one of `C(t_tok, k)` slot
//! combinations.

use std::fmt;

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clipio::VideoClip;
use crate::error::{Error, Result};
use crate::framemae::FrameMae;
use crate::framemask::{combo_count, FrameMask, MaskLayout};
use crate::labelgen::LabelRecord;
use crate::nn::{gelu, gelu_grad, join, seeded_rng, zeros_like, AdamW, AdamWConfig, Linear, Params};
use crate::patchcube::{patchify, TokenGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectorConfig {
    /// Width of the encoder features.
    pub feature_dim: usize,
    pub t_tok: usize,
    /// Tokens per slot (spatial grid size).
    pub s_tok: usize,
    /// Slots kept per clip.
    pub k: usize,
    pub proj_dim: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl SelectorConfig {
    pub fn for_encoder(feature_dim: usize, t_tok: usize, s_tok: usize, k: usize) -> Self {
        Self {
            feature_dim,
            t_tok,
            s_tok,
            k,
            proj_dim: 384,
            blocks: 3,
            hidden: 512,
            dropout: 0.1,
        }
    }

    pub fn classes(&self) -> usize {
        combo_count(self.t_tok, self.k)
    }

    pub fn flat_dim(&self) -> usize {
        self.t_tok * self.proj_dim
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.feature_dim == 0 || self.s_tok == 0 || self.proj_dim == 0 || self.hidden == 0 {
            return Err(Error::InvalidConfig("selector widths must be positive".into()));
        }
        if self.k == 0 || self.k >= self.t_tok {
            return Err(Error::InvalidConfig(format!(
                "keep count {} must be in 1..{}",
                self.k, self.t_tok
            )));
        }
        Ok(())
    }
}

/// Per-position centering and one global scale for encoder tokens, fitted
/// on training features. Identity until fitted.
///
/// Raw encoder tokens share a large position-dependent offset (the
/// positional table rides the residual stream) that dwarfs the variation
/// between clips; without this the MLP never leaves the class prior.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureScaler {
    /// `[t_tok, s_tok, feature_dim]`.
    pub mean: Array3<f64>,
    pub scale: f64,
}

impl FeatureScaler {
    pub fn identity(t_tok: usize, s_tok: usize, dim: usize) -> Self {
        Self {
            mean: Array3::zeros((t_tok, s_tok, dim)),
            scale: 1.0,
        }
    }

    pub fn fit(grids: &[&TokenGrid]) -> Result<Self> {
        let Some(first) = grids.first() else {
            return Err(Error::InvalidArgument("cannot fit a scaler on no features".into()));
        };
        let shape = first.tokens.dim();
        let mut mean = Array3::zeros(shape);
        for g in grids {
            if g.tokens.dim() != shape {
                return Err(Error::DimensionMismatch {
                    axis: "feature grid",
                    expected: first.tokens.len(),
                    actual: g.tokens.len(),
                });
            }
            mean += &g.tokens;
        }
        mean /= grids.len() as f64;
        let mut sq = 0.0;
        for g in grids {
            sq += g.tokens.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>();
        }
        let sd = (sq / (grids.len() * mean.len()) as f64).sqrt();
        Ok(Self {
            mean,
            scale: if sd.is_finite() && sd > 1e-12 { sd } else { 1.0 },
        })
    }

    pub fn apply(&self, grid: &TokenGrid) -> TokenGrid {
        TokenGrid {
            tokens: (&grid.tokens - &self.mean) / self.scale,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Selector {
    pub config: SelectorConfig,
    pub scaler: FeatureScaler,
    pub proj: Linear,
    pub blocks: Vec<Linear>,
    /// Zero-initialized, so a fresh selector outputs uniform logits.
    pub head: Linear,
}

impl Selector {
    pub fn new(config: SelectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed, 200);
        let proj = Linear::new(config.feature_dim, config.proj_dim, &mut rng);
        let mut width = config.flat_dim();
        let blocks = (0..config.blocks)
            .map(|_| {
                let l = Linear::new(width, config.hidden, &mut rng);
                width = config.hidden;
                l
            })
            .collect();
        Ok(Self {
            head: Linear::zeros(width, config.classes()),
            scaler: FeatureScaler::identity(config.t_tok, config.s_tok, config.feature_dim),
            proj,
            blocks,
            config,
        })
    }

    /// Checks the grid shape and standardizes it.
    fn scale(&self, features: &TokenGrid) -> Result<TokenGrid> {
        let c = &self.config;
        let (t, s, d) = features.tokens.dim();
        for (axis, expected, actual) in [("feature dim", c.feature_dim, d), ("t_tok", c.t_tok, t), ("s_tok", c.s_tok, s)] {
            if expected != actual {
                return Err(Error::DimensionMismatch { axis, expected, actual });
            }
        }
        Ok(self.scaler.apply(features))
    }

    /// Projects every (already scaled) token, then takes the spatial max per
    /// slot. Also returns the flat token index that won each `(slot, channel)`.
    fn pool_with_argmax(&self, features: &TokenGrid) -> Result<(Array2<f64>, Vec<usize>)> {
        let (t, s, _) = features.tokens.dim();
        let projected = self.proj.forward(&features.flat());
        let p = self.config.proj_dim;
        let mut pooled = Array2::from_elem((t, p), f64::NEG_INFINITY);
        let mut argmax = vec![0usize; t * p];
        for (row_idx, row) in projected.rows().into_iter().enumerate() {
            let slot = row_idx / s;
            for (j, &v) in row.iter().enumerate() {
                if v > pooled[[slot, j]] {
                    pooled[[slot, j]] = v;
                    argmax[slot * p + j] = row_idx;
                }
            }
        }
        Ok((pooled, argmax))
    }

    fn forward_batch(
        &self,
        features: &[&TokenGrid],
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<(Array2<f64>, BatchCache)> {
        let scaled = features.iter().map(|f| self.scale(f)).collect::<Result<Vec<_>>>()?;
        let mut flat = Array2::zeros((features.len(), self.config.flat_dim()));
        let mut argmax = Vec::with_capacity(features.len());
        for (mut row, f) in flat.rows_mut().into_iter().zip(&scaled) {
            let (pooled, am) = self.pool_with_argmax(f)?;
            row.assign(&Array1::from_iter(pooled.iter().copied()));
            argmax.push(am);
        }
        let mut inputs = vec![flat];
        let mut pre = Vec::new();
        let mut drop_masks = Vec::new();
        let keep = 1.0 - self.config.dropout;
        for layer in &self.blocks {
            let a = layer.forward(&inputs.last().expect("input").view());
            let mut h = a.mapv(gelu);
            let mask = if train && self.config.dropout > 0.0 {
                let m = Array2::from_shape_simple_fn(h.dim(), || if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
                h *= &m;
                Some(m)
            } else {
                None
            };
            pre.push(a);
            drop_masks.push(mask);
            inputs.push(h);
        }
        let logits = self.head.forward(&inputs.last().expect("input").view());
        Ok((
            logits,
            BatchCache {
                scaled,
                argmax,
                inputs,
                pre,
                drop_masks,
            },
        ))
    }

    fn backward_batch(&self, cache: &BatchCache, dlogits: &Array2<f64>, grads: &mut Selector) {
        let last = cache.inputs.last().expect("input");
        let mut d = self.head.backward(&last.view(), &dlogits.view(), &mut grads.head);
        for (i, layer) in self.blocks.iter().enumerate().rev() {
            if let Some(m) = &cache.drop_masks[i] {
                d *= m;
            }
            d *= &cache.pre[i].mapv(gelu_grad);
            d = layer.backward(&cache.inputs[i].view(), &d.view(), &mut grads.blocks[i]);
        }
        let p = self.config.proj_dim;
        for ((f, am), drow) in cache.scaled.iter().zip(&cache.argmax).zip(d.rows()) {
            let mut dproj = Array2::zeros((f.t_tok() * f.s_tok(), p));
            for (idx, (&g, &tok)) in drow.iter().zip(am).enumerate() {
                dproj[[tok, idx % p]] += g;
            }
            self.proj.backward_params(&f.flat(), &dproj.view(), &mut grads.proj);
        }
    }

    /// Eval-mode logits for a batch, `[n, classes]`.
    pub fn logits(&self, features: &[&TokenGrid]) -> Result<Array2<f64>> {
        let mut rng = seeded_rng(0, 0);
        Ok(self.forward_batch(features, false, &mut rng)?.0)
    }

    /// Cross-entropy and accumulated gradients for one batch.
    pub fn loss_and_grad(
        &self,
        features: &[&TokenGrid],
        labels: &[usize],
        train: bool,
        rng: &mut impl Rng,
        grads: &mut Selector,
    ) -> Result<f64> {
        let (logits, cache) = self.forward_batch(features, train, rng)?;
        let (loss, dlogits) = cross_entropy(&logits.view(), labels)?;
        self.backward_batch(&cache, &dlogits, grads);
        Ok(loss)
    }

    /// Index of the highest logit, ties to the lower class.
    pub fn predict(&self, features: &TokenGrid) -> Result<usize> {
        let logits = self.logits(&[features])?;
        Ok(argmax_first(logits.row(0).iter().copied()))
    }

    pub fn fingerprint(&self) -> String {
        crate::checkpoint::Checkpointable::model_hash(self)
    }
}

struct BatchCache {
    scaled: Vec<TokenGrid>,
    argmax: Vec<Vec<usize>>,
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    drop_masks: Vec<Option<Array2<f64>>>,
}

impl Params for Selector {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.proj.visit(&join(prefix, "proj"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

impl crate::checkpoint::Checkpointable for Selector {
    const KIND: &'static str = crate::checkpoint::SELECTOR_KIND;
    type Config = SelectorConfig;

    fn config(&self) -> &SelectorConfig {
        &self.config
    }

    fn skeleton(config: SelectorConfig) -> Result<Self> {
        Self::new(config, 0)
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f("scaler.mean", self.scaler.mean.view().into_dyn());
        f("scaler.scale", ArrayViewD::from_shape(IxDyn(&[1]), std::slice::from_ref(&self.scaler.scale)).expect("one element"));
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f("scaler.mean", self.scaler.mean.view_mut().into_dyn());
        f(
            "scaler.scale",
            ArrayViewMutD::from_shape(IxDyn(&[1]), std::slice::from_mut(&mut self.scaler.scale)).expect("one element"),
        );
    }
}

pub(crate) fn argmax_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Encoder output for the whole clip with nothing masked, `[t_tok, s_tok, D]`.
pub fn extract_features(clip: &VideoClip, mae: &FrameMae) -> Result<TokenGrid> {
    let cfg = &mae.config;
    let patches = patchify(clip, cfg)?;
    let layout = MaskLayout::new(&FrameMask::all_visible(cfg.t_tok()), cfg.s_tok());
    let latent = mae.encode(&mae.embed_visible(patches.flat(), &layout))?;
    Ok(TokenGrid {
        tokens: latent
            .into_shape_with_order((cfg.t_tok(), cfg.s_tok(), cfg.embed_dim))
            .expect("one latent per token"),
    })
}

/// Scaling, per-token projection and a spatial max, `[t_tok, proj_dim]`.
pub fn pool_project(features: &TokenGrid, selector: &Selector) -> Result<Array2<f64>> {
    Ok(selector.pool_with_argmax(&selector.scale(features)?)?.0)
}

/// Logits from pooled slot vectors. Dropout is applied only in `train_mode`.
pub fn selector_forward(pooled: &Array2<f64>, selector: &Selector, train_mode: bool, rng: &mut impl Rng) -> Result<Array1<f64>> {
    let c = &selector.config;
    if pooled.dim() != (c.t_tok, c.proj_dim) {
        return Err(Error::DimensionMismatch {
            axis: "pooled",
            expected: c.flat_dim(),
            actual: pooled.len(),
        });
    }
    let mut h = Array2::from_shape_vec((1, c.flat_dim()), pooled.iter().copied().collect()).expect("flat pooled");
    let keep = 1.0 - c.dropout;
    for layer in &selector.blocks {
        h = layer.forward(&h.view()).mapv(gelu);
        if train_mode && c.dropout > 0.0 {
            h.mapv_inplace(|v| if rng.random::<f64>() < keep { v / keep } else { 0.0 });
        }
    }
    Ok(selector.head.forward(&h.view()).row(0).to_owned())
}

/// Mean cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &ArrayView2<'_, f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (n, c) = logits.dim();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            axis: "labels",
            expected: n,
            actual: labels.len(),
        });
    }
    let mut grad = logits.to_owned();
    crate::nn::softmax_rows(&mut grad);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::ComboOutOfRange { index: y, count: c });
        }
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        grad[[i, y]] -= 1.0;
    }
    grad /= n as f64;
    Ok((loss / n as f64, grad))
}

/// Fraction of rows whose label is among the `k` largest logits; equal
/// logits rank the lower class first.
pub fn topk_accuracy(logits: &ArrayView2<'_, f64>, labels: &[usize], k: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| {
            let ly = row[y];
            let rank = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > ly || (v == ly && j < y))
                .count();
            rank < k
        })
        .count();
    hits as f64 / labels.len() as f64
}

#[derive(Clone, Debug)]
pub struct SelectorExample {
    pub clip_id: String,
    pub features: TokenGrid,
    pub label: usize,
}

/// Encoder features paired with oracle labels from the same autoencoder.
#[derive(Clone, Debug)]
pub struct SelectorDataset {
    pub model_hash: String,
    pub classes: usize,
    pub examples: Vec<SelectorExample>,
}

impl SelectorDataset {
    /// Pairs clips with label records by clip id. Every record must come
    /// from `mae`.
    pub fn build(clips: &[VideoClip], records: &[LabelRecord], mae: &FrameMae) -> Result<Self> {
        let hash = mae.fingerprint();
        let mut by_id = std::collections::HashMap::new();
        for r in records {
            if r.model_hash != hash {
                return Err(Error::ModelMismatch {
                    expected: hash,
                    found: r.model_hash.clone(),
                });
            }
            by_id.insert(r.clip_id.as_str(), r);
        }
        let classes = records.first().map(|r| r.losses.len()).unwrap_or(0);
        let mut examples = Vec::new();
        for clip in clips {
            let Some(rec) = by_id.get(clip.clip_id.as_str()) else {
                continue;
            };
            examples.push(SelectorExample {
                clip_id: clip.clip_id.clone(),
                features: extract_features(clip, mae)?,
                label: rec.gt_label,
            });
        }
        if examples.is_empty() {
            return Err(Error::InvalidArgument("no clip has a label record".into()));
        }
        Ok(Self {
            model_hash: hash,
            classes,
            examples,
        })
    }

    /// Deterministic train/validation index split.
    pub fn split(&self, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..self.examples.len()).collect();
        idx.shuffle(&mut seeded_rng(seed, 300));
        let n_val = ((self.examples.len() as f64) * val_fraction).round() as usize;
        let n_val = n_val.min(self.examples.len().saturating_sub(1));
        let val = idx[..n_val].to_vec();
        let train = idx[n_val..].to_vec();
        (train, val)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: AdamWConfig,
    pub val_fraction: f64,
}

impl Default for SelectorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            optimizer: AdamWConfig {
                weight_decay: 0.05,
                beta2: 0.999,
                ..Default::default()
            },
            val_fraction: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training cross-entropy over the epoch.
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Clone, Debug)]
pub struct SelectorRun {
    /// Parameters from the epoch with the best validation top-1.
    pub selector: Selector,
    /// Metrics before any update (epoch 0).
    pub initial: EpochMetrics,
    pub trace: Vec<EpochMetrics>,
    pub best: EpochMetrics,
}

fn evaluate(selector: &Selector, data: &SelectorDataset, idx: &[usize]) -> Result<(f64, f64, f64)> {
    if idx.is_empty() {
        return Ok((0.0, 0.0, 0.0));
    }
    let mut logits = Array2::zeros((0, selector.config.classes()));
    for chunk in idx.chunks(64) {
        let feats: Vec<&TokenGrid> = chunk.iter().map(|&i| &data.examples[i].features).collect();
        logits.append(Axis(0), selector.logits(&feats)?.view()).expect("same width");
    }
    let labels: Vec<usize> = idx.iter().map(|&i| data.examples[i].label).collect();
    let (loss, _) = cross_entropy(&logits.view(), &labels)?;
    Ok((loss, topk_accuracy(&logits.view(), &labels, 1), topk_accuracy(&logits.view(), &labels, 5)))
}

/// AdamW on cross-entropy over oracle labels with the encoder frozen.
/// Validation top-1/top-5 are tracked per epoch and the best-top-1 epoch
/// is kept (first one on ties).
pub fn train_selector(
    data: &SelectorDataset,
    config: &SelectorConfig,
    hp: &SelectorTrainConfig,
    seed: u64,
) -> Result<SelectorRun> {
    if data.classes != config.classes() {
        return Err(Error::InvalidConfig(format!(
            "selector has {} classes, labels have {}",
            config.classes(),
            data.classes
        )));
    }
    if hp.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    let (train_idx, val_idx) = data.split(hp.val_fraction, seed);
    let mut selector = Selector::new(config.clone(), seed)?;
    let train_feats: Vec<&TokenGrid> = train_idx.iter().map(|&i| &data.examples[i].features).collect();
    let scaler = FeatureScaler::fit(&train_feats)?;
    if scaler.mean.dim() != selector.scaler.mean.dim() {
        return Err(Error::DimensionMismatch {
            axis: "feature grid",
            expected: selector.scaler.mean.len(),
            actual: scaler.mean.len(),
        });
    }
    selector.scaler = scaler;
    let mut opt = AdamW::new(hp.optimizer, &selector);
    let (init_loss, t1, t5) = evaluate(&selector, data, &train_idx)?;
    let (_, v1, v5) = evaluate(&selector, data, &val_idx)?;
    let _ = (t1, t5);
    let initial = EpochMetrics {
        epoch: 0,
        loss: init_loss,
        top1: v1,
        top5: v5,
    };
    let mut best = (initial, selector.clone());
    let mut trace = Vec::with_capacity(hp.epochs);
    let mut order = train_idx.clone();
    for epoch in 1..=hp.epochs {
        let mut rng = seeded_rng(seed, 400 + epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, batch) in order.chunks(hp.batch_size).enumerate() {
            let feats: Vec<&TokenGrid> = batch.iter().map(|&i| &data.examples[i].features).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| data.examples[i].label).collect();
            let mut grads = zeros_like(&selector);
            let loss = selector.loss_and_grad(&feats, &labels, true, &mut rng, &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step: (epoch - 1) * order.len().div_ceil(hp.batch_size) + step,
                    lr: hp.lr,
                    grad_norm: crate::nn::l2_norm(&grads),
                });
            }
            total += loss * batch.len() as f64;
            opt.step(&mut selector, &grads, hp.lr);
        }
        let (_, top1, top5) = evaluate(&selector, data, &val_idx)?;
        let m = EpochMetrics {
            epoch,
            loss: total / order.len().max(1) as f64,
            top1,
            top5,
        };
        if epoch == 1 || top1 > best.0.top1 {
            best = (m, selector.clone());
        }
        trace.push(m);
    }
    Ok(SelectorRun {
        selector: best.1,
        initial,
        trace,
        best: best.0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub blocks: usize,
    pub top1: f64,
    pub top5: f64,
    pub dropout: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Full-scale reference results for the same grid; listed for context only.
pub const REFERENCE_ROWS: [AblationRow; 3] = [
    AblationRow {
        blocks: 3,
        top1: 0.271,
        top5: 0.5052,
        dropout: 0.1,
        best_epoch: 224,
    },
    AblationRow {
        blocks: 3,
        top1: 0.268,
        top5: 0.497,
        dropout: 0.0,
        best_epoch: 204,
    },
    AblationRow {
        blocks: 4,
        top1: 0.251,
        top5: 0.486,
        dropout: 0.0,
        best_epoch: 200,
    },
];

/// Trains one selector per `(blocks, dropout)` grid point and seed; rows
/// average over seeds.
pub fn ablation_sweep(
    data: &SelectorDataset,
    base: &SelectorConfig,
    grid: &[(usize, f64)],
    hp: &SelectorTrainConfig,
    seeds: &[u64],
) -> Result<AblationTable> {
    if grid.len() < 2 {
        return Err(Error::InvalidArgument("ablation grid needs at least two points".into()));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &(blocks, dropout) in grid {
        let cfg = SelectorConfig {
            blocks,
            dropout,
            ..base.clone()
        };
        let (mut t1, mut t5, mut ep) = (0.0, 0.0, 0.0);
        for &seed in seeds {
            let run = train_selector(data, &cfg, hp, seed)?;
            t1 += run.best.top1;
            t5 += run.best.top5;
            ep += run.best.epoch as f64;
        }
        let n = seeds.len() as f64;
        rows.push(AblationRow {
            blocks,
            top1: t1 / n,
            top5: t5 / n,
            dropout,
            best_epoch: (ep / n).round() as usize,
        });
    }
    Ok(AblationTable { rows })
}

fn fmt_row(f: &mut fmt::Formatter<'_>, r: &AblationRow) -> fmt::Result {
    let dropout = if r.dropout > 0.0 {
        format!("{}", r.dropout)
    } else {
        "-".to_string()
    };
    writeln!(
        f,
        "{:<7} {:>7} {:>8} {:>9} {:>11}",
        r.blocks,
        format!("{:.2}%", 100.0 * r.top1),
        format!("{:.2}%", 100.0 * r.top5),
        dropout,
        r.best_epoch
    )
}

impl AblationTable {
    pub const HEADER: [&'static str; 5] = ["blocks", "top-1", "top-5", "drop-out", "best epoch"];

    pub fn to_csv(&self) -> String {
        let mut s = Self::HEADER.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.blocks, r.top1, r.top5, r.dropout, r.best_epoch));
        }
        s
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = Self::HEADER;
        writeln!(f, "{:<7} {:>7} {:>8} {:>9} {:>11}", h[0], h[1], h[2], h[3], h[4])?;
        for r in &self.rows {
            fmt_row(f, r)?;
        }
        writeln!(f)?;
        writeln!(
            f,
            "reference (full-scale run, 50k train / 10k val clips; not reproducible at this scale):"
        )?;
        for r in &REFERENCE_ROWS {
            fmt_row(f, r)?;
        }
        Ok(())
    }
}

/// Shape of a token grid with no content; used when only geometry matters.
pub fn empty_grid(t_tok: usize, s_tok: usize, dim: usize) -> TokenGrid {
    TokenGrid {
        tokens: Array3::zeros((t_tok, s_tok, dim)),
    }
}
