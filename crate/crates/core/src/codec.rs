//! Keep-k-slots compression.
//!
//! A policy picks which temporal slots to keep; their raw frames are
//! stored losslessly in a small container and the rest are reconstructed
//! by the autoencoder on decode.
//!
//! Container layout (little-endian):
//!
//! ```text
//! "FRRS" | u16 version | u32 n | n bytes JSON metadata | kept frames
//! ```
//!
//! Kept frames follow in slot order as `[frame, row, col, channel]`
//! samples, one byte each when every value sits on the 8-bit grid and
//! `f64` otherwise (`sample_format` in the metadata says which).

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array4, Axis};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::clipio::{normalize_u8, slot_frames, ClipSpec, VideoClip, BACKGROUND};
use crate::error::{Error, Result};
use crate::framemae::FrameMae;
use crate::framemask::{combo_count, combo_to_slots, ComboIndex};
use crate::labelgen::Labeler;
use crate::nn::seeded_rng;
use crate::selector::{extract_features, Selector};

pub const MAGIC: &[u8; 4] = b"FRRS";
pub const CONTAINER_VERSION: u16 = 1;
const HEADER_LEN: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Uniform,
    Random,
    Oracle,
    Learned,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Uniform, Policy::Random, Policy::Oracle, Policy::Learned];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Uniform => "uniform",
            Policy::Random => "random",
            Policy::Oracle => "oracle",
            Policy::Learned => "learned",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown policy {s:?} (uniform|random|oracle|learned)")))
    }
}

/// Models a policy may need. `mae` is required by every codec operation;
/// `selector` only by the learned policy.
#[derive(Clone, Copy)]
pub struct PolicyContext<'a> {
    pub mae: Option<&'a FrameMae>,
    pub selector: Option<&'a Selector>,
    pub seed: u64,
}

impl<'a> PolicyContext<'a> {
    pub fn new(mae: &'a FrameMae) -> Self {
        Self {
            mae: Some(mae),
            selector: None,
            seed: 0,
        }
    }

    fn mae(&self, what: &str) -> Result<&'a FrameMae> {
        self.mae
            .ok_or_else(|| Error::InvalidArgument(format!("{what} requires a FrameMAE checkpoint")))
    }
}

/// `k` evenly spaced slots, `floor(i * t_tok / k)`.
pub fn uniform_slots(t_tok: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| i * t_tok / k).collect()
}

fn clip_stream(clip_id: &str) -> u64 {
    let digest = Sha256::digest(clip_id.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Slots kept for `clip`, sorted ascending.
pub fn select_slots(policy: Policy, clip: &VideoClip, t_tok: usize, k: usize, ctx: &PolicyContext<'_>) -> Result<Vec<usize>> {
    if k == 0 || k > t_tok {
        return Err(Error::InvalidArgument(format!("cannot keep {k} of {t_tok} slots")));
    }
    match policy {
        Policy::Uniform => Ok(uniform_slots(t_tok, k)),
        Policy::Random => {
            let mut rng = seeded_rng(ctx.seed, clip_stream(&clip.clip_id));
            let mut slots = rand::seq::index::sample(&mut rng, t_tok, k).into_vec();
            slots.sort_unstable();
            Ok(slots)
        }
        Policy::Oracle => {
            let mae = ctx.mae("oracle policy")?;
            if k == t_tok {
                return Ok((0..t_tok).collect());
            }
            // Scored through the same reconstruction path as `decompress`,
            // so the chosen combination is the decoder's true minimum.
            let labeler = Labeler::new(mae, k)?;
            let mut best = (0, f64::INFINITY);
            for index in 0..labeler.classes() {
                let loss = labeler.combo_loss(clip, index)?;
                if loss < best.1 {
                    best = (index, loss);
                }
            }
            combo_to_slots(ComboIndex::new(best.0, k, t_tok)?)
        }
        Policy::Learned => {
            let selector = ctx
                .selector
                .ok_or_else(|| Error::InvalidArgument("learned policy requires a selector checkpoint".into()))?;
            let mae = ctx.mae("learned policy")?;
            if selector.config.k != k || selector.config.t_tok != t_tok {
                return Err(Error::InvalidConfig(format!(
                    "selector chooses {} of {} slots, codec asks for {k} of {t_tok}",
                    selector.config.k, selector.config.t_tok
                )));
            }
            let index = selector.predict(&extract_features(clip, mae)?)?;
            combo_to_slots(ComboIndex::new(index, k, t_tok)?)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleFormat {
    /// One byte per sample, `v / 255`.
    U8,
    /// Little-endian `f64`, for content off the 8-bit grid.
    F64le,
}

impl SampleFormat {
    pub fn width(self) -> usize {
        match self {
            SampleFormat::U8 => 1,
            SampleFormat::F64le => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerMeta {
    pub clip: ClipSpec,
    pub clip_id: String,
    pub temporal_patch: usize,
    pub kept_slots: Vec<usize>,
    pub model_hash: String,
    pub policy: Policy,
    pub sample_format: SampleFormat,
}

impl ContainerMeta {
    pub fn t_tok(&self) -> usize {
        self.clip.frames / self.temporal_patch.max(1)
    }

    pub fn kept_frame_count(&self) -> usize {
        self.kept_slots.len() * self.temporal_patch
    }

    pub fn retained_fraction(&self) -> f64 {
        self.kept_frame_count() as f64 / self.clip.frames as f64
    }

    fn validate(&self) -> Result<()> {
        self.clip.validate()?;
        if self.temporal_patch == 0 || self.clip.frames % self.temporal_patch != 0 {
            return Err(Error::InvalidConfig(format!(
                "{} frames not divisible by temporal patch {}",
                self.clip.frames, self.temporal_patch
            )));
        }
        if self.kept_slots.is_empty() {
            return Err(Error::InvalidArgument("container keeps no slots".into()));
        }
        if !self.kept_slots.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument("kept slots must be strictly increasing".into()));
        }
        if let Some(&slot) = self.kept_slots.iter().find(|&&s| s >= self.t_tok()) {
            return Err(Error::SlotOutOfRange {
                slot,
                t_tok: self.t_tok(),
            });
        }
        Ok(())
    }

    fn payload_len(&self) -> Result<usize> {
        let c = &self.clip;
        [self.kept_frame_count(), c.height, c.width, c.channels, self.sample_format.width()]
            .into_iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidConfig("container payload size overflows".into()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedClip {
    pub meta: ContainerMeta,
    /// Kept raw frames in slot order, `[kept_frames, h, w, c]`.
    pub frames: Array4<f64>,
}

fn on_byte_grid(v: f64) -> bool {
    let r = (v * 255.0).round();
    (0.0..=255.0).contains(&r) && r / 255.0 == v
}

impl CompressedClip {
    pub fn retained_fraction(&self) -> f64 {
        self.meta.retained_fraction()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let meta_len = u32::try_from(meta.len()).map_err(|_| Error::InvalidArgument("metadata too large".into()))?;
        let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + self.meta.payload_len()?);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&meta_len.to_le_bytes());
        out.extend_from_slice(&meta);
        match self.meta.sample_format {
            SampleFormat::U8 => out.extend(self.frames.iter().map(|&v| (v * 255.0).round() as u8)),
            SampleFormat::F64le => {
                for &v in &self.frames {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let parse = |offset: usize, message: String| Error::Parse { offset, message };
        if bytes.len() < HEADER_LEN {
            return Err(parse(bytes.len(), format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(parse(0, "bad magic, expected \"FRRS\"".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CONTAINER_VERSION {
            return Err(parse(4, format!("unsupported container version {version}")));
        }
        let meta_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let meta_end = HEADER_LEN
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| parse(6, format!("metadata length {meta_len} exceeds container")))?;
        let meta_bytes = &bytes[HEADER_LEN..meta_end];
        let meta: ContainerMeta = serde_json::from_slice(meta_bytes)
            .map_err(|e| parse(HEADER_LEN + crate::clipio::json_offset(meta_bytes, &e), e.to_string()))?;
        meta.validate().map_err(|e| parse(HEADER_LEN, e.to_string()))?;
        let payload = &bytes[meta_end..];
        let expected = meta.payload_len().map_err(|e| parse(HEADER_LEN, e.to_string()))?;
        if payload.len() != expected {
            return Err(parse(
                meta_end + payload.len().min(expected),
                format!("frame payload is {} bytes, expected {expected}", payload.len()),
            ));
        }
        let c = &meta.clip;
        let shape = (meta.kept_frame_count(), c.height, c.width, c.channels);
        let frames = match meta.sample_format {
            SampleFormat::U8 => normalize_u8(
                ndarray::ArrayView4::from_shape(shape, payload).expect("payload length checked"),
            ),
            SampleFormat::F64le => {
                let values: Vec<f64> = payload
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect();
                if let Some(i) = values.iter().position(|v| !(v.is_finite() && (0.0..=1.0).contains(v))) {
                    return Err(parse(meta_end + 8 * i, format!("sample {} outside [0, 1]", values[i])));
                }
                Array4::from_shape_vec(shape, values).expect("payload length checked")
            }
        };
        Ok(Self { meta, frames })
    }
}

/// Keeps the slots chosen by `policy` and packs their raw frames.
pub fn compress(clip: &VideoClip, policy: Policy, k: usize, ctx: &PolicyContext<'_>) -> Result<CompressedClip> {
    let mae = ctx.mae("compression")?;
    let cfg = &mae.config;
    clip.check_spec(&cfg.clip)?;
    let kept_slots = select_slots(policy, clip, cfg.t_tok(), k, ctx)?;
    let frame_idx: Vec<usize> = kept_slots
        .iter()
        .flat_map(|&s| slot_frames(s, cfg.temporal_patch))
        .collect();
    let frames = clip.pixels.select(Axis(0), &frame_idx);
    let sample_format = if frames.iter().all(|&v| on_byte_grid(v)) {
        SampleFormat::U8
    } else {
        SampleFormat::F64le
    };
    Ok(CompressedClip {
        meta: ContainerMeta {
            clip: cfg.clip,
            clip_id: clip.clip_id.clone(),
            temporal_patch: cfg.temporal_patch,
            kept_slots,
            model_hash: mae.fingerprint(),
            policy,
            sample_format,
        },
        frames,
    })
}

/// Restores kept frames verbatim and predicts the rest. Refuses a model
/// whose hash differs from the one recorded at compression time.
pub fn decompress(cc: &CompressedClip, mae: &FrameMae) -> Result<VideoClip> {
    let hash = mae.fingerprint();
    if hash != cc.meta.model_hash {
        return Err(Error::ModelMismatch {
            expected: cc.meta.model_hash.clone(),
            found: hash,
        });
    }
    let cfg = &mae.config;
    if cfg.clip != cc.meta.clip || cfg.temporal_patch != cc.meta.temporal_patch {
        return Err(Error::InvalidConfig("container geometry differs from the model".into()));
    }
    let c = &cc.meta.clip;
    let mut pixels = Array4::from_elem((c.frames, c.height, c.width, c.channels), BACKGROUND);
    let tp = cc.meta.temporal_patch;
    for (i, &slot) in cc.meta.kept_slots.iter().enumerate() {
        pixels
            .slice_mut(s![slot * tp..(slot + 1) * tp, .., .., ..])
            .assign(&cc.frames.slice(s![i * tp..(i + 1) * tp, .., .., ..]));
    }
    let partial = VideoClip::new(cc.meta.clip_id.clone(), pixels)?;
    mae.reconstruct_clip(&partial, &cc.meta.kept_slots)
}

/// Serialized as the string `"inf"` when infinite.
fn ser_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_psnr<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Raw::Text(t) => Err(serde::de::Error::custom(format!("bad psnr {t:?}"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    #[serde(serialize_with = "ser_psnr", deserialize_with = "de_psnr")]
    pub psnr: f64,
    pub retained_fraction: f64,
}

pub fn psnr(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Full-clip distortion. `retained_fraction` is carried through unchanged.
pub fn evaluate(original: &VideoClip, reconstructed: &VideoClip, retained_fraction: f64) -> Result<Metrics> {
    let (a, b) = (original.pixels.dim(), reconstructed.pixels.dim());
    if a != b {
        let axis = ["frames", "height", "width", "channels"];
        let (i, (e, g)) = [(a.0, b.0), (a.1, b.1), (a.2, b.2), (a.3, b.3)]
            .into_iter()
            .enumerate()
            .find(|(_, (e, g))| e != g)
            .expect("some axis differs");
        return Err(Error::DimensionMismatch {
            axis: axis[i],
            expected: e,
            actual: g,
        });
    }
    let mut sum = 0.0;
    for (x, y) in original.pixels.iter().zip(reconstructed.pixels.iter()) {
        let d = x - y;
        sum += d * d;
    }
    let mse = sum / original.pixels.len() as f64;
    Ok(Metrics {
        mse,
        psnr: psnr(mse),
        retained_fraction,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipResult {
    pub clip_id: String,
    pub kept_slots: Vec<usize>,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyResult {
    pub policy: Policy,
    pub mean_mse: f64,
    /// PSNR of the mean MSE.
    #[serde(serialize_with = "ser_psnr", deserialize_with = "de_psnr")]
    pub psnr: f64,
    pub retained_fraction: f64,
    pub clips: Vec<ClipResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub model_hash: String,
    pub k: usize,
    /// Sorted by `mean_mse`, ascending.
    pub policies: Vec<PolicyResult>,
}

impl PolicyReport {
    pub fn get(&self, policy: Policy) -> Option<&PolicyResult> {
        self.policies.iter().find(|p| p.policy == policy)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("policy,mean_mse,psnr,retained_fraction,clips\n");
        for p in &self.policies {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                p.policy,
                p.mean_mse,
                p.psnr,
                p.retained_fraction,
                p.clips.len()
            ));
        }
        s
    }
}

/// Compresses and decompresses every clip under every policy.
pub fn compare_policies(corpus: &[VideoClip], policies: &[Policy], k: usize, ctx: &PolicyContext<'_>) -> Result<PolicyReport> {
    let mae = ctx.mae("policy comparison")?;
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    let mut results = Vec::with_capacity(policies.len());
    for &policy in policies {
        let mut clips = Vec::with_capacity(corpus.len());
        for clip in corpus {
            let cc = compress(clip, policy, k, ctx)?;
            let rebuilt = decompress(&cc, mae)?;
            clips.push(ClipResult {
                clip_id: clip.clip_id.clone(),
                kept_slots: cc.meta.kept_slots.clone(),
                metrics: evaluate(clip, &rebuilt, cc.retained_fraction())?,
            });
        }
        let mean_mse = clips.iter().map(|c| c.metrics.mse).sum::<f64>() / clips.len() as f64;
        results.push(PolicyResult {
            policy,
            mean_mse,
            psnr: psnr(mean_mse),
            retained_fraction: clips[0].metrics.retained_fraction,
            clips,
        });
    }
    results.sort_by(|a, b| a.mean_mse.total_cmp(&b.mean_mse));
    Ok(PolicyReport {
        model_hash: mae.fingerprint(),
        k,
        policies: results,
    })
}

/// Number of candidate keep-sets the oracle searches.
pub fn candidate_count(t_tok: usize, k: usize) -> usize {
    combo_count(t_tok, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clipio::make_planted_clip;
    use crate::patchcube::ModelConfig;
    use crate::selector::SelectorConfig;
    use rand::Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            clip: ClipSpec {
                frames: 16,
                stride: 1,
                height: 8,
                width: 8,
                channels: 3,
            },
            spatial_patch: 4,
            embed_dim: 16,
            encoder_depth: 1,
            encoder_heads: 2,
            decoder_dim: 8,
            decoder_depth: 1,
            decoder_heads: 2,
            ..ModelConfig::toy()
        }
    }

    fn byte_clip(cfg: &ModelConfig, seed: u64) -> VideoClip {
        let c = &cfg.clip;
        let mut rng = seeded_rng(seed, 9);
        let px = Array4::from_shape_simple_fn((c.frames, c.height, c.width, c.channels), || {
            rng.random_range(0..=255u8) as f64 / 255.0
        });
        VideoClip::new(format!("clip-{seed}"), px).unwrap()
    }

    #[test]
    fn uniform_spacing() {
        assert_eq!(uniform_slots(8, 2), vec![0, 4]);
        assert_eq!(uniform_slots(8, 3), vec![0, 2, 5]);
        assert_eq!(uniform_slots(8, 8), (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn policy_names_roundtrip() {
        for p in Policy::ALL {
            assert_eq!(p.name().parse::<Policy>().unwrap(), p);
        }
        assert!("best".parse::<Policy>().is_err());
    }

    #[test]
    fn random_policy_is_seeded() {
        let cfg = small();
        let mae = FrameMae::new(cfg.clone(), 0).unwrap();
        let clip = byte_clip(&cfg, 1);
        let ctx = PolicyContext { seed: 4, ..PolicyContext::new(&mae) };
        let a = select_slots(Policy::Random, &clip, 8, 2, &ctx).unwrap();
        assert_eq!(a, select_slots(Policy::Random, &clip, 8, 2, &ctx).unwrap());
        assert!(a[0] < a[1] && a[1] < 8);
        let draws: std::collections::BTreeSet<Vec<usize>> = (0..20)
            .map(|seed| select_slots(Policy::Random, &clip, 8, 2, &PolicyContext { seed, ..ctx }).unwrap())
            .collect();
        assert!(draws.len() > 5);
    }

    #[test]
    fn missing_checkpoints_are_errors() {
        let cfg = small();
        let clip = byte_clip(&cfg, 1);
        let none = PolicyContext {
            mae: None,
            selector: None,
            seed: 0,
        };
        assert!(select_slots(Policy::Uniform, &clip, 8, 2, &none).is_ok());
        let err = select_slots(Policy::Oracle, &clip, 8, 2, &none).unwrap_err();
        assert!(err.to_string().contains("FrameMAE"), "{err}");
        let mae = FrameMae::new(cfg, 0).unwrap();
        let err = select_slots(Policy::Learned, &clip, 8, 2, &PolicyContext::new(&mae)).unwrap_err();
        assert!(err.to_string().contains("selector"), "{err}");
    }

    #[test]
    fn roundtrip_is_lossless_for_kept_frames() {
        let cfg = small();
        let mae = FrameMae::new(cfg.clone(), 1).unwrap();
        let sel = Selector::new(SelectorConfig::for_encoder(16, 8, cfg.s_tok(), 2), 0).unwrap();
        let ctx = PolicyContext {
            selector: Some(&sel),
            ..PolicyContext::new(&mae)
        };
        let clip = byte_clip(&cfg, 2);
        for policy in Policy::ALL {
            let cc = compress(&clip, policy, 2, &ctx).unwrap();
            assert_eq!(cc.meta.sample_format, SampleFormat::U8);
            assert_eq!(cc.retained_fraction(), 0.25);
            let bytes = cc.to_bytes().unwrap();
            let back = CompressedClip::from_bytes(&bytes).unwrap();
            assert_eq!(back, cc);
            let out = decompress(&back, &mae).unwrap();
            for &slot in &cc.meta.kept_slots {
                for f in slot_frames(slot, 2) {
                    assert_eq!(out.pixels.index_axis(Axis(0), f), clip.pixels.index_axis(Axis(0), f));
                }
            }
        }
    }

    #[test]
    fn container_size_is_four_frames_plus_metadata() {
        let cfg = ModelConfig::toy();
        let mae = FrameMae::new(cfg.clone(), 1).unwrap();
        let clip = byte_clip(&cfg, 3);
        let cc = compress(&clip, Policy::Uniform, 2, &PolicyContext::new(&mae)).unwrap();
        let bytes = cc.to_bytes().unwrap();
        let frames = 4 * 64 * 64 * 3;
        assert!(bytes.len() > frames && bytes.len() < frames + 400, "{}", bytes.len());
    }

    #[test]
    fn off_grid_content_is_stored_exactly() {
        let cfg = small();
        let mae = FrameMae::new(cfg.clone(), 1).unwrap();
        let planted = make_planted_clip(&cfg.clip, 2, &[2, 5], 0).unwrap();
        let cc = compress(&planted.clip, Policy::Uniform, 2, &PolicyContext::new(&mae)).unwrap();
        assert_eq!(cc.meta.sample_format, SampleFormat::F64le);
        let back = CompressedClip::from_bytes(&cc.to_bytes().unwrap()).unwrap();
        assert_eq!(back.frames, cc.frames);
    }

    #[test]
    fn keeping_everything_is_identity() {
        let cfg = small();
        let mae = FrameMae::new(cfg.clone(), 1).unwrap();
        let clip = byte_clip(&cfg, 4);
        let cc = compress(&clip, Policy::Uniform, 8, &PolicyContext::new(&mae)).unwrap();
        assert_eq!(cc.retained_fraction(), 1.0);
        assert_eq!(decompress(&cc, &mae).unwrap().pixels, clip.pixels);
    }

    #[test]
    fn other_model_is_refused() {
        let cfg = small();
        let a = FrameMae::new(cfg.clone(), 1).unwrap();
        let b = FrameMae::new(cfg.clone(), 2).unwrap();
        let cc = compress(&byte_clip(&cfg, 5), Policy::Uniform, 2, &PolicyContext::new(&a)).unwrap();
        assert!(matches!(decompress(&cc, &b), Err(Error::ModelMismatch { .. })));
    }

    #[test]
    fn corrupt_containers_report_offsets() {
        let cfg = small();
        let mae = FrameMae::new(cfg.clone(), 1).unwrap();
        let bytes = compress(&byte_clip(&cfg, 6), Policy::Uniform, 2, &PolicyContext::new(&mae))
            .unwrap()
            .to_bytes()
            .unwrap();
        let offset = |b: &[u8]| match CompressedClip::from_bytes(b) {
            Err(Error::Parse { offset, .. }) => offset,
            other => panic!("{other:?}"),
        };
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(offset(&bad), 0);
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(offset(&bad), 4);
        assert_eq!(offset(&bytes[..5]), 5);
        let meta_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let end = HEADER_LEN + meta_len;
        assert_eq!(offset(&bytes[..bytes.len() - 1]), bytes.len() - 1);
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(offset(&long), bytes.len());
        let mut bad = bytes.clone();
        bad[HEADER_LEN] = b'[';
        assert!((HEADER_LEN..end).contains(&offset(&bad)));
    }

    #[test]
    fn metrics_closed_forms() {
        let px = Array4::from_elem((2, 2, 2, 3), 0.4);
        let a = VideoClip::new("a", px.clone()).unwrap();
        let m = evaluate(&a, &a, 0.25).unwrap();
        assert_eq!(m.mse, 0.0);
        assert!(m.psnr.is_infinite());
        assert_eq!(serde_json::to_value(m).unwrap()["psnr"], "inf");
        let back: Metrics = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        let b = VideoClip::new("b", px.mapv(|v| v + 0.1)).unwrap();
        let m = evaluate(&a, &b, 0.25).unwrap();
        assert!((m.mse - 0.01).abs() < 1e-12);
        assert!((m.psnr - 20.0).abs() < 1e-9);
        let c = VideoClip::new("c", Array4::zeros((2, 2, 3, 3))).unwrap();
        assert!(matches!(evaluate(&a, &c, 0.25), Err(Error::DimensionMismatch { axis: "width", .. })));
    }

    #[test]
    fn oracle_is_never_beaten() {
        let cfg = small();
        let mae = FrameMae::new(cfg.clone(), 3).unwrap();
        let sel = Selector::new(SelectorConfig::for_encoder(16, 8, cfg.s_tok(), 2), 0).unwrap();
        let ctx = PolicyContext {
            selector: Some(&sel),
            seed: 1,
            ..PolicyContext::new(&mae)
        };
        let corpus: Vec<VideoClip> = (0..3).map(|s| byte_clip(&cfg, 10 + s)).collect();
        let report = compare_policies(&corpus, &Policy::ALL, 2, &ctx).unwrap();
        assert_eq!(report.policies.len(), 4);
        assert!(report.policies.windows(2).all(|w| w[0].mean_mse <= w[1].mean_mse));
        let oracle = report.get(Policy::Oracle).unwrap();
        for p in &report.policies {
            assert_eq!(p.retained_fraction, 0.25);
            for (o, c) in oracle.clips.iter().zip(&p.clips) {
                assert!(o.metrics.mse <= c.metrics.mse);
            }
        }
        assert_eq!(report.to_csv().lines().count(), 5);
    }
}
