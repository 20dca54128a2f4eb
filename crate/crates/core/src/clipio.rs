//! Clip sampling, pixel normalization, planted synthetic clips and the
//! on-disk video layout.
//!
//! A video directory holds either `manifest.json` + `frames.raw` (8-bit,
//! `[frame, row, col, channel]` order) or numbered PNG files. A planted
//! dataset is a directory of such video directories plus `labels.json`
//! mapping each clip id to its planted slots.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array4, ArrayView4, Axis};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::nn::seeded_rng;

pub const RAW_FORMAT: &str = "framers-raw-v1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FRAMES_FILE: &str = "frames.raw";
pub const LABELS_FILE: &str = "labels.json";

/// Value of every pixel outside the planted slots of a [`PlantedClip`].
pub const BACKGROUND: f64 = 0.5;

/// Geometry of a sampled clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipSpec {
    /// Frames per clip.
    pub frames: usize,
    /// Distance between sampled source frames.
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ClipSpec {
    pub fn paper() -> Self {
        Self {
            frames: 16,
            stride: 2,
            height: 224,
            width: 224,
            channels: 3,
        }
    }

    pub fn toy() -> Self {
        Self {
            height: 64,
            width: 64,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::InvalidConfig(format!("clip dimensions must be positive: {self:?}")));
        }
        if self.stride == 0 {
            return Err(Error::InvalidConfig("stride must be at least 1".into()));
        }
        Ok(())
    }

    /// Source frames spanned from the first to the last sampled frame.
    pub fn span(&self) -> usize {
        (self.frames - 1) * self.stride + 1
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// A normalized clip, pixels `[frame, row, col, channel]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub pixels: Array4<f64>,
    pub clip_id: String,
    pub source_offset: usize,
}

impl VideoClip {
    pub fn new(clip_id: impl Into<String>, pixels: Array4<f64>) -> Result<Self> {
        if let Some((i, &v)) = pixels
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(Error::PixelOutOfRange { index: i, value: v });
        }
        Ok(Self {
            pixels,
            clip_id: clip_id.into(),
            source_offset: 0,
        })
    }

    pub fn spec_dims(&self) -> (usize, usize, usize, usize) {
        self.pixels.dim()
    }

    pub fn check_spec(&self, spec: &ClipSpec) -> Result<()> {
        let (t, h, w, c) = self.pixels.dim();
        for (axis, expected, actual) in [
            ("frames", spec.frames, t),
            ("height", spec.height, h),
            ("width", spec.width, w),
            ("channels", spec.channels, c),
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
}

/// A synthetic clip whose only non-background content sits in `planted_slots`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedClip {
    pub clip: VideoClip,
    pub planted_slots: Vec<usize>,
}

/// Decoded 8-bit source video, `[frame, row, col, channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceVideo {
    pub name: String,
    pub fps: f64,
    pub frames: Array4<u8>,
}

impl SourceVideo {
    pub fn len(&self) -> usize {
        self.frames.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Maps 8-bit-range values to `[0, 1]`. Values outside `0..=255` are rejected.
pub fn normalize(raw: ArrayView4<'_, i32>) -> Result<Array4<f64>> {
    if let Some((i, &v)) = raw.iter().enumerate().find(|(_, v)| !(0..=255).contains(*v)) {
        return Err(Error::PixelOutOfRange {
            index: i,
            value: v as f64,
        });
    }
    Ok(raw.mapv(|v| v as f64 / 255.0))
}

pub fn normalize_u8(raw: ArrayView4<'_, u8>) -> Array4<f64> {
    raw.mapv(|v| v as f64 / 255.0)
}

/// Inverse of [`normalize`], rounding to the nearest level. Values outside
/// `[0, 1]` (or non-finite) are an error, never clamped.
pub fn denormalize(pixels: ArrayView4<'_, f64>) -> Result<Array4<u8>> {
    if let Some((i, &v)) = pixels
        .iter()
        .enumerate()
        .find(|(_, v)| !(v.is_finite() && (0.0..=1.0).contains(*v)))
    {
        return Err(Error::PixelOutOfRange { index: i, value: v });
    }
    Ok(pixels.mapv(|v| (v * 255.0).round() as u8))
}

/// Takes `spec.frames` frames at `spec.stride` from a uniformly random start,
/// bilinearly resized to the spec and normalized.
pub fn sample_clip(source: &SourceVideo, spec: &ClipSpec, seed: u64) -> Result<VideoClip> {
    spec.validate()?;
    let required = spec.frames * spec.stride;
    if source.len() < required {
        return Err(Error::InsufficientFrames {
            required,
            available: source.len(),
        });
    }
    let (_, sh, sw, sc) = source.frames.dim();
    if sc != spec.channels {
        return Err(Error::DimensionMismatch {
            axis: "channels",
            expected: spec.channels,
            actual: sc,
        });
    }
    let mut rng = seeded_rng(seed, 0);
    let offset = rng.random_range(0..=source.len() - required);
    let mut pixels = Array4::zeros((spec.frames, spec.height, spec.width, spec.channels));
    for (i, mut out) in pixels.outer_iter_mut().enumerate() {
        let frame = source.frames.index_axis(Axis(0), offset + i * spec.stride);
        if (sh, sw) == (spec.height, spec.width) {
            out.assign(&frame.mapv(|v| v as f64 / 255.0));
        } else {
            resize_bilinear(frame, out);
        }
    }
    Ok(VideoClip {
        pixels,
        clip_id: format!("{}@{offset}", source.name),
        source_offset: offset,
    })
}

fn resize_bilinear(src: ndarray::ArrayView3<'_, u8>, mut dst: ndarray::ArrayViewMut3<'_, f64>) {
    let (sh, sw, _) = src.dim();
    let (dh, dw, dc) = dst.dim();
    let coord = |i: usize, s: usize, d: usize| -> (usize, usize, f64) {
        let x = ((i as f64 + 0.5) * s as f64 / d as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(s - 1);
        (lo, hi, x - lo as f64)
    };
    for y in 0..dh {
        let (y0, y1, fy) = coord(y, sh, dh);
        for x in 0..dw {
            let (x0, x1, fx) = coord(x, sw, dw);
            for c in 0..dc {
                let p = |yy: usize, xx: usize| src[[yy, xx, c]] as f64 / 255.0;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                dst[[y, x, c]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
}

/// Raw frames covered by temporal slot `slot`.
pub fn slot_frames(slot: usize, temporal_patch: usize) -> std::ops::Range<usize> {
    slot * temporal_patch..(slot + 1) * temporal_patch
}

/// A clip that is constant [`BACKGROUND`] except for a seeded moving box
/// drawn in every raw frame of `planted_slots`.
pub fn make_planted_clip(
    spec: &ClipSpec,
    temporal_patch: usize,
    planted_slots: &[usize],
    seed: u64,
) -> Result<PlantedClip> {
    spec.validate()?;
    if temporal_patch == 0 || spec.frames % temporal_patch != 0 {
        return Err(Error::InvalidConfig(format!(
            "{} frames not divisible by temporal patch {temporal_patch}",
            spec.frames
        )));
    }
    let t_tok = spec.frames / temporal_patch;
    if planted_slots.is_empty() {
        return Err(Error::InvalidArgument("planted_slots must be nonempty".into()));
    }
    let mut slots = planted_slots.to_vec();
    slots.sort_unstable();
    slots.dedup();
    if slots.len() != planted_slots.len() {
        return Err(Error::InvalidArgument(format!("duplicate planted slots in {planted_slots:?}")));
    }
    if let Some(&slot) = slots.iter().find(|&&s| s >= t_tok) {
        return Err(Error::SlotOutOfRange { slot, t_tok });
    }

    let mut rng = seeded_rng(seed, 1);
    let color: Vec<f64> = (0..spec.channels)
        .map(|_| {
            let v = rng.random_range(0.05..0.3);
            if rng.random_bool(0.5) {
                v
            } else {
                1.0 - v
            }
        })
        .collect();
    let box_h = rng.random_range(spec.height / 4..=spec.height / 2).max(1);
    let box_w = rng.random_range(spec.width / 4..=spec.width / 2).max(1);
    let y0 = rng.random_range(0.0..=(spec.height - box_h) as f64);
    let x0 = rng.random_range(0.0..=(spec.width - box_w) as f64);
    let vy = rng.random_range(1.0..3.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let vx = rng.random_range(1.0..3.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };

    let mut pixels = Array4::from_elem((spec.frames, spec.height, spec.width, spec.channels), BACKGROUND);
    for &slot in &slots {
        for f in slot_frames(slot, temporal_patch) {
            let top = bounce(y0 + vy * f as f64, (spec.height - box_h) as f64);
            let left = bounce(x0 + vx * f as f64, (spec.width - box_w) as f64);
            for y in top..top + box_h {
                for x in left..left + box_w {
                    for (c, &v) in color.iter().enumerate() {
                        pixels[[f, y, x, c]] = v;
                    }
                }
            }
        }
    }
    Ok(PlantedClip {
        clip: VideoClip {
            pixels,
            clip_id: format!("planted-{seed}"),
            source_offset: 0,
        },
        planted_slots: slots,
    })
}

/// Reflects `pos` into `[0, max]` and rounds to a pixel index.
fn bounce(pos: f64, max: f64) -> usize {
    if max <= 0.0 {
        return 0;
    }
    let period = 2.0 * max;
    let p = pos.rem_euclid(period);
    let p = if p > max { period - p } else { p };
    p.round() as usize
}

/// `count` planted clips, each with `keep` slots drawn uniformly at random.
pub fn planted_dataset(
    spec: &ClipSpec,
    temporal_patch: usize,
    keep: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<PlantedClip>> {
    let t_tok = spec.frames / temporal_patch.max(1);
    if keep == 0 || keep > t_tok {
        return Err(Error::InvalidArgument(format!("cannot plant {keep} of {t_tok} slots")));
    }
    let mut rng = seeded_rng(seed, 2);
    (0..count)
        .map(|i| {
            let mut slots = index::sample(&mut rng, t_tok, keep).into_vec();
            slots.sort_unstable();
            let clip_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let mut planted = make_planted_clip(spec, temporal_patch, &slots, clip_seed)?;
            planted.clip.clip_id = format!("planted-{seed}-{i:05}");
            Ok(planted)
        })
        .collect()
}

/// Sidecar describing a raw frame blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoManifest {
    pub format: String,
    pub fps: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl VideoManifest {
    pub fn blob_len(&self) -> Result<usize> {
        [self.frames, self.height, self.width, self.channels]
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Parse {
                offset: 0,
                message: "frame blob size overflows".into(),
            })
    }
}

pub fn parse_video_manifest(bytes: &[u8]) -> Result<VideoManifest> {
    let m: VideoManifest = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        offset: json_offset(bytes, &e),
        message: e.to_string(),
    })?;
    if m.format != RAW_FORMAT {
        return Err(Error::Parse {
            offset: 0,
            message: format!("unsupported format {:?}", m.format),
        });
    }
    if !m.fps.is_finite() || m.fps < 0.0 {
        return Err(Error::Parse {
            offset: 0,
            message: format!("invalid fps {}", m.fps),
        });
    }
    if m.height == 0 || m.width == 0 || m.channels == 0 {
        return Err(Error::Parse {
            offset: 0,
            message: "frame dimensions must be positive".into(),
        });
    }
    m.blob_len()?;
    Ok(m)
}

/// Byte offset of a serde_json error (line/column resolved against `bytes`).
pub(crate) fn json_offset(bytes: &[u8], e: &serde_json::Error) -> usize {
    let mut line = 1;
    let mut offset = 0;
    for (i, &b) in bytes.iter().enumerate() {
        if line == e.line() {
            offset = i;
            break;
        }
        if b == b'\n' {
            line += 1;
        }
    }
    (offset + e.column().saturating_sub(1)).min(bytes.len())
}

pub fn decode_raw_frames(name: &str, manifest: &VideoManifest, blob: &[u8]) -> Result<SourceVideo> {
    let expected = manifest.blob_len()?;
    if blob.len() != expected {
        return Err(Error::Parse {
            offset: blob.len().min(expected),
            message: format!("frame blob holds {} bytes, manifest implies {expected}", blob.len()),
        });
    }
    let frames = Array4::from_shape_vec(
        (manifest.frames, manifest.height, manifest.width, manifest.channels),
        blob.to_vec(),
    )
    .expect("length checked above");
    Ok(SourceVideo {
        name: name.to_string(),
        fps: manifest.fps,
        frames,
    })
}

pub fn write_video_dir(dir: &Path, video: &SourceVideo) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let (frames, height, width, channels) = video.frames.dim();
    let manifest = VideoManifest {
        format: RAW_FORMAT.into(),
        fps: video.fps,
        frames,
        height,
        width,
        channels,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).at(&path)?;
    let path = dir.join(FRAMES_FILE);
    let blob: Vec<u8> = video.frames.iter().copied().collect();
    fs::write(&path, blob).at(&path)
}

/// Reads a raw-layout directory, or numbered PNG frames when no
/// `frames.raw` is present.
pub fn read_video_dir(dir: &Path) -> Result<SourceVideo> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let raw = dir.join(FRAMES_FILE);
    let manifest_path = dir.join(MANIFEST_FILE);
    if raw.exists() {
        if !manifest_path.exists() {
            return Err(Error::MissingFile(manifest_path));
        }
        let manifest = parse_video_manifest(&fs::read(&manifest_path).at(&manifest_path)?)?;
        let blob = fs::read(&raw).at(&raw)?;
        return decode_raw_frames(&name, &manifest, &blob);
    }
    let fps = if manifest_path.exists() {
        let v: serde_json::Value = serde_json::from_slice(&fs::read(&manifest_path).at(&manifest_path)?)?;
        v.get("fps").and_then(|f| f.as_f64()).unwrap_or(0.0)
    } else {
        0.0
    };
    let mut numbered = Vec::new();
    for entry in fs::read_dir(dir).at(dir)? {
        let path = entry.at(dir)?.path();
        if path.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("png")) != Some(true) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let digits: String = stem.chars().filter(|c| c.is_ascii_digit()).collect();
        if let Ok(n) = digits.parse::<u64>() {
            numbered.push((n, path));
        }
    }
    if numbered.is_empty() {
        return Err(Error::MissingFile(raw));
    }
    numbered.sort();
    let mut images = Vec::with_capacity(numbered.len());
    for (_, path) in &numbered {
        images.push(image::open(path)?.to_rgb8());
    }
    let (w, h) = images[0].dimensions();
    let mut frames = Array4::zeros((images.len(), h as usize, w as usize, 3));
    for (i, img) in images.iter().enumerate() {
        if img.dimensions() != (w, h) {
            return Err(Error::DimensionMismatch {
                axis: "frame size",
                expected: (w * h) as usize,
                actual: (img.width() * img.height()) as usize,
            });
        }
        let view = ndarray::ArrayView3::from_shape((h as usize, w as usize, 3), img.as_raw())
            .expect("rgb8 buffer has h*w*3 bytes");
        frames.index_axis_mut(Axis(0), i).assign(&view);
    }
    Ok(SourceVideo { name, fps, frames })
}

/// Writes each clip as a raw video directory plus `labels.json`.
pub fn write_planted_dataset(root: &Path, clips: &[PlantedClip]) -> Result<()> {
    fs::create_dir_all(root).at(root)?;
    let mut labels = BTreeMap::new();
    for p in clips {
        let frames = denormalize(p.clip.pixels.view())?;
        let video = SourceVideo {
            name: p.clip.clip_id.clone(),
            fps: 0.0,
            frames,
        };
        write_video_dir(&root.join(&p.clip.clip_id), &video)?;
        labels.insert(p.clip.clip_id.clone(), p.planted_slots.clone());
    }
    let path = root.join(LABELS_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&labels)?).at(&path)
}

pub fn parse_planted_labels(bytes: &[u8]) -> Result<BTreeMap<String, Vec<usize>>> {
    serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        offset: json_offset(bytes, &e),
        message: e.to_string(),
    })
}

/// Loads a planted dataset in clip-id order. Frames are read back at 8-bit
/// precision.
pub fn read_planted_dataset(root: &Path) -> Result<Vec<PlantedClip>> {
    let path = root.join(LABELS_FILE);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let labels = parse_planted_labels(&fs::read(&path).at(&path)?)?;
    labels
        .into_iter()
        .map(|(id, slots)| {
            let video = read_video_dir(&root.join(&id))?;
            Ok(PlantedClip {
                clip: VideoClip {
                    pixels: normalize_u8(video.frames.view()),
                    clip_id: id,
                    source_offset: 0,
                },
                planted_slots: slots,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_source(n: usize, h: usize, w: usize) -> SourceVideo {
        let frames = Array4::from_shape_fn((n, h, w, 3), |(f, y, x, c)| ((f * 7 + y * 3 + x + c) % 256) as u8);
        SourceVideo {
            name: "ramp".into(),
            fps: 25.0,
            frames,
        }
    }

    #[test]
    fn sample_clip_uses_stride_and_valid_offset() {
        let src = ramp_source(64, 64, 64);
        let spec = ClipSpec::toy();
        for seed in 0..20 {
            let clip = sample_clip(&src, &spec, seed).unwrap();
            let s = clip.source_offset;
            assert!(s <= 32);
            for i in 0..16 {
                let expected = normalize_u8(src.frames.slice(ndarray::s![s + 2 * i..s + 2 * i + 1, .., .., ..]));
                assert_eq!(clip.pixels.slice(ndarray::s![i..i + 1, .., .., ..]), expected);
            }
            assert_eq!(spec.span(), 31);
        }
    }

    #[test]
    fn exact_length_source_starts_at_zero() {
        let src = ramp_source(32, 64, 64);
        for seed in [0, 1, 99, 12345] {
            assert_eq!(sample_clip(&src, &ClipSpec::toy(), seed).unwrap().source_offset, 0);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let src = ramp_source(50, 64, 64);
        let a = sample_clip(&src, &ClipSpec::toy(), 7).unwrap();
        let b = sample_clip(&src, &ClipSpec::toy(), 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn short_source_reports_counts() {
        let src = ramp_source(31, 64, 64);
        let err = sample_clip(&src, &ClipSpec::toy(), 0).unwrap_err();
        match err {
            Error::InsufficientFrames { required, available } => {
                assert_eq!((required, available), (32, 31));
            }
            other => panic!("unexpected {other}"),
        }
        assert!(err.to_string().contains("32") && err.to_string().contains("31"));
    }

    #[test]
    fn resize_constant_frame_stays_constant() {
        let frames = Array4::from_elem((32, 40, 30, 3), 200u8);
        let src = SourceVideo {
            name: "c".into(),
            fps: 0.0,
            frames,
        };
        let clip = sample_clip(&src, &ClipSpec::toy(), 3).unwrap();
        assert!(clip.pixels.iter().all(|&v| (v - 200.0 / 255.0).abs() < 1e-12));
    }

    #[test]
    fn planted_slots_two_and_five() {
        let p = make_planted_clip(&ClipSpec::toy(), 2, &[2, 5], 11).unwrap();
        for f in 0..16 {
            let frame = p.clip.pixels.index_axis(Axis(0), f);
            let constant = frame.iter().all(|&v| v == BACKGROUND);
            assert_eq!(!constant, [4, 5, 10, 11].contains(&f), "frame {f}");
        }
    }

    #[test]
    fn all_slots_planted_leaves_no_constant_frame() {
        let p = make_planted_clip(&ClipSpec::toy(), 2, &[0, 1, 2, 3, 4, 5, 6, 7], 5).unwrap();
        for frame in p.clip.pixels.outer_iter() {
            assert!(frame.iter().any(|&v| v != BACKGROUND));
        }
    }

    #[test]
    fn planted_seed_changes_pattern_only() {
        let a = make_planted_clip(&ClipSpec::toy(), 2, &[1, 6], 1).unwrap();
        let b = make_planted_clip(&ClipSpec::toy(), 2, &[1, 6], 2).unwrap();
        assert_ne!(a.clip.pixels, b.clip.pixels);
        for f in (0..16).filter(|f| ![2, 3, 12, 13].contains(f)) {
            assert_eq!(a.clip.pixels.index_axis(Axis(0), f), b.clip.pixels.index_axis(Axis(0), f));
        }
        let again = make_planted_clip(&ClipSpec::toy(), 2, &[1, 6], 1).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn planted_rejects_bad_slots() {
        assert!(matches!(
            make_planted_clip(&ClipSpec::toy(), 2, &[8], 0),
            Err(Error::SlotOutOfRange { slot: 8, t_tok: 8 })
        ));
        assert!(make_planted_clip(&ClipSpec::toy(), 2, &[], 0).is_err());
        assert!(make_planted_clip(&ClipSpec::toy(), 2, &[3, 3], 0).is_err());
    }

    #[test]
    fn normalize_roundtrip_is_exhaustive_bijection() {
        let raw = Array4::from_shape_fn((1, 1, 256, 1), |(_, _, x, _)| x as i32);
        let norm = normalize(raw.view()).unwrap();
        assert_eq!(norm[[0, 0, 0, 0]], 0.0);
        assert_eq!(norm[[0, 0, 255, 0]], 1.0);
        assert_eq!(norm[[0, 0, 128, 0]], 128.0 / 255.0);
        let back = denormalize(norm.view()).unwrap();
        for x in 0..256 {
            assert_eq!(back[[0, 0, x, 0]] as usize, x);
        }
    }

    #[test]
    fn out_of_range_values_are_errors() {
        let raw = Array4::from_elem((1, 1, 1, 1), 256);
        assert!(normalize(raw.view()).is_err());
        let raw = Array4::from_elem((1, 1, 1, 1), -1);
        assert!(normalize(raw.view()).is_err());
        let px = Array4::from_elem((1, 1, 1, 1), 1.2);
        assert!(denormalize(px.view()).is_err());
        let px = Array4::from_elem((1, 1, 1, 1), f64::NAN);
        assert!(denormalize(px.view()).is_err());
    }

    #[test]
    fn raw_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let src = ramp_source(5, 6, 7);
        write_video_dir(dir.path(), &src).unwrap();
        let back = read_video_dir(dir.path()).unwrap();
        assert_eq!(back.frames, src.frames);
        assert_eq!(back.fps, 25.0);
    }

    #[test]
    fn png_dir_is_read_in_numeric_order() {
        let dir = tempfile::tempdir().unwrap();
        for (n, v) in [(10u32, 30u8), (2, 20), (1, 10)] {
            let img = image::RgbImage::from_pixel(4, 3, image::Rgb([v, v, v]));
            img.save(dir.path().join(format!("frame_{n}.png"))).unwrap();
        }
        let video = read_video_dir(dir.path()).unwrap();
        assert_eq!(video.frames.dim(), (3, 3, 4, 3));
        let firsts: Vec<u8> = (0..3).map(|f| video.frames[[f, 0, 0, 0]]).collect();
        assert_eq!(firsts, vec![10, 20, 30]);
    }

    #[test]
    fn blob_length_mismatch_reports_offset() {
        let m = VideoManifest {
            format: RAW_FORMAT.into(),
            fps: 1.0,
            frames: 2,
            height: 2,
            width: 2,
            channels: 3,
        };
        match decode_raw_frames("x", &m, &[0u8; 10]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn manifest_rejects_overflow_and_unknown_keys() {
        let huge = format!(
            r#"{{"format":"{RAW_FORMAT}","fps":1,"frames":{},"height":{},"width":2,"channels":3}}"#,
            usize::MAX,
            usize::MAX
        );
        assert!(parse_video_manifest(huge.as_bytes()).is_err());
        let extra = format!(r#"{{"format":"{RAW_FORMAT}","fps":1,"frames":1,"height":1,"width":1,"channels":3,"x":1}}"#);
        assert!(parse_video_manifest(extra.as_bytes()).is_err());
    }

    #[test]
    fn planted_dataset_roundtrip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let clips = planted_dataset(&ClipSpec::toy(), 2, 2, 3, 4).unwrap();
        write_planted_dataset(dir.path(), &clips).unwrap();
        let back = read_planted_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in clips.iter().zip(&back) {
            assert_eq!(a.planted_slots, b.planted_slots);
            assert_eq!(a.clip.clip_id, b.clip.clip_id);
            let diff = (&a.clip.pixels - &b.clip.pixels).mapv(f64::abs);
            assert!(diff.iter().all(|&d| d <= 0.5 / 255.0 + 1e-12));
        }
    }
}
