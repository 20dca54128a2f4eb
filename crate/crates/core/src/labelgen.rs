//! Exhaustive key-slot oracle.
//!
//! For every keep-`k` combination of temporal slots the clip is rebuilt by
//! the autoencoder from those slots alone, and the combination is scored by
//! the mean squared error of the rebuilt (clamped) pixels over the masked
//! frames. The best-scoring combination is the clip's label.
//!
//! Label files are line-delimited JSON, one [`LabelRecord`] per line, sorted
//! by clip id, next to a `manifest.json` pinning the model hash.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::clipio::{slot_frames, VideoClip};
use crate::error::{Error, IoContext, Result};
use crate::framemae::FrameMae;
use crate::framemask::{combo_count, combo_to_slots, mask_from_combo, ComboIndex, FrameMask, MaskLayout};
use crate::patchcube::{patchify, ModelConfig};

pub const LABELS_FILE: &str = "labels.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub clip_id: String,
    /// Indexed by combination index.
    pub losses: Vec<f64>,
    /// Combination indices by ascending loss, ties by lower index.
    pub ranking: Vec<usize>,
    pub gt_label: usize,
    pub model_hash: String,
}

impl LabelRecord {
    pub fn from_losses(clip_id: impl Into<String>, losses: Vec<f64>, model_hash: impl Into<String>) -> Self {
        let ranking = rank_ascending(&losses);
        Self {
            clip_id: clip_id.into(),
            gt_label: ranking[0],
            ranking,
            losses,
            model_hash: model_hash.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.losses.len();
        let bad = |m: String| Err(Error::InvalidArgument(format!("label {}: {m}", self.clip_id)));
        if n == 0 {
            return bad("no losses".into());
        }
        if let Some(l) = self.losses.iter().find(|l| !l.is_finite() || **l < 0.0) {
            return bad(format!("invalid loss {l}"));
        }
        let mut seen = vec![false; n];
        if self.ranking.len() != n {
            return bad("ranking length differs from losses".into());
        }
        for &r in &self.ranking {
            if r >= n || seen[r] {
                return bad("ranking is not a permutation".into());
            }
            seen[r] = true;
        }
        if self.ranking.windows(2).any(|w| self.losses[w[0]] > self.losses[w[1]]) {
            return bad("ranking is not sorted by loss".into());
        }
        if self.gt_label != self.ranking[0] {
            return bad("gt_label is not the top-ranked combination".into());
        }
        Ok(())
    }
}

/// Stable ascending argsort: equal losses keep index order.
pub fn rank_ascending(losses: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..losses.len()).collect();
    idx.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]));
    idx
}

/// Mean squared error over the frames of masked slots, in frame order.
pub fn masked_frame_mse(
    original: ArrayView4<'_, f64>,
    reconstructed: ArrayView4<'_, f64>,
    mask: &FrameMask,
    temporal_patch: usize,
) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for slot in mask.masked_slots() {
        for f in slot_frames(slot, temporal_patch) {
            let a = original.index_axis(Axis(0), f);
            let b = reconstructed.index_axis(Axis(0), f);
            for (x, y) in a.iter().zip(b.iter()) {
                let d = x - y;
                sum += d * d;
            }
            count += a.len();
        }
    }
    sum / count as f64
}

/// Scores every keep-`k` combination of one autoencoder.
pub struct Labeler<'a> {
    model: &'a FrameMae,
    k: usize,
    model_hash: String,
}

impl<'a> Labeler<'a> {
    pub fn new(model: &'a FrameMae, k: usize) -> Result<Self> {
        let t_tok = model.config.t_tok();
        if k == 0 || k >= t_tok {
            return Err(Error::InvalidArgument(format!(
                "keep count {k} must be in 1..{t_tok}"
            )));
        }
        Ok(Self {
            model,
            k,
            model_hash: model.fingerprint(),
        })
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    pub fn classes(&self) -> usize {
        combo_count(self.model.config.t_tok(), self.k)
    }

    fn combo(&self, index: usize) -> ComboIndex {
        ComboIndex {
            index,
            k: self.k,
            t_tok: self.model.config.t_tok(),
        }
    }

    /// All combination losses, sharing one patchify/embedding pass.
    pub fn rank(&self, clip: &VideoClip) -> Result<LabelRecord> {
        let cfg = &self.model.config;
        let patches = patchify(clip, cfg)?;
        let mut all = self.model.embed.forward(&patches.flat());
        all += &self.model.encoder_pos;
        let mut losses = Vec::with_capacity(self.classes());
        for index in 0..self.classes() {
            let mask = mask_from_combo(self.combo(index))?;
            let layout = MaskLayout::new(&mask, cfg.s_tok());
            let latent = self.model.encode(&all.select(Axis(0), &layout.visible))?;
            let pred = self.model.decode(&latent, &layout)?;
            let rebuilt = self.model.assemble(clip, &pred, &mask)?;
            let loss = masked_frame_mse(clip.pixels.view(), rebuilt.pixels.view(), &mask, cfg.temporal_patch);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss for combination {index} of clip {}",
                    clip.clip_id
                )));
            }
            losses.push(loss);
        }
        Ok(LabelRecord::from_losses(clip.clip_id.clone(), losses, self.model_hash.clone()))
    }

    /// Loss of a single combination through the public reconstruction path.
    pub fn combo_loss(&self, clip: &VideoClip, index: usize) -> Result<f64> {
        let c = ComboIndex::new(index, self.k, self.model.config.t_tok())?;
        let slots = combo_to_slots(c)?;
        let rebuilt = self.model.reconstruct_clip(clip, &slots)?;
        let mask = mask_from_combo(c)?;
        Ok(masked_frame_mse(
            clip.pixels.view(),
            rebuilt.pixels.view(),
            &mask,
            self.model.config.temporal_patch,
        ))
    }
}

pub fn rank_combos(clip: &VideoClip, model: &FrameMae, k: usize) -> Result<LabelRecord> {
    Labeler::new(model, k)?.rank(clip)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelManifest {
    pub format_version: u32,
    pub model_hash: String,
    pub k: usize,
    pub t_tok: usize,
    pub classes: usize,
    pub model_config: ModelConfig,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabelSummary {
    pub total: usize,
    pub evaluated: usize,
}

pub fn parse_label_line(line: &[u8]) -> Result<LabelRecord> {
    let rec: LabelRecord = serde_json::from_slice(line).map_err(|e| Error::Parse {
        offset: crate::clipio::json_offset(line, &e),
        message: e.to_string(),
    })?;
    rec.validate()?;
    Ok(rec)
}

/// Parses a whole label file; errors carry the byte offset of the bad line.
pub fn parse_label_file(bytes: &[u8]) -> Result<Vec<LabelRecord>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in bytes.split(|&b| b == b'\n') {
        if !line.iter().all(u8::is_ascii_whitespace) {
            let rec = parse_label_line(line).map_err(|e| match e {
                Error::Parse { offset: o, message } => Error::Parse {
                    offset: offset + o,
                    message,
                },
                other => Error::Parse {
                    offset,
                    message: other.to_string(),
                },
            })?;
            out.push(rec);
        }
        offset += line.len() + 1;
    }
    Ok(out)
}

pub fn read_labels(dir: &Path) -> Result<(LabelManifest, Vec<LabelRecord>)> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let manifest: LabelManifest = serde_json::from_slice(&fs::read(&path).at(&path)?)?;
    let path = dir.join(LABELS_FILE);
    let records = if path.exists() {
        parse_label_file(&fs::read(&path).at(&path)?)?
    } else {
        Vec::new()
    };
    if let Some(r) = records.iter().find(|r| r.model_hash != manifest.model_hash) {
        return Err(Error::ModelMismatch {
            expected: manifest.model_hash.clone(),
            found: r.model_hash.clone(),
        });
    }
    Ok((manifest, records))
}

/// Labels every clip not already present in `dir`, then rewrites the label
/// file sorted by clip id. Records from a different model are refused.
pub fn build_label_dataset(clips: &[VideoClip], model: &FrameMae, k: usize, dir: &Path) -> Result<LabelSummary> {
    let labeler = Labeler::new(model, k)?;
    let mut ids = BTreeSet::new();
    if let Some(dup) = clips.iter().find(|c| !ids.insert(c.clip_id.as_str())) {
        return Err(Error::InvalidArgument(format!("duplicate clip id {}", dup.clip_id)));
    }
    fs::create_dir_all(dir).at(dir)?;
    let mut records: BTreeMap<String, LabelRecord> = BTreeMap::new();
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        let (manifest, existing) = read_labels(dir)?;
        if manifest.model_hash != labeler.model_hash() {
            return Err(Error::ModelMismatch {
                expected: manifest.model_hash,
                found: labeler.model_hash().to_string(),
            });
        }
        if manifest.k != k {
            return Err(Error::InvalidArgument(format!(
                "existing labels keep {} slots, requested {k}",
                manifest.k
            )));
        }
        records.extend(existing.into_iter().map(|r| (r.clip_id.clone(), r)));
    }
    let mut manifest = LabelManifest {
        format_version: FORMAT_VERSION,
        model_hash: labeler.model_hash().to_string(),
        k,
        t_tok: model.config.t_tok(),
        classes: labeler.classes(),
        model_config: model.config.clone(),
        count: records.len(),
    };
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?).at(&manifest_path)?;

    let labels_path = dir.join(LABELS_FILE);
    let mut evaluated = 0;
    {
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&labels_path)
            .at(&labels_path)?;
        for clip in clips {
            if records.contains_key(&clip.clip_id) {
                continue;
            }
            let rec = labeler.rank(clip)?;
            writeln!(file, "{}", serde_json::to_string(&rec)?).at(&labels_path)?;
            records.insert(rec.clip_id.clone(), rec);
            evaluated += 1;
        }
    }
    let mut canonical = String::new();
    for rec in records.values() {
        canonical.push_str(&serde_json::to_string(rec)?);
        canonical.push('\n');
    }
    fs::write(&labels_path, canonical).at(&labels_path)?;
    manifest.count = records.len();
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?).at(&manifest_path)?;
    Ok(LabelSummary {
        total: records.len(),
        evaluated,
    })
}
