//! Whole-slot masking and the combination index used as the selector's
//! class space.
//!
//! A combination index names a sorted `k`-subset of `0..t_tok` by its rank in
//! lexicographic order: for `(8, 2)`, index 0 is `(0, 1)`, index 7 is `(1, 2)`
//! and index 27 is `(6, 7)`.

use ndarray::{Array2, Axis};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::seeded_rng;
use crate::patchcube::TokenGrid;

/// `n choose k`, saturating at `usize::MAX`.
pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > usize::MAX as u128 {
            return usize::MAX;
        }
    }
    acc as usize
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameMask {
    pub masked: Vec<bool>,
}

impl FrameMask {
    pub fn all_visible(t_tok: usize) -> Self {
        Self {
            masked: vec![false; t_tok],
        }
    }

    pub fn t_tok(&self) -> usize {
        self.masked.len()
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn masked_slots(&self) -> Vec<usize> {
        (0..self.t_tok()).filter(|&t| self.masked[t]).collect()
    }

    pub fn visible_slots(&self) -> Vec<usize> {
        (0..self.t_tok()).filter(|&t| !self.masked[t]).collect()
    }

    /// Mask hiding everything except `keep`.
    pub fn keeping(t_tok: usize, keep: &[usize]) -> Result<Self> {
        let mut masked = vec![true; t_tok];
        for &s in keep {
            if s >= t_tok {
                return Err(Error::SlotOutOfRange { slot: s, t_tok });
            }
            if !masked[s] {
                return Err(Error::InvalidArgument(format!("duplicate slot {s}")));
            }
            masked[s] = false;
        }
        Ok(Self { masked })
    }
}

/// Uniformly random `masked_count`-subset of slots.
pub fn make_frame_mask(t_tok: usize, masked_count: usize, seed: u64) -> Result<FrameMask> {
    let mut rng = seeded_rng(seed, 0);
    random_frame_mask(t_tok, masked_count, &mut rng)
}

pub fn random_frame_mask(t_tok: usize, masked_count: usize, rng: &mut impl rand::Rng) -> Result<FrameMask> {
    if masked_count > t_tok {
        return Err(Error::InvalidArgument(format!(
            "masked_count {masked_count} exceeds {t_tok} slots"
        )));
    }
    let mut masked = vec![false; t_tok];
    for i in index::sample(rng, t_tok, masked_count) {
        masked[i] = true;
    }
    Ok(FrameMask { masked })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ComboIndex {
    pub index: usize,
    pub k: usize,
    pub t_tok: usize,
}

impl ComboIndex {
    pub fn new(index: usize, k: usize, t_tok: usize) -> Result<Self> {
        let count = combo_count(t_tok, k);
        if index >= count {
            return Err(Error::ComboOutOfRange { index, count });
        }
        Ok(Self { index, k, t_tok })
    }
}

pub fn combo_count(t_tok: usize, k: usize) -> usize {
    binomial(t_tok, k)
}

pub fn combo_to_slots(c: ComboIndex) -> Result<Vec<usize>> {
    let count = combo_count(c.t_tok, c.k);
    if c.index >= count {
        return Err(Error::ComboOutOfRange { index: c.index, count });
    }
    let mut rest = c.index;
    let mut slots = Vec::with_capacity(c.k);
    let mut next = 0;
    for i in 0..c.k {
        let remaining = c.k - i - 1;
        let mut slot = next;
        loop {
            let block = binomial(c.t_tok - slot - 1, remaining);
            if rest < block {
                break;
            }
            rest -= block;
            slot += 1;
        }
        slots.push(slot);
        next = slot + 1;
    }
    Ok(slots)
}

/// Rank of a strictly increasing slot list.
pub fn slots_to_combo(slots: &[usize], t_tok: usize) -> Result<ComboIndex> {
    if let Some(w) = slots.windows(2).find(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "slots must be distinct and sorted, got {} before {}",
            w[0], w[1]
        )));
    }
    if let Some(&slot) = slots.iter().find(|&&s| s >= t_tok) {
        return Err(Error::SlotOutOfRange { slot, t_tok });
    }
    let k = slots.len();
    let mut index = 0;
    let mut next = 0;
    for (i, &s) in slots.iter().enumerate() {
        for skipped in next..s {
            index += binomial(t_tok - skipped - 1, k - i - 1);
        }
        next = s + 1;
    }
    Ok(ComboIndex { index, k, t_tok })
}

/// Combo slots visible, every other slot masked.
pub fn mask_from_combo(c: ComboIndex) -> Result<FrameMask> {
    FrameMask::keeping(c.t_tok, &combo_to_slots(c)?)
}

/// Flat token positions split by a mask, each list ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskLayout {
    pub t_tok: usize,
    pub s_tok: usize,
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

impl MaskLayout {
    pub fn new(mask: &FrameMask, s_tok: usize) -> Self {
        let mut visible = Vec::new();
        let mut hidden = Vec::new();
        for (t, &m) in mask.masked.iter().enumerate() {
            let rows = t * s_tok..(t + 1) * s_tok;
            if m {
                hidden.extend(rows);
            } else {
                visible.extend(rows);
            }
        }
        Self {
            t_tok: mask.t_tok(),
            s_tok,
            visible,
            masked: hidden,
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.t_tok * self.s_tok
    }

    /// Checks the two lists partition `0..t_tok * s_tok`.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_tokens();
        let mut seen = vec![false; n];
        for &i in self.visible.iter().chain(&self.masked) {
            if i >= n || seen[i] {
                return Err(Error::InvalidArgument(format!("mask layout index {i} invalid or repeated")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument("mask layout does not cover all tokens".into()));
        }
        Ok(())
    }
}

/// Rows of unmasked slots in original order, plus the placement bookkeeping.
pub fn apply_mask(tokens: &TokenGrid, mask: &FrameMask) -> Result<(Array2<f64>, MaskLayout)> {
    if mask.t_tok() != tokens.t_tok() {
        return Err(Error::DimensionMismatch {
            axis: "mask length",
            expected: tokens.t_tok(),
            actual: mask.t_tok(),
        });
    }
    let layout = MaskLayout::new(mask, tokens.s_tok());
    let visible = tokens.flat().select(Axis(0), &layout.visible);
    Ok((visible, layout))
}
