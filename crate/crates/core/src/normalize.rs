//! Intensity and label normalisation.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::Volume;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NormalizeError {
    #[error("clip window [{lo}, {hi}] is empty")]
    InvalidWindow { lo: f64, hi: f64 },
    #[error("output range [{lo}, {hi}] is empty")]
    InvalidOutputRange { lo: f64, hi: f64 },
    #[error("clip_rescale called with a non-ClipRescale configuration")]
    WrongMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    ZScore,
    ClipRescale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationSpec {
    pub mode: NormalizationMode,
    #[serde(default)]
    pub clip_lo: Option<f64>,
    #[serde(default)]
    pub clip_hi: Option<f64>,
    #[serde(default = "default_out_lo")]
    pub out_lo: f64,
    #[serde(default = "default_out_hi")]
    pub out_hi: f64,
}

fn default_out_lo() -> f64 {
    -1.0
}

fn default_out_hi() -> f64 {
    1.0
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self {
            mode: NormalizationMode::ZScore,
            clip_lo: None,
            clip_hi: None,
            out_lo: -1.0,
            out_hi: 1.0,
        }
    }
}

impl NormalizationSpec {
    pub fn clip_rescale(clip: Option<(f64, f64)>, out_lo: f64, out_hi: f64) -> Self {
        Self {
            mode: NormalizationMode::ClipRescale,
            clip_lo: clip.map(|c| c.0),
            clip_hi: clip.map(|c| c.1),
            out_lo,
            out_hi,
        }
    }

    pub fn validate(&self) -> Result<(), NormalizeError> {
        if self.out_lo.partial_cmp(&self.out_hi) != Some(Ordering::Less) {
            return Err(NormalizeError::InvalidOutputRange {
                lo: self.out_lo,
                hi: self.out_hi,
            });
        }
        if let (Some(lo), Some(hi)) = (self.clip_lo, self.clip_hi) {
            if lo.partial_cmp(&hi) != Some(Ordering::Less) {
                return Err(NormalizeError::InvalidWindow { lo, hi });
            }
        }
        Ok(())
    }

    /// Apply the configured mode.
    pub fn apply(&self, v: &Volume) -> Result<Volume, NormalizeError> {
        match self.mode {
            NormalizationMode::ZScore => Ok(zscore(v)),
            NormalizationMode::ClipRescale => clip_rescale(v, self),
        }
    }
}

/// Zero-mean, unit (population) variance. Constant volumes become zeros.
pub fn zscore(v: &Volume) -> Volume {
    let n = v.len() as f64;
    let mean = v.data().iter().sum::<f64>() / n;
    let var = v
        .data()
        .iter()
        .map(|x| (x - mean) * (x - mean))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if std == 0.0 {
        return v.map_data(|_| 0.0);
    }
    v.map_data(|x| (x - mean) / std)
}

/// Clamp to a window, then map the window affinely onto `[out_lo, out_hi]`.
///
/// Without explicit clip bounds the window is the volume's own min/max.
pub fn clip_rescale(v: &Volume, spec: &NormalizationSpec) -> Result<Volume, NormalizeError> {
    if spec.mode != NormalizationMode::ClipRescale {
        return Err(NormalizeError::WrongMode);
    }
    spec.validate()?;
    let (lo, hi) = match (spec.clip_lo, spec.clip_hi) {
        (Some(lo), Some(hi)) => (lo, hi),
        (lo, hi) => {
            let min = v.data().iter().copied().fold(f64::INFINITY, f64::min);
            let max = v.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo.unwrap_or(min), hi.unwrap_or(max))
        }
    };
    let (out_lo, out_hi) = (spec.out_lo, spec.out_hi);
    if lo == hi {
        let mid = 0.5 * (out_lo + out_hi);
        return Ok(v.map_data(|_| mid));
    }
    if lo > hi {
        return Err(NormalizeError::InvalidWindow { lo, hi });
    }
    let scale = (out_hi - out_lo) / (hi - lo);
    Ok(v.map_data(|x| {
        let c = x.clamp(lo, hi);
        (out_lo + (c - lo) * scale).clamp(out_lo, out_hi)
    }))
}

/// Binarise a label volume: strictly positive voxels become 1.
pub fn normalize_label(v: &Volume) -> Volume {
    v.map_data(|x| if x > 0.0 { 1.0 } else { 0.0 })
}
