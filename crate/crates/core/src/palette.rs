//! Palette score of masked intensities and threshold filtering of training pairs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::scene::{ScalarMap, ViewImage};

/// Default keep threshold: the 1-sigma mass of a normal distribution.
pub const DEFAULT_ETA_P: f64 = 0.68;
/// Thresholds for the mean +- 0.5, 1 and 1.5 std ranges.
pub const ETA_P_PRESETS: [f64; 3] = [0.38, 0.68, 0.86];

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Rec.601 luma of every pixel.
pub fn intensity_map(img: &ViewImage) -> ScalarMap {
    let values = img
        .pixels()
        .iter()
        .map(|p| (LUMA[0] * p[0] as f64 + LUMA[1] * p[1] as f64 + LUMA[2] * p[2] as f64) as f32)
        .collect();
    ScalarMap::from_values(img.width(), img.height(), values).expect("same dimensions")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaletteStats {
    pub score: f64,
    pub masked_pixel_count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Set when the mask is empty.
    pub degenerate: bool,
}

/// Fraction of samples strictly within one population standard deviation of their mean.
pub fn palette_stats_of(values: &[f64]) -> PaletteStats {
    let n = values.len();
    if n == 0 {
        return PaletteStats {
            score: 0.0,
            masked_pixel_count: 0,
            mean: 0.0,
            std: 0.0,
            degenerate: true,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    // rounding in the mean must not turn a flat region into a tiny nonzero spread
    let flat = values.iter().all(|v| *v == values[0]);
    if flat {
        return PaletteStats {
            score: 0.0,
            masked_pixel_count: n,
            mean: values[0],
            std: 0.0,
            degenerate: false,
        };
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    let inside = values.iter().filter(|v| (*v - mean).abs() < std).count();
    PaletteStats {
        score: inside as f64 / n as f64,
        masked_pixel_count: n,
        mean,
        std,
        degenerate: false,
    }
}

pub fn palette_stats(intensity: &ScalarMap, mask: &BinaryMask) -> Result<PaletteStats> {
    if intensity.dims() != mask.dims() {
        return Err(Error::arg(format!(
            "intensity map {:?} and mask {:?} differ in size",
            intensity.dims(),
            mask.dims()
        )));
    }
    let values: Vec<f64> = intensity
        .values()
        .iter()
        .zip(mask.bits())
        .filter(|(_, m)| **m)
        .map(|(v, _)| *v as f64)
        .collect();
    Ok(palette_stats_of(&values))
}

pub fn palette_score(intensity: &ScalarMap, mask: &BinaryMask) -> Result<f64> {
    Ok(palette_stats(intensity, mask)?.score)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaletteRecord {
    pub pair_id: String,
    pub score: f64,
    pub masked_pixel_count: usize,
    pub mean: f64,
    pub std: f64,
}

impl PaletteRecord {
    pub fn new(pair_id: impl Into<String>, stats: PaletteStats) -> Self {
        Self {
            pair_id: pair_id.into(),
            score: stats.score,
            masked_pixel_count: stats.masked_pixel_count,
            mean: stats.mean,
            std: stats.std,
        }
    }

    pub fn csv_header() -> &'static str {
        "pair_id,score,masked_pixel_count,mean,std"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.pair_id, self.score, self.masked_pixel_count, self.mean, self.std
        )
    }
}

/// Scores many (image, mask) pairs in parallel.
pub fn score_pairs(pairs: &[(String, ViewImage, BinaryMask)]) -> Result<Vec<PaletteRecord>> {
    pairs
        .par_iter()
        .map(|(id, img, mask)| {
            Ok(PaletteRecord::new(
                id.clone(),
                palette_stats(&intensity_map(img), mask)?,
            ))
        })
        .collect()
}

/// Pair ids whose score is strictly above `eta_p`, in input order.
pub fn filter_dataset(records: &[PaletteRecord], eta_p: f64) -> Vec<String> {
    records
        .iter()
        .filter(|r| r.score > eta_p)
        .map(|r| r.pair_id.clone())
        .collect()
}
