use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::DepthMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthAlign {
    #[default]
    None,
    /// Scale predictions by `median(gt) / median(pred)` over valid pixels first.
    Median,
}

impl std::str::FromStr for DepthAlign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "median" => Ok(Self::Median),
            other => Err(Error::arg(format!("unknown depth alignment '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetricReport {
    pub abs_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta125: f64,
    pub valid_pixel_count: usize,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Depth errors over pixels where both maps are positive.
pub fn depth_metrics(
    pred: &DepthMap,
    gt: &DepthMap,
    align: DepthAlign,
) -> Result<DepthMetricReport> {
    if pred.dims() != gt.dims() {
        return Err(Error::arg(format!(
            "depth sizes differ: {:?} vs {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let pairs: Vec<(f64, f64)> = pred
        .values()
        .iter()
        .zip(gt.values())
        .filter(|(p, g)| **p > 0.0 && **g > 0.0)
        .map(|(p, g)| (*p as f64, *g as f64))
        .collect();
    depth_metrics_of(&pairs, align)
}

/// Same as [`depth_metrics`] on explicit `(pred, gt)` pairs, all assumed positive.
pub fn depth_metrics_of(pairs: &[(f64, f64)], align: DepthAlign) -> Result<DepthMetricReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyReport);
    }
    let scale = match align {
        DepthAlign::None => 1.0,
        DepthAlign::Median => {
            let mut p: Vec<f64> = pairs.iter().map(|x| x.0).collect();
            let mut g: Vec<f64> = pairs.iter().map(|x| x.1).collect();
            median(&mut g) / median(&mut p)
        }
    };
    let n = pairs.len() as f64;
    let (mut abs_rel, mut sq, mut sq_log, mut hits) = (0.0, 0.0, 0.0, 0usize);
    for &(p, g) in pairs {
        let p = p * scale;
        abs_rel += (p - g).abs() / g;
        sq += (p - g) * (p - g);
        let dl = p.ln() - g.ln();
        sq_log += dl * dl;
        if (p / g).max(g / p) < 1.25 {
            hits += 1;
        }
    }
    Ok(DepthMetricReport {
        abs_rel: abs_rel / n,
        rmse: (sq / n).sqrt(),
        rmse_log: (sq_log / n).sqrt(),
        delta125: hits as f64 / n,
        valid_pixel_count: pairs.len(),
    })
}
