use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::metrics::DepthMetricReport;
use crate::scene::CameraPose;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    /// Row-major world-to-camera rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    /// `fx fy cx cy`.
    pub intrinsics: [f64; 4],
    pub size: [usize; 2],
}

impl From<&CameraPose> for PoseRecord {
    fn from(p: &CameraPose) -> Self {
        let r = &p.rotation;
        Self {
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [p.translation.x, p.translation.y, p.translation.z],
            intrinsics: [p.fx, p.fy, p.cx, p.cy],
            size: [p.width, p.height],
        }
    }
}

impl PoseRecord {
    pub fn to_pose(&self) -> CameraPose {
        CameraPose {
            rotation: Matrix3::from_row_slice(&self.rotation),
            translation: Vector3::from(self.translation),
            fx: self.intrinsics[0],
            fy: self.intrinsics[1],
            cx: self.intrinsics[2],
            cy: self.intrinsics[3],
            width: self.size[0],
            height: self.size[1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewStatus {
    Pending,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub index: usize,
    pub image: String,
    pub depth: Option<String>,
    pub pose: PoseRecord,
}

/// Paths are relative to the run's output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewArtifacts {
    pub dir: String,
    pub coarse: String,
    pub alpha: String,
    pub depth: String,
    pub depth_filled: String,
    pub mask_raw: String,
    pub mask: String,
    pub refined: String,
}

impl ViewArtifacts {
    pub fn in_dir(dir: &str) -> Self {
        let f = |n: &str| format!("{dir}/{n}");
        Self {
            dir: dir.to_string(),
            coarse: f("coarse.png"),
            alpha: f("alpha.png"),
            depth: f("depth.png"),
            depth_filled: f("depth_filled.png"),
            mask_raw: f("mask_raw.png"),
            mask: f("mask.png"),
            refined: f("refined.png"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub index: usize,
    pub request_id: String,
    pub pose: PoseRecord,
    pub status: ViewStatus,
    pub error: Option<String>,
    /// Refined image taken from a previous run instead of re-dispatching.
    pub resumed: bool,
    pub artifacts: ViewArtifacts,
    pub mean_opacity: f64,
    pub mask_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStamp {
    pub stage: String,
    pub unix_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelUpRecord {
    pub scene: String,
    pub primitives: usize,
    pub views_dispatched: usize,
    pub duplicates_dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputEval {
    pub index: usize,
    /// `None` when the re-render matches the input exactly.
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub depth: Option<DepthMetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub inputs: Vec<InputEval>,
    /// Mean accumulated opacity at the extrapolated poses, before and after leveling up.
    pub mean_opacity_before: Vec<f64>,
    pub mean_opacity_after: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub seed: u64,
    pub config_key: String,
    pub config: PipelineConfig,
    pub coarse_scene: String,
    pub inputs: Vec<InputRecord>,
    pub extrapolated: Vec<ViewRecord>,
    /// Dispatch order of the high-quality list: `input:<i>` then `refined:<i>`.
    pub h_order: Vec<String>,
    pub stages: Vec<StageStamp>,
    pub level_up: Option<LevelUpRecord>,
    pub eval: Option<EvalReport>,
}

impl PipelineManifest {
    pub fn stamp(&mut self, stage: &str) {
        let unix_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        self.stages.push(StageStamp {
            stage: stage.to_string(),
            unix_ms,
        });
    }

    pub fn failed_views(&self) -> usize {
        self.extrapolated
            .iter()
            .filter(|v| v.status == ViewStatus::Failed)
            .count()
    }

    /// Every extrapolated pose has a record and completed ones have a refined image on disk.
    pub fn check_complete(&self, out_dir: &Path) -> Result<()> {
        for v in &self.extrapolated {
            if v.status == ViewStatus::Completed && !out_dir.join(&v.artifacts.refined).exists() {
                return Err(Error::format(format!(
                    "view {} is marked completed but {} is missing",
                    v.index, v.artifacts.refined
                )));
            }
        }
        let refined: Vec<&str> = self
            .h_order
            .iter()
            .filter_map(|h| h.strip_prefix("refined:"))
            .collect();
        let first_refined = self.h_order.iter().position(|h| h.starts_with("refined:"));
        let last_input = self.h_order.iter().rposition(|h| h.starts_with("input:"));
        if let (Some(r), Some(i)) = (first_refined, last_input) {
            if r < i {
                return Err(Error::format(
                    "refined views precede inputs in the dispatch order",
                ));
            }
        }
        let completed = self
            .extrapolated
            .iter()
            .filter(|v| v.status == ViewStatus::Completed)
            .count();
        if refined.len() > completed {
            return Err(Error::format(
                "dispatch order lists more refined views than completed",
            ));
        }
        Ok(())
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join(MANIFEST_FILE);
        let tmp = out_dir.join(format!("{MANIFEST_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
