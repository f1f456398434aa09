use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::backend::{
    dedup_views, onion_peel_fill, pose_bytes, Generator, GeneratorRequest, ReconView, Reconstructor,
};
use super::config::{MaskConfig, PipelineConfig};
use super::manifest::{
    EvalReport, InputEval, InputRecord, LevelUpRecord, PipelineManifest, PoseRecord, ViewArtifacts,
    ViewRecord, ViewStatus,
};
use super::poses::sample_extrapolated_poses;
use crate::error::{Error, Result};
use crate::mask::{opacity_mask, refine_mask, BinaryMask};
use crate::metrics::{depth_metrics, psnr, ssim, DepthAlign};
use crate::render::{render, RenderOptions};
use crate::scene::{
    load_camera_set, load_scene_ply, load_token_grid, save_scene_ply, CameraPose, DepthMap,
    GaussianScene, ScalarMap, TokenGrid, ViewImage, TOKEN_DIM,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;

pub const COARSE_SCENE_FILE: &str = "scene_coarse.ply";
pub const LEVELED_SCENE_FILE: &str = "scene_leveled.ply";

/// Settings shared by every extrapolated view of one run.
#[derive(Debug, Clone)]
pub struct RefineSettings {
    pub mask: MaskConfig,
    pub background: [f32; 3],
    pub seed: u64,
    pub concurrency: usize,
    /// Folded into every request id so a config change invalidates old artifacts.
    pub config_key: String,
}

impl Default for RefineSettings {
    fn default() -> Self {
        Self {
            mask: MaskConfig::default(),
            background: [0.0; 3],
            seed: 0,
            concurrency: 4,
            config_key: String::new(),
        }
    }
}

impl RefineSettings {
    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            background: self.background,
            ..RenderOptions::default()
        }
    }

    pub fn request_id(&self, pose: &CameraPose) -> String {
        let mut h = Sha256::new();
        h.update(pose_bytes(pose));
        h.update(self.config_key.as_bytes());
        h.update(self.seed.to_le_bytes());
        hex::encode(h.finalize())[..16].to_string()
    }
}

/// Everything rendered for one extrapolated pose before generation.
#[derive(Debug, Clone)]
pub struct PreparedView {
    pub index: usize,
    pub request_id: String,
    pub pose: CameraPose,
    /// 8-bit quantized so it equals what a backend reads from disk.
    pub coarse: ViewImage,
    pub depth: DepthMap,
    pub alpha: ScalarMap,
    pub raw_mask: BinaryMask,
    pub mask: BinaryMask,
}

pub fn prepare_view(
    scene: &GaussianScene,
    pose: &CameraPose,
    index: usize,
    s: &RefineSettings,
) -> Result<PreparedView> {
    let out = render(scene, pose, &s.render_options());
    let raw_mask = opacity_mask(&out.transmittance, s.mask.eta_mask)?;
    let mask = refine_mask(&raw_mask, s.mask.refine_params())?;
    Ok(PreparedView {
        index,
        request_id: s.request_id(pose),
        pose: pose.clone(),
        coarse: out.color.quantized(),
        depth: out.depth,
        alpha: out.transmittance,
        raw_mask,
        mask,
    })
}

/// Generated pixels inside `mask`, coarse pixels everywhere else.
pub fn composite(
    coarse: &ViewImage,
    generated: &ViewImage,
    mask: &BinaryMask,
) -> Result<ViewImage> {
    if coarse.dims() != generated.dims() || coarse.dims() != mask.dims() {
        return Err(Error::arg("composite inputs differ in size"));
    }
    let (w, h) = coarse.dims();
    Ok(ViewImage::from_fn(w, h, |x, y| {
        if mask.get(x, y) {
            generated.get(x, y)
        } else {
            coarse.get(x, y)
        }
    }))
}

/// Coarse depth with masked or empty pixels grown in from their surroundings,
/// quantized like a depth PNG.
pub fn complete_depth(depth: &DepthMap, mask: &BinaryMask) -> DepthMap {
    let (w, h) = depth.dims();
    let mut values = depth.values().to_vec();
    let mut known: Vec<bool> = values
        .iter()
        .zip(mask.bits())
        .map(|(d, m)| *d > 0.0 && !m)
        .collect();
    if !onion_peel_fill(&mut values, &mut known, w, h, 1) {
        return DepthMap::zeros(w, h);
    }
    DepthMap::from_values(w, h, values)
        .expect("filled depths stay non-negative")
        .quantized()
}

#[derive(Debug, Clone)]
pub struct RefinedView {
    pub prepared: PreparedView,
    pub refined: Option<ViewImage>,
    pub error: Option<String>,
    pub resumed: bool,
}

impl RefinedView {
    pub fn recon_view(&self) -> Option<ReconView> {
        self.refined.as_ref().map(|img| ReconView {
            label: format!("refined:{}", self.prepared.index),
            image: img.clone(),
            depth: Some(complete_depth(&self.prepared.depth, &self.prepared.mask)),
            pose: self.prepared.pose.clone(),
        })
    }
}

pub fn view_dir_name(index: usize, request_id: &str) -> String {
    format!("views/{index:03}-{request_id}")
}

fn save_prepared(p: &PreparedView, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    p.coarse.save_png(dir.join("coarse.png"))?;
    p.alpha.save_png16(dir.join("alpha.png"))?;
    p.depth.save_png(dir.join("depth.png"))?;
    complete_depth(&p.depth, &p.mask).save_png(dir.join("depth_filled.png"))?;
    p.raw_mask.save_png(dir.join("mask_raw.png"))?;
    p.mask.save_png(dir.join("mask.png"))
}

/// Render, mask and refine every pose. Views render one after another; the
/// generator calls then run on at most `concurrency` threads. With `store`,
/// artifacts go to `store/views/<index>-<request_id>/` and views whose
/// `refined.png` already exists are reused without dispatch.
pub fn refine_views(
    scene: &GaussianScene,
    poses: &[CameraPose],
    reference: &ViewImage,
    tokens: &TokenGrid,
    generator: &dyn Generator,
    settings: &RefineSettings,
    store: Option<&Path>,
    on_view: &(dyn Fn(&RefinedView) + Sync),
) -> Result<Vec<RefinedView>> {
    let prepared: Vec<PreparedView> = poses
        .iter()
        .enumerate()
        .map(|(i, p)| prepare_view(scene, p, i, settings))
        .collect::<Result<_>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.concurrency.max(1))
        .build()
        .map_err(|e| Error::Backend(format!("thread pool: {e}")))?;
    let results = pool.install(|| {
        prepared
            .into_par_iter()
            .map(|p| {
                let dir = store.map(|s| s.join(view_dir_name(p.index, &p.request_id)));
                let view = refine_one(p, reference, tokens, generator, settings, dir.as_deref());
                if let Ok(v) = &view {
                    on_view(v);
                }
                view
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(results)
}

fn refine_one(
    p: PreparedView,
    reference: &ViewImage,
    tokens: &TokenGrid,
    generator: &dyn Generator,
    settings: &RefineSettings,
    dir: Option<&Path>,
) -> Result<RefinedView> {
    if let Some(dir) = dir {
        let done = dir.join("refined.png");
        if done.exists() {
            if let Ok(img) = ViewImage::load_png(&done) {
                if img.dims() == p.coarse.dims() {
                    return Ok(RefinedView {
                        prepared: p,
                        refined: Some(img),
                        error: None,
                        resumed: true,
                    });
                }
            }
        }
        save_prepared(&p, dir)?;
    }
    let req = GeneratorRequest {
        request_id: p.request_id.clone(),
        coarse: p.coarse.clone(),
        mask: p.mask.clone(),
        reference: reference.clone(),
        tokens: tokens.clone(),
        pose: p.pose.clone(),
        seed: settings.seed,
    };
    let outcome = generator
        .generate(&req)
        .and_then(|g| composite(&p.coarse, &g.quantized(), &p.mask));
    match outcome {
        Ok(img) => {
            if let Some(dir) = dir {
                img.save_png(dir.join("refined.png"))?;
            }
            Ok(RefinedView {
                prepared: p,
                refined: Some(img),
                error: None,
                resumed: false,
            })
        }
        Err(e) => Ok(RefinedView {
            prepared: p,
            refined: None,
            error: Some(e.to_string()),
            resumed: false,
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelUpStats {
    pub dispatched: Vec<String>,
    pub duplicates_dropped: usize,
}

/// Reconstructs from inputs followed by refined views, after dropping duplicates.
pub fn level_up(
    inputs: &[ReconView],
    refined: &[ReconView],
    recon: &dyn Reconstructor,
) -> Result<(GaussianScene, LevelUpStats)> {
    let h: Vec<ReconView> = inputs.iter().chain(refined).cloned().collect();
    let unique = dedup_views(&h);
    let stats = LevelUpStats {
        dispatched: unique.iter().map(|v| v.label.clone()).collect(),
        duplicates_dropped: h.len() - unique.len(),
    };
    let scene = recon
        .reconstruct(&unique)
        .map_err(|e| Error::Backend(format!("level-up reconstruction failed: {e}")))?;
    scene.validate()?;
    Ok((scene, stats))
}

#[derive(Debug)]
pub struct RunOutcome {
    pub manifest: PipelineManifest,
    pub out_dir: PathBuf,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.manifest.failed_views() > 0 {
            EXIT_PARTIAL
        } else {
            EXIT_OK
        }
    }
}

/// Key derived from every setting that influences the artifacts.
pub fn config_key(cfg: &PipelineConfig) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        inputs: &'a super::config::InputsConfig,
        poses: &'a super::poses::PoseSampling,
        mask: &'a MaskConfig,
        generator_kind: &'a str,
        reconstructor_kind: &'a str,
        stride: usize,
        seed: u64,
        background: [f32; 3],
    }
    let k = Key {
        inputs: &cfg.inputs,
        poses: &cfg.poses,
        mask: &cfg.mask,
        generator_kind: &cfg.generator.kind,
        reconstructor_kind: &cfg.reconstructor.kind,
        stride: cfg.reconstructor.stride,
        seed: cfg.run.seed,
        background: cfg.run.background,
    };
    let bytes = serde_json::to_vec(&k).expect("config serializes");
    hex::encode(Sha256::digest(bytes))[..16].to_string()
}

pub fn load_input_views(cfg: &PipelineConfig) -> Result<Vec<ReconView>> {
    let cams = load_camera_set(&cfg.inputs.cameras)?;
    let i = &cfg.inputs;
    if cams.len() != i.images.len() {
        return Err(Error::Config(format!(
            "{} cameras for {} input images",
            cams.len(),
            i.images.len()
        )));
    }
    cams.into_iter()
        .enumerate()
        .map(|(k, pose)| {
            pose.validate()?;
            let image = ViewImage::load_png(&i.images[k])?;
            if image.dims() != (pose.width, pose.height) {
                return Err(Error::Config(format!(
                    "input {k}: image size differs from its camera"
                )));
            }
            let depth = match i.depths.get(k) {
                Some(p) => Some(DepthMap::load_png(p)?),
                None => None,
            };
            Ok(ReconView {
                label: format!("input:{k}"),
                image,
                depth,
                pose,
            })
        })
        .collect()
}

/// Output of the refine stage: the manifest so far plus the in-memory views.
#[derive(Debug)]
pub struct RefineStage {
    pub manifest: PipelineManifest,
    pub inputs: Vec<ReconView>,
    pub refined: Vec<RefinedView>,
}

/// Ingest or reconstruct, load tokens, sample poses, and refine every view.
/// Generator failures are recorded per view; a reconstructor failure is fatal.
pub fn run_refine(cfg: &PipelineConfig, out_dir: &Path) -> Result<RefineStage> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let key = config_key(cfg);
    let inputs = load_input_views(cfg)?;
    let mut manifest = PipelineManifest {
        seed: cfg.run.seed,
        config_key: key.clone(),
        config: cfg.clone(),
        coarse_scene: COARSE_SCENE_FILE.into(),
        inputs: inputs
            .iter()
            .enumerate()
            .map(|(k, v)| InputRecord {
                index: k,
                image: cfg.inputs.images[k].display().to_string(),
                depth: cfg.inputs.depths.get(k).map(|p| p.display().to_string()),
                pose: PoseRecord::from(&v.pose),
            })
            .collect(),
        extrapolated: Vec::new(),
        h_order: Vec::new(),
        stages: Vec::new(),
        level_up: None,
        eval: None,
    };
    manifest.stamp("start");

    let generator = cfg.generator.generator(out_dir)?;

    let coarse = match &cfg.inputs.scene {
        Some(p) => load_scene_ply(p)?,
        None => cfg
            .reconstructor
            .reconstructor(out_dir)?
            .reconstruct(&inputs)
            .map_err(|e| Error::Backend(format!("initial reconstruction failed: {e}")))?,
    };
    coarse.validate()?;
    save_scene_ply(&coarse, out_dir.join(COARSE_SCENE_FILE))?;
    manifest.stamp("reconstruct");

    let tokens = match &cfg.inputs.tokens {
        Some(p) => load_token_grid(p)?,
        None => TokenGrid::zeros(1, 1, TOKEN_DIM),
    };
    manifest.stamp("tokens");
    manifest.h_order = (0..inputs.len()).map(|k| format!("input:{k}")).collect();

    let input_poses: Vec<CameraPose> = inputs.iter().map(|v| v.pose.clone()).collect();
    let poses = sample_extrapolated_poses(&input_poses, cfg.poses)?;
    let settings = RefineSettings {
        mask: cfg.mask,
        background: cfg.run.background,
        seed: cfg.run.seed,
        concurrency: cfg.run.concurrency,
        config_key: key,
    };
    manifest.extrapolated = poses
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let request_id = settings.request_id(p);
            ViewRecord {
                index: i,
                artifacts: ViewArtifacts::in_dir(&view_dir_name(i, &request_id)),
                request_id,
                pose: PoseRecord::from(p),
                status: ViewStatus::Pending,
                error: None,
                resumed: false,
                mean_opacity: 0.0,
                mask_fraction: 0.0,
            }
        })
        .collect();
    manifest.stamp("poses");
    manifest.save(out_dir)?;

    let shared = Mutex::new(manifest);
    let on_view = |v: &RefinedView| {
        let mut m = shared.lock().expect("manifest lock");
        let rec = &mut m.extrapolated[v.prepared.index];
        rec.status = if v.refined.is_some() {
            ViewStatus::Completed
        } else {
            ViewStatus::Failed
        };
        rec.error = v.error.clone();
        rec.resumed = v.resumed;
        rec.mean_opacity = v.prepared.alpha.mean();
        rec.mask_fraction =
            v.prepared.mask.count() as f64 / v.prepared.mask.bits().len().max(1) as f64;
        // best effort: the final save below reports errors
        let _ = m.save(out_dir);
    };
    let reference = &inputs[cfg.inputs.reference].image;
    let refined = refine_views(
        &coarse,
        &poses,
        reference,
        &tokens,
        generator.as_ref(),
        &settings,
        Some(out_dir),
        &on_view,
    )?;
    let mut manifest = shared.into_inner().expect("manifest lock");
    manifest.stamp("refine");
    manifest.save(out_dir)?;
    Ok(RefineStage {
        manifest,
        inputs,
        refined,
    })
}

/// Reconstructs from `inputs` then `refined`, writes the leveled scene, and
/// optionally evaluates it; the manifest is updated and saved.
pub fn run_level_up(
    manifest: &mut PipelineManifest,
    inputs: &[ReconView],
    refined: &[ReconView],
    out_dir: &Path,
) -> Result<GaussianScene> {
    let cfg = manifest.config.clone();
    let recon = cfg.reconstructor.reconstructor(out_dir)?;
    let (leveled, stats) = level_up(inputs, refined, recon.as_ref())?;
    save_scene_ply(&leveled, out_dir.join(LEVELED_SCENE_FILE))?;
    manifest.h_order = stats.dispatched.clone();
    manifest.level_up = Some(LevelUpRecord {
        scene: LEVELED_SCENE_FILE.into(),
        primitives: leveled.len(),
        views_dispatched: stats.dispatched.len(),
        duplicates_dropped: stats.duplicates_dropped,
    });
    manifest.stamp("level_up");
    if cfg.run.eval {
        let opts = RenderOptions {
            background: cfg.run.background,
            ..RenderOptions::default()
        };
        manifest.eval = Some(evaluate(&leveled, inputs, &manifest.extrapolated, &opts)?);
        manifest.stamp("eval");
    }
    manifest.save(out_dir)?;
    manifest.check_complete(out_dir)?;
    Ok(leveled)
}

/// The whole loop: [`run_refine`] followed by [`run_level_up`].
pub fn run_alg1(cfg: &PipelineConfig, out_dir: &Path) -> Result<RunOutcome> {
    let RefineStage {
        mut manifest,
        inputs,
        refined,
    } = run_refine(cfg, out_dir)?;
    let refined_views: Vec<ReconView> = refined.iter().filter_map(|r| r.recon_view()).collect();
    run_level_up(&mut manifest, &inputs, &refined_views, out_dir)?;
    Ok(RunOutcome {
        manifest,
        out_dir: out_dir.to_path_buf(),
    })
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Re-renders the leveled scene at the inputs and at the extrapolated poses.
pub fn evaluate(
    leveled: &GaussianScene,
    inputs: &[ReconView],
    extrapolated: &[ViewRecord],
    opts: &RenderOptions,
) -> Result<EvalReport> {
    let mut evals = Vec::with_capacity(inputs.len());
    for (k, v) in inputs.iter().enumerate() {
        let out = render(leveled, &v.pose, opts);
        let depth = match &v.depth {
            Some(gt) => match depth_metrics(&out.depth, gt, DepthAlign::None) {
                Ok(r) => Some(r),
                Err(Error::EmptyReport) => None,
                Err(e) => return Err(e),
            },
            None => None,
        };
        let ssim_v = ssim(&out.color, &v.image).ok();
        evals.push(InputEval {
            index: k,
            psnr: finite(psnr(&out.color, &v.image, 1.0)?),
            ssim: ssim_v,
            depth,
        });
    }
    let before = extrapolated.iter().map(|r| r.mean_opacity).collect();
    let after = extrapolated
        .iter()
        .map(|r| {
            render(leveled, &r.pose.to_pose(), opts)
                .transmittance
                .mean()
        })
        .collect();
    Ok(EvalReport {
        inputs: evals,
        mean_opacity_before: before,
        mean_opacity_after: after,
    })
}

/// Level-up from a refined run directory: inputs from the stored config,
/// refined views and completed depth from each view's artifacts.
pub fn level_up_from_manifest(out_dir: &Path) -> Result<(PipelineManifest, GaussianScene)> {
    let mut manifest = PipelineManifest::load(out_dir.join(super::manifest::MANIFEST_FILE))?;
    let inputs = load_input_views(&manifest.config)?;
    let mut refined = Vec::new();
    for v in manifest
        .extrapolated
        .iter()
        .filter(|v| v.status == ViewStatus::Completed)
    {
        refined.push(ReconView {
            label: format!("refined:{}", v.index),
            image: ViewImage::load_png(out_dir.join(&v.artifacts.refined))?,
            depth: Some(DepthMap::load_png(out_dir.join(&v.artifacts.depth_filled))?),
            pose: v.pose.to_pose(),
        });
    }
    let scene = run_level_up(&mut manifest, &inputs, &refined, out_dir)?;
    Ok((manifest, scene))
}
