use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gsrefine::adapter::{AdapterConfig, AdapterWeights, LevelingAdapter, PATCH_RESOLUTION};
use gsrefine::mask::{opacity_mask, refine_mask_stages, BinaryMask};
use gsrefine::metrics::{
    depth_metrics, embeddings_from_rows, fit_embedding_gaussian, frechet_distance, met3r_sequence,
    parse_pair_scores, psnr, ssim, DepthAlign,
};
use gsrefine::palette::{filter_dataset, score_pairs, PaletteRecord, DEFAULT_ETA_P, ETA_P_PRESETS};
use gsrefine::pipeline::{
    level_up_from_manifest, run_alg1, run_refine, MaskConfig, PipelineConfig, PipelineManifest,
    EXIT_BACKEND, EXIT_OK, EXIT_PARTIAL,
};
use gsrefine::render::{render, RenderOptions};
use gsrefine::scene::{
    load_camera_set, load_f32_container, load_scene_ply, load_token_grid, DepthMap, ScalarMap,
    TokenGrid, ViewImage, PATCH_SIZE, TOKEN_DIM,
};
use gsrefine::{Error, Result};

#[derive(Parser)]
#[command(
    name = "gsrefine",
    version,
    about = "Render, mask, refine and level up Gaussian splatting scenes"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render color, depth and opacity maps of a PLY scene.
    Render(RenderArgs),
    /// Opacity mask and its refinement from an opacity map or a render.
    Mask(MaskArgs),
    /// Score (image, mask) pairs by palette consistency and keep the good ones.
    FilterPalette(PaletteArgs),
    /// Adapter forward pass from an image and geometry tokens to a pyramid dump.
    Adapter(AdapterArgs),
    /// Sample extrapolated poses and refine them through the generator.
    Refine,
    /// Re-reconstruct from the inputs and refined views of a previous `refine`.
    LevelUp,
    /// Full loop: refine, level up, evaluate.
    Run,
    /// Image, depth, Frechet and consistency metrics from ingested artifacts.
    Eval(EvalArgs),
}

#[derive(Args)]
struct RenderOptionArgs {
    /// Background color as `r,g,b` in [0, 1].
    #[arg(long, default_value = "0,0,0", value_parser = parse_rgb)]
    background: [f32; 3],
    #[arg(long, default_value_t = 16)]
    tile: usize,
    #[arg(long, default_value_t = 0.99)]
    alpha_clamp: f64,
    #[arg(long)]
    no_alpha_clamp: bool,
    #[arg(long, default_value_t = 1e-4)]
    early_stop: f64,
    #[arg(long)]
    no_early_stop: bool,
}

impl RenderOptionArgs {
    fn options(&self) -> RenderOptions {
        RenderOptions {
            background: self.background,
            tile_size: self.tile,
            alpha_clamp: (!self.no_alpha_clamp).then_some(self.alpha_clamp),
            early_stop: (!self.no_early_stop).then_some(self.early_stop),
            ..RenderOptions::default()
        }
    }
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    cameras: PathBuf,
    /// Only this camera; all cameras when omitted.
    #[arg(long)]
    view: Option<usize>,
    #[command(flatten)]
    opts: RenderOptionArgs,
}

#[derive(Args)]
struct MaskArgs {
    /// 16-bit opacity map; otherwise `--scene`, `--cameras` and `--view` are rendered.
    #[arg(long, conflicts_with = "scene")]
    opacity: Option<PathBuf>,
    #[arg(long, requires = "cameras")]
    scene: Option<PathBuf>,
    #[arg(long)]
    cameras: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    view: usize,
    #[arg(long)]
    eta_mask: Option<f64>,
    #[arg(long)]
    k_close: Option<usize>,
    #[arg(long)]
    k_dilate: Option<usize>,
    /// Complement of the closing, then dilation, with no hole filling.
    #[arg(long)]
    literal_closing: bool,
    #[command(flatten)]
    opts: RenderOptionArgs,
}

#[derive(Args)]
struct PaletteArgs {
    /// One pair per line: `image mask [render]`, whitespace or comma separated.
    #[arg(long)]
    pairs: PathBuf,
    /// Threshold; 0.38, 0.68 and 0.86 are the usual presets.
    #[arg(long, default_value_t = DEFAULT_ETA_P)]
    eta_p: f64,
    /// Score the rendered image (third column) instead of the ground truth.
    #[arg(long)]
    score_render: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Plan {
    Toy,
    Default,
}

#[derive(Args)]
struct AdapterArgs {
    #[arg(long)]
    image: PathBuf,
    /// Geometry tokens of the image at the patch resolution; zeros when omitted.
    #[arg(long)]
    tokens: Option<PathBuf>,
    /// Weight archive; otherwise weights are initialized from `--seed` and `--plan`.
    #[arg(long, conflicts_with = "plan")]
    weights: Option<PathBuf>,
    #[arg(long, value_enum)]
    plan: Option<Plan>,
    #[arg(long)]
    save_weights: Option<PathBuf>,
    /// Output pyramid archive; defaults to `<out-dir>/pyramid.bin`.
    #[arg(long)]
    pyramid: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// One view per line: `pred_image gt_image [pred_depth gt_depth]`.
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long)]
    median_align: bool,
    /// Embedding containers of the two image sets.
    #[arg(long, requires = "fid_b")]
    fid_a: Option<PathBuf>,
    #[arg(long)]
    fid_b: Option<PathBuf>,
    /// Pairwise consistency scores, one per line.
    #[arg(long)]
    met3r: Option<PathBuf>,
}

fn parse_rgb(s: &str) -> std::result::Result<[f32; 3], String> {
    let parts: Vec<f32> = s
        .split(',')
        .map(|p| p.trim().parse::<f32>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    match parts.as_slice() {
        [r, g, b] => Ok([*r, *g, *b]),
        _ => Err(format!("expected r,g,b, got '{s}'")),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Lines of a list file split into columns; relative paths follow the file.
fn read_list(path: &Path) -> Result<Vec<(String, Vec<PathBuf>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let cols = l
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|c| !c.is_empty())
                .map(|c| base.join(c))
                .collect();
            (l.to_string(), cols)
        })
        .collect())
}

fn load_config(cli: &Cli) -> Result<Option<PipelineConfig>> {
    let Some(path) = &cli.config else {
        return Ok(None);
    };
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    Ok(Some(cfg))
}

fn require_config(cli: &Cli) -> Result<PipelineConfig> {
    load_config(cli)?.ok_or_else(|| Error::Config("this command needs --config".into()))
}

fn cmd_render(cli: &Cli, a: &RenderArgs) -> Result<i32> {
    let scene = load_scene_ply(&a.scene)?;
    let cams = load_camera_set(&a.cameras)?;
    let opts = a.opts.options();
    let dir = cli.out_dir.join("render");
    create_dir(&dir)?;
    let picked: Vec<usize> = match a.view {
        Some(v) if v >= cams.len() => {
            return Err(Error::InvalidArgument(format!(
                "view {v} but only {} cameras",
                cams.len()
            )))
        }
        Some(v) => vec![v],
        None => (0..cams.len()).collect(),
    };
    for i in picked {
        let out = render(&scene, &cams[i], &opts);
        out.color
            .save_png(dir.join(format!("view{i:03}_color.png")))?;
        out.depth
            .save_png(dir.join(format!("view{i:03}_depth.png")))?;
        out.alpha
            .save_png16(dir.join(format!("view{i:03}_alpha.png")))?;
        let s = out.stats;
        println!(
            "view {i}: visible {} culled near {} offscreen {} degenerate {} mean opacity {:.4}",
            s.visible,
            s.culled_near,
            s.culled_offscreen,
            s.culled_degenerate,
            out.alpha.mean()
        );
    }
    Ok(EXIT_OK)
}

fn cmd_mask(cli: &Cli, a: &MaskArgs) -> Result<i32> {
    let base = load_config(cli)?.map(|c| c.mask).unwrap_or_default();
    let cfg = MaskConfig {
        eta_mask: a.eta_mask.unwrap_or(base.eta_mask),
        k_close: a.k_close.unwrap_or(base.k_close),
        k_dilate: a.k_dilate.unwrap_or(base.k_dilate),
        literal: a.literal_closing || base.literal,
    };
    let opacity: ScalarMap = match (&a.opacity, &a.scene, &a.cameras) {
        (Some(p), _, _) => ScalarMap::load_png16(p)?,
        (None, Some(scene), Some(cams)) => {
            let scene = load_scene_ply(scene)?;
            let cams = load_camera_set(cams)?;
            let cam = cams
                .get(a.view)
                .ok_or_else(|| Error::InvalidArgument(format!("view {} out of range", a.view)))?;
            render(&scene, cam, &a.opts.options()).transmittance
        }
        _ => {
            return Err(Error::InvalidArgument(
                "give --opacity or --scene with --cameras".into(),
            ))
        }
    };
    let raw = opacity_mask(&opacity, cfg.eta_mask)?;
    let stages = refine_mask_stages(&raw, cfg.refine_params())?;
    create_dir(&cli.out_dir)?;
    raw.save_png(cli.out_dir.join("mask_raw.png"))?;
    stages
        .closed
        .save_png(cli.out_dir.join("mask_closed.png"))?;
    stages.refined.save_png(cli.out_dir.join("mask.png"))?;
    let frac = |m: &BinaryMask| m.count() as f64 / m.bits().len().max(1) as f64;
    println!(
        "raw {:.4} closed {:.4} refined {:.4} (fraction of pixels)",
        frac(&raw),
        frac(&stages.closed),
        frac(&stages.refined)
    );
    Ok(EXIT_OK)
}

fn cmd_filter_palette(cli: &Cli, a: &PaletteArgs) -> Result<i32> {
    if !ETA_P_PRESETS.contains(&a.eta_p) {
        eprintln!(
            "note: eta_p {} is not one of the presets {:?}",
            a.eta_p, ETA_P_PRESETS
        );
    }
    let lines = read_list(&a.pairs)?;
    let column = if a.score_render { 2 } else { 0 };
    let mut pairs = Vec::with_capacity(lines.len());
    for (k, (_, cols)) in lines.iter().enumerate() {
        let (Some(img), Some(mask)) = (cols.get(column), cols.get(1)) else {
            return Err(Error::Format(format!(
                "pair line {} needs image, mask and, with --score-render, render",
                k + 1
            )));
        };
        pairs.push((
            format!("{k:06}"),
            ViewImage::load_png(img)?,
            BinaryMask::load_png(mask)?,
        ));
    }
    let records = score_pairs(&pairs)?;
    let kept = filter_dataset(&records, a.eta_p);
    create_dir(&cli.out_dir)?;
    let mut csv = String::from(PaletteRecord::csv_header());
    csv.push('\n');
    for r in &records {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write_text(&cli.out_dir.join("palette.csv"), &csv)?;
    let mut keep = String::new();
    for id in &kept {
        let k: usize = id.parse().expect("ids are line numbers");
        keep.push_str(&lines[k].0);
        keep.push('\n');
    }
    write_text(&cli.out_dir.join("kept.txt"), &keep)?;
    println!(
        "kept {} of {} pairs at eta_p {}",
        kept.len(),
        records.len(),
        a.eta_p
    );
    Ok(EXIT_OK)
}

fn cmd_adapter(cli: &Cli, a: &AdapterArgs) -> Result<i32> {
    let weights = match &a.weights {
        Some(p) => AdapterWeights::load(p)?,
        None => {
            let config = match a.plan.unwrap_or(Plan::Toy) {
                Plan::Toy => AdapterConfig::toy(),
                Plan::Default => AdapterConfig::default(),
            };
            AdapterWeights::init(config, cli.seed.unwrap_or(0))?
        }
    };
    if let Some(p) = &a.save_weights {
        weights.save(p)?;
    }
    let image = ViewImage::load_png(&a.image)?;
    let tokens = match &a.tokens {
        Some(p) => load_token_grid(p)?,
        None => {
            let side = PATCH_RESOLUTION / PATCH_SIZE;
            TokenGrid::zeros(side, side, TOKEN_DIM)
        }
    };
    let out = LevelingAdapter { weights }.forward(&image, &tokens)?;
    let path = a
        .pyramid
        .clone()
        .unwrap_or_else(|| cli.out_dir.join("pyramid.bin"));
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    out.pyramid.save(&path)?;
    println!(
        "pyramid sizes {:?} channels {:?} -> {}",
        out.pyramid.spatial_sizes(),
        out.pyramid.channels(),
        path.display()
    );
    Ok(EXIT_OK)
}

fn report_views(m: &PipelineManifest) -> i32 {
    let failed = m.failed_views();
    let resumed = m.extrapolated.iter().filter(|v| v.resumed).count();
    println!(
        "{} extrapolated views: {} failed, {} resumed",
        m.extrapolated.len(),
        failed,
        resumed
    );
    for v in m.extrapolated.iter().filter(|v| v.error.is_some()) {
        eprintln!(
            "view {}: {}",
            v.index,
            v.error.as_deref().unwrap_or_default()
        );
    }
    if failed > 0 {
        EXIT_PARTIAL
    } else {
        EXIT_OK
    }
}

fn report_level_up(m: &PipelineManifest) {
    if let Some(l) = &m.level_up {
        println!(
            "leveled scene: {} primitives from {} views ({} duplicates dropped)",
            l.primitives, l.views_dispatched, l.duplicates_dropped
        );
    }
    if let Some(e) = &m.eval {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        println!(
            "mean opacity at extrapolated poses: {:.4} -> {:.4}",
            mean(&e.mean_opacity_before),
            mean(&e.mean_opacity_after)
        );
    }
}

fn cmd_refine(cli: &Cli) -> Result<i32> {
    let cfg = require_config(cli)?;
    let stage = run_refine(&cfg, &cli.out_dir)?;
    Ok(report_views(&stage.manifest))
}

fn cmd_level_up(cli: &Cli) -> Result<i32> {
    let (m, _) = level_up_from_manifest(&cli.out_dir)?;
    report_level_up(&m);
    Ok(EXIT_OK)
}

fn cmd_run(cli: &Cli) -> Result<i32> {
    let cfg = require_config(cli)?;
    let outcome = run_alg1(&cfg, &cli.out_dir)?;
    let code = report_views(&outcome.manifest);
    report_level_up(&outcome.manifest);
    Ok(code)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<i32> {
    let align = if a.median_align {
        DepthAlign::Median
    } else {
        DepthAlign::None
    };
    if let Some(list) = &a.pairs {
        let mut csv = String::from("view,psnr,ssim,abs_rel,rmse,rmse_log,delta125,valid_pixels\n");
        for (k, (_, cols)) in read_list(list)?.iter().enumerate() {
            if cols.len() != 2 && cols.len() != 4 {
                return Err(Error::Format(format!(
                    "eval line {} needs 2 or 4 paths",
                    k + 1
                )));
            }
            let pred = ViewImage::load_png(&cols[0])?;
            let gt = ViewImage::load_png(&cols[1])?;
            let p = psnr(&pred, &gt, 1.0)?;
            let s = ssim(&pred, &gt).ok();
            let depth = if cols.len() == 4 {
                match depth_metrics(
                    &DepthMap::load_png(&cols[2])?,
                    &DepthMap::load_png(&cols[3])?,
                    align,
                ) {
                    Ok(r) => Some(r),
                    Err(Error::EmptyReport) => None,
                    Err(e) => return Err(e),
                }
            } else {
                None
            };
            let d = |f: fn(&gsrefine::metrics::DepthMetricReport) -> f64| {
                fmt_opt(depth.as_ref().map(f))
            };
            csv.push_str(&format!(
                "{k},{p},{},{},{},{},{},{}\n",
                fmt_opt(s),
                d(|r| r.abs_rel),
                d(|r| r.rmse),
                d(|r| r.rmse_log),
                d(|r| r.delta125),
                depth.as_ref().map(|r| r.valid_pixel_count).unwrap_or(0)
            ));
        }
        create_dir(&cli.out_dir)?;
        let path = cli.out_dir.join("eval.csv");
        write_text(&path, &csv)?;
        println!("per-view report -> {}", path.display());
    }
    if let (Some(pa), Some(pb)) = (&a.fid_a, &a.fid_b) {
        let gauss = |p: &Path| -> Result<_> {
            let (n, d, data) = load_f32_container(p)?;
            fit_embedding_gaussian(&embeddings_from_rows(n, d, &data)?)
        };
        let (m1, s1) = gauss(pa)?;
        let (m2, s2) = gauss(pb)?;
        println!("frechet distance {}", frechet_distance(&m1, &s1, &m2, &s2)?);
    }
    if let Some(p) = &a.met3r {
        let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
        println!("met3r {}", met3r_sequence(&parse_pair_scores(&text)?)?);
    }
    Ok(EXIT_OK)
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Render(a) => cmd_render(cli, a),
        Command::Mask(a) => cmd_mask(cli, a),
        Command::FilterPalette(a) => cmd_filter_palette(cli, a),
        Command::Adapter(a) => cmd_adapter(cli, a),
        Command::Refine => cmd_refine(cli),
        Command::LevelUp => cmd_level_up(cli),
        Command::Run => cmd_run(cli),
        Command::Eval(a) => cmd_eval(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Backend(_) => EXIT_BACKEND as u8,
                _ => 1,
            })
        }
    }
}
