//! Generator and reconstructor clients: in-process stubs, a directory
//! exchange protocol, and multipart HTTP.
//!
//! Directory exchange, generator side: the client creates
//! `<root>/<request_id>/` holding `coarse.png`, `mask.png`, `reference.png`,
//! `tokens.bin` and, written last, `request.json`. The backend answers with
//! `refined.png` followed by an empty `done` file, or an `error` file whose
//! text is the failure message.
//!
//! Reconstructor side: `<root>/recon-<hash>/request.json` lists the views in
//! dispatch order; view `i` lives in `views/<i>/` as `image.png`,
//! `camera.txt` and optionally `depth.png`. The backend writes `scene.ply`
//! and `done` (or `error`).

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::scene::{
    load_camera_set, load_token_grid, read_scene_ply, save_camera_set, save_token_grid,
    write_token_grid, CameraPose, DepthMap, GaussianPrimitive, GaussianScene, TokenGrid, ViewImage,
};

/// Gray used when a view has no known pixel to grow from.
pub const STUB_FILL: [f32; 3] = [0.5, 0.5, 0.5];
pub const STUB_STRIDE: usize = 4;
pub const STUB_SCALE_FACTOR: f64 = 0.7;
pub const STUB_OPACITY: f64 = 0.9;

pub const GENERATOR_URL_ENV: &str = "GSREFINE_GENERATOR_URL";
pub const RECONSTRUCTOR_URL_ENV: &str = "GSREFINE_RECONSTRUCTOR_URL";

#[derive(Debug, Clone)]
pub struct GeneratorRequest {
    pub request_id: String,
    pub coarse: ViewImage,
    /// Already refined; `true` marks pixels to generate.
    pub mask: BinaryMask,
    pub reference: ViewImage,
    pub tokens: TokenGrid,
    pub pose: CameraPose,
    pub seed: u64,
}

impl GeneratorRequest {
    pub fn validate(&self) -> Result<()> {
        if self.coarse.dims() != self.mask.dims() {
            return Err(Error::arg(format!(
                "coarse view {:?} and mask {:?} differ in size",
                self.coarse.dims(),
                self.mask.dims()
            )));
        }
        if self.coarse.dims() != (self.pose.width, self.pose.height) {
            return Err(Error::arg("coarse view does not match its camera size"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RequestMeta {
    request_id: String,
    seed: u64,
    width: usize,
    height: usize,
    camera: String,
}

pub trait Generator: Send + Sync {
    fn generate(&self, req: &GeneratorRequest) -> Result<ViewImage>;
}

/// One view handed to a reconstructor.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconView {
    pub label: String,
    pub image: ViewImage,
    pub depth: Option<DepthMap>,
    pub pose: CameraPose,
}

impl ReconView {
    /// Hash of the quantized pixels and the pose, used for deduplication.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.image.quantized_bytes());
        h.update(pose_bytes(&self.pose));
        hex::encode(h.finalize())
    }
}

pub(crate) fn pose_bytes(p: &CameraPose) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * 16 + 16);
    for v in p
        .rotation
        .iter()
        .chain(p.translation.iter())
        .chain([p.fx, p.fy, p.cx, p.cy].iter())
    {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(p.width as u64).to_le_bytes());
    out.extend_from_slice(&(p.height as u64).to_le_bytes());
    out
}

pub trait Reconstructor: Send + Sync {
    fn reconstruct(&self, views: &[ReconView]) -> Result<GaussianScene>;
}

/// Drops views whose content hash has been seen before; order is kept.
pub fn dedup_views(views: &[ReconView]) -> Vec<ReconView> {
    let mut seen = HashSet::new();
    views
        .iter()
        .filter(|v| seen.insert(v.content_hash()))
        .cloned()
        .collect()
}

/// Onion-peel fill of `c`-channel values: every sweep sets each unknown pixel
/// with a known 8-neighbour to the mean of those neighbours, all at once,
/// until nothing is left or no pixel can grow. Returns `false` when no pixel
/// was known to begin with.
pub fn onion_peel_fill(
    values: &mut [f32],
    known: &mut [bool],
    width: usize,
    height: usize,
    c: usize,
) -> bool {
    assert_eq!(values.len(), known.len() * c);
    if !known.iter().any(|k| *k) {
        return false;
    }
    let mut frontier: Vec<(usize, Vec<f32>)> = Vec::new();
    loop {
        frontier.clear();
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                if known[i] {
                    continue;
                }
                let mut acc = vec![0.0f32; c];
                let mut n = 0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if (dx, dy) == (0, 0)
                            || nx < 0
                            || ny < 0
                            || nx >= width as i64
                            || ny >= height as i64
                        {
                            continue;
                        }
                        let j = ny as usize * width + nx as usize;
                        if known[j] {
                            for k in 0..c {
                                acc[k] += values[j * c + k];
                            }
                            n += 1;
                        }
                    }
                }
                if n > 0 {
                    acc.iter_mut().for_each(|v| *v /= n as f32);
                    frontier.push((i, acc));
                }
            }
        }
        if frontier.is_empty() {
            return true;
        }
        for (i, v) in frontier.drain(..) {
            values[i * c..(i + 1) * c].copy_from_slice(&v);
            known[i] = true;
        }
    }
}

/// Deterministic stand-in for the diffusion model.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubGenerator;

impl Generator for StubGenerator {
    fn generate(&self, req: &GeneratorRequest) -> Result<ViewImage> {
        req.validate()?;
        let (w, h) = req.coarse.dims();
        let mut values: Vec<f32> = req.coarse.pixels().iter().flatten().copied().collect();
        let mut known: Vec<bool> = req.mask.bits().iter().map(|m| !m).collect();
        if !onion_peel_fill(&mut values, &mut known, w, h, 3) {
            return Ok(ViewImage::new(w, h, STUB_FILL));
        }
        let pixels = values.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
        ViewImage::from_pixels(w, h, pixels)
    }
}

/// Back-projects every `stride`-th pixel of each view with depth to an
/// isotropic Gaussian whose sigma is `0.7` of the sample spacing at that depth.
#[derive(Debug, Clone, Copy)]
pub struct StubReconstructor {
    pub stride: usize,
}

impl Default for StubReconstructor {
    fn default() -> Self {
        Self {
            stride: STUB_STRIDE,
        }
    }
}

impl Reconstructor for StubReconstructor {
    fn reconstruct(&self, views: &[ReconView]) -> Result<GaussianScene> {
        let s = self.stride.max(1);
        let mut prims = Vec::new();
        for v in views {
            let Some(depth) = &v.depth else { continue };
            if depth.dims() != v.image.dims() {
                return Err(Error::arg(format!(
                    "view '{}': depth and image sizes differ",
                    v.label
                )));
            }
            let (w, h) = v.image.dims();
            for y in (s / 2..h).step_by(s) {
                for x in (s / 2..w).step_by(s) {
                    let d = depth.get(x, y) as f64;
                    if d <= 0.0 {
                        continue;
                    }
                    let p = v.pose.unproject(x as f64, y as f64, d);
                    let sigma = s as f64 * STUB_SCALE_FACTOR * d / v.pose.fx;
                    let c = v.image.get(x, y).map(|c| c as f64);
                    prims.push(GaussianPrimitive::isotropic(
                        [p.x, p.y, p.z],
                        sigma,
                        STUB_OPACITY,
                        c,
                    ));
                }
            }
        }
        let mut h = Sha256::new();
        for v in views {
            h.update(v.content_hash());
        }
        Ok(GaussianScene::new(
            format!("stub-{}", &hex::encode(h.finalize())[..12]),
            prims,
        ))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn camera_text(p: &CameraPose) -> String {
    crate::scene::write_camera_set(std::slice::from_ref(p))
}

#[derive(Debug, Clone)]
pub struct PollSettings {
    pub timeout: Duration,
    pub interval: Duration,
}

impl Default for PollSettings {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(600),
            interval: Duration::from_millis(50),
        }
    }
}

/// Waits for `done` or `error` in `dir`.
fn wait_for(dir: &Path, poll: &PollSettings) -> Result<()> {
    let start = Instant::now();
    loop {
        if dir.join("done").exists() {
            return Ok(());
        }
        let err = dir.join("error");
        if err.exists() {
            let msg = std::fs::read_to_string(&err).unwrap_or_default();
            return Err(Error::Backend(format!("{}: {}", dir.display(), msg.trim())));
        }
        if start.elapsed() > poll.timeout {
            return Err(Error::Backend(format!(
                "timed out waiting on {}",
                dir.display()
            )));
        }
        std::thread::sleep(poll.interval);
    }
}

#[derive(Debug, Clone)]
pub struct DirGenerator {
    pub root: PathBuf,
    pub poll: PollSettings,
}

impl DirGenerator {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            poll: PollSettings::default(),
        }
    }
}

pub fn write_generator_request(dir: &Path, req: &GeneratorRequest) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for f in ["done", "error", "refined.png"] {
        let _ = std::fs::remove_file(dir.join(f));
    }
    req.coarse.save_png(dir.join("coarse.png"))?;
    req.mask.save_png(dir.join("mask.png"))?;
    req.reference.save_png(dir.join("reference.png"))?;
    save_token_grid(&req.tokens, dir.join("tokens.bin"))?;
    let meta = RequestMeta {
        request_id: req.request_id.clone(),
        seed: req.seed,
        width: req.coarse.width(),
        height: req.coarse.height(),
        camera: camera_text(&req.pose),
    };
    write_file(
        &dir.join("request.json"),
        serde_json::to_string_pretty(&meta)?.as_bytes(),
    )
}

pub fn read_generator_request(dir: &Path) -> Result<GeneratorRequest> {
    let meta_path = dir.join("request.json");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: RequestMeta = serde_json::from_str(&text)?;
    let pose = crate::scene::parse_camera_set(&meta.camera)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::format("request.json carries no camera"))?;
    let req = GeneratorRequest {
        request_id: meta.request_id,
        coarse: ViewImage::load_png(dir.join("coarse.png"))?,
        mask: BinaryMask::load_png(dir.join("mask.png"))?,
        reference: ViewImage::load_png(dir.join("reference.png"))?,
        tokens: load_token_grid(dir.join("tokens.bin"))?,
        pose,
        seed: meta.seed,
    };
    req.validate()?;
    Ok(req)
}

/// Answers every request under `root` that has no `done`/`error` yet.
/// Returns how many were handled. Lets any in-process generator act as a
/// directory backend.
pub fn serve_pending_requests(root: &Path, generator: &dyn Generator) -> Result<usize> {
    let mut handled = 0;
    let Ok(entries) = std::fs::read_dir(root) else {
        return Ok(0);
    };
    let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    dirs.sort();
    for dir in dirs {
        if !dir.join("request.json").exists()
            || dir.join("done").exists()
            || dir.join("error").exists()
        {
            continue;
        }
        match read_generator_request(&dir).and_then(|r| generator.generate(&r)) {
            Ok(img) => {
                img.save_png(dir.join("refined.png"))?;
                write_file(&dir.join("done"), b"")?;
            }
            Err(e) => write_file(&dir.join("error"), e.to_string().as_bytes())?,
        }
        handled += 1;
    }
    Ok(handled)
}

impl Generator for DirGenerator {
    fn generate(&self, req: &GeneratorRequest) -> Result<ViewImage> {
        req.validate()?;
        let dir = self.root.join(&req.request_id);
        write_generator_request(&dir, req)?;
        wait_for(&dir, &self.poll)?;
        let img = ViewImage::load_png(dir.join("refined.png"))?;
        if img.dims() != req.coarse.dims() {
            return Err(Error::Backend(format!(
                "refined view is {:?}, expected {:?}",
                img.dims(),
                req.coarse.dims()
            )));
        }
        Ok(img)
    }
}

#[derive(Debug, Clone)]
pub struct HttpGenerator {
    pub url: String,
    pub timeout: Duration,
}

fn http_client(timeout: Duration) -> Result<reqwest::blocking::Client> {
    reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| Error::Backend(format!("building HTTP client: {e}")))
}

fn part(bytes: Vec<u8>, name: &str, mime: &str) -> Result<reqwest::blocking::multipart::Part> {
    reqwest::blocking::multipart::Part::bytes(bytes)
        .file_name(name.to_string())
        .mime_str(mime)
        .map_err(|e| Error::Backend(e.to_string()))
}

fn post(
    client: &reqwest::blocking::Client,
    url: &str,
    form: reqwest::blocking::multipart::Form,
) -> Result<Vec<u8>> {
    let resp = client
        .post(url)
        .multipart(form)
        .send()
        .map_err(|e| Error::Backend(format!("POST {url}: {e}")))?;
    let status = resp.status();
    let body = resp
        .bytes()
        .map_err(|e| Error::Backend(format!("reading response from {url}: {e}")))?;
    if !status.is_success() {
        return Err(Error::Backend(format!(
            "POST {url}: HTTP {status}: {}",
            String::from_utf8_lossy(&body).trim()
        )));
    }
    Ok(body.to_vec())
}

impl Generator for HttpGenerator {
    fn generate(&self, req: &GeneratorRequest) -> Result<ViewImage> {
        req.validate()?;
        let meta = RequestMeta {
            request_id: req.request_id.clone(),
            seed: req.seed,
            width: req.coarse.width(),
            height: req.coarse.height(),
            camera: camera_text(&req.pose),
        };
        let mut tokens = Vec::new();
        write_token_grid(&mut tokens, &req.tokens)?;
        let form = reqwest::blocking::multipart::Form::new()
            .part(
                "request",
                part(
                    serde_json::to_vec(&meta)?,
                    "request.json",
                    "application/json",
                )?,
            )
            .part(
                "coarse",
                part(req.coarse.encode_png()?, "coarse.png", "image/png")?,
            )
            .part(
                "mask",
                part(req.mask.encode_png()?, "mask.png", "image/png")?,
            )
            .part(
                "reference",
                part(req.reference.encode_png()?, "reference.png", "image/png")?,
            )
            .part(
                "tokens",
                part(tokens, "tokens.bin", "application/octet-stream")?,
            );
        let body = post(&http_client(self.timeout)?, &self.url, form)?;
        let img = ViewImage::decode_png(&body)
            .map_err(|e| Error::Backend(format!("bad refined image: {e}")))?;
        if img.dims() != req.coarse.dims() {
            return Err(Error::Backend(format!(
                "refined view is {:?}, expected {:?}",
                img.dims(),
                req.coarse.dims()
            )));
        }
        Ok(img)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ReconMeta {
    views: Vec<ReconViewMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ReconViewMeta {
    label: String,
    dir: String,
    has_depth: bool,
}

fn recon_key(views: &[ReconView]) -> String {
    let mut h = Sha256::new();
    for v in views {
        h.update(v.content_hash());
    }
    hex::encode(h.finalize())[..16].to_string()
}

pub fn write_recon_request(dir: &Path, views: &[ReconView]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for f in ["done", "error", "scene.ply"] {
        let _ = std::fs::remove_file(dir.join(f));
    }
    let mut metas = Vec::with_capacity(views.len());
    for (i, v) in views.iter().enumerate() {
        let rel = format!("views/{i:03}");
        let vd = dir.join(&rel);
        std::fs::create_dir_all(&vd).map_err(|e| Error::io(&vd, e))?;
        v.image.save_png(vd.join("image.png"))?;
        save_camera_set(std::slice::from_ref(&v.pose), vd.join("camera.txt"))?;
        if let Some(d) = &v.depth {
            d.save_png(vd.join("depth.png"))?;
        }
        metas.push(ReconViewMeta {
            label: v.label.clone(),
            dir: rel,
            has_depth: v.depth.is_some(),
        });
    }
    let meta = ReconMeta { views: metas };
    write_file(
        &dir.join("request.json"),
        serde_json::to_string_pretty(&meta)?.as_bytes(),
    )
}

pub fn read_recon_request(dir: &Path) -> Result<Vec<ReconView>> {
    let path = dir.join("request.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: ReconMeta = serde_json::from_str(&text)?;
    meta.views
        .into_iter()
        .map(|m| {
            let vd = dir.join(&m.dir);
            let pose = load_camera_set(vd.join("camera.txt"))?
                .into_iter()
                .next()
                .ok_or_else(|| Error::format(format!("{}: empty camera file", vd.display())))?;
            Ok(ReconView {
                label: m.label,
                image: ViewImage::load_png(vd.join("image.png"))?,
                depth: if m.has_depth {
                    Some(DepthMap::load_png(vd.join("depth.png"))?)
                } else {
                    None
                },
                pose,
            })
        })
        .collect()
}

/// Reconstructor counterpart of [`serve_pending_requests`].
pub fn serve_pending_reconstructions(root: &Path, recon: &dyn Reconstructor) -> Result<usize> {
    let Ok(entries) = std::fs::read_dir(root) else {
        return Ok(0);
    };
    let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    dirs.sort();
    let mut handled = 0;
    for dir in dirs {
        if !dir.join("request.json").exists()
            || dir.join("done").exists()
            || dir.join("error").exists()
        {
            continue;
        }
        match read_recon_request(&dir).and_then(|v| recon.reconstruct(&v)) {
            Ok(scene) => {
                crate::scene::save_scene_ply(&scene, dir.join("scene.ply"))?;
                write_file(&dir.join("done"), b"")?;
            }
            Err(e) => write_file(&dir.join("error"), e.to_string().as_bytes())?,
        }
        handled += 1;
    }
    Ok(handled)
}

#[derive(Debug, Clone)]
pub struct DirReconstructor {
    pub root: PathBuf,
    pub poll: PollSettings,
}

impl DirReconstructor {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            poll: PollSettings::default(),
        }
    }
}

impl Reconstructor for DirReconstructor {
    fn reconstruct(&self, views: &[ReconView]) -> Result<GaussianScene> {
        let dir = self.root.join(format!("recon-{}", recon_key(views)));
        write_recon_request(&dir, views)?;
        wait_for(&dir, &self.poll)?;
        let path = dir.join("scene.ply");
        let f = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        read_scene_ply(std::io::BufReader::new(f), &recon_key(views))
    }
}

#[derive(Debug, Clone)]
pub struct HttpReconstructor {
    pub url: String,
    pub timeout: Duration,
}

impl Reconstructor for HttpReconstructor {
    fn reconstruct(&self, views: &[ReconView]) -> Result<GaussianScene> {
        let mut form = reqwest::blocking::multipart::Form::new();
        let mut metas = Vec::with_capacity(views.len());
        for (i, v) in views.iter().enumerate() {
            let key = format!("view{i:03}");
            form = form
                .part(
                    format!("{key}_image"),
                    part(v.image.encode_png()?, "image.png", "image/png")?,
                )
                .part(
                    format!("{key}_camera"),
                    part(
                        camera_text(&v.pose).into_bytes(),
                        "camera.txt",
                        "text/plain",
                    )?,
                );
            if let Some(d) = &v.depth {
                form = form.part(
                    format!("{key}_depth"),
                    part(d.encode_png()?, "depth.png", "image/png")?,
                );
            }
            metas.push(ReconViewMeta {
                label: v.label.clone(),
                dir: key,
                has_depth: v.depth.is_some(),
            });
        }
        form = form.part(
            "request",
            part(
                serde_json::to_vec(&ReconMeta { views: metas })?,
                "request.json",
                "application/json",
            )?,
        );
        let body = post(&http_client(self.timeout)?, &self.url, form)?;
        read_scene_ply(body.as_slice(), &recon_key(views))
    }
}
