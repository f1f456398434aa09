use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::backend::{
    DirGenerator, DirReconstructor, Generator, HttpGenerator, HttpReconstructor, PollSettings,
    Reconstructor, StubGenerator, StubReconstructor, GENERATOR_URL_ENV, RECONSTRUCTOR_URL_ENV,
    STUB_STRIDE,
};
use super::poses::PoseSampling;
use crate::error::{Error, Result};
use crate::mask::{RefineParams, DEFAULT_ETA_MASK, DEFAULT_K_CLOSE, DEFAULT_K_DILATE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputsConfig {
    pub cameras: PathBuf,
    pub images: Vec<PathBuf>,
    /// Per-view 16-bit depth PNGs, same order as `images`.
    #[serde(default)]
    pub depths: Vec<PathBuf>,
    /// Existing reconstruction to ingest instead of reconstructing from the inputs.
    #[serde(default)]
    pub scene: Option<PathBuf>,
    /// Geometry tokens of the reference view.
    #[serde(default)]
    pub tokens: Option<PathBuf>,
    #[serde(default)]
    pub reference: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub eta_mask: f64,
    pub k_close: usize,
    pub k_dilate: usize,
    /// Follow the complement-closing reading of the refinement formula.
    pub literal: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            eta_mask: DEFAULT_ETA_MASK,
            k_close: DEFAULT_K_CLOSE,
            k_dilate: DEFAULT_K_DILATE,
            literal: false,
        }
    }
}

impl MaskConfig {
    pub fn refine_params(&self) -> RefineParams {
        RefineParams {
            k_close: self.k_close,
            k_dilate: self.k_dilate,
            literal: self.literal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    /// `stub`, `dir` or `http`.
    pub kind: String,
    pub exchange_dir: Option<PathBuf>,
    pub url: Option<String>,
    pub timeout_secs: u64,
    pub poll_ms: u64,
    /// Sampling stride of the stub reconstructor.
    pub stride: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: "stub".into(),
            exchange_dir: None,
            url: None,
            timeout_secs: 600,
            poll_ms: 50,
            stride: STUB_STRIDE,
        }
    }
}

impl BackendConfig {
    fn poll(&self) -> PollSettings {
        PollSettings {
            timeout: Duration::from_secs(self.timeout_secs),
            interval: Duration::from_millis(self.poll_ms.max(1)),
        }
    }

    fn url(&self, env: &str) -> Result<String> {
        std::env::var(env)
            .ok()
            .filter(|u| !u.is_empty())
            .or_else(|| self.url.clone())
            .ok_or_else(|| Error::Config(format!("http backend needs a url (or {env})")))
    }

    fn exchange(&self, out_dir: &Path, default: &str) -> PathBuf {
        self.exchange_dir
            .clone()
            .unwrap_or_else(|| out_dir.join(default))
    }

    pub fn generator(&self, out_dir: &Path) -> Result<Box<dyn Generator>> {
        Ok(match self.kind.as_str() {
            "stub" => Box::new(StubGenerator),
            "dir" => Box::new(DirGenerator {
                root: self.exchange(out_dir, "exchange/generator"),
                poll: self.poll(),
            }),
            "http" => Box::new(HttpGenerator {
                url: self.url(GENERATOR_URL_ENV)?,
                timeout: self.poll().timeout,
            }),
            other => return Err(Error::Config(format!("unknown generator kind '{other}'"))),
        })
    }

    pub fn reconstructor(&self, out_dir: &Path) -> Result<Box<dyn Reconstructor>> {
        Ok(match self.kind.as_str() {
            "stub" => Box::new(StubReconstructor {
                stride: self.stride,
            }),
            "dir" => Box::new(DirReconstructor {
                root: self.exchange(out_dir, "exchange/reconstructor"),
                poll: self.poll(),
            }),
            "http" => Box::new(HttpReconstructor {
                url: self.url(RECONSTRUCTOR_URL_ENV)?,
                timeout: self.poll().timeout,
            }),
            other => {
                return Err(Error::Config(format!(
                    "unknown reconstructor kind '{other}'"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Upper bound on generator requests in flight.
    pub concurrency: usize,
    pub eval: bool,
    pub background: [f32; 3],
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            concurrency: 4,
            eval: true,
            background: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub inputs: InputsConfig,
    #[serde(default)]
    pub poses: PoseSampling,
    #[serde(default)]
    pub mask: MaskConfig,
    #[serde(default)]
    pub generator: BackendConfig,
    #[serde(default)]
    pub reconstructor: BackendConfig,
    #[serde(default)]
    pub run: RunConfig,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Loads a TOML file; relative input paths are resolved against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        cfg.resolve_relative(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let i = &mut self.inputs;
        fix(&mut i.cameras);
        i.images.iter_mut().for_each(fix);
        i.depths.iter_mut().for_each(fix);
        if let Some(p) = i.scene.as_mut() {
            fix(p);
        }
        if let Some(p) = i.tokens.as_mut() {
            fix(p);
        }
        for b in [&mut self.generator, &mut self.reconstructor] {
            if let Some(p) = b.exchange_dir.as_mut() {
                fix(p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let i = &self.inputs;
        if i.images.len() < 2 {
            return Err(Error::Config("need at least two input images".into()));
        }
        if !i.depths.is_empty() && i.depths.len() != i.images.len() {
            return Err(Error::Config(
                "depths must be empty or match images one to one".into(),
            ));
        }
        if i.reference >= i.images.len() {
            return Err(Error::Config(format!(
                "reference index {} out of range",
                i.reference
            )));
        }
        if !(self.mask.eta_mask > 0.0 && self.mask.eta_mask < 1.0) {
            return Err(Error::Config("eta_mask must lie in (0, 1)".into()));
        }
        if self.run.concurrency == 0 {
            return Err(Error::Config("concurrency must be at least 1".into()));
        }
        Ok(())
    }
}
