use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{PATCH_SIZE, TOKEN_DIM};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"LV3DADW1";
pub const PYRAMID_MAGIC: &[u8; 8] = b"LV3DPYR1";

/// Widths of the denoiser encoder levels the pyramid must line up with.
pub const DEFAULT_CHANNELS: [usize; 4] = [320, 640, 1280, 1280];
pub const TOY_CHANNELS: [usize; 4] = [8, 16, 32, 32];
/// Residual-branch scale at initialization.
pub const LAYER_SCALE_INIT: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub channels: [usize; 4],
    pub token_dim: usize,
    pub patch_size: usize,
    /// Resolution the fused condition is resized to before projection.
    pub condition_size: usize,
    pub projection_stride: usize,
    pub dw_kernel: usize,
    pub expansion: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            channels: DEFAULT_CHANNELS,
            token_dim: TOKEN_DIM,
            patch_size: PATCH_SIZE,
            condition_size: 512,
            projection_stride: 8,
            dw_kernel: 7,
            expansion: 4,
        }
    }
}

impl AdapterConfig {
    pub fn toy() -> Self {
        Self {
            channels: TOY_CHANNELS,
            ..Self::default()
        }
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0)
            || self.token_dim == 0
            || self.patch_size == 0
            || self.expansion == 0
        {
            return Err(Error::arg("adapter widths must be positive"));
        }
        if self.dw_kernel.is_multiple_of(2) {
            return Err(Error::arg("depthwise kernel must be odd"));
        }
        let s = self.projection_stride;
        if s == 0 || !self.condition_size.is_multiple_of(s * 8) {
            return Err(Error::arg(format!(
                "condition size {} must be divisible by 8 x stride {s} for three halvings",
                self.condition_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvNextBlock {
    pub dw_weight: Array3<f32>,
    pub dw_bias: Array1<f32>,
    pub ln_gamma: Array1<f32>,
    pub ln_beta: Array1<f32>,
    pub pw1_weight: Array2<f32>,
    pub pw1_bias: Array1<f32>,
    pub pw2_weight: Array2<f32>,
    pub pw2_bias: Array1<f32>,
    pub layer_scale: Array1<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub entry_weight: Array4<f32>,
    pub entry_bias: Array1<f32>,
    pub blocks: [ConvNextBlock; 2],
}

/// All adapter parameters. Token maps use the row-vector convention,
/// e.g. `Q = L * wq` with `L` holding one token per row.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterWeights {
    pub config: AdapterConfig,
    pub patch_weight: Array2<f32>,
    pub patch_bias: Array1<f32>,
    pub wq: Array2<f32>,
    pub wk: Array2<f32>,
    pub wv: Array2<f32>,
    pub unpatch_weight: Array2<f32>,
    pub unpatch_bias: Array1<f32>,
    pub proj_weight: Array4<f32>,
    pub proj_bias: Array1<f32>,
    pub stages: [Stage; 4],
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: &[usize], fan_in: usize) -> ArrayD<f32> {
        let dist = Normal::new(0.0f32, 1.0 / (fan_in as f32).sqrt()).expect("positive std");
        ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(&mut self.rng))
    }

    fn mat(&mut self, r: usize, c: usize, fan_in: usize) -> Array2<f32> {
        self.normal(&[r, c], fan_in).into_dimensionality().unwrap()
    }

    fn conv(&mut self, o: usize, i: usize, k: usize) -> Array4<f32> {
        self.normal(&[o, i, k, k], i * k * k)
            .into_dimensionality()
            .unwrap()
    }
}

impl AdapterWeights {
    /// Seeded construction; the unpatch map starts at zero so the geometry
    /// residual is the identity until trained.
    pub fn init(config: AdapterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut g = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let d = config.token_dim;
        let pl = config.patch_len();
        let patch_weight = g.mat(pl, d, pl);
        let wq = g.mat(d, d, d);
        let wk = g.mat(d, d, d);
        let wv = g.mat(d, d, d);
        let c1 = config.channels[0];
        let proj_weight = g.conv(c1, 3, config.projection_stride);
        let mut prev = c1;
        let stage = |g: &mut Init, cin: usize, c: usize| {
            let k = config.dw_kernel;
            let e = config.expansion * c;
            let entry_weight = g.conv(c, cin, 3);
            let mut block = || ConvNextBlock {
                dw_weight: g.normal(&[c, k, k], k * k).into_dimensionality().unwrap(),
                dw_bias: Array1::zeros(c),
                ln_gamma: Array1::ones(c),
                ln_beta: Array1::zeros(c),
                pw1_weight: g.mat(e, c, c),
                pw1_bias: Array1::zeros(e),
                pw2_weight: g.mat(c, e, e),
                pw2_bias: Array1::zeros(c),
                layer_scale: Array1::from_elem(c, LAYER_SCALE_INIT),
            };
            let blocks = [block(), block()];
            Stage {
                entry_weight,
                entry_bias: Array1::zeros(c),
                blocks,
            }
        };
        let stages = config.channels.map(|c| {
            let s = stage(&mut g, prev, c);
            prev = c;
            s
        });
        Ok(Self {
            config,
            patch_weight,
            patch_bias: Array1::zeros(d),
            wq,
            wk,
            wv,
            unpatch_weight: Array2::zeros((d, pl)),
            unpatch_bias: Array1::zeros(pl),
            proj_weight,
            proj_bias: Array1::zeros(c1),
            stages,
        })
    }

    fn named(&self) -> Vec<(String, ArrayD<f32>)> {
        let mut out = vec![
            (
                "patch.weight".to_string(),
                self.patch_weight.clone().into_dyn(),
            ),
            ("patch.bias".into(), self.patch_bias.clone().into_dyn()),
            ("attn.wq".into(), self.wq.clone().into_dyn()),
            ("attn.wk".into(), self.wk.clone().into_dyn()),
            ("attn.wv".into(), self.wv.clone().into_dyn()),
            (
                "unpatch.weight".into(),
                self.unpatch_weight.clone().into_dyn(),
            ),
            ("unpatch.bias".into(), self.unpatch_bias.clone().into_dyn()),
            ("proj.weight".into(), self.proj_weight.clone().into_dyn()),
            ("proj.bias".into(), self.proj_bias.clone().into_dyn()),
        ];
        for (si, st) in self.stages.iter().enumerate() {
            let p = format!("stage{}", si + 1);
            out.push((
                format!("{p}.entry.weight"),
                st.entry_weight.clone().into_dyn(),
            ));
            out.push((format!("{p}.entry.bias"), st.entry_bias.clone().into_dyn()));
            for (bi, b) in st.blocks.iter().enumerate() {
                let q = format!("{p}.block{}", bi + 1);
                for (n, t) in [
                    ("dw.weight", b.dw_weight.clone().into_dyn()),
                    ("dw.bias", b.dw_bias.clone().into_dyn()),
                    ("ln.gamma", b.ln_gamma.clone().into_dyn()),
                    ("ln.beta", b.ln_beta.clone().into_dyn()),
                    ("pw1.weight", b.pw1_weight.clone().into_dyn()),
                    ("pw1.bias", b.pw1_bias.clone().into_dyn()),
                    ("pw2.weight", b.pw2_weight.clone().into_dyn()),
                    ("pw2.bias", b.pw2_bias.clone().into_dyn()),
                    ("scale", b.layer_scale.clone().into_dyn()),
                ] {
                    out.push((format!("{q}.{n}"), t));
                }
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Name of the first tensor holding a NaN or infinite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.named()
            .into_iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        write_archive(w, WEIGHTS_MAGIC, &self.named())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(BufWriter::new(f))
    }

    /// Reads a snapshot; the stage plan is recovered from the tensor shapes.
    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut map: BTreeMap<String, ArrayD<f32>> =
            read_archive(r, WEIGHTS_MAGIC)?.into_iter().collect();
        let mut take = |name: &str| {
            map.remove(name)
                .ok_or_else(|| Error::format(format!("missing tensor '{name}'")))
        };
        let patch_weight: Array2<f32> = dims(take("patch.weight")?, "patch.weight")?;
        let proj_weight: Array4<f32> = dims(take("proj.weight")?, "proj.weight")?;
        let (pl, d) = patch_weight.dim();
        let patch_size = ((pl / 3) as f64).sqrt().round() as usize;
        let mut stages = Vec::with_capacity(4);
        let mut channels = [0; 4];
        let mut dw_kernel = 7;
        let mut expansion = 4;
        for si in 0..4 {
            let p = format!("stage{}", si + 1);
            let entry_weight: Array4<f32> =
                dims(take(&format!("{p}.entry.weight"))?, "entry.weight")?;
            channels[si] = entry_weight.dim().0;
            let mut blocks = Vec::with_capacity(2);
            for bi in 0..2 {
                let q = format!("{p}.block{}", bi + 1);
                let mut t = |n: &str| take(&format!("{q}.{n}"));
                let b = ConvNextBlock {
                    dw_weight: dims(t("dw.weight")?, "dw.weight")?,
                    dw_bias: dims(t("dw.bias")?, "dw.bias")?,
                    ln_gamma: dims(t("ln.gamma")?, "ln.gamma")?,
                    ln_beta: dims(t("ln.beta")?, "ln.beta")?,
                    pw1_weight: dims(t("pw1.weight")?, "pw1.weight")?,
                    pw1_bias: dims(t("pw1.bias")?, "pw1.bias")?,
                    pw2_weight: dims(t("pw2.weight")?, "pw2.weight")?,
                    pw2_bias: dims(t("pw2.bias")?, "pw2.bias")?,
                    layer_scale: dims(t("scale")?, "scale")?,
                };
                dw_kernel = b.dw_weight.dim().1;
                expansion = b.pw1_weight.nrows() / channels[si].max(1);
                blocks.push(b);
            }
            stages.push(Stage {
                entry_weight,
                entry_bias: dims(take(&format!("{p}.entry.bias"))?, "entry.bias")?,
                blocks: blocks.try_into().unwrap(),
            });
        }
        let w = Self {
            config: AdapterConfig {
                channels,
                token_dim: d,
                patch_size,
                projection_stride: proj_weight.dim().2,
                dw_kernel,
                expansion,
                ..AdapterConfig::default()
            },
            patch_weight,
            patch_bias: dims(take("patch.bias")?, "patch.bias")?,
            wq: dims(take("attn.wq")?, "attn.wq")?,
            wk: dims(take("attn.wk")?, "attn.wk")?,
            wv: dims(take("attn.wv")?, "attn.wv")?,
            unpatch_weight: dims(take("unpatch.weight")?, "unpatch.weight")?,
            unpatch_bias: dims(take("unpatch.bias")?, "unpatch.bias")?,
            proj_weight,
            proj_bias: dims(take("proj.bias")?, "proj.bias")?,
            stages: stages.try_into().unwrap(),
        };
        if let Some(extra) = map.keys().next() {
            return Err(Error::format(format!("unexpected tensor '{extra}'")));
        }
        w.check_shapes()?;
        Ok(w)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(f))
    }

    /// Verifies every tensor against the stage plan and that all values are finite.
    pub fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let (d, pl) = (c.token_dim, c.patch_len());
        let bad = |what: &str| {
            Err(Error::format(format!(
                "tensor '{what}' does not fit the stage plan"
            )))
        };
        if self.patch_weight.dim() != (pl, d) || self.patch_bias.len() != d {
            return bad("patch");
        }
        for (n, m) in [
            ("attn.wq", &self.wq),
            ("attn.wk", &self.wk),
            ("attn.wv", &self.wv),
        ] {
            if m.dim() != (d, d) {
                return bad(n);
            }
        }
        if self.unpatch_weight.dim() != (d, pl) || self.unpatch_bias.len() != pl {
            return bad("unpatch");
        }
        let s = c.projection_stride;
        if self.proj_weight.dim() != (c.channels[0], 3, s, s)
            || self.proj_bias.len() != c.channels[0]
        {
            return bad("proj");
        }
        let mut prev = c.channels[0];
        for (si, st) in self.stages.iter().enumerate() {
            let ch = c.channels[si];
            let e = ch * c.expansion;
            let k = c.dw_kernel;
            if st.entry_weight.dim() != (ch, prev, 3, 3) || st.entry_bias.len() != ch {
                return bad(&format!("stage{}.entry", si + 1));
            }
            for b in &st.blocks {
                let ok = b.dw_weight.dim() == (ch, k, k)
                    && b.dw_bias.len() == ch
                    && b.ln_gamma.len() == ch
                    && b.ln_beta.len() == ch
                    && b.pw1_weight.dim() == (e, ch)
                    && b.pw1_bias.len() == e
                    && b.pw2_weight.dim() == (ch, e)
                    && b.pw2_bias.len() == ch
                    && b.layer_scale.len() == ch;
                if !ok {
                    return bad(&format!("stage{} block", si + 1));
                }
            }
            prev = ch;
        }
        if let Some(n) = self.first_non_finite() {
            return Err(Error::Numeric(format!(
                "tensor '{n}' has non-finite values"
            )));
        }
        Ok(())
    }
}

fn dims<D: ndarray::Dimension>(t: ArrayD<f32>, name: &str) -> Result<ndarray::Array<f32, D>> {
    t.into_dimensionality::<D>()
        .map_err(|_| Error::format(format!("tensor '{name}' has the wrong rank")))
}

/// Named tensor archive: magic, u32 count, then per tensor a u32-prefixed
/// UTF-8 name, u32 rank, u32 dims, and little-endian f32 values.
pub fn write_archive<W: Write>(
    mut w: W,
    magic: &[u8; 8],
    tensors: &[(String, ArrayD<f32>)],
) -> Result<()> {
    let io = |e: std::io::Error| Error::format(format!("writing archive: {e}"));
    w.write_all(magic).map_err(io)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())
        .map_err(io)?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())
            .map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(t.ndim() as u32).to_le_bytes()).map_err(io)?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
        }
        for v in t.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_archive<R: Read>(mut r: R, magic: &[u8; 8]) -> Result<Vec<(String, ArrayD<f32>)>> {
    let trunc = |_| Error::format("archive is truncated");
    let mut head = [0u8; 8];
    r.read_exact(&mut head).map_err(trunc)?;
    if &head != magic {
        return Err(Error::format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&head),
            String::from_utf8_lossy(magic)
        )));
    }
    let u32_at = |r: &mut R| -> Result<usize> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(trunc)?;
        Ok(u32::from_le_bytes(b) as usize)
    };
    let count = u32_at(&mut r)?;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = u32_at(&mut r)?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(trunc)?;
        let name =
            String::from_utf8(name).map_err(|_| Error::format("tensor name is not UTF-8"))?;
        let rank = u32_at(&mut r)?;
        let shape = (0..rank)
            .map(|_| u32_at(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format("tensor shape overflows"))?;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes).map_err(trunc)?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = ArrayD::from_shape_vec(IxDyn(&shape), values).expect("length checked");
        out.push((name, t));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)
        .map_err(|e| Error::format(e.to_string()))?
        != 0
    {
        return Err(Error::format("trailing bytes after last tensor"));
    }
    Ok(out)
}
