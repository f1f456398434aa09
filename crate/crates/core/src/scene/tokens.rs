//! Token grids and the `LV3DTOK1` container.
//!
//! Layout: 8-byte magic `LV3DTOK1`, then `rows`, `cols`, `d` as
//! little-endian u32, then `rows * cols * d` little-endian f32 values in
//! row-major (row, col, channel) order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const TOKEN_MAGIC: &[u8; 8] = b"LV3DTOK1";
pub const PATCH_SIZE: usize = 14;
pub const TOKEN_DIM: usize = 768;

/// A lattice of feature vectors, one per `patch_size` x `patch_size` image patch.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    rows: usize,
    cols: usize,
    dim: usize,
    patch_size: usize,
    data: Vec<f32>,
}

impl TokenGrid {
    pub fn zeros(rows: usize, cols: usize, dim: usize) -> Self {
        Self {
            rows,
            cols,
            dim,
            patch_size: PATCH_SIZE,
            data: vec![0.0; rows * cols * dim],
        }
    }

    pub fn from_data(rows: usize, cols: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols * dim {
            return Err(Error::arg(format!(
                "token payload has {} values, expected {rows}x{cols}x{dim}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(i / dim.max(1), "token value is not finite"));
        }
        Ok(Self {
            rows,
            cols,
            dim,
            patch_size: PATCH_SIZE,
            data,
        })
    }

    /// Grid shape for an image, rejecting dimensions not divisible by the patch size.
    pub fn lattice_for(width: usize, height: usize, patch_size: usize) -> Result<(usize, usize)> {
        if patch_size == 0
            || !width.is_multiple_of(patch_size)
            || !height.is_multiple_of(patch_size)
            || width == 0
            || height == 0
        {
            return Err(Error::arg(format!(
                "image {width}x{height} is not divisible into {patch_size}x{patch_size} patches"
            )));
        }
        Ok((height / patch_size, width / patch_size))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// Source image (width, height) implied by the lattice.
    pub fn image_dims(&self) -> (usize, usize) {
        (self.cols * self.patch_size, self.rows * self.patch_size)
    }

    /// Checks that this grid tiles an image of the given size exactly.
    pub fn check_image(&self, width: usize, height: usize) -> Result<()> {
        let (rows, cols) = Self::lattice_for(width, height, self.patch_size)?;
        if (rows, cols) != (self.rows, self.cols) {
            return Err(Error::arg(format!(
                "token grid {}x{} does not match image {width}x{height}",
                self.rows, self.cols
            )));
        }
        Ok(())
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn token(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.cols + col) * self.dim;
        &self.data[start..start + self.dim]
    }
}

pub(crate) fn read_container<R: Read>(
    mut r: R,
    magic: &[u8; 8],
) -> Result<(usize, usize, usize, Vec<f32>)> {
    let mut head = [0u8; 20];
    r.read_exact(&mut head)
        .map_err(|_| Error::format("container header is truncated"))?;
    if &head[..8] != magic {
        return Err(Error::format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&head[..8]),
            String::from_utf8_lossy(magic)
        )));
    }
    let dim =
        |k: usize| u32::from_le_bytes(head[8 + 4 * k..12 + 4 * k].try_into().unwrap()) as usize;
    let (rows, cols, d) = (dim(0), dim(1), dim(2));
    let count = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(d))
        .ok_or_else(|| Error::format("container shape overflows"))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)
        .map_err(|e| Error::format(format!("reading payload: {e}")))?;
    if payload.len() != count * 4 {
        return Err(Error::format(format!(
            "payload is {} bytes, shape {rows}x{cols}x{d} needs {}",
            payload.len(),
            count * 4
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, cols, d, values))
}

pub(crate) fn write_container<W: Write>(
    mut w: W,
    magic: &[u8; 8],
    shape: (usize, usize, usize),
    values: &[f32],
) -> std::io::Result<()> {
    w.write_all(magic)?;
    for v in [shape.0, shape.1, shape.2] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub fn read_token_grid<R: Read>(r: R) -> Result<TokenGrid> {
    let (rows, cols, d, values) = read_container(r, TOKEN_MAGIC)?;
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::data(i / d.max(1), "token value is NaN or infinite"));
    }
    TokenGrid::from_data(rows, cols, d, values)
}

pub fn load_token_grid(path: impl AsRef<Path>) -> Result<TokenGrid> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_token_grid(BufReader::new(f))
}

pub fn write_token_grid<W: Write>(w: W, grid: &TokenGrid) -> Result<()> {
    write_container(w, TOKEN_MAGIC, (grid.rows, grid.cols, grid.dim), &grid.data)
        .map_err(|e| Error::format(format!("writing tokens: {e}")))
}

pub fn save_token_grid(grid: &TokenGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_token_grid(BufWriter::new(f), grid)
}

/// Loads an `LV3DTOK1` file as a flat `(rows * cols) x d` matrix, e.g. ingested embeddings.
pub fn load_f32_container(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f32>)> {
    let grid = load_token_grid(path)?;
    let n = grid.len();
    let d = grid.dim();
    Ok((n, d, grid.into_data()))
}
