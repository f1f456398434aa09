use rayon::prelude::*;

use crate::scene::{CameraPose, GaussianScene};

use super::{
    contribution_alpha, project_scene, Canvas, PixelAccum, Projected2D, RenderOptions, RenderOutput,
};

/// Sorts by view depth, breaking ties by primitive index.
pub(crate) fn depth_order(projected: &mut [Projected2D]) {
    projected.sort_by(|a, b| {
        a.view_depth
            .total_cmp(&b.view_depth)
            .then(a.index.cmp(&b.index))
    });
}

struct TileGrid {
    size: usize,
    cols: usize,
    rows: usize,
}

impl TileGrid {
    fn new(width: usize, height: usize, size: usize) -> Self {
        let size = size.max(1);
        Self {
            size,
            cols: width.div_ceil(size),
            rows: height.div_ceil(size),
        }
    }

    /// Tile lists of indices into `sorted`; each list inherits the global depth order.
    fn bin(&self, sorted: &[Projected2D], width: usize, height: usize) -> Vec<Vec<u32>> {
        let mut tiles = vec![Vec::new(); self.cols * self.rows];
        for (k, p) in sorted.iter().enumerate() {
            let Some((x0, y0, x1, y1)) = p.pixel_bounds(width, height) else {
                continue;
            };
            for ty in y0 / self.size..=y1 / self.size {
                for tx in x0 / self.size..=x1 / self.size {
                    tiles[ty * self.cols + tx].push(k as u32);
                }
            }
        }
        tiles
    }
}

/// Tiled rasterization: global depth sort, per-tile binning, parallel tile compositing.
pub fn render(scene: &GaussianScene, cam: &CameraPose, opts: &RenderOptions) -> RenderOutput {
    let (width, height) = (cam.width, cam.height);
    let (mut projected, stats) = project_scene(scene, cam, opts);
    depth_order(&mut projected);

    let grid = TileGrid::new(width, height, opts.tile_size);
    let bins = grid.bin(&projected, width, height);

    let tiles: Vec<(usize, Vec<PixelAccum>)> = bins
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            (
                t,
                composite_tile(&grid, t, list, &projected, width, height, opts),
            )
        })
        .collect();

    let mut canvas = Canvas::new(width, height);
    for (t, pixels) in tiles {
        let (tx, ty) = (t % grid.cols, t / grid.cols);
        let x_start = tx * grid.size;
        let y_start = ty * grid.size;
        let x_end = (x_start + grid.size).min(width);
        let tile_w = x_end - x_start;
        for (k, acc) in pixels.iter().enumerate() {
            canvas.put(
                x_start + k % tile_w,
                y_start + k / tile_w,
                acc,
                &opts.background,
            );
        }
    }
    canvas.finish(stats)
}

fn composite_tile(
    grid: &TileGrid,
    tile: usize,
    list: &[u32],
    projected: &[Projected2D],
    width: usize,
    height: usize,
    opts: &RenderOptions,
) -> Vec<PixelAccum> {
    let (tx, ty) = (tile % grid.cols, tile / grid.cols);
    let x_start = tx * grid.size;
    let y_start = ty * grid.size;
    let x_end = (x_start + grid.size).min(width);
    let y_end = (y_start + grid.size).min(height);
    let mut out = Vec::with_capacity((x_end - x_start) * (y_end - y_start));
    for y in y_start..y_end {
        for x in x_start..x_end {
            let mut acc = PixelAccum::new();
            let (px, py) = (x as f64, y as f64);
            for &k in list {
                let g = &projected[k as usize];
                let Some(alpha) = contribution_alpha(g.opacity, g.mahalanobis_sq(px, py), opts)
                else {
                    continue;
                };
                if !acc.add(alpha, &g.color, g.view_depth, opts) {
                    break;
                }
            }
            out.push(acc);
        }
    }
    out
}
