#![allow(dead_code)]

use gsrefine::mask::BinaryMask;
use gsrefine::scene::{CameraPose, GaussianPrimitive, GaussianScene};
use rand::Rng;

/// Up to `max_prims` anisotropic Gaussians in front of a 64x64 camera, some
/// partly off screen or behind the near plane.
pub fn random_scene<R: Rng>(rng: &mut R, max_prims: usize) -> GaussianScene {
    let n = rng.random_range(1..=max_prims);
    let prims = (0..n)
        .map(|_| {
            let z = if rng.random_bool(0.05) {
                rng.random_range(-1.0..0.005)
            } else {
                rng.random_range(0.5..6.0)
            };
            let c = [
                rng.random_range(-1.5..1.5) * z / 2.0,
                rng.random_range(-1.5..1.5) * z / 2.0,
                z,
            ];
            let s = [
                rng.random_range(0.01..0.4),
                rng.random_range(0.01..0.4),
                rng.random_range(0.01..0.4),
            ];
            let q = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.1..1.0),
            ];
            let col = [rng.random(), rng.random(), rng.random()];
            GaussianPrimitive::from_wxyz(c, s, q, rng.random_range(0.05..1.0), col).unwrap()
        })
        .collect();
    GaussianScene::new("random", prims)
}

pub fn frame_camera() -> CameraPose {
    CameraPose::looking_down_z(64, 64, 56.0)
}

/// Blobs of random rectangles over a sprinkle of noise.
pub fn random_mask<R: Rng>(rng: &mut R, w: usize, h: usize) -> BinaryMask {
    let density = rng.random_range(0.0..0.15);
    let mut m = BinaryMask::from_fn(w, h, |_, _| rng.random_bool(density));
    for _ in 0..rng.random_range(0..6) {
        let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
        let (bw, bh) = (rng.random_range(1..w / 3), rng.random_range(1..h / 3));
        let hole = rng.random_bool(0.5);
        for y in y0..(y0 + bh).min(h) {
            for x in x0..(x0 + bw).min(w) {
                let edge =
                    x == x0 || y == y0 || x + 1 == (x0 + bw).min(w) || y + 1 == (y0 + bh).min(h);
                m.set(x, y, !hole || edge);
            }
        }
    }
    m
}

pub fn max_channel_diff(a: &[[f32; 3]], b: &[[f32; 3]]) -> f32 {
    a.iter()
        .zip(b)
        .flat_map(|(p, q)| (0..3).map(move |c| (p[c] - q[c]).abs()))
        .fold(0.0, f32::max)
}

/// Direct Minkowski dilation: `p` is set when some kernel offset lands on a set pixel.
pub fn naive_dilate(m: &BinaryMask, n: usize) -> BinaryMask {
    let a = ((n - 1) / 2) as isize;
    let (w, h) = (m.width() as isize, m.height() as isize);
    BinaryMask::from_fn(m.width(), m.height(), |x, y| {
        (-a..n as isize - a).any(|dy| {
            (-a..n as isize - a).any(|dx| {
                let (sx, sy) = (x as isize - dx, y as isize - dy);
                sx >= 0 && sy >= 0 && sx < w && sy < h && m.get(sx as usize, sy as usize)
            })
        })
    })
}

/// Direct erosion with out-of-image pixels read as false.
pub fn naive_erode(m: &BinaryMask, n: usize) -> BinaryMask {
    let a = ((n - 1) / 2) as isize;
    let (w, h) = (m.width() as isize, m.height() as isize);
    BinaryMask::from_fn(m.width(), m.height(), |x, y| {
        (-a..n as isize - a).all(|dy| {
            (-a..n as isize - a).all(|dx| {
                let (sx, sy) = (x as isize + dx, y as isize + dy);
                sx >= 0 && sy >= 0 && sx < w && sy < h && m.get(sx as usize, sy as usize)
            })
        })
    })
}

/// Breadth-first flood of false pixels from the border; everything unreached is set.
pub fn bfs_fill_holes(m: &BinaryMask) -> BinaryMask {
    let (w, h) = m.dims();
    let mut seen = vec![false; w * h];
    let mut queue = std::collections::VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if (x == 0 || y == 0 || x + 1 == w || y + 1 == h) && !m.get(x, y) {
                seen[y * w + x] = true;
                queue.push_back((x, y));
            }
        }
    }
    while let Some((x, y)) = queue.pop_front() {
        let around = [
            (x.wrapping_sub(1), y),
            (x + 1, y),
            (x, y.wrapping_sub(1)),
            (x, y + 1),
        ];
        for (nx, ny) in around {
            if nx < w && ny < h && !m.get(nx, ny) && !seen[ny * w + nx] {
                seen[ny * w + nx] = true;
                queue.push_back((nx, ny));
            }
        }
    }
    BinaryMask::from_fn(w, h, |x, y| m.get(x, y) || !seen[y * w + x])
}

/// Pixelwise union.
pub fn union(a: &BinaryMask, b: &BinaryMask) -> BinaryMask {
    BinaryMask::from_fn(a.width(), a.height(), |x, y| a.get(x, y) || b.get(x, y))
}

/// Analytic derivative of `softmax(L wq (L wk)^T / sqrt(d)) G wv` w.r.t. `wq[a, b]`.
pub fn attention_grad_wq(
    l: &ndarray::Array2<f64>,
    g: &ndarray::Array2<f64>,
    wq: &ndarray::Array2<f64>,
    wk: &ndarray::Array2<f64>,
    wv: &ndarray::Array2<f64>,
    a: usize,
    b: usize,
) -> ndarray::Array2<f64> {
    let d = (wq.ncols() as f64).sqrt();
    let k = l.dot(wk);
    let v = g.dot(wv);
    let mut p = l.dot(wq).dot(&k.t()) / d;
    gsrefine::adapter::softmax_rows(&mut p);
    let n = l.nrows();
    // dS_ij = L_ia K_jb / sqrt(d); dP_ij = P_ij (dS_ij - sum_k P_ik dS_ik)
    let mut dp = ndarray::Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let ds: Vec<f64> = (0..n).map(|j| l[[i, a]] * k[[j, b]] / d).collect();
        let mean: f64 = (0..n).map(|j| p[[i, j]] * ds[j]).sum();
        for j in 0..n {
            dp[[i, j]] = p[[i, j]] * (ds[j] - mean);
        }
    }
    dp.dot(&v)
}
