//! Dense CHW tensor operations used by the adapter stack.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::scene::ViewImage;

const LN_EPS: f32 = 1e-6;

pub fn image_to_chw(img: &ViewImage) -> Array3<f32> {
    let (w, h) = img.dims();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| img.get(x, y)[c])
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(t: ArrayView3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, h, w) = t.dim();
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let mut out = Array3::zeros((c, out_h, out_w));
    for ch in 0..c {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = t[[ch, y0, x0]] * (1.0 - fx) + t[[ch, y0, x1]] * fx;
                let bot = t[[ch, y1, x0]] * (1.0 - fx) + t[[ch, y1, x1]] * fx;
                out[[ch, oy, ox]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Square convolution with weights `[out, in, k, k]`, zero padding.
pub fn conv2d(
    x: ArrayView3<f32>,
    w: &Array4<f32>,
    b: &Array1<f32>,
    stride: usize,
    pad: usize,
) -> Array3<f32> {
    let (cin, h, wd) = x.dim();
    let (cout, wcin, k, _) = w.dim();
    assert_eq!(cin, wcin, "conv input channels");
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    // im2col: rows are output pixels, columns are (cin, ky, kx)
    let mut cols = Array2::<f32>::zeros((oh * ow, cin * k * k));
    for oy in 0..oh {
        for ox in 0..ow {
            let mut row = cols.row_mut(oy * ow + ox);
            let mut j = 0;
            for c in 0..cin {
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            row[j] = x[[c, iy as usize, ix as usize]];
                        }
                        j += 1;
                    }
                }
            }
        }
    }
    let wm = w
        .view()
        .into_shape_with_order((cout, cin * k * k))
        .expect("contiguous weights");
    let y = wm.dot(&cols.t());
    let mut out = y
        .into_shape_with_order((cout, oh, ow))
        .expect("conv output shape");
    for (mut ch, &bias) in out.outer_iter_mut().zip(b) {
        ch += bias;
    }
    out
}

/// Depthwise convolution with weights `[c, k, k]`, same padding.
pub fn depthwise_conv(x: ArrayView3<f32>, w: &Array3<f32>, b: &Array1<f32>) -> Array3<f32> {
    let (c, h, wd) = x.dim();
    let k = w.dim().1;
    let pad = (k / 2) as isize;
    let mut out = Array3::zeros((c, h, wd));
    for ch in 0..c {
        let kern = w.index_axis(Axis(0), ch);
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = b[ch];
                for ky in 0..k {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = xx as isize + kx as isize - pad;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        acc += kern[[ky, kx]] * x[[ch, iy as usize, ix as usize]];
                    }
                }
                out[[ch, y, xx]] = acc;
            }
        }
    }
    out
}

/// 1x1 convolution with weights `[out, in]`.
pub fn pointwise(x: ArrayView3<f32>, w: &Array2<f32>, b: &Array1<f32>) -> Array3<f32> {
    let (c, h, wd) = x.dim();
    let flat = x.to_shape((c, h * wd)).expect("flatten");
    let mut y = w.dot(&flat);
    for (mut row, &bias) in y.outer_iter_mut().zip(b) {
        row += bias;
    }
    y.into_shape_with_order((w.nrows(), h, wd))
        .expect("pointwise shape")
}

/// Normalizes each pixel across channels.
pub fn layer_norm_channels(x: &mut Array3<f32>, gamma: &Array1<f32>, beta: &Array1<f32>) {
    let (c, h, w) = x.dim();
    for y in 0..h {
        for xx in 0..w {
            let mut lane = x.slice_mut(s![.., y, xx]);
            let mean = lane.sum() / c as f32;
            let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (i, v) in lane.iter_mut().enumerate() {
                *v = (*v - mean) * inv * gamma[i] + beta[i];
            }
        }
    }
}

/// Tanh approximation of GELU.
pub fn gelu(v: f32) -> f32 {
    const K: f32 = 0.797_884_6; // sqrt(2 / pi)
    0.5 * v * (1.0 + (K * (v + 0.044_715 * v * v * v)).tanh())
}

pub fn avg_pool2(x: ArrayView3<f32>) -> Result<Array3<f32>> {
    let (c, h, w) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::arg(format!("cannot halve a {h}x{w} map")));
    }
    Ok(Array3::from_shape_fn((c, h / 2, w / 2), |(ch, y, xx)| {
        let (y2, x2) = (2 * y, 2 * xx);
        0.25 * (x[[ch, y2, x2]]
            + x[[ch, y2, x2 + 1]]
            + x[[ch, y2 + 1, x2]]
            + x[[ch, y2 + 1, x2 + 1]])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_a_constant_is_the_constant() {
        let x = Array3::from_elem((2, 8, 6), 0.37f32);
        let p = avg_pool2(x.view()).unwrap();
        assert_eq!(p.dim(), (2, 4, 3));
        assert!(p.iter().all(|v| *v == 0.37));
        assert!(avg_pool2(Array3::<f32>::zeros((1, 3, 4)).view()).is_err());
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = Array3::from_shape_fn((2, 5, 4), |(c, y, x)| {
            (c * 20 + y * 4 + x) as f32 * 0.1 - 1.0
        });
        let w = Array4::from_shape_fn((3, 2, 3, 3), |(o, i, a, b)| {
            ((o + 2 * i + a * b) % 5) as f32 - 2.0
        });
        let b = Array1::from_vec(vec![0.5, -0.25, 0.0]);
        let y = conv2d(x.view(), &w, &b, 1, 1);
        assert_eq!(y.dim(), (3, 5, 4));
        for o in 0..3 {
            for oy in 0..5 {
                for ox in 0..4 {
                    let mut acc = b[o];
                    for i in 0..2 {
                        for a in 0..3 {
                            for bb in 0..3 {
                                let iy = oy as isize + a as isize - 1;
                                let ix = ox as isize + bb as isize - 1;
                                if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                    acc += w[[o, i, a, bb]] * x[[i, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    assert!((y[[o, oy, ox]] - acc).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn strided_projection_shape() {
        let x = Array3::<f32>::ones((3, 16, 24));
        let w = Array4::<f32>::ones((2, 3, 8, 8));
        let y = conv2d(x.view(), &w, &Array1::zeros(2), 8, 0);
        assert_eq!(y.dim(), (2, 2, 3));
        assert!(y.iter().all(|v| *v == 192.0));
    }

    #[test]
    fn resize_preserves_constants_and_identity() {
        let c = Array3::from_elem((1, 7, 7), 0.25f32);
        assert!(resize_bilinear(c.view(), 9, 11)
            .iter()
            .all(|v| (*v - 0.25).abs() < 1e-7));
        let r = Array3::from_shape_fn((1, 4, 4), |(_, y, x)| (y * 4 + x) as f32);
        assert_eq!(resize_bilinear(r.view(), 4, 4), r);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-5);
        assert!(gelu(-10.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_zero_input_stays_zero() {
        let mut x = Array3::<f32>::zeros((4, 2, 2));
        layer_norm_channels(&mut x, &Array1::ones(4), &Array1::zeros(4));
        assert!(x.iter().all(|v| *v == 0.0));
    }
}
