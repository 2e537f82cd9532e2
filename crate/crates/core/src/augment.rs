//! Image augmentation on planar `C x H x W` float buffers.
//!
//! Pixel-space operations (RandAugment) expect values in `[0, 1]`. Geometric
//! resizing is bilinear with half-pixel centers and edge clamping, matching
//! the usual non-antialiased tensor resize.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// An axis-aligned crop in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CropBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Row-major `out x total` bilinear weights that map the source span
/// `[offset, offset + len)` of a `total`-long axis onto `out` samples.
pub fn interp_matrix(total: usize, offset: usize, len: usize, out: usize) -> Vec<f32> {
    assert!(len >= 1 && offset + len <= total && out >= 1);
    let mut m = vec![0.0f32; out * total];
    let scale = len as f64 / out as f64;
    for o in 0..out {
        let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        let frac = if i0 == len - 1 { 0.0 } else { s - i0 as f64 };
        m[o * total + offset + i0] += (1.0 - frac) as f32;
        m[o * total + offset + i1] += frac as f32;
    }
    m
}

/// Crops `region` from a planar image and resizes it to `out_h x out_w`.
pub fn resize_crop_planar(
    src: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    region: CropBox,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    debug_assert_eq!(src.len(), channels * height * width);
    let ry = interp_matrix(height, region.y, region.h, out_h);
    let rx = interp_matrix(width, region.x, region.w, out_w);
    let mut out = vec![0.0f32; channels * out_h * out_w];
    let mut rows = vec![0.0f32; out_h * width];
    for c in 0..channels {
        let plane = &src[c * height * width..(c + 1) * height * width];
        rows.iter_mut().for_each(|v| *v = 0.0);
        for oy in 0..out_h {
            for sy in region.y..region.y + region.h {
                let wgt = ry[oy * height + sy];
                if wgt != 0.0 {
                    for x in 0..width {
                        rows[oy * width + x] += wgt * plane[sy * width + x];
                    }
                }
            }
        }
        let dst = &mut out[c * out_h * out_w..(c + 1) * out_h * out_w];
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = 0.0f32;
                for sx in region.x..region.x + region.w {
                    acc += rx[ox * width + sx] * rows[oy * width + sx];
                }
                dst[oy * out_w + ox] = acc;
            }
        }
    }
    out
}

/// Random-resized-crop box sampling: area fraction uniform in `scale`,
/// log-uniform aspect ratio in `[3/4, 4/3]`, ten attempts, then a center-crop
/// fallback.
pub fn sample_resized_crop<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
    scale: (f32, f32),
) -> CropBox {
    let area = (height * width) as f64;
    let (lr0, lr1) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..10 {
        let target = area * sample_uniform(rng, scale.0 as f64, scale.1 as f64);
        let ratio = sample_uniform(rng, lr0, lr1).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if 0 < w && w <= width && 0 < h && h <= height {
            let y = rng.random_range(0..=height - h);
            let x = rng.random_range(0..=width - w);
            return CropBox { x, y, w, h };
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (w, h) = if in_ratio < 3.0 / 4.0 {
        (width, ((width as f64 / (3.0 / 4.0)).round() as usize).min(height))
    } else if in_ratio > 4.0 / 3.0 {
        (((height as f64 * (4.0 / 3.0)).round() as usize).min(width), height)
    } else {
        (width, height)
    };
    CropBox {
        x: (width - w) / 2,
        y: (height - h) / 2,
        w,
        h,
    }
}

fn sample_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn flip_horizontal(data: &mut [f32], channels: usize, height: usize, width: usize) {
    for c in 0..channels {
        for y in 0..height {
            let row = &mut data[(c * height + y) * width..(c * height + y + 1) * width];
            row.reverse();
        }
    }
}

/// The RandAugment operation set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugOp {
    AutoContrast,
    Equalize,
    Invert,
    Rotate,
    Posterize,
    Solarize,
    SolarizeAdd,
    Color,
    Contrast,
    Brightness,
    Sharpness,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
}

pub const RAND_AUGMENT_OPS: [AugOp; 15] = [
    AugOp::AutoContrast,
    AugOp::Equalize,
    AugOp::Invert,
    AugOp::Rotate,
    AugOp::Posterize,
    AugOp::Solarize,
    AugOp::SolarizeAdd,
    AugOp::Color,
    AugOp::Contrast,
    AugOp::Brightness,
    AugOp::Sharpness,
    AugOp::ShearX,
    AugOp::ShearY,
    AugOp::TranslateX,
    AugOp::TranslateY,
];

const MAX_LEVEL: f64 = 10.0;

/// RandAugment with `n` ops per image, base magnitude `m` (0..=10) perturbed
/// by N(0, mstd) per op, each op applied with probability 1/2.
#[derive(Clone, Debug)]
pub struct RandAugment {
    pub num_ops: usize,
    pub magnitude: f64,
    pub magnitude_std: f64,
    /// Per-channel fill for pixels exposed by geometric ops.
    pub fill: Vec<f32>,
}

pub struct Planar<'a> {
    pub data: &'a mut [f32],
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl RandAugment {
    pub fn apply<R: Rng + ?Sized>(&self, rng: &mut R, img: &mut Planar) {
        for _ in 0..self.num_ops {
            let op = RAND_AUGMENT_OPS[rng.random_range(0..RAND_AUGMENT_OPS.len())];
            if rng.random::<f64>() >= 0.5 {
                continue;
            }
            let mut level = self.magnitude;
            if self.magnitude_std > 0.0 {
                let noise = Normal::new(0.0, self.magnitude_std).expect("positive std");
                level += noise.sample(rng);
            }
            let level = level.clamp(0.0, MAX_LEVEL);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            apply_op(op, level, sign, &self.fill, img);
        }
    }
}

pub fn apply_op(op: AugOp, level: f64, sign: f64, fill: &[f32], img: &mut Planar) {
    let frac = level / MAX_LEVEL;
    let enhance = (frac * 1.8 + 0.1) as f32;
    match op {
        AugOp::AutoContrast => auto_contrast(img),
        AugOp::Equalize => equalize(img),
        AugOp::Invert => img.data.iter_mut().for_each(|v| *v = 1.0 - *v),
        AugOp::Rotate => {
            let theta = (sign * frac * 30.0).to_radians();
            let (s, c) = theta.sin_cos();
            affine(img, fill, [c, s, 0.0, -s, c, 0.0], true);
        }
        AugOp::Posterize => posterize(img, (frac * 4.0) as u32),
        AugOp::Solarize => {
            let threshold = (frac * 256.0).floor() as f32 / 255.0;
            img.data
                .iter_mut()
                .for_each(|v| if *v >= threshold { *v = 1.0 - *v });
        }
        AugOp::SolarizeAdd => {
            let add = (frac * 110.0).floor() as f32 / 255.0;
            let threshold = 128.0 / 255.0;
            img.data
                .iter_mut()
                .for_each(|v| if *v < threshold { *v = (*v + add).min(1.0) });
        }
        AugOp::Color => {
            let gray = grayscale(img);
            let plane = img.height * img.width;
            for (i, v) in img.data.iter_mut().enumerate() {
                let g = gray[i % plane];
                *v = (g + enhance * (*v - g)).clamp(0.0, 1.0);
            }
        }
        AugOp::Contrast => {
            let gray = grayscale(img);
            let mean = (gray.iter().sum::<f32>() / gray.len() as f32 * 255.0).round() / 255.0;
            img.data
                .iter_mut()
                .for_each(|v| *v = (mean + enhance * (*v - mean)).clamp(0.0, 1.0));
        }
        AugOp::Brightness => img.data.iter_mut().for_each(|v| *v = (*v * enhance).clamp(0.0, 1.0)),
        AugOp::Sharpness => sharpness(img, enhance),
        AugOp::ShearX => affine(img, fill, [1.0, sign * frac * 0.3, 0.0, 0.0, 1.0, 0.0], false),
        AugOp::ShearY => affine(img, fill, [1.0, 0.0, 0.0, sign * frac * 0.3, 1.0, 0.0], false),
        AugOp::TranslateX => {
            let t = sign * frac * 0.45 * img.width as f64;
            affine(img, fill, [1.0, 0.0, t, 0.0, 1.0, 0.0], false)
        }
        AugOp::TranslateY => {
            let t = sign * frac * 0.45 * img.height as f64;
            affine(img, fill, [1.0, 0.0, 0.0, 0.0, 1.0, t], false)
        }
    }
}

fn grayscale(img: &Planar) -> Vec<f32> {
    let plane = img.height * img.width;
    if img.channels != 3 {
        return img.data[..plane].to_vec();
    }
    (0..plane)
        .map(|p| {
            0.299 * img.data[p] + 0.587 * img.data[plane + p] + 0.114 * img.data[2 * plane + p]
        })
        .collect()
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn auto_contrast(img: &mut Planar) {
    let plane = img.height * img.width;
    for c in 0..img.channels {
        let ch = &mut img.data[c * plane..(c + 1) * plane];
        let lo = ch.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = ch.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        if hi > lo {
            ch.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
        }
    }
}

fn equalize(img: &mut Planar) {
    let plane = img.height * img.width;
    for c in 0..img.channels {
        let ch = &mut img.data[c * plane..(c + 1) * plane];
        let mut hist = [0usize; 256];
        for v in ch.iter() {
            hist[quantize(*v) as usize] += 1;
        }
        let last = hist.iter().rposition(|&h| h > 0).map(|i| hist[i]).unwrap_or(0);
        let step = (plane - last) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0u8; 256];
        let mut n = step / 2;
        for i in 0..256 {
            lut[i] = (n / step).min(255) as u8;
            n += hist[i];
        }
        ch.iter_mut().for_each(|v| *v = lut[quantize(*v) as usize] as f32 / 255.0);
    }
}

fn posterize(img: &mut Planar, bits: u32) {
    if bits >= 8 {
        return;
    }
    let mask: u8 = !((1u16 << (8 - bits)) - 1) as u8;
    img.data
        .iter_mut()
        .for_each(|v| *v = (quantize(*v) & mask) as f32 / 255.0);
}

fn sharpness(img: &mut Planar, factor: f32) {
    let (h, w) = (img.height, img.width);
    if h < 3 || w < 3 {
        return;
    }
    let plane = h * w;
    for c in 0..img.channels {
        let ch = &mut img.data[c * plane..(c + 1) * plane];
        let src = ch.to_vec();
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let mut acc = 0.0f32;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let k = if dy == 1 && dx == 1 { 5.0 } else { 1.0 };
                        acc += k * src[(y + dy - 1) * w + (x + dx - 1)];
                    }
                }
                let smooth = acc / 13.0;
                let v = src[y * w + x];
                ch[y * w + x] = (smooth + factor * (v - smooth)).clamp(0.0, 1.0);
            }
        }
    }
}

/// Inverse-maps each output pixel through `m` (`src = M * [x, y, 1]`),
/// optionally about the image center, with bilinear sampling.
fn affine(img: &mut Planar, fill: &[f32], m: [f64; 6], centered: bool) {
    let (h, w) = (img.height, img.width);
    let plane = h * w;
    let (cx, cy) = if centered {
        (w as f64 / 2.0 - 0.5, h as f64 / 2.0 - 0.5)
    } else {
        (0.0, 0.0)
    };
    let src = img.data.to_vec();
    for y in 0..h {
        for x in 0..w {
            let (xr, yr) = (x as f64 - cx, y as f64 - cy);
            let sx = m[0] * xr + m[1] * yr + m[2] + cx;
            let sy = m[3] * xr + m[4] * yr + m[5] + cy;
            for c in 0..img.channels {
                let f = fill.get(c).copied().unwrap_or(0.0);
                let sample = |ix: i64, iy: i64| -> f32 {
                    if ix < 0 || iy < 0 || ix >= w as i64 || iy >= h as i64 {
                        f
                    } else {
                        src[c * plane + iy as usize * w + ix as usize]
                    }
                };
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
                let (x0, y0) = (x0 as i64, y0 as i64);
                let v = (1.0 - fy) * ((1.0 - fx) * sample(x0, y0) + fx * sample(x0 + 1, y0))
                    + fy * ((1.0 - fx) * sample(x0, y0 + 1) + fx * sample(x0 + 1, y0 + 1));
                img.data[c * plane + y * w + x] = v;
            }
        }
    }
}
