//! Random augmentations shared by the generated image and its conditioning
//! images: bilinear resize to the backend's input size, horizontal flip,
//! perspective warp and grayscale, in that order.
//!
//! A frozen [`AugmentSample`] is linear in pixel values (the out-of-bounds
//! fill adds a constant), so [`vjp`] is the exact transpose of [`apply`].

use nalgebra::{SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, Image, LUMA};

const MAX_REDRAWS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub p_gray: f64,
    pub p_flip: f64,
    pub p_persp: f64,
    pub distortion_scale: f64,
    /// `[height, width]` fed to the backend; the render size when unset.
    pub target_size: Option<[usize; 2]>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_gray: 0.2,
            p_flip: 0.5,
            p_persp: 0.5,
            distortion_scale: 0.3,
            target_size: None,
        }
    }
}

impl AugmentConfig {
    /// No augmentation other than the resize.
    pub fn disabled() -> Self {
        AugmentConfig {
            p_gray: 0.0,
            p_flip: 0.0,
            p_persp: 0.0,
            distortion_scale: 0.0,
            target_size: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("augment.p_gray", self.p_gray),
            ("augment.p_flip", self.p_flip),
            ("augment.p_persp", self.p_persp),
            ("augment.distortion_scale", self.distortion_scale),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(name, format!("must be in [0, 1], got {p}")));
            }
        }
        if let Some([h, w]) = self.target_size {
            if h == 0 || w == 0 {
                return Err(Error::config("augment.target_size", "must be nonzero"));
            }
        }
        Ok(())
    }

    pub fn resolved_target(&self, render_size: (usize, usize)) -> (usize, usize) {
        self.target_size.map(|[h, w]| (h, w)).unwrap_or(render_size)
    }
}

pub type Homography = [[f64; 3]; 3];

pub const IDENTITY: Homography = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// A frozen augmentation. The homography maps output pixel coordinates to
/// sampling coordinates in the (resized, flipped) image.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSample {
    pub gray: bool,
    pub flip: bool,
    pub perspective: bool,
    pub homography: Homography,
    pub target: (usize, usize),
    pub seed: u64,
}

impl AugmentSample {
    /// Resize only.
    pub fn identity(target: (usize, usize)) -> Self {
        AugmentSample {
            gray: false,
            flip: false,
            perspective: false,
            homography: IDENTITY,
            target,
            seed: 0,
        }
    }
}

fn det3(m: &Homography) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Four-point DLT with `h33 = 1`: the homography taking each `from[i]` to `to[i]`.
pub fn homography_from_points(from: &[[f64; 2]; 4], to: &[[f64; 2]; 4]) -> Option<Homography> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let [x, y] = from[i];
        let [u, v] = to[i];
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a.lu().solve(&b)?;
    let m = [[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]];
    if m.iter().flatten().all(|v| v.is_finite()) && det3(&m).abs() > 1e-9 {
        Some(m)
    } else {
        None
    }
}

fn is_convex(q: &[[f64; 2]; 4]) -> bool {
    let mut sign = 0.0;
    for i in 0..4 {
        let a = q[i];
        let b = q[(i + 1) % 4];
        let c = q[(i + 2) % 4];
        let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
        if cross.abs() < 1e-9 || (sign != 0.0 && cross.signum() != sign) {
            return false;
        }
        sign = cross.signum();
    }
    true
}

/// Draws the augmentation flags and, when perspective is on, moves each
/// image corner inward by up to `distortion_scale * (width/2, height/2)`.
pub fn sample_augment(cfg: &AugmentConfig, target: (usize, usize), seed: u64) -> Result<AugmentSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gray = rng.random::<f64>() < cfg.p_gray;
    let flip = rng.random::<f64>() < cfg.p_flip;
    let wants_persp = rng.random::<f64>() < cfg.p_persp;

    let mut sample = AugmentSample {
        gray,
        flip,
        perspective: false,
        homography: IDENTITY,
        target,
        seed,
    };
    if !wants_persp || cfg.distortion_scale == 0.0 {
        return Ok(sample);
    }

    let (h, w) = (target.0 as f64, target.1 as f64);
    let dx = cfg.distortion_scale * w / 2.0;
    let dy = cfg.distortion_scale * h / 2.0;
    let start = [[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]];
    for _ in 0..MAX_REDRAWS {
        let mut jitter = || (rng.random::<f64>() * dx, rng.random::<f64>() * dy);
        let (a, b) = jitter();
        let (c, d) = jitter();
        let (e, f) = jitter();
        let (g, i) = jitter();
        let end = [
            [a, b],
            [w - 1.0 - c, d],
            [w - 1.0 - e, h - 1.0 - f],
            [g, h - 1.0 - i],
        ];
        if !is_convex(&end) {
            continue;
        }
        // Output pixels at the displaced corners sample the original corners.
        if let Some(m) = homography_from_points(&end, &start) {
            sample.perspective = true;
            sample.homography = m;
            return Ok(sample);
        }
    }
    log::debug!("perspective draw degenerate after {MAX_REDRAWS} tries; using identity");
    Ok(sample)
}

/// Bilinear taps `(source index or None for out-of-bounds, weight)` for
/// output pixel `(y, x)` under homography `m` on an `h x w` source.
fn warp_taps(m: &Homography, y: usize, x: usize, h: usize, w: usize) -> [(Option<(usize, usize)>, f64); 4] {
    let (xf, yf) = (x as f64, y as f64);
    let u = m[0][0] * xf + m[0][1] * yf + m[0][2];
    let v = m[1][0] * xf + m[1][1] * yf + m[1][2];
    let s = m[2][0] * xf + m[2][1] * yf + m[2][2];
    if s.abs() < 1e-12 || !u.is_finite() || !v.is_finite() {
        return [(None, 1.0), (None, 0.0), (None, 0.0), (None, 0.0)];
    }
    let (sx, sy) = (u / s, v / s);
    let (x0, y0) = (sx.floor(), sy.floor());
    let (fx, fy) = (sx - x0, sy - y0);
    let at = |yy: f64, xx: f64| {
        if yy >= 0.0 && xx >= 0.0 && yy < h as f64 && xx < w as f64 {
            Some((yy as usize, xx as usize))
        } else {
            None
        }
    };
    [
        (at(y0, x0), (1.0 - fy) * (1.0 - fx)),
        (at(y0, x0 + 1.0), (1.0 - fy) * fx),
        (at(y0 + 1.0, x0), fy * (1.0 - fx)),
        (at(y0 + 1.0, x0 + 1.0), fy * fx),
    ]
}

fn flip_h(img: &Image) -> Image {
    let (h, w, _) = img.dims();
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            out.pixel_mut(y, x).copy_from_slice(img.pixel(y, w - 1 - x));
        }
    }
    out
}

fn warp(img: &Image, m: &Homography, fill: &[f64]) -> Image {
    let (h, w, c) = img.dims();
    let mut out = Image::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let taps = warp_taps(m, y, x, h, w);
            let px = out.pixel_mut(y, x);
            for (src, wt) in taps {
                if wt == 0.0 {
                    continue;
                }
                match src {
                    Some((sy, sx)) => {
                        let s = img.pixel(sy, sx);
                        for ch in 0..c {
                            px[ch] += wt * s[ch];
                        }
                    }
                    None => {
                        for ch in 0..c {
                            px[ch] += wt * fill[ch];
                        }
                    }
                }
            }
        }
    }
    out
}

fn warp_adjoint(grad: &Image, m: &Homography) -> Image {
    let (h, w, c) = grad.dims();
    let mut out = Image::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let g: Vec<f64> = grad.pixel(y, x).to_vec();
            for (src, wt) in warp_taps(m, y, x, h, w) {
                if let Some((sy, sx)) = src {
                    let px = out.pixel_mut(sy, sx);
                    for ch in 0..c {
                        px[ch] += wt * g[ch];
                    }
                }
            }
        }
    }
    out
}

fn gray3(img: &Image) -> Image {
    imaging::luminance(img).to_rgb()
}

fn gray3_adjoint(grad: &Image) -> Image {
    let mut out = grad.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let s = px[0] + px[1] + px[2];
        for c in 0..3 {
            px[c] = LUMA[c] * s;
        }
    }
    out
}

/// Applies the frozen augmentation. `fill` is the RGB color for pixels the
/// perspective warp pulls from outside the image (luminance of it for
/// single-channel images). Grayscale leaves single-channel images unchanged.
pub fn apply(sample: &AugmentSample, image: &Image, fill: [f64; 3]) -> Image {
    let (th, tw) = sample.target;
    let mut out = imaging::bilinear_resize(image, th, tw);
    if sample.flip {
        out = flip_h(&out);
    }
    if sample.perspective {
        let fill: Vec<f64> = if out.channels() == 3 {
            fill.to_vec()
        } else {
            vec![LUMA[0] * fill[0] + LUMA[1] * fill[1] + LUMA[2] * fill[2]; out.channels()]
        };
        out = warp(&out, &sample.homography, &fill);
    }
    if sample.gray && out.channels() == 3 {
        out = gray3(&out);
    }
    out
}

/// Transpose of the linear part of [`apply`], mapping a gradient at the
/// target size back to an `src_h x src_w` image.
pub fn vjp(sample: &AugmentSample, dl_dy: &Image, src_h: usize, src_w: usize) -> Result<Image> {
    if (dl_dy.height(), dl_dy.width()) != sample.target {
        return Err(Error::shape(
            "augment::vjp",
            format!("{}x{}", sample.target.0, sample.target.1),
            format!("{}x{}", dl_dy.height(), dl_dy.width()),
        ));
    }
    let mut g = dl_dy.clone();
    if sample.gray && g.channels() == 3 {
        g = gray3_adjoint(&g);
    }
    if sample.perspective {
        g = warp_adjoint(&g, &sample.homography);
    }
    if sample.flip {
        g = flip_h(&g);
    }
    Ok(imaging::bilinear_resize_adjoint(&g, src_h, src_w))
}
