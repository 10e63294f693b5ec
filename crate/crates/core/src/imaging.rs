//! Dense float images and the classical vision utilities around them:
//! PNG I/O, bilinear resampling (with its exact transpose), grayscale,
//! Gaussian blur, Canny edges and a luminance-based depth placeholder.
//!
//! PNG values are treated as already-linear; no ICC or gamma handling.

use std::collections::VecDeque;
use std::path::Path;

use crate::error::{Error, Result};

/// BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Row-major `height x width x channels` image with `f64` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_pixel(height: usize, width: usize, pixel: &[f64]) -> Self {
        let mut data = Vec::with_capacity(height * width * pixel.len());
        for _ in 0..height * width {
            data.extend_from_slice(pixel);
        }
        Image {
            height,
            width,
            channels: pixel.len(),
            data,
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "Image::from_vec",
                height * width * channels,
                data.len(),
            ));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = self.index(y, x, 0);
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = self.index(y, x, 0);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.height, self.width, self.channels)
    }

    pub(crate) fn check_shape(&self, other: &Image, context: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(context, self.shape_string(), other.shape_string()))
        }
    }

    pub fn dot(&self, other: &Image) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Image, scale: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scaled(&self, scale: f64) -> Image {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= scale);
        out
    }

    pub fn clamped(&self) -> Image {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }

    /// Replicates a single-channel image to three channels; other images are cloned.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let mut out = Image::zeros(self.height, self.width, 3);
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.get(y, x, 0);
                out.pixel_mut(y, x).fill(v);
            }
        }
        out
    }

    pub fn mean_pixel(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (a, v) in acc.iter_mut().zip(px) {
                *a += v;
            }
        }
        let count = (self.height * self.width).max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= count);
        acc
    }
}

/// Per-output-coordinate bilinear taps along one axis, half-pixel centers
/// (align_corners = false), negative source coordinates clamped to 0.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = s - i0 as f64;
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resize with half-pixel centers.
pub fn bilinear_resize(img: &Image, height: usize, width: usize) -> Image {
    assert!(height >= 1 && width >= 1, "resize target must be nonempty");
    if img.height == height && img.width == width {
        return img.clone();
    }
    let c = img.channels;
    let xt = axis_taps(img.width, width);
    let yt = axis_taps(img.height, height);

    let mut rows = Image::zeros(img.height, width, c);
    for y in 0..img.height {
        for (x, &(x0, x1, fx)) in xt.iter().enumerate() {
            for ch in 0..c {
                let a = img.get(y, x0, ch);
                let v = a + fx * (img.get(y, x1, ch) - a);
                rows.set(y, x, ch, v);
            }
        }
    }
    let mut out = Image::zeros(height, width, c);
    for (y, &(y0, y1, fy)) in yt.iter().enumerate() {
        for x in 0..width {
            for ch in 0..c {
                let a = rows.get(y0, x, ch);
                let v = a + fy * (rows.get(y1, x, ch) - a);
                out.set(y, x, ch, v);
            }
        }
    }
    out
}

/// Transpose of [`bilinear_resize`] from `(src_h, src_w)` to `grad`'s size.
pub fn bilinear_resize_adjoint(grad: &Image, src_h: usize, src_w: usize) -> Image {
    if grad.height == src_h && grad.width == src_w {
        return grad.clone();
    }
    let c = grad.channels;
    let xt = axis_taps(src_w, grad.width);
    let yt = axis_taps(src_h, grad.height);

    let mut rows = Image::zeros(src_h, grad.width, c);
    for (y, &(y0, y1, fy)) in yt.iter().enumerate() {
        for x in 0..grad.width {
            for ch in 0..c {
                let g = grad.get(y, x, ch);
                let i0 = rows.index(y0, x, ch);
                let i1 = rows.index(y1, x, ch);
                rows.data[i0] += (1.0 - fy) * g;
                rows.data[i1] += fy * g;
            }
        }
    }
    let mut out = Image::zeros(src_h, src_w, c);
    for y in 0..src_h {
        for (x, &(x0, x1, fx)) in xt.iter().enumerate() {
            for ch in 0..c {
                let g = rows.get(y, x, ch);
                let i0 = out.index(y, x0, ch);
                let i1 = out.index(y, x1, ch);
                out.data[i0] += (1.0 - fx) * g;
                out.data[i1] += fx * g;
            }
        }
    }
    out
}

/// Single-channel BT.601 luminance. Single-channel inputs are returned as-is.
pub fn luminance(img: &Image) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let mut out = Image::zeros(img.height, img.width, 1);
    for y in 0..img.height {
        for x in 0..img.width {
            let p = img.pixel(y, x);
            out.set(y, x, 0, LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]);
        }
    }
    out
}

pub fn upscale_nearest(img: &Image, factor: usize) -> Image {
    let factor = factor.max(1);
    let mut out = Image::zeros(img.height * factor, img.width * factor, img.channels);
    for y in 0..out.height {
        for x in 0..out.width {
            let src = img.pixel(y / factor, x / factor);
            out.pixel_mut(y, x).copy_from_slice(src);
        }
    }
    out
}

fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(img: &Image, sigma: f64, radius: usize) -> Image {
    if sigma <= 0.0 || radius == 0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma, radius);
    let r = radius as isize;
    let (h, w, c) = img.dims();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut tmp = Image::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let sx = clampi(x as isize + i as isize - r, w);
                    acc += kv * img.get(y, sx, ch);
                }
                tmp.set(y, x, ch, acc);
            }
        }
    }
    let mut out = Image::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let sy = clampi(y as isize + i as isize - r, h);
                    acc += kv * tmp.get(sy, x, ch);
                }
                out.set(y, x, ch, acc);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CannyParams {
    /// Low hysteresis threshold as a fraction of the max gradient magnitude.
    pub low: f64,
    /// High hysteresis threshold as a fraction of the max gradient magnitude.
    pub high: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        CannyParams {
            low: 0.1,
            high: 0.2,
        }
    }
}

/// Canny edge map: Gaussian pre-smoothing (sigma 1), Sobel gradients,
/// 4-direction non-maximum suppression, hysteresis, then a radius-1
/// Gaussian blur of the binary map. Output is single-channel in [0, 1].
pub fn canny(img: &Image, params: CannyParams) -> Result<Image> {
    if !(0.0 <= params.low && params.low < params.high && params.high <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "canny thresholds must satisfy 0 <= low < high <= 1, got {} / {}",
            params.low, params.high
        )));
    }
    let gray = gaussian_blur(&luminance(img), 1.0, 3);
    let (h, w, _) = gray.dims();
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        gray.get(y, x, 0)
    };

    let mut mag = vec![0.0; h * w];
    let mut dir = vec![0u8; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            let i = y as usize * w + x as usize;
            mag[i] = gx.hypot(gy);
            // Quantize the gradient direction to 0, 45, 90, 135 degrees.
            let mut angle = gy.atan2(gx).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            dir[i] = if !(22.5..157.5).contains(&angle) {
                0
            } else if angle < 67.5 {
                1
            } else if angle < 112.5 {
                2
            } else {
                3
            };
        }
    }

    let max_mag = mag.iter().cloned().fold(0.0, f64::max);
    let mut edges = Image::zeros(h, w, 1);
    if max_mag <= 0.0 {
        return Ok(edges);
    }

    let m = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let (dy, dx) = match dir[i] {
                0 => (0, 1),
                1 => (1, 1),
                2 => (1, 0),
                _ => (1, -1),
            };
            let v = mag[i];
            // Ties resolved toward the forward neighbour so plateaus keep one pixel.
            if v > m(y + dy, x + dx) && v >= m(y - dy, x - dx) {
                thin[i] = v;
            }
        }
    }

    let low = params.low * max_mag;
    let high = params.high * max_mag;
    let mut state = vec![0u8; h * w]; // 0 none, 1 weak, 2 edge
    let mut queue = VecDeque::new();
    for (i, &v) in thin.iter().enumerate() {
        if v >= high {
            state[i] = 2;
            queue.push_back(i);
        } else if v >= low {
            state[i] = 1;
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if state[j] == 1 {
                    state[j] = 2;
                    queue.push_back(j);
                }
            }
        }
    }
    for (i, &s) in state.iter().enumerate() {
        if s == 2 {
            edges.data[i] = 1.0;
        }
    }
    Ok(gaussian_blur(&edges, 1.0, 1))
}

/// Placeholder depth: blurred luminance (sigma = min(H, W) / 16) rescaled to
/// [0, 1]. Constant inputs give an all-zero map. Real depth maps should be
/// loaded from file when available.
pub fn pseudo_depth(img: &Image) -> Image {
    let gray = luminance(img);
    let sigma = img.height.min(img.width) as f64 / 16.0;
    let radius = (3.0 * sigma).ceil() as usize;
    let mut depth = gaussian_blur(&gray, sigma, radius);
    let (lo, hi) = depth
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    if !(range > 1e-12) {
        return Image::zeros(img.height, img.width, 1);
    }
    depth.data.iter_mut().for_each(|v| *v = ((*v - lo) / range).clamp(0.0, 1.0));
    depth
}

/// Maps values in [0, 1] of a single-channel image to a blue-to-yellow ramp.
pub fn heatmap(values: &Image) -> Image {
    const STOPS: [[f64; 3]; 5] = [
        [0.267, 0.005, 0.329],
        [0.230, 0.322, 0.546],
        [0.128, 0.567, 0.551],
        [0.369, 0.789, 0.383],
        [0.993, 0.906, 0.144],
    ];
    let mut out = Image::zeros(values.height, values.width, 3);
    for y in 0..values.height {
        for x in 0..values.width {
            let v = values.get(y, x, 0).clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
            let i = (v.floor() as usize).min(STOPS.len() - 2);
            let f = v - i as f64;
            let px = out.pixel_mut(y, x);
            for c in 0..3 {
                px[c] = (1.0 - f) * STOPS[i][c] + f * STOPS[i + 1][c];
            }
        }
    }
    out
}

#[inline]
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads an 8-bit grayscale or RGB(A) PNG. Alpha is dropped.
pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(
        |source| Error::Image {
            path: path.to_path_buf(),
            source,
        },
    )?;
    use image::DynamicImage as D;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        D::ImageLuma8(buf) => {
            let data = buf.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
            Image::from_vec(h, w, 1, data)
        }
        D::ImageLumaA8(_) => {
            let data = img
                .to_luma8()
                .into_raw()
                .into_iter()
                .map(|b| b as f64 / 255.0)
                .collect();
            Image::from_vec(h, w, 1, data)
        }
        D::ImageRgb8(_) | D::ImageRgba8(_) => {
            let data = img
                .to_rgb8()
                .into_raw()
                .into_iter()
                .map(|b| b as f64 / 255.0)
                .collect();
            Image::from_vec(h, w, 3, data)
        }
        other => Err(Error::UnsupportedImage {
            path: path.to_path_buf(),
            detail: format!("{:?} (only 8-bit gray/RGB supported)", other.color()),
        }),
    }
}

/// Writes an 8-bit PNG (grayscale for 1 channel, RGB for 3), clamping to [0, 1].
pub fn write_png(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_byte(v)).collect();
    let color = match img.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => {
            return Err(Error::UnsupportedImage {
                path: path.to_path_buf(),
                detail: format!("{c} channels"),
            })
        }
    };
    image::save_buffer_with_format(
        path,
        &bytes,
        img.width as u32,
        img.height as u32,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_image() -> Image {
        let mut img = Image::zeros(32, 32, 3);
        for y in 8..24 {
            for x in 8..24 {
                img.pixel_mut(y, x).fill(1.0);
            }
        }
        img
    }

    #[test]
    fn resize_same_size_is_identity() {
        let img = Image::from_vec(2, 3, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(bilinear_resize(&img, 2, 3), img);
    }

    #[test]
    fn checkerboard_to_single_pixel_is_mean() {
        let img = Image::from_vec(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = bilinear_resize(&img, 1, 1);
        assert!((out.get(0, 0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Image::from_pixel(5, 7, &[0.3, 0.6, 0.9]);
        for (h, w) in [(1, 1), (3, 11), (17, 4)] {
            let out = bilinear_resize(&img, h, w);
            for px in out.data().chunks(3) {
                assert_eq!(px, &[0.3, 0.6, 0.9]);
            }
        }
    }

    #[test]
    fn integer_downscale_preserves_mean() {
        let data: Vec<f64> = (0..64).map(|i| ((i * 37) % 17) as f64 / 17.0).collect();
        let img = Image::from_vec(8, 8, 1, data).unwrap();
        let out = bilinear_resize(&img, 4, 4);
        assert!((img.mean_pixel()[0] - out.mean_pixel()[0]).abs() < 1e-6);
    }

    #[test]
    fn resize_adjoint_matches_inner_product() {
        let a: Vec<f64> = (0..6 * 5 * 2).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..13 * 9 * 2).map(|i| (i as f64 * 0.11).cos()).collect();
        let v = Image::from_vec(6, 5, 2, a).unwrap();
        let u = Image::from_vec(13, 9, 2, b).unwrap();
        let lhs = bilinear_resize(&v, 13, 9).dot(&u);
        let rhs = v.dot(&bilinear_resize_adjoint(&u, 6, 5));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn canny_constant_is_zero() {
        let img = Image::from_pixel(16, 16, &[0.4, 0.4, 0.4]);
        let e = canny(&img, CannyParams::default()).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn canny_square_edges_near_boundary() {
        let e = canny(&square_image(), CannyParams::default()).unwrap();
        assert!(e.data().iter().any(|&v| v > 0.0));
        assert!(e.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Distance to the square outline, measured between pixel centers and
        // the outline at x = 7.5 / 23.5 and y = 7.5 / 23.5.
        let outline_dist = |y: usize, x: usize| {
            let (fy, fx) = (y as f64, x as f64);
            let inside_y = (7.5..=23.5).contains(&fy);
            let inside_x = (7.5..=23.5).contains(&fx);
            let dy = (fy - 7.5).abs().min((fy - 23.5).abs());
            let dx = (fx - 7.5).abs().min((fx - 23.5).abs());
            match (inside_y, inside_x) {
                (true, true) => dy.min(dx),
                (true, false) => dx,
                (false, true) => dy,
                (false, false) => dy.max(dx),
            }
        };
        for y in 0..32 {
            for x in 0..32 {
                if e.get(y, x, 0) > 0.0 {
                    assert!(outline_dist(y, x) <= 2.0, "response at ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn canny_thresholds_are_contrast_invariant() {
        let half = square_image().scaled(0.5);
        let full = half.scaled(2.0);
        let a = canny(&half, CannyParams::default()).unwrap();
        let b = canny(&full, CannyParams::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn canny_rejects_bad_thresholds() {
        let img = square_image();
        assert!(canny(&img, CannyParams { low: 0.3, high: 0.2 }).is_err());
    }

    #[test]
    fn pseudo_depth_range_and_monotonicity() {
        let flat = Image::from_pixel(8, 8, &[0.7, 0.7, 0.7]);
        assert!(pseudo_depth(&flat).data().iter().all(|&v| v == 0.0));

        let mut img = Image::zeros(32, 32, 3);
        for y in 0..32 {
            for x in 16..32 {
                img.pixel_mut(y, x).fill(1.0);
            }
        }
        let d = pseudo_depth(&img);
        let lo = d.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = d.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
        assert!(d.get(16, 28, 0) > d.get(16, 3, 0));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("black.png");
        write_png(&path, &Image::zeros(1, 1, 3)).unwrap();
        assert_eq!(read_png(&path).unwrap(), Image::zeros(1, 1, 3));

        let data: Vec<f64> = (0..4 * 3 * 3).map(|i| ((i * 29) % 256) as f64 / 255.0).collect();
        let img = Image::from_vec(4, 3, 3, data).unwrap();
        let path = dir.path().join("rgb.png");
        write_png(&path, &img).unwrap();
        assert!(read_png(&path).unwrap().max_abs_diff(&img) <= 1.0 / 255.0);
    }

    #[test]
    fn read_missing_png_fails() {
        assert!(read_png("/nonexistent/nothing.png").is_err());
    }

    #[test]
    fn nearest_upscale_replicates() {
        let img = Image::from_vec(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let up = upscale_nearest(&img, 3);
        assert_eq!(up.dims(), (3, 6, 1));
        assert_eq!(up.get(2, 2, 0), 0.0);
        assert_eq!(up.get(2, 3, 0), 1.0);
    }
}
