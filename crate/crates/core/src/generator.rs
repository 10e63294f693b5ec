//! The stochastic quantized image generator.
//!
//! Parameters are a per-pixel logit vector over the palette. A render is a
//! per-pixel convex blend of palette elements with weights taken from the
//! softmax of the logits, from a Gumbel-softmax draw, or one-hot at the
//! argmax. Gradients flow back through the blend and the softmax Jacobian.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::palette::Palette;

/// Uniform draws are clamped to this distance from {0, 1} before the
/// double-log transform.
pub const GUMBEL_UNIFORM_CLAMP: f64 = 1e-12;

/// `H x W x n` array laid out pixel-major (`n` contiguous values per pixel).
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    height: usize,
    width: usize,
    n: usize,
    data: Vec<f64>,
}

/// Generator parameters: the per-pixel palette logits.
pub type LogitField = Field;
/// Per-pixel categorical probabilities.
pub type ProbField = Field;

impl Field {
    pub fn zeros(height: usize, width: usize, n: usize) -> Self {
        Field {
            height,
            width,
            n,
            data: vec![0.0; height * width * n],
        }
    }

    pub fn from_vec(height: usize, width: usize, n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * n {
            return Err(Error::shape("Field::from_vec", height * width * n, data.len()));
        }
        Ok(Field {
            height,
            width,
            n,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Palette size.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.n)
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

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.n;
        &self.data[i..i + self.n]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.n;
        let n = self.n;
        &mut self.data[i..i + n]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.n)
    }

    pub fn pixels_mut(&mut self) -> std::slice::ChunksExactMut<'_, f64> {
        self.data.chunks_exact_mut(self.n)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn same_shape(&self, other: &Field) -> bool {
        self.dims() == other.dims()
    }

    /// Per-pixel index of the largest entry, ties to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        self.pixels().map(argmax).collect()
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = k;
        }
    }
    best
}

/// Stable softmax of `logits / temperature` into `out`.
fn softmax_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = ((l - max) / temperature).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Distance used when initializing logits from an image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    L1,
    L2,
}

/// Logits from a downsampled image: the negative distance from each pixel
/// to each palette element's mean color, then centered.
pub fn init_from_image(image_ds: &Image, palette: &Palette, norm: Norm) -> Result<LogitField> {
    if image_ds.channels() != 3 {
        return Err(Error::shape("init_from_image", "3 channels", image_ds.channels()));
    }
    let colors = palette.mean_colors();
    let mut theta = Field::zeros(image_ds.height(), image_ds.width(), palette.len());
    for y in 0..image_ds.height() {
        for x in 0..image_ds.width() {
            let p = image_ds.pixel(y, x);
            for (l, c) in theta.pixel_mut(y, x).iter_mut().zip(&colors) {
                let d = match norm {
                    Norm::L1 => (0..3).map(|i| (p[i] - c[i]).abs()).sum::<f64>(),
                    Norm::L2 => (0..3).map(|i| (p[i] - c[i]).powi(2)).sum::<f64>().sqrt(),
                };
                *l = -d;
            }
        }
    }
    Ok(center(theta))
}

/// I.i.d. `N(0, scale^2)` logits, centered.
pub fn init_random(height: usize, width: usize, n: usize, seed: u64, scale: f64) -> Result<LogitField> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("init scale must be > 0, got {scale}")));
    }
    let normal = Normal::new(0.0, scale).expect("valid normal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..height * width * n).map(|_| normal.sample(&mut rng)).collect();
    Ok(center(Field::from_vec(height, width, n, data)?))
}

/// Subtracts each pixel's channel mean. Softmax is invariant to this.
pub fn center(mut theta: LogitField) -> LogitField {
    center_in_place(&mut theta);
    theta
}

pub fn center_in_place(theta: &mut LogitField) {
    let n = theta.n as f64;
    for px in theta.pixels_mut() {
        let mean = px.iter().sum::<f64>() / n;
        px.iter_mut().for_each(|v| *v -= mean);
    }
}

pub fn softmax_probs(theta: &LogitField) -> ProbField {
    let mut out = Field::zeros(theta.height, theta.width, theta.n);
    for (src, dst) in theta.pixels().zip(out.pixels_mut()) {
        softmax_into(src, 1.0, dst);
    }
    out
}

/// A frozen Gumbel-softmax draw: the noise and the resulting weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelDraw {
    /// `G ~ Gumbel(0, 1)`, same layout as the logits.
    pub noise: Field,
    /// Softmax of `(logits + noise) / tau`.
    pub weights: Field,
    pub tau: f64,
    pub seed: u64,
}

/// Gumbel(0, 1) noise for an `H x W x n` field.
pub fn gumbel_noise(height: usize, width: usize, n: usize, seed: u64) -> Field {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hi = 1.0 - GUMBEL_UNIFORM_CLAMP;
    let data = (0..height * width * n)
        .map(|_| {
            let u: f64 = rng.random::<f64>().clamp(GUMBEL_UNIFORM_CLAMP, hi);
            -(-u.ln()).ln()
        })
        .collect();
    Field {
        height,
        width,
        n,
        data,
    }
}

impl GumbelDraw {
    /// Recomputes weights for fixed noise. Used to hold `G` constant while
    /// the logits move (finite differences, frozen steps).
    pub fn with_noise(theta: &LogitField, noise: Field, tau: f64, seed: u64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("tau must be > 0, got {tau}")));
        }
        if !noise.same_shape(theta) {
            return Err(Error::shape(
                "GumbelDraw::with_noise",
                format!("{:?}", theta.dims()),
                format!("{:?}", noise.dims()),
            ));
        }
        let mut weights = Field::zeros(theta.height, theta.width, theta.n);
        let mut y = vec![0.0; theta.n];
        for ((l, g), w) in theta.pixels().zip(noise.pixels()).zip(weights.pixels_mut()) {
            for k in 0..y.len() {
                y[k] = l[k] + g[k];
            }
            softmax_into(&y, tau, w);
        }
        Ok(GumbelDraw {
            noise,
            weights,
            tau,
            seed,
        })
    }

    /// Per-pixel argmax of the perturbed logits `theta + G`.
    pub fn sampled_indices(&self, theta: &LogitField) -> Vec<usize> {
        theta
            .pixels()
            .zip(self.noise.pixels())
            .map(|(l, g)| {
                let y: Vec<f64> = l.iter().zip(g).map(|(a, b)| a + b).collect();
                argmax(&y)
            })
            .collect()
    }
}

pub fn gumbel_sample(theta: &LogitField, tau: f64, seed: u64) -> Result<GumbelDraw> {
    let noise = gumbel_noise(theta.height, theta.width, theta.n, seed);
    GumbelDraw::with_noise(theta, noise, tau, seed)
}

/// Source of per-pixel blend weights for [`render`].
#[derive(Clone, Copy, Debug)]
pub enum RenderMode<'a> {
    Argmax,
    Softmax,
    Gumbel(&'a GumbelDraw),
}

fn check_palette(theta: &Field, palette: &Palette) -> Result<()> {
    if theta.n != palette.len() {
        return Err(Error::shape("palette size", theta.n, palette.len()));
    }
    Ok(())
}

/// Renders an `(H*h) x (W*w) x 3` image.
pub fn render(theta: &LogitField, palette: &Palette, mode: RenderMode<'_>) -> Result<Image> {
    check_palette(theta, palette)?;
    match mode {
        RenderMode::Argmax => render_indices(&theta.argmax(), theta.height, theta.width, palette),
        RenderMode::Softmax => render_weights(&softmax_probs(theta), palette),
        RenderMode::Gumbel(draw) => render_weights(&draw.weights, palette),
    }
}

/// Places palette element `indices[i * W + j]` in grid cell `(i, j)`.
pub fn render_indices(indices: &[usize], height: usize, width: usize, palette: &Palette) -> Result<Image> {
    if indices.len() != height * width {
        return Err(Error::shape("render_indices", height * width, indices.len()));
    }
    let (th, tw) = palette.tile_dims();
    let mut out = Image::zeros(height * th, width * tw, 3);
    for i in 0..height {
        for j in 0..width {
            let k = indices[i * width + j];
            if k >= palette.len() {
                return Err(Error::InvalidArgument(format!(
                    "palette index {k} out of range for {} elements",
                    palette.len()
                )));
            }
            let tile = palette.element(k).pixels();
            for ty in 0..th {
                for tx in 0..tw {
                    out.pixel_mut(i * th + ty, j * tw + tx)
                        .copy_from_slice(&tile[ty * tw + tx]);
                }
            }
        }
    }
    Ok(out)
}

/// Per-cell convex blend `sum_k w_k * element_k`.
pub fn render_weights(weights: &Field, palette: &Palette) -> Result<Image> {
    check_palette(weights, palette)?;
    let (th, tw) = palette.tile_dims();
    let mut out = Image::zeros(weights.height * th, weights.width * tw, 3);
    for i in 0..weights.height {
        for j in 0..weights.width {
            let w = weights.pixel(i, j);
            for ty in 0..th {
                for tx in 0..tw {
                    let px = out.pixel_mut(i * th + ty, j * tw + tx);
                    for (k, e) in palette.elements().iter().enumerate() {
                        let c = e.pixels()[ty * tw + tx];
                        for ch in 0..3 {
                            px[ch] += w[k] * c[ch];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-pixel normalized entropy map and its mean.
pub fn entropy_map(pi: &ProbField) -> (Image, f64) {
    let log_n = (pi.n as f64).ln();
    let mut map = Image::zeros(pi.height, pi.width, 1);
    let mut total = 0.0;
    for (v, p) in map.data_mut().iter_mut().zip(pi.pixels()) {
        let h: f64 = p
            .iter()
            .filter(|&&q| q > 0.0)
            .map(|&q| -q * q.ln())
            .sum();
        *v = (h / log_n).clamp(0.0, 1.0);
        total += *v;
    }
    let mean = total / (pi.height * pi.width).max(1) as f64;
    (map, mean)
}

/// Transpose of [`render_weights`]: `v_k = <dL/dx over the cell, element_k>`.
pub fn blend_adjoint(dl_dx: &Image, height: usize, width: usize, palette: &Palette) -> Result<Field> {
    let (th, tw) = palette.tile_dims();
    if dl_dx.dims() != (height * th, width * tw, 3) {
        return Err(Error::shape(
            "blend_adjoint",
            format!("{}x{}x3", height * th, width * tw),
            dl_dx.shape_string(),
        ));
    }
    let n = palette.len();
    let mut v = Field::zeros(height, width, n);
    for i in 0..height {
        for j in 0..width {
            let out = v.pixel_mut(i, j);
            for ty in 0..th {
                for tx in 0..tw {
                    let g = dl_dx.pixel(i * th + ty, j * tw + tx);
                    for (k, e) in palette.elements().iter().enumerate() {
                        let c = e.pixels()[ty * tw + tx];
                        out[k] += g[0] * c[0] + g[1] * c[1] + g[2] * c[2];
                    }
                }
            }
        }
    }
    Ok(v)
}

/// Softmax Jacobian transpose applied per pixel: `w * (v - <v, w>) * scale`.
pub fn softmax_vjp(v: &Field, weights: &Field, scale: f64) -> Field {
    let mut out = Field::zeros(v.height, v.width, v.n);
    for ((g, vv), w) in out.pixels_mut().zip(v.pixels()).zip(weights.pixels()) {
        let inner: f64 = vv.iter().zip(w).map(|(a, b)| a * b).sum();
        for k in 0..g.len() {
            g[k] = w[k] * (vv[k] - inner) * scale;
        }
    }
    out
}

/// Gradient with respect to the logits of a loss on a render produced
/// from `weights`. For softmax renders pass `tau = 1`; for Gumbel draws
/// pass the draw's temperature (noise is held constant).
pub fn backprop_to_logits(dl_dx: &Image, weights: &Field, palette: &Palette, tau: f64) -> Result<Field> {
    check_palette(weights, palette)?;
    let v = blend_adjoint(dl_dx, weights.height, weights.width, palette)?;
    Ok(softmax_vjp(&v, weights, 1.0 / tau))
}
