//! Gradient assembly for one optimization step: the score-distillation
//! noise and semantic terms pulled back through augmentation and the
//! generator, plus the high-frequency (FFT) smoothness loss.

use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig, AugmentSample};
use crate::error::{Error, Result};
use crate::generator::{self, Field, GumbelDraw, LogitField};
use crate::guidance::{Condition, GuidanceBackend, GuidanceRequest, NoisePredictor, TimestepSchedule};
use crate::imaging::{self, Image, LUMA};
use crate::palette::Palette;
use crate::rng::{SeedStreams, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Guidance scale on the semantic term.
    pub s: f64,
    /// Weight of the FFT smoothness loss.
    pub w_fft: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { s: 40.0, w_fft: 20.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.s >= 0.0 && self.w_fft >= 0.0) {
            return Err(Error::config("loss", "s and w_fft must be >= 0"));
        }
        Ok(())
    }
}

/// Binary high-pass mask on the centered spectrum: 0 within `radius` of the
/// center (DC), 1 elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct FftMask {
    height: usize,
    width: usize,
    radius: usize,
    /// Row-major, in centered (shifted) frequency coordinates.
    mask: Vec<f64>,
}

impl FftMask {
    pub fn new(height: usize, width: usize, radius: usize) -> Result<Self> {
        let (ch, cw) = ((height / 2) as f64, (width / 2) as f64);
        let r2 = (radius * radius) as f64;
        let mut mask = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let d2 = (y as f64 - ch).powi(2) + (x as f64 - cw).powi(2);
                mask.push(if d2 <= r2 { 0.0 } else { 1.0 });
            }
        }
        if mask.iter().sum::<f64>() == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "FFT mask of radius {radius} covers the whole {height}x{width} spectrum"
            )));
        }
        Ok(FftMask {
            height,
            width,
            radius,
            mask,
        })
    }

    /// Radius `max(1, floor(min(H, W) / 8))`.
    pub fn default_for(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, (height.min(width) / 8).max(1))
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Mask value at centered frequency `(y, x)`.
    pub fn at_shifted(&self, y: usize, x: usize) -> f64 {
        self.mask[y * self.width + x]
    }

    /// Mask value at unshifted frequency `(u, v)`, DC at `(0, 0)`.
    pub fn at_natural(&self, u: usize, v: usize) -> f64 {
        self.at_shifted((u + self.height / 2) % self.height, (v + self.width / 2) % self.width)
    }

    pub fn l1(&self) -> f64 {
        self.mask.iter().sum()
    }
}

fn fft2(data: &mut [Complex<f64>], height: usize, width: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(width), planner.plan_fft_inverse(height))
    } else {
        (planner.plan_fft_forward(width), planner.plan_fft_forward(height))
    };
    for r in data.chunks_exact_mut(width) {
        row.process(r);
    }
    let mut column = vec![Complex::new(0.0, 0.0); height];
    for x in 0..width {
        for y in 0..height {
            column[y] = data[y * width + x];
        }
        col.process(&mut column);
        for y in 0..height {
            data[y * width + x] = column[y];
        }
    }
}

/// Mean masked magnitude of the centered 2-D spectrum of the image's
/// luminance, and its gradient with respect to the image. The subgradient
/// of `|z|` at `z = 0` is taken as 0.
pub fn fft_loss(x: &Image, mask: &FftMask) -> Result<(f64, Image)> {
    let (h, w, c) = x.dims();
    if mask.dims() != (h, w) {
        return Err(Error::shape(
            "fft_loss mask",
            format!("{}x{}", mask.height, mask.width),
            format!("{h}x{w}"),
        ));
    }
    let gray = imaging::luminance(x);
    let mut spec: Vec<Complex<f64>> = gray.data().iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2(&mut spec, h, w, false);

    let norm = mask.l1();
    let mut value = 0.0;
    let mut dir = vec![Complex::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let m = mask.at_natural(u, v);
            if m == 0.0 {
                continue;
            }
            let z = spec[u * w + v];
            let mag = z.norm();
            value += m * mag;
            if mag > 0.0 {
                dir[u * w + v] = z * (m / mag);
            }
        }
    }
    fft2(&mut dir, h, w, true);

    let mut grad = Image::zeros(h, w, c);
    for y in 0..h {
        for xx in 0..w {
            let g = dir[y * w + xx].re / norm;
            let px = grad.pixel_mut(y, xx);
            if c == 1 {
                px[0] = g;
            } else {
                for ch in 0..3 {
                    px[ch] = LUMA[ch] * g;
                }
            }
        }
    }
    Ok((value / norm, grad))
}

/// How per-pixel blend weights are drawn during optimization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sampling {
    /// Gumbel-softmax temperature.
    pub tau: f64,
    /// Perturb logits with Gumbel noise; plain softmax blending otherwise.
    pub gumbel: bool,
    /// Render the hard argmax forward while differentiating through the
    /// soft weights.
    pub straight_through: bool,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling {
            tau: 1.0,
            gumbel: true,
            straight_through: false,
        }
    }
}

/// Everything about a step that is fixed for the whole run.
#[derive(Clone, Debug)]
pub struct StepSettings {
    pub sampling: Sampling,
    pub weights: LossWeights,
    pub augment: AugmentConfig,
    pub timesteps: TimestepSchedule,
    pub total_steps: usize,
    pub mask: FftMask,
}

impl StepSettings {
    pub fn render_size(&self) -> (usize, usize) {
        self.mask.dims()
    }

    pub fn target_size(&self) -> (usize, usize) {
        self.augment.resolved_target(self.render_size())
    }
}

/// The random inputs of one step, drawn up front so they can be frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNoise {
    pub gumbel: Option<Field>,
    pub augment: AugmentSample,
    pub t: usize,
    pub eps: Image,
}

impl StepNoise {
    pub fn draw(theta: &LogitField, settings: &StepSettings, step: usize, seeds: &SeedStreams) -> Result<Self> {
        let step_id = step as u64;
        let gumbel = settings.sampling.gumbel.then(|| {
            let (h, w, n) = theta.dims();
            generator::gumbel_noise(h, w, n, seeds.seed(Stream::Gumbel, step_id))
        });
        let target = settings.target_size();
        let augment = augment::sample_augment(&settings.augment, target, seeds.seed(Stream::Augment, step_id))?;
        let t = settings
            .timesteps
            .sample(step, settings.total_steps, &mut seeds.rng(Stream::Timestep, step_id));
        let mut rng = seeds.rng(Stream::Epsilon, step_id);
        let data = (0..target.0 * target.1 * 3)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let eps = Image::from_vec(target.0, target.1, 3, data)?;
        Ok(StepNoise { gumbel, augment, t, eps })
    }
}

/// Per-step diagnostics. Norms are of the logit-space gradient of each term.
#[derive(Clone, Debug)]
pub struct Diagnostics {
    pub t: usize,
    pub grad_norm_noise: f64,
    pub grad_norm_sem: f64,
    pub fft_loss: f64,
    /// Backend gradient images in augmented pixel space.
    pub grad_noise_image: Image,
    pub grad_sem_image: Image,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub grad: LogitField,
    pub diagnostics: Diagnostics,
}

/// Render and backward weights for a step.
struct Forward {
    render_weights: Field,
    grad_weights: Field,
    scale: f64,
    x: Image,
}

fn forward(theta: &LogitField, palette: &Palette, sampling: &Sampling, noise: &StepNoise) -> Result<Forward> {
    let (weights, scale) = match &noise.gumbel {
        Some(g) => {
            let draw = GumbelDraw::with_noise(theta, g.clone(), sampling.tau, 0)?;
            (draw.weights, 1.0 / sampling.tau)
        }
        None => (generator::softmax_probs(theta), 1.0),
    };
    let render_weights = if sampling.straight_through {
        let mut hard = Field::zeros(weights.height(), weights.width(), weights.n());
        for (dst, k) in hard.pixels_mut().zip(weights.argmax()) {
            dst[k] = 1.0;
        }
        hard
    } else {
        weights.clone()
    };
    let x = generator::render_weights(&render_weights, palette)?;
    Ok(Forward {
        render_weights,
        grad_weights: weights,
        scale,
        x,
    })
}

/// The image the step renders before augmentation.
pub fn step_render(theta: &LogitField, palette: &Palette, sampling: &Sampling, noise: &StepNoise) -> Result<Image> {
    Ok(forward(theta, palette, sampling, noise)?.x)
}

fn augmented_condition(condition: &Condition, sample: &AugmentSample) -> Condition {
    Condition {
        canny: condition.canny.as_ref().map(|c| augment::apply(sample, c, [0.0; 3])),
        depth: condition.depth.as_ref().map(|d| augment::apply(sample, d, [0.0; 3])),
        ..condition.clone()
    }
}

fn pull_back(
    fwd: &Forward,
    palette: &Palette,
    sample: &AugmentSample,
    grad_aug: &Image,
) -> Result<(Image, LogitField)> {
    let (h, w, _) = fwd.x.dims();
    let gx = augment::vjp(sample, grad_aug, h, w)?;
    let v = generator::blend_adjoint(&gx, fwd.grad_weights.height(), fwd.grad_weights.width(), palette)?;
    let g = generator::softmax_vjp(&v, &fwd.grad_weights, fwd.scale);
    Ok((gx, g))
}

/// One stochastic gradient sample with all randomness frozen in `noise`.
pub fn lsds_step_frozen(
    theta: &LogitField,
    palette: &Palette,
    backend: &mut dyn GuidanceBackend,
    settings: &StepSettings,
    condition: &Condition,
    noise: &StepNoise,
) -> Result<StepOutput> {
    let fwd = forward(theta, palette, &settings.sampling, noise)?;
    debug_assert_eq!(fwd.render_weights.dims(), theta.dims());
    let x_aug = augment::apply(&noise.augment, &fwd.x, [0.0; 3]);
    let cond = augmented_condition(condition, &noise.augment);
    let grads = backend.evaluate(&GuidanceRequest {
        x: &x_aug,
        eps: &noise.eps,
        t: noise.t,
        condition: &cond,
    })?;
    x_aug.check_shape(&grads.grad_noise, "backend grad_noise")?;
    x_aug.check_shape(&grads.grad_sem, "backend grad_sem")?;

    let (noise_x, noise_theta) = pull_back(&fwd, palette, &noise.augment, &grads.grad_noise)?;
    let (sem_x, sem_theta) = pull_back(&fwd, palette, &noise.augment, &grads.grad_sem)?;

    let (fft_value, fft_grad) = fft_loss(&fwd.x, &settings.mask)?;
    let mut total_x = noise_x;
    total_x.add_scaled(&sem_x, settings.weights.s);
    total_x.add_scaled(&fft_grad, settings.weights.w_fft);
    let v = generator::blend_adjoint(&total_x, theta.height(), theta.width(), palette)?;
    let grad = generator::softmax_vjp(&v, &fwd.grad_weights, fwd.scale);

    Ok(StepOutput {
        grad,
        diagnostics: Diagnostics {
            t: noise.t,
            grad_norm_noise: noise_theta.norm(),
            grad_norm_sem: sem_theta.norm(),
            fft_loss: fft_value,
            grad_noise_image: grads.grad_noise,
            grad_sem_image: grads.grad_sem,
        },
    })
}

/// Draws the step's randomness from the seed streams and evaluates it.
pub fn lsds_step(
    theta: &LogitField,
    palette: &Palette,
    backend: &mut dyn GuidanceBackend,
    settings: &StepSettings,
    condition: &Condition,
    step: usize,
    seeds: &SeedStreams,
) -> Result<StepOutput> {
    let noise = StepNoise::draw(theta, settings, step, seeds)?;
    lsds_step_frozen(theta, palette, backend, settings, condition, &noise)
}

/// The same gradient formed from the guided residual `w(t) (eps_guided - eps)`
/// in one piece instead of as noise plus scaled semantic terms.
pub fn monolithic_gradient(
    theta: &LogitField,
    palette: &Palette,
    predictor: &dyn NoisePredictor,
    settings: &StepSettings,
    condition: &Condition,
    noise: &StepNoise,
) -> Result<LogitField> {
    let fwd = forward(theta, palette, &settings.sampling, noise)?;
    let x_aug = augment::apply(&noise.augment, &fwd.x, [0.0; 3]);
    let cond = augmented_condition(condition, &noise.augment);
    let residual = predictor.guided_residual(
        &GuidanceRequest {
            x: &x_aug,
            eps: &noise.eps,
            t: noise.t,
            condition: &cond,
        },
        settings.weights.s,
    )?;
    let (mut gx, _) = pull_back(&fwd, palette, &noise.augment, &residual)?;
    let (_, fft_grad) = fft_loss(&fwd.x, &settings.mask)?;
    gx.add_scaled(&fft_grad, settings.weights.w_fft);
    let v = generator::blend_adjoint(&gx, theta.height(), theta.width(), palette)?;
    Ok(generator::softmax_vjp(&v, &fwd.grad_weights, fwd.scale))
}
