//! Diffusion-side pieces of score distillation: the variance-preserving
//! noise schedule, classifier-free guidance, the guidance-backend contract
//! and its implementations (two exact in-process oracles and a client for
//! remote model servers speaking the wire protocol in [`protocol`]).

mod oracle;
pub mod protocol;
mod remote;
pub mod server;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;

pub use oracle::{delta_terms_f32, gmm_oracle, DeltaOracle, GmmOracle, Mixture};
pub use remote::{RemoteBackend, DEFAULT_TIMEOUT};

pub const DEFAULT_STEPS: usize = 1000;
const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 0.02;

/// `alpha_t`, `sigma_t` for `t = 0..=T` with `alpha_t^2 + sigma_t^2 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// DDPM linear-beta schedule (1e-4 to 0.02 over `steps`); `t = 0` is noise-free.
    pub fn linear_beta(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!("schedule needs T >= 2, got {steps}")));
        }
        let mut alpha = Vec::with_capacity(steps + 1);
        let mut sigma = Vec::with_capacity(steps + 1);
        let mut alpha_bar = 1.0f64;
        alpha.push(1.0);
        sigma.push(0.0);
        for s in 1..=steps {
            let beta = BETA_START + (BETA_END - BETA_START) * (s - 1) as f64 / (steps - 1) as f64;
            alpha_bar *= 1.0 - beta;
            alpha.push(alpha_bar.sqrt());
            sigma.push((1.0 - alpha_bar).sqrt());
        }
        Ok(NoiseSchedule { alpha, sigma })
    }

    /// `T`, the largest valid timestep.
    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// Score-distillation weight `w(t) = sigma_t^2`.
    pub fn weight(&self, t: usize) -> f64 {
        self.sigma[t] * self.sigma[t]
    }

    /// Rejects `t = 0` (no noise) and out-of-range steps.
    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Backend(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `x_t = alpha_t x + sigma_t eps`.
    pub fn noised(&self, x: &Image, eps: &Image, t: usize) -> Image {
        let (a, s) = (self.alpha[t], self.sigma[t]);
        let mut out = x.scaled(a);
        out.add_scaled(eps, s);
        out
    }
}

/// `eps_cond + s * (eps_cond - eps_uncond)`.
pub fn cfg_combine(eps_cond: &Image, eps_uncond: &Image, scale: f64) -> Result<Image> {
    eps_cond.check_shape(eps_uncond, "cfg_combine")?;
    let mut out = eps_cond.clone();
    for (o, u) in out.data_mut().iter_mut().zip(eps_uncond.data()) {
        *o += scale * (*o - u);
    }
    Ok(out)
}

/// Prompt and spatial conditioning forwarded to the backend. Conditioning
/// images are expected already augmented to the backend input size.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub prompt: String,
    pub uncond_prompt: String,
    pub canny: Option<Image>,
    pub depth: Option<Image>,
    pub canny_scale: f64,
    pub depth_scale: f64,
}

impl Default for Condition {
    fn default() -> Self {
        Condition {
            prompt: String::new(),
            uncond_prompt: String::new(),
            canny: None,
            depth: None,
            canny_scale: 0.35,
            depth_scale: 0.35,
        }
    }
}

impl Condition {
    pub fn validate(&self) -> Result<()> {
        if !(self.canny_scale >= 0.0 && self.depth_scale >= 0.0) {
            return Err(Error::config("backend.canny_scale/depth_scale", "must be >= 0"));
        }
        Ok(())
    }
}

/// One backend evaluation: the augmented render, the noise sample and the
/// timestep.
#[derive(Clone, Copy, Debug)]
pub struct GuidanceRequest<'a> {
    pub x: &'a Image,
    pub eps: &'a Image,
    pub t: usize,
    pub condition: &'a Condition,
}

impl GuidanceRequest<'_> {
    pub fn validate(&self) -> Result<()> {
        self.x.check_shape(self.eps, "guidance request eps")?;
        if self.x.channels() != 3 {
            return Err(Error::shape("guidance request x", "3 channels", self.x.channels()));
        }
        Ok(())
    }
}

/// Pixel-space gradients of the two score-distillation terms, both already
/// multiplied by `w(t)` and pulled back through any encoder:
/// `grad_noise = w(t) (eps_cond - eps)`, `grad_sem = w(t) (eps_cond - eps_uncond)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceGrad {
    pub grad_noise: Image,
    pub grad_sem: Image,
    pub t: usize,
}

impl GuidanceGrad {
    /// `grad_noise + s * grad_sem`.
    pub fn combined(&self, s: f64) -> Image {
        let mut g = self.grad_noise.clone();
        g.add_scaled(&self.grad_sem, s);
        g
    }
}

/// Anything that returns the noise and semantic gradient terms for an
/// augmented render. Must be deterministic in its inputs.
pub trait GuidanceBackend {
    fn name(&self) -> &str;

    fn evaluate(&mut self, request: &GuidanceRequest<'_>) -> Result<GuidanceGrad>;
}

/// In-process denoisers with an identity encoder. Exposes the raw noise
/// predictions so the guided residual can also be formed in one piece.
pub trait NoisePredictor {
    fn schedule(&self) -> &NoiseSchedule;

    fn predict(&self, x_t: &Image, t: usize, conditional: bool) -> Result<Image>;

    /// The two gradient terms, formed separately.
    fn decomposed(&self, req: &GuidanceRequest<'_>) -> Result<GuidanceGrad> {
        req.validate()?;
        let sched = self.schedule();
        sched.check_timestep(req.t)?;
        let x_t = sched.noised(req.x, req.eps, req.t);
        let eps_c = self.predict(&x_t, req.t, true)?;
        let eps_u = self.predict(&x_t, req.t, false)?;
        let w = sched.weight(req.t);
        let mut grad_noise = eps_c.clone();
        grad_noise.add_scaled(req.eps, -1.0);
        let mut grad_sem = eps_c;
        grad_sem.add_scaled(&eps_u, -1.0);
        Ok(GuidanceGrad {
            grad_noise: grad_noise.scaled(w),
            grad_sem: grad_sem.scaled(w),
            t: req.t,
        })
    }

    /// `w(t) (eps_guided - eps)` with `eps_guided` from [`cfg_combine`].
    fn guided_residual(&self, req: &GuidanceRequest<'_>, scale: f64) -> Result<Image> {
        req.validate()?;
        let sched = self.schedule();
        sched.check_timestep(req.t)?;
        let x_t = sched.noised(req.x, req.eps, req.t);
        let eps_c = self.predict(&x_t, req.t, true)?;
        let eps_u = self.predict(&x_t, req.t, false)?;
        let mut r = cfg_combine(&eps_c, &eps_u, scale)?;
        r.add_scaled(req.eps, -1.0);
        Ok(r.scaled(sched.weight(req.t)))
    }
}

/// Uniform timestep sampling `t ~ U{a, ..., b(step)}` where the upper bound
/// falls linearly from `b_start` to `b_end` over the first half of training
/// and stays at `b_end` afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimestepSchedule {
    pub a: usize,
    pub b_start: usize,
    pub b_end: usize,
}

impl Default for TimestepSchedule {
    fn default() -> Self {
        TimestepSchedule {
            a: 20,
            b_start: 980,
            b_end: 800,
        }
    }
}

impl TimestepSchedule {
    pub fn validate(&self, max_t: usize) -> Result<()> {
        if !(0 < self.a && self.a < self.b_end && self.b_end <= self.b_start && self.b_start <= max_t) {
            return Err(Error::config(
                "timestep",
                format!(
                    "need 0 < a < b_end <= b_start <= {max_t}, got a={} b_start={} b_end={}",
                    self.a, self.b_start, self.b_end
                ),
            ));
        }
        Ok(())
    }

    pub fn upper(&self, step: usize, total_steps: usize) -> usize {
        let half = total_steps as f64 / 2.0;
        let frac = if half > 0.0 {
            (step as f64 / half).min(1.0)
        } else {
            1.0
        };
        let b = self.b_start as f64 + (self.b_end as f64 - self.b_start as f64) * frac;
        b.round() as usize
    }

    pub fn sample<R: Rng + ?Sized>(&self, step: usize, total_steps: usize, rng: &mut R) -> usize {
        rng.random_range(self.a..=self.upper(step, total_steps))
    }
}
