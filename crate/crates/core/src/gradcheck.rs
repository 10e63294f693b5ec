//! Finite-difference checks of every differentiable stage, as run by the
//! `gradcheck` subcommand.
//!
//! Relative error per coordinate is `|a - f| / max(|a|, |f|, 1e-3 * max|a|)`
//! for analytic `a` and central difference `f`; the floor keeps entries that
//! are zero up to roundoff from dominating.

use crate::augment::{self, AugmentConfig, AugmentSample};
use crate::error::{Error, Result};
use crate::generator::{self, Field, GumbelDraw, LogitField};
use crate::guidance::{Condition, DeltaOracle, NoiseSchedule, TimestepSchedule};
use crate::imaging::Image;
use crate::loss::{self, FftMask, LossWeights, Sampling, StepNoise, StepSettings};
use crate::palette::Palette;
use crate::rng::{SeedStreams, Stream};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Generator,
    Augment,
    AugmentAdjoint,
    Fft,
    Pipeline,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Generator,
        Stage::Augment,
        Stage::AugmentAdjoint,
        Stage::Fft,
        Stage::Pipeline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generator => "generator",
            Stage::Augment => "augment",
            Stage::AugmentAdjoint => "augment-adjoint",
            Stage::Fft => "fft-loss",
            Stage::Pipeline => "pipeline",
        }
    }

    pub fn threshold(self) -> f64 {
        match self {
            Stage::Generator | Stage::Augment => 1e-6,
            Stage::AugmentAdjoint => 1e-9,
            Stage::Fft => 1e-5,
            Stage::Pipeline => 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Logit grid side, at most 8.
    pub size: usize,
    pub n: usize,
    pub seed: u64,
    /// Negates the analytic gradient of one stage (negative control).
    pub flip_sign: Option<Stage>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            size: 4,
            n: 3,
            seed: 0,
            flip_sign: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub stage: Stage,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.stage.threshold()
    }
}

/// Max relative error of `analytic` against central differences of `f`.
pub fn compare_fd(x: &[f64], analytic: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        let fd = (up - down) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs().max(fd.abs()).max(1e-3 * scale);
        if denom > 0.0 {
            worst = worst.max((a - fd).abs() / denom);
        }
    }
    worst
}

fn random_image(h: usize, w: usize, c: usize, rng: &mut impl Rng) -> Image {
    let data = (0..h * w * c).map(|_| rng.random::<f64>()).collect();
    Image::from_vec(h, w, c, data).expect("sized")
}

fn random_normal_image(h: usize, w: usize, c: usize, rng: &mut impl Rng) -> Image {
    let data = (0..h * w * c).map(|_| StandardNormal.sample(rng)).collect();
    Image::from_vec(h, w, c, data).expect("sized")
}

fn sign(stage: Stage, opts: &GradcheckOptions) -> f64 {
    if opts.flip_sign == Some(stage) {
        -1.0
    } else {
        1.0
    }
}

/// A perspective sample that actually moves the corners.
fn warped_sample(target: (usize, usize), seed: u64) -> Result<AugmentSample> {
    let cfg = AugmentConfig {
        p_gray: 0.0,
        p_flip: 1.0,
        p_persp: 1.0,
        ..AugmentConfig::default()
    };
    augment::sample_augment(&cfg, target, seed)
}

fn check_generator(opts: &GradcheckOptions, palette: &Palette, seeds: &SeedStreams) -> Result<f64> {
    let (s, n) = (opts.size, opts.n);
    let theta = generator::init_random(s, s, n, seeds.seed(Stream::Init, 1), 1.0)?;
    let noise = generator::gumbel_noise(s, s, n, seeds.seed(Stream::Gumbel, 1));
    let probe = random_image(s, s, 3, &mut seeds.rng(Stream::Epsilon, 1));
    let tau = 0.7;
    let weights = |t: &LogitField| -> Result<Field> { Ok(GumbelDraw::with_noise(t, noise.clone(), tau, 0)?.weights) };
    let grad = generator::backprop_to_logits(&probe, &weights(&theta)?, palette, tau)?;
    let flip = sign(Stage::Generator, opts);
    let analytic: Vec<f64> = grad.data().iter().map(|v| flip * v).collect();
    let mut err = None;
    let worst = compare_fd(theta.data(), &analytic, 1e-5, |x| {
        let t = Field::from_vec(s, s, n, x.to_vec()).expect("sized");
        match weights(&t).and_then(|w| generator::render_weights(&w, palette)) {
            Ok(img) => img.dot(&probe),
            Err(e) => {
                err = Some(e);
                0.0
            }
        }
    });
    err.map_or(Ok(worst), Err)
}

fn check_augment(opts: &GradcheckOptions, seeds: &SeedStreams) -> Result<(f64, f64)> {
    // Finite differences through the upsampling path, identity geometry.
    let (sh, sw, th, tw) = (6, 6, 12, 12);
    let mut rng = seeds.rng(Stream::Augment, 1);
    let x = random_image(sh, sw, 3, &mut rng);
    let probe = random_image(th, tw, 3, &mut rng);
    let identity = AugmentSample::identity((th, tw));
    let flip = sign(Stage::Augment, opts);
    let grad = augment::vjp(&identity, &probe, sh, sw)?;
    let analytic: Vec<f64> = grad.data().iter().map(|v| flip * v).collect();
    let fd = compare_fd(x.data(), &analytic, 1e-5, |v| {
        let img = Image::from_vec(sh, sw, 3, v.to_vec()).expect("sized");
        augment::apply(&identity, &img, [0.0; 3]).dot(&probe)
    });

    // Inner-product identity <A x, y> = <x, A^T y> under a warped sample.
    let sample = warped_sample((9, 11), seeds.seed(Stream::Augment, 2))?;
    let x = random_image(7, 5, 3, &mut rng);
    let y = random_image(9, 11, 3, &mut rng);
    let lhs = augment::apply(&sample, &x, [0.0; 3]).dot(&y);
    let rhs = sign(Stage::AugmentAdjoint, opts) * x.dot(&augment::vjp(&sample, &y, 7, 5)?);
    let adjoint = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12);
    Ok((fd, adjoint))
}

fn check_fft(opts: &GradcheckOptions, seeds: &SeedStreams) -> Result<f64> {
    let s = 8;
    let x = random_image(s, s, 3, &mut seeds.rng(Stream::Epsilon, 2));
    let mask = FftMask::default_for(s, s)?;
    let (_, grad) = loss::fft_loss(&x, &mask)?;
    let flip = sign(Stage::Fft, opts);
    let analytic: Vec<f64> = grad.data().iter().map(|v| flip * v).collect();
    Ok(compare_fd(x.data(), &analytic, 1e-5, |v| {
        let img = Image::from_vec(s, s, 3, v.to_vec()).expect("sized");
        loss::fft_loss(&img, &mask).map(|r| r.0).unwrap_or(f64::NAN)
    }))
}

/// Setup for the whole-step check: frozen noise, a delta oracle, and the
/// scalar whose gradient the step computes.
pub struct PipelineFixture {
    pub theta: LogitField,
    pub palette: Palette,
    pub settings: StepSettings,
    pub noise: StepNoise,
    pub oracle: DeltaOracle,
    pub target_cond: Image,
    pub target_uncond: Image,
    pub schedule: NoiseSchedule,
}

impl PipelineFixture {
    pub fn new(size: usize, n: usize, seed: u64) -> Result<Self> {
        let seeds = SeedStreams::new(seed);
        let palette = Palette::hue_wheel(n)?;
        let theta = generator::init_random(size, size, n, seeds.seed(Stream::Init, 3), 1.0)?;
        let target = (size + 3, size + 2);
        let settings = StepSettings {
            sampling: Sampling {
                tau: 0.8,
                gumbel: true,
                straight_through: false,
            },
            weights: LossWeights { s: 7.5, w_fft: 3.0 },
            augment: AugmentConfig {
                target_size: Some([target.0, target.1]),
                ..AugmentConfig::default()
            },
            timesteps: TimestepSchedule::default(),
            total_steps: 100,
            mask: FftMask::default_for(size, size)?,
        };
        let mut rng = seeds.rng(Stream::Epsilon, 3);
        let noise = StepNoise {
            gumbel: Some(generator::gumbel_noise(size, size, n, seeds.seed(Stream::Gumbel, 3))),
            augment: warped_sample(target, seeds.seed(Stream::Augment, 3))?,
            t: 400,
            eps: random_normal_image(target.0, target.1, 3, &mut rng),
        };
        let target_cond = random_image(target.0, target.1, 3, &mut rng);
        let target_uncond = random_image(target.0, target.1, 3, &mut rng);
        let schedule = NoiseSchedule::linear_beta(1000)?;
        let oracle = DeltaOracle::new(target_cond.clone(), target_uncond.clone(), schedule.clone())?;
        Ok(PipelineFixture {
            theta,
            palette,
            settings,
            noise,
            oracle,
            target_cond,
            target_uncond,
            schedule,
        })
    }

    /// `sigma alpha [ |A x - tc|^2 / 2 + s <tu - tc, A x> ] + w_fft L_fft(x)`,
    /// whose gradient is the delta-oracle step gradient.
    pub fn surrogate(&self, theta: &LogitField) -> Result<f64> {
        let x = loss::step_render(theta, &self.palette, &self.settings.sampling, &self.noise)?;
        let ax = augment::apply(&self.noise.augment, &x, [0.0; 3]);
        let t = self.noise.t;
        let k = self.schedule.sigma(t) * self.schedule.alpha(t);
        let mut diff = ax.clone();
        diff.add_scaled(&self.target_cond, -1.0);
        let mut sem = self.target_uncond.clone();
        sem.add_scaled(&self.target_cond, -1.0);
        let (fft, _) = loss::fft_loss(&x, &self.settings.mask)?;
        Ok(k * (0.5 * diff.dot(&diff) + self.settings.weights.s * sem.dot(&ax)) + self.settings.weights.w_fft * fft)
    }

    pub fn analytic(&mut self) -> Result<LogitField> {
        Ok(loss::lsds_step_frozen(
            &self.theta,
            &self.palette,
            &mut self.oracle,
            &self.settings,
            &Condition::default(),
            &self.noise,
        )?
        .grad)
    }
}

fn check_pipeline(opts: &GradcheckOptions) -> Result<f64> {
    let mut fx = PipelineFixture::new(opts.size, opts.n, opts.seed)?;
    let grad = fx.analytic()?;
    let flip = sign(Stage::Pipeline, opts);
    let analytic: Vec<f64> = grad.data().iter().map(|v| flip * v).collect();
    let (h, w, n) = fx.theta.dims();
    Ok(compare_fd(fx.theta.data(), &analytic, 1e-5, |v| {
        let t = Field::from_vec(h, w, n, v.to_vec()).expect("sized");
        fx.surrogate(&t).unwrap_or(f64::NAN)
    }))
}

/// Runs every stage. A NaN error (from a failed evaluation) counts as a
/// failure.
pub fn run_gradchecks(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    if opts.size == 0 || opts.size > 8 {
        return Err(Error::config("size", format!("must be in 1..=8, got {}", opts.size)));
    }
    // Palette::hue_wheel rejects n < 2 with the palette invariant error.
    let palette = Palette::hue_wheel(opts.n)?;
    let seeds = SeedStreams::new(opts.seed);
    let (augment_fd, adjoint) = check_augment(opts, &seeds)?;
    let errors = [
        (Stage::Generator, check_generator(opts, &palette, &seeds)?),
        (Stage::Augment, augment_fd),
        (Stage::AugmentAdjoint, adjoint),
        (Stage::Fft, check_fft(opts, &seeds)?),
        (Stage::Pipeline, check_pipeline(opts)?),
    ];
    Ok(errors
        .into_iter()
        .map(|(stage, e)| CheckResult {
            stage,
            max_rel_err: if e.is_nan() { f64::INFINITY } else { e },
        })
        .collect())
}
