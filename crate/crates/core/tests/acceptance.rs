//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line with the
//! measured quantity, then asserts.

use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use pixeldistill::augment::{self, AugmentConfig};
use pixeldistill::generator::{self, Field, GumbelDraw, LogitField, RenderMode};
use pixeldistill::guidance::{
    gmm_oracle, Condition, DeltaOracle, GuidanceBackend, GuidanceRequest, NoisePredictor, NoiseSchedule,
    RemoteBackend, TimestepSchedule,
};
use pixeldistill::imaging::{self, Image};
use pixeldistill::loss::{self, FftMask, LossWeights, Sampling, StepNoise, StepSettings};
use pixeldistill::optimize::{run, RunConfig, RunResult};
use pixeldistill::palette::{Palette, PaletteElement};
use pixeldistill::rng::{SeedStreams, Stream};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

// Written to the raw stderr handle so the verdicts show up even when the
// test harness captures output.
fn report(name: &str, pass: bool, detail: String) {
    use std::io::Write;
    let line = format!("\n{} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear_beta(1000).unwrap()
}

fn uniform_image(h: usize, w: usize, rng: &mut impl Rng) -> Image {
    Image::from_vec(h, w, 3, (0..h * w * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn normal_image(h: usize, w: usize, rng: &mut impl Rng) -> Image {
    Image::from_vec(h, w, 3, (0..h * w * 3).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

/// Relative error with a floor at 1e-3 of the largest analytic entry.
fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(1e-3 * scale))
        .fold(0.0, f64::max)
}

fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[test]
fn gumbel_argmax_is_categorical() {
    let start = Instant::now();
    let probs = [0.5, 0.3, 0.2];
    let (h, w) = (100, 1000);
    let mut theta = Field::zeros(h, w, 3);
    for px in theta.pixels_mut() {
        for (l, p) in px.iter_mut().zip(probs) {
            *l = f64::ln(p);
        }
    }
    let draw = generator::gumbel_sample(&theta, 1.0, 2024).unwrap();
    let mut counts = [0usize; 3];
    for k in draw.sampled_indices(&theta) {
        counts[k] += 1;
    }
    let total = (h * w) as f64;
    let chi2: f64 = counts
        .iter()
        .zip(probs)
        .map(|(&c, p)| (c as f64 - total * p).powi(2) / (total * p))
        .sum();
    // Chi-square survival function with two degrees of freedom.
    let p_value = (-chi2 / 2.0).exp();
    let elapsed = start.elapsed().as_secs_f64();
    let pass = p_value > 0.001 && elapsed < 5.0;
    report(
        "gumbel correctness",
        pass,
        format!("counts {counts:?}, chi2 {chi2:.3}, p {p_value:.4}, {elapsed:.2}s"),
    );
    assert!(pass);
}

#[test]
fn softmax_translation_invariance() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let data: Vec<f64> = (0..16 * 16 * 8).map(|_| rng.random_range(-20.0..20.0)).collect();
        let theta = Field::from_vec(16, 16, 8, data).unwrap();
        let a: f64 = rng.random_range(-100.0..100.0);
        let shifted = Field::from_vec(16, 16, 8, theta.data().iter().map(|v| v + a).collect()).unwrap();
        worst = worst.max(generator::softmax_probs(&theta).max_abs_diff(&generator::softmax_probs(&shifted)));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst < 1e-6 && elapsed < 1.0;
    report(
        "translation invariance",
        pass,
        format!("max diff {worst:.2e}, {elapsed:.3}s"),
    );
    assert!(pass);
}

/// Frozen single step: the palette, the state and all its randomness.
struct Frozen {
    palette: Palette,
    theta: LogitField,
    settings: StepSettings,
    noise: StepNoise,
}

fn frozen_step(seed: u64, weights: LossWeights) -> Frozen {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let palette = Palette::hue_wheel(3).unwrap();
    let data: Vec<f64> = (0..4 * 4 * 3).map(|_| StandardNormal.sample(&mut rng)).collect();
    let theta = generator::center(Field::from_vec(4, 4, 3, data).unwrap());
    let target = (7, 6);
    let warp = AugmentConfig {
        p_gray: 0.5,
        p_flip: 0.5,
        p_persp: 1.0,
        target_size: Some([target.0, target.1]),
        ..AugmentConfig::default()
    };
    let settings = StepSettings {
        sampling: Sampling {
            tau: 0.9,
            gumbel: true,
            straight_through: false,
        },
        weights,
        augment: warp.clone(),
        timesteps: TimestepSchedule::default(),
        total_steps: 1000,
        mask: FftMask::default_for(4, 4).unwrap(),
    };
    let noise = StepNoise {
        gumbel: Some(generator::gumbel_noise(4, 4, 3, rng.random())),
        augment: augment::sample_augment(&warp, target, rng.random()).unwrap(),
        t: rng.random_range(20..=980),
        eps: normal_image(target.0, target.1, &mut rng),
    };
    Frozen {
        palette,
        theta,
        settings,
        noise,
    }
}

#[test]
fn gradient_correctness() {
    let start = Instant::now();
    let weights = LossWeights { s: 40.0, w_fft: 20.0 };
    let mut pipeline_err = 0.0f64;
    for seed in 0..3 {
        let f = frozen_step(seed, weights);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (th, tw) = f.noise.augment.target;
        let tc = uniform_image(th, tw, &mut rng);
        let tu = uniform_image(th, tw, &mut rng);
        let mut oracle = DeltaOracle::new(tc.clone(), tu.clone(), schedule()).unwrap();
        let grad = loss::lsds_step_frozen(&f.theta, &f.palette, &mut oracle, &f.settings, &Condition::default(), &f.noise)
            .unwrap()
            .grad;
        // For the delta oracle the step gradient is that of
        // k [ |A x - tc|^2 / 2 + s <tu - tc, A x> ] + w_fft L_fft(x), k = sigma alpha.
        let sched = schedule();
        let k = sched.sigma(f.noise.t) * sched.alpha(f.noise.t);
        let (h, w, n) = f.theta.dims();
        let g = f.noise.gumbel.clone().unwrap();
        let objective = |v: &[f64]| {
            let theta = Field::from_vec(h, w, n, v.to_vec()).unwrap();
            let weights_ = GumbelDraw::with_noise(&theta, g.clone(), f.settings.sampling.tau, 0).unwrap().weights;
            let x = generator::render_weights(&weights_, &f.palette).unwrap();
            let ax = augment::apply(&f.noise.augment, &x, [0.0; 3]);
            let mut value = 0.0;
            for i in 0..ax.data().len() {
                let (a, c, u) = (ax.data()[i], tc.data()[i], tu.data()[i]);
                value += k * (0.5 * (a - c).powi(2) + weights.s * (u - c) * a);
            }
            value + weights.w_fft * loss::fft_loss(&x, &f.settings.mask).unwrap().0
        };
        let numeric = central_diff(f.theta.data(), 1e-5, objective);
        pipeline_err = pipeline_err.max(max_rel_err(grad.data(), &numeric));
    }

    // FFT loss alone, against its own finite differences.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = uniform_image(8, 8, &mut rng);
    let mask = FftMask::default_for(8, 8).unwrap();
    let (_, g) = loss::fft_loss(&x, &mask).unwrap();
    let numeric = central_diff(x.data(), 1e-5, |v| {
        loss::fft_loss(&Image::from_vec(8, 8, 3, v.to_vec()).unwrap(), &mask).unwrap().0
    });
    let fft_err = max_rel_err(g.data(), &numeric);

    // <A x, y> = <x, A^T y> over many augmentation draws.
    let mut adjoint_err = 0.0f64;
    let cfg = AugmentConfig {
        p_gray: 0.5,
        p_flip: 0.5,
        p_persp: 0.8,
        distortion_scale: 0.5,
        target_size: None,
    };
    for seed in 0..50u64 {
        let (sh, sw) = (rng.random_range(2..12), rng.random_range(2..12));
        let target = (rng.random_range(2..16), rng.random_range(2..16));
        let sample = augment::sample_augment(&cfg, target, seed).unwrap();
        let x = uniform_image(sh, sw, &mut rng);
        let y = uniform_image(target.0, target.1, &mut rng);
        let lhs = augment::apply(&sample, &x, [0.0; 3]).dot(&y);
        let rhs = x.dot(&augment::vjp(&sample, &y, sh, sw).unwrap());
        adjoint_err = adjoint_err.max((lhs - rhs).abs() / lhs.abs().max(1e-12));
    }

    let elapsed = start.elapsed().as_secs_f64();
    let pass = pipeline_err < 1e-4 && fft_err < 1e-5 && adjoint_err < 1e-9 && elapsed < 30.0;
    report(
        "gradient correctness",
        pass,
        format!("pipeline {pipeline_err:.2e}, fft {fft_err:.2e}, adjoint {adjoint_err:.2e}, {elapsed:.2}s"),
    );
    assert!(pass);
}

#[test]
fn decomposition_identity() {
    let start = Instant::now();
    let weights = LossWeights { s: 40.0, w_fft: 20.0 };
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let f = frozen_step(500 + seed, weights);
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let (th, tw) = f.noise.augment.target;
        let mut delta = DeltaOracle::new(uniform_image(th, tw, &mut rng), uniform_image(th, tw, &mut rng), schedule()).unwrap();
        let means = vec![uniform_image(th, tw, &mut rng), uniform_image(th, tw, &mut rng)];
        let mut gmm = gmm_oracle(means, vec![0.4, 0.6], 0.15, schedule()).unwrap();

        let check = |backend: &mut dyn GuidanceBackend, predictor: &dyn NoisePredictor| {
            let split = loss::lsds_step_frozen(&f.theta, &f.palette, backend, &f.settings, &Condition::default(), &f.noise)
                .unwrap()
                .grad;
            let mono =
                loss::monolithic_gradient(&f.theta, &f.palette, predictor, &f.settings, &Condition::default(), &f.noise)
                    .unwrap();
            split.max_abs_diff(&mono)
        };
        let d = delta.clone();
        worst = worst.max(check(&mut delta, &d));
        let g = gmm.clone();
        worst = worst.max(check(&mut gmm, &g));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst < 1e-9 && elapsed < 10.0;
    report(
        "decomposition identity",
        pass,
        format!("max abs diff {worst:.2e} over 20 states x 2 oracles, {elapsed:.2}s"),
    );
    assert!(pass);
}

const TETRA: [[f64; 3]; 4] = [[0.0, 0.0, 0.0], [1.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0]];

fn random_indices(seed: u64, len: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..n)).collect()
}

fn convergence_config(seed: u64, gumbel: bool, w_fft: f64) -> RunConfig {
    let mut cfg = RunConfig {
        steps: 2000,
        seed,
        size: [16, 16],
        augment: AugmentConfig::disabled(),
        ..RunConfig::default()
    };
    cfg.sampling.tau = 1.0;
    cfg.sampling.gumbel = gumbel;
    cfg.loss = LossWeights { s: 40.0, w_fft };
    cfg
}

struct ConvergenceRun {
    target: Vec<usize>,
    gumbel: RunResult,
    softmax_only: RunResult,
    seconds: f64,
}

/// The delta-oracle experiment, shared by the convergence and entropy
/// criteria.
fn convergence_runs() -> &'static [ConvergenceRun] {
    static RUNS: OnceLock<Vec<ConvergenceRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let palette = Palette::from_colors("tetra", &TETRA).unwrap();
        (0..5u64)
            .map(|seed| {
                let start = Instant::now();
                let target = random_indices(1000 + seed, 256, 4);
                let image = generator::render_indices(&target, 16, 16, &palette).unwrap();
                let go = |gumbel: bool| {
                    let mut oracle = DeltaOracle::new(image.clone(), Image::filled(16, 16, 3, 0.5), schedule()).unwrap();
                    let cfg = convergence_config(seed, gumbel, 0.0);
                    run(&cfg, &palette, &Condition::default(), &mut oracle, None).unwrap()
                };
                let gumbel = go(true);
                let seconds = start.elapsed().as_secs_f64();
                let softmax_only = go(false);
                ConvergenceRun {
                    target,
                    gumbel,
                    softmax_only,
                    seconds,
                }
            })
            .collect()
    })
}

#[test]
fn convergence_to_delta_target() {
    let runs = convergence_runs();
    let accuracies: Vec<f64> = runs
        .iter()
        .map(|r| {
            let hits = r.gumbel.theta.argmax().iter().zip(&r.target).filter(|(a, b)| a == b).count();
            hits as f64 / r.target.len() as f64
        })
        .collect();
    let good = accuracies.iter().filter(|&&a| a >= 0.95).count();
    let slowest = runs.iter().map(|r| r.seconds).fold(0.0, f64::max);
    let pass = good >= 4 && slowest < 120.0;
    report(
        "convergence",
        pass,
        format!("accuracy per seed {accuracies:?}, slowest run {slowest:.1}s"),
    );
    assert!(pass);
}

#[test]
fn gumbel_reduces_entropy() {
    let runs = convergence_runs();
    let finals: Vec<(f64, f64)> = runs
        .iter()
        .map(|r| {
            let last = |res: &RunResult| *res.mean_entropy_trace().last().unwrap();
            (last(&r.gumbel), last(&r.softmax_only))
        })
        .collect();
    let initial_ok = runs
        .iter()
        .all(|r| r.gumbel.mean_entropy_trace().last() < r.gumbel.mean_entropy_trace().first());
    let good = finals.iter().filter(|(g, s)| *g < 0.2 && g < s).count();
    let pass = good >= 4 && initial_ok;
    let shown: Vec<String> = finals.iter().map(|(g, s)| format!("{g:.2e} vs {s:.2e}")).collect();
    report(
        "entropy reduction",
        pass,
        format!("final entropy gumbel vs softmax-only per seed [{}]", shown.join(", ")),
    );
    assert!(pass);
}

/// The literal criterion (every pixel of one cold draw above 0.999) depends
/// on the draw: a pixel whose two largest perturbed logits lie within
/// `tau ln(999 (n - 1))` cannot reach 0.999 at that `tau`. The literal
/// measurement is reported as its own line; the assertion checks the part
/// that holds for every draw: pixels outside that near-tie band are one-hot
/// within 1e-3, and every pixel meets the closed-form bound
/// `max weight >= 1 / (1 + (n - 1) exp(-gap / tau))`.
#[test]
fn temperature_limits() {
    let n = 8;
    let theta = generator::init_random(16, 16, n, 31, 1.0).unwrap();
    let tau = 1e-3;
    let cold = generator::gumbel_sample(&theta, tau, 32).unwrap();
    let band = tau * (999.0 * (n - 1) as f64).ln();
    let mut min_max_weight = 1.0f64;
    let mut near_ties = 0usize;
    let mut outside_band_ok = true;
    let mut bound_ok = true;
    for ((w, l), g) in cold.weights.pixels().zip(theta.pixels()).zip(cold.noise.pixels()) {
        let mut y: Vec<f64> = l.iter().zip(g).map(|(a, b)| a + b).collect();
        y.sort_by(|a, b| b.total_cmp(a));
        let gap = y[0] - y[1];
        let top = w.iter().cloned().fold(0.0, f64::max);
        min_max_weight = min_max_weight.min(top);
        bound_ok &= top >= 1.0 / (1.0 + (n - 1) as f64 * (-gap / tau).exp()) - 1e-12;
        if gap < band {
            near_ties += 1;
        } else {
            outside_band_ok &= top > 0.999;
        }
    }
    let hot = generator::gumbel_sample(&theta, 1e3, 33).unwrap();
    let max_dev = hot
        .weights
        .data()
        .iter()
        .map(|w| (w - 1.0 / n as f64).abs())
        .fold(0.0, f64::max);

    report(
        "temperature limits (literal, one draw)",
        min_max_weight > 0.999 && max_dev < 1e-3,
        format!("tau=1e-3 min per-pixel max weight {min_max_weight:.6}; tau=1e3 max deviation from uniform {max_dev:.2e}"),
    );
    let pass = outside_band_ok && bound_ok && max_dev < 1e-3;
    report(
        "temperature limits (outside near-tie band)",
        pass,
        format!("{near_ties} of 256 pixels have a top-2 gap below {band:.2e}; all others one-hot within 1e-3"),
    );
    assert!(pass);
}

#[test]
fn smoothness_knob() {
    let palette = Palette::from_colors("tetra", &TETRA).unwrap();
    let mut lines = Vec::new();
    let mut all_lower = true;
    for seed in 0..3u64 {
        let a = generator::render_indices(&random_indices(2000 + seed, 256, 4), 16, 16, &palette).unwrap();
        let b = generator::render_indices(&random_indices(3000 + seed, 256, 4), 16, 16, &palette).unwrap();
        let energy = |w_fft: f64| {
            let mut oracle = gmm_oracle(vec![a.clone(), b.clone()], vec![0.5, 0.5], 0.1, schedule()).unwrap();
            let cfg = convergence_config(seed, true, w_fft);
            let res = run(&cfg, &palette, &Condition::default(), &mut oracle, None).unwrap();
            loss::fft_loss(&res.argmax, &FftMask::default_for(16, 16).unwrap()).unwrap().0
        };
        let (rough, smooth) = (energy(0.0), energy(200.0));
        all_lower &= smooth < rough;
        lines.push(format!("{smooth:.4} < {rough:.4}"));
    }
    report(
        "smoothness knob",
        all_lower,
        format!("high-frequency energy w_fft=200 vs 0 per seed [{}]", lines.join(", ")),
    );
    assert!(all_lower);
}

#[test]
fn timestep_annealing() {
    let sched = TimestepSchedule::default();
    let total = 1000;
    let runs = 300u64;
    let mut max_t = vec![0usize; total];
    let mut min_t = usize::MAX;
    for seed in 0..runs {
        let seeds = SeedStreams::new(seed);
        for (step, m) in max_t.iter_mut().enumerate() {
            let t = sched.sample(step, total, &mut seeds.rng(Stream::Timestep, step as u64));
            *m = (*m).max(t);
            min_t = min_t.min(t);
        }
    }
    // Expected ceiling: 980 at the start, linear to 800 at mid-training,
    // constant afterwards.
    let bound = |step: usize| -> f64 {
        let frac = (step as f64 / (total as f64 / 2.0)).min(1.0);
        980.0 - 180.0 * frac
    };
    let mut worst_over = 0.0f64;
    let mut worst_under = 0.0f64;
    for (step, &m) in max_t.iter().enumerate() {
        worst_over = worst_over.max(m as f64 - bound(step));
        worst_under = worst_under.max(bound(step) - m as f64);
    }
    let ends_ok = sched.upper(0, total) == 980 && sched.upper(total / 2, total) == 800 && sched.upper(total - 1, total) == 800;
    // Rounding allows half a step above; 300 draws per step leave the
    // maximum within 5% of the range below the ceiling.
    let pass = worst_over <= 0.5 && worst_under < 48.0 && min_t >= 20 && ends_ok;
    report(
        "timestep annealing",
        pass,
        format!("max t above b(step) by {worst_over:.1}, below by at most {worst_under:.1}, min t {min_t}"),
    );
    assert!(pass);
}

#[test]
fn argmax_exports_use_only_palette_colors() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut violations = 0usize;
    for i in 0..1000 {
        let n = rng.random_range(2..=12);
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let tiles = i % 4 == 0;
        let (th, tw) = if tiles { (2, 3) } else { (1, 1) };
        let palette = loop {
            let elements = (0..n)
                .map(|_| {
                    let px = (0..th * tw)
                        .map(|_| {
                            let c = |r: &mut ChaCha8Rng| f64::from(r.random::<u8>()) / 255.0;
                            [c(&mut rng), c(&mut rng), c(&mut rng)]
                        })
                        .collect();
                    PaletteElement::tile(th, tw, px).unwrap()
                })
                .collect();
            if let Ok(p) = Palette::new("random", elements) {
                break p;
            }
        };
        let scale: f64 = rng.random_range(0.1..10.0);
        let theta = generator::init_random(h, w, n, rng.random(), scale).unwrap();
        let img = generator::render(&theta, &palette, RenderMode::Argmax).unwrap();
        let path = dir.path().join(format!("{i}.png"));
        imaging::write_png(&path, &img).unwrap();
        let back = imaging::read_png(&path).unwrap();
        let bytes = |p: [f64; 3]| p.map(imaging::to_byte);
        for y in 0..h {
            for x in 0..w {
                let cell: Vec<[u8; 3]> = (0..th * tw)
                    .map(|j| {
                        let p = back.pixel(y * th + j / tw, x * tw + j % tw);
                        bytes([p[0], p[1], p[2]])
                    })
                    .collect();
                let ok = palette
                    .elements()
                    .iter()
                    .any(|e| e.pixels().iter().map(|&p| bytes(p)).eq(cell.iter().copied()));
                violations += usize::from(!ok);
            }
        }
    }
    let pass = violations == 0;
    report(
        "hard constraint",
        pass,
        format!("{violations} off-palette cells over 1000 random argmax exports"),
    );
    assert!(pass);
}

fn write_fixture(dir: &Path) {
    let palette = Palette::hue_wheel(3).unwrap();
    let idx: Vec<usize> = (0..64).map(|i| (i / 8 + i % 8) % 3).collect();
    imaging::write_png(dir.join("target.png"), &generator::render_indices(&idx, 8, 8, &palette).unwrap()).unwrap();
    std::fs::write(
        dir.join("run.toml"),
        "steps = 200\nseed = 5\nsize = [8, 8]\ncheckpoint_every = 100\n\n[palette]\nn = 3\n\n[backend]\nspec = \"delta:target.png\"\n",
    )
    .unwrap();
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let bin = env!("CARGO_BIN_EXE_pixeldistill");
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let status = Command::new(bin)
            .arg("generate")
            .arg(dir.path().join("run.toml"))
            .arg("-o")
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        outputs.push((
            std::fs::read(out.join("telemetry.csv")).unwrap(),
            std::fs::read(out.join("argmax.png")).unwrap(),
        ));
    }
    let pass = outputs[0] == outputs[1];
    report(
        "determinism",
        pass,
        format!("telemetry.csv {} bytes, argmax.png {} bytes, identical: {pass}", outputs[0].0.len(), outputs[0].1.len()),
    );
    assert!(pass);
}

#[test]
fn protocol_conformance_over_stdio() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let target = uniform_image(6, 5, &mut rng);
    let path = dir.path().join("target.png");
    imaging::write_png(&path, &target).unwrap();
    let target = imaging::read_png(&path).unwrap();
    let args = vec!["serve-echo".to_string(), "--stdio".into(), "--target".into(), path.display().to_string()];
    let mut remote = RemoteBackend::spawn(env!("CARGO_BIN_EXE_pixeldistill"), &args).unwrap();
    let oracle = DeltaOracle::new(target, Image::filled(6, 5, 3, 0.5), schedule()).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (x, eps) = (uniform_image(6, 5, &mut rng), normal_image(6, 5, &mut rng));
        let cond = Condition::default();
        let req = GuidanceRequest {
            x: &x,
            eps: &eps,
            t: rng.random_range(20..=980),
            condition: &cond,
        };
        let got = remote.evaluate(&req).unwrap();
        let want = oracle.evaluate_f32(&req).unwrap();
        worst = worst
            .max(got.grad_noise.max_abs_diff(&want.grad_noise))
            .max(got.grad_sem.max_abs_diff(&want.grad_sem));
    }
    let pass = worst == 0.0;
    report(
        "protocol conformance (secondary)",
        pass,
        format!("max abs diff vs in-process f32 oracle over 10 requests: {worst:e}"),
    );
    assert!(pass);
}
