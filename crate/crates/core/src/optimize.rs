//! The optimization loop: AdamW with warmup, logit centering after every
//! update, per-step telemetry and resumable checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::generator::{self, Field, LogitField, Norm, RenderMode};
use crate::guidance::{Condition, GuidanceBackend, TimestepSchedule, DEFAULT_STEPS};
use crate::imaging::{self, Image};
use crate::loss::{self, FftMask, LossWeights, Sampling, StepSettings};
use crate::palette::Palette;
use crate::rng::{SeedStreams, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.25,
            warmup_steps: 250,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::config(
                "optim",
                "need lr > 0, betas in [0, 1), eps > 0, weight_decay >= 0",
            ));
        }
        Ok(())
    }

    /// Learning rate for the `step`-th update (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// AdamW moments and the number of updates taken so far.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Field,
    pub v: Field,
    pub step: u64,
}

impl OptimState {
    pub fn new(height: usize, width: usize, n: usize) -> Self {
        OptimState {
            m: Field::zeros(height, width, n),
            v: Field::zeros(height, width, n),
            step: 0,
        }
    }
}

/// One AdamW update of `theta` followed by centering. Returns the learning
/// rate used.
pub fn opt_step(cfg: &OptimConfig, state: &mut OptimState, theta: &mut LogitField, grad: &Field) -> Result<f64> {
    if !(theta.same_shape(grad) && theta.same_shape(&state.m)) {
        return Err(Error::shape(
            "opt_step",
            format!("{:?}", theta.dims()),
            format!("grad {:?}, state {:?}", grad.dims(), state.m.dims()),
        ));
    }
    state.step += 1;
    let lr = cfg.lr_at(state.step);
    let k = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(k);
    let bc2 = 1.0 - cfg.beta2.powi(k);
    let decay = 1.0 - lr * cfg.weight_decay;
    let params = theta.data_mut().iter_mut();
    let moments = state.m.data_mut().iter_mut().zip(state.v.data_mut().iter_mut());
    for ((p, (m, v)), &g) in params.zip(moments).zip(grad.data()) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p = *p * decay - lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    generator::center_in_place(theta);
    Ok(lr)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum InitMode {
    /// Centered `N(0, scale^2)` logits.
    Random { scale: f64 },
    /// Negative distance from the downsampled input image to each color.
    Image { norm: Norm },
}

impl Default for InitMode {
    fn default() -> Self {
        InitMode::Random { scale: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub steps: usize,
    pub seed: u64,
    /// Logit grid `[height, width]`; the render is this times the tile size.
    pub size: [usize; 2],
    pub checkpoint_every: usize,
    pub init: InitMode,
    pub sampling: Sampling,
    pub loss: LossWeights,
    pub augment: AugmentConfig,
    pub timesteps: TimestepSchedule,
    pub optim: OptimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            steps: 6000,
            seed: 0,
            size: [32, 32],
            checkpoint_every: 500,
            init: InitMode::default(),
            sampling: Sampling::default(),
            loss: LossWeights::default(),
            augment: AugmentConfig::default(),
            timesteps: TimestepSchedule::default(),
            optim: OptimConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size[0] == 0 || self.size[1] == 0 {
            return Err(Error::config("size", "height and width must be >= 1"));
        }
        if !(self.sampling.tau > 0.0 && self.sampling.tau.is_finite()) {
            return Err(Error::config("sampling.tau", "must be > 0"));
        }
        if let InitMode::Random { scale } = self.init {
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(Error::config("init.scale", "must be > 0"));
            }
        }
        self.loss.validate()?;
        self.augment.validate()?;
        self.timesteps.validate(DEFAULT_STEPS)?;
        self.optim.validate()
    }

    /// Hex SHA-256 of the canonical JSON form; checkpoints carry it so a run
    /// is only resumed under the config that produced it.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn step_settings(&self, palette: &Palette) -> Result<StepSettings> {
        let (th, tw) = palette.tile_dims();
        let (rh, rw) = (self.size[0] * th, self.size[1] * tw);
        Ok(StepSettings {
            sampling: self.sampling,
            weights: self.loss,
            augment: self.augment.clone(),
            timesteps: self.timesteps,
            total_steps: self.steps,
            mask: FftMask::default_for(rh, rw)?,
        })
    }
}

/// Initial logits per `config.init`; image init needs `image`.
pub fn initial_logits(config: &RunConfig, palette: &Palette, image: Option<&Image>) -> Result<LogitField> {
    let [h, w] = config.size;
    match config.init {
        InitMode::Random { scale } => generator::init_random(
            h,
            w,
            palette.len(),
            SeedStreams::new(config.seed).seed(Stream::Init, 0),
            scale,
        ),
        InitMode::Image { norm } => {
            let image = image.ok_or_else(|| Error::config("init", "image init requires an input image"))?;
            let small = imaging::bilinear_resize(&image.to_rgb(), h, w);
            generator::init_from_image(&small, palette, norm)
        }
    }
}

pub const TELEMETRY_HEADER: &str = "step,t,lr,grad_norm_noise,grad_norm_sem,fft_loss,mean_norm_entropy";

#[derive(Clone, Debug, PartialEq)]
pub struct TelemetryRow {
    pub step: u64,
    pub t: usize,
    pub lr: f64,
    pub grad_norm_noise: f64,
    pub grad_norm_sem: f64,
    pub fft_loss: f64,
    /// Of the softmax probabilities after the update.
    pub mean_norm_entropy: f64,
}

impl TelemetryRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.t, self.lr, self.grad_norm_noise, self.grad_norm_sem, self.fft_loss, self.mean_norm_entropy
        )
    }
}

/// Appends telemetry rows to a CSV file.
pub struct TelemetryWriter {
    path: PathBuf,
    out: std::io::BufWriter<fs::File>,
}

impl TelemetryWriter {
    /// Creates the file with a header, or opens it for appending when
    /// `append` is set and it exists.
    pub fn open(path: impl AsRef<Path>, append: bool) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let exists = path.exists();
        let file = if append && exists {
            fs::OpenOptions::new().append(true).open(&path)
        } else {
            fs::File::create(&path)
        }
        .map_err(|e| Error::io(&path, e))?;
        let mut writer = TelemetryWriter {
            out: std::io::BufWriter::new(file),
            path,
        };
        if !(append && exists) {
            writer.line(TELEMETRY_HEADER)?;
        }
        Ok(writer)
    }

    fn line(&mut self, text: &str) -> Result<()> {
        writeln!(self.out, "{text}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn write(&mut self, row: &TelemetryRow) -> Result<()> {
        self.line(&row.to_csv())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Keeps only rows with `step <= last_step`, for resuming after a crash
/// that left telemetry ahead of the last checkpoint.
pub fn truncate_telemetry(path: &Path, last_step: u64) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= last_step);
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub height: usize,
    pub width: usize,
    pub n: usize,
    pub step: u64,
    pub config_hash: String,
}

/// Final state and renders of a run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub theta: LogitField,
    pub argmax: Image,
    pub softmax: Image,
    pub entropy: Image,
    pub telemetry: Vec<TelemetryRow>,
}

impl RunResult {
    pub fn mean_entropy_trace(&self) -> Vec<f64> {
        self.telemetry.iter().map(|r| r.mean_norm_entropy).collect()
    }

    pub fn fft_loss_trace(&self) -> Vec<f64> {
        self.telemetry.iter().map(|r| r.fft_loss).collect()
    }
}

pub struct Trainer<'a> {
    config: RunConfig,
    palette: &'a Palette,
    condition: Condition,
    settings: StepSettings,
    seeds: SeedStreams,
    theta: LogitField,
    state: OptimState,
}

impl<'a> Trainer<'a> {
    pub fn new(config: RunConfig, palette: &'a Palette, condition: Condition, theta: LogitField) -> Result<Self> {
        config.validate()?;
        condition.validate()?;
        let want = (config.size[0], config.size[1], palette.len());
        if theta.dims() != want {
            return Err(Error::shape("initial logits", format!("{want:?}"), format!("{:?}", theta.dims())));
        }
        let settings = config.step_settings(palette)?;
        let (h, w, n) = theta.dims();
        Ok(Trainer {
            seeds: SeedStreams::new(config.seed),
            state: OptimState::new(h, w, n),
            settings,
            config,
            palette,
            condition,
            theta,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn theta(&self) -> &LogitField {
        &self.theta
    }

    pub fn state(&self) -> &OptimState {
        &self.state
    }

    /// Updates taken so far.
    pub fn step(&self) -> u64 {
        self.state.step
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.config.steps as u64
    }

    /// Evaluates one stochastic gradient and applies it.
    pub fn step_once(&mut self, backend: &mut dyn GuidanceBackend) -> Result<TelemetryRow> {
        let step_index = self.state.step as usize;
        let out = loss::lsds_step(
            &self.theta,
            self.palette,
            backend,
            &self.settings,
            &self.condition,
            step_index,
            &self.seeds,
        )?;
        if !out.grad.is_finite() {
            return Err(Error::Backend(format!("non-finite gradient at step {}", step_index + 1)));
        }
        let lr = opt_step(&self.config.optim, &mut self.state, &mut self.theta, &out.grad)?;
        let (_, entropy) = generator::entropy_map(&generator::softmax_probs(&self.theta));
        let d = out.diagnostics;
        Ok(TelemetryRow {
            step: self.state.step,
            t: d.t,
            lr,
            grad_norm_noise: d.grad_norm_noise,
            grad_norm_sem: d.grad_norm_sem,
            fft_loss: d.fft_loss,
            mean_norm_entropy: entropy,
        })
    }

    /// Runs to `config.steps`, handing each row to `on_row` and writing a
    /// checkpoint every `checkpoint_every` steps when `checkpoints` is set.
    /// On a backend failure the current state is checkpointed before the
    /// error is returned.
    pub fn run(
        &mut self,
        backend: &mut dyn GuidanceBackend,
        checkpoints: Option<&Path>,
        mut on_row: impl FnMut(&TelemetryRow) -> Result<()>,
    ) -> Result<Vec<TelemetryRow>> {
        let mut rows = Vec::with_capacity(self.config.steps.saturating_sub(self.state.step as usize));
        while !self.is_done() {
            let row = match self.step_once(backend) {
                Ok(row) => row,
                Err(e) => {
                    if let Some(dir) = checkpoints {
                        self.save_checkpoint(dir)?;
                    }
                    return Err(e);
                }
            };
            on_row(&row)?;
            rows.push(row);
            let every = self.config.checkpoint_every as u64;
            if let Some(dir) = checkpoints {
                if (every > 0 && self.state.step % every == 0) || self.is_done() {
                    self.save_checkpoint(dir)?;
                }
            }
        }
        Ok(rows)
    }

    pub fn result(&self, telemetry: Vec<TelemetryRow>) -> Result<RunResult> {
        let probs = generator::softmax_probs(&self.theta);
        let (entropy, _) = generator::entropy_map(&probs);
        Ok(RunResult {
            argmax: generator::render(&self.theta, self.palette, RenderMode::Argmax)?,
            softmax: generator::render(&self.theta, self.palette, RenderMode::Softmax)?,
            entropy,
            theta: self.theta.clone(),
            telemetry,
        })
    }

    fn checkpoint_stem(dir: &Path, step: u64) -> PathBuf {
        dir.join(format!("step_{step:06}"))
    }

    /// Writes `step_NNNNNN.logits.f64` (raw little-endian logits),
    /// `.moments.f64` (first then second moments) and a `.json` sidecar.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stem = Self::checkpoint_stem(dir, self.state.step);
        let (height, width, n) = self.theta.dims();
        let meta = CheckpointMeta {
            height,
            width,
            n,
            step: self.state.step,
            config_hash: self.config.hash(),
        };
        write_f64(&stem.with_extension("logits.f64"), [self.theta.data()])?;
        write_f64(
            &stem.with_extension("moments.f64"),
            [self.state.m.data(), self.state.v.data()],
        )?;
        let json_path = stem.with_extension("json");
        let text = serde_json::to_string_pretty(&meta)?;
        fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;
        Ok(json_path)
    }

    /// Restores logits and optimizer state from a checkpoint sidecar path.
    pub fn load_checkpoint(&mut self, sidecar: &Path) -> Result<()> {
        let text = fs::read_to_string(sidecar).map_err(|e| Error::io(sidecar, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        if meta.config_hash != self.config.hash() {
            return Err(Error::config(
                "checkpoint",
                format!("{} was written by a different config", sidecar.display()),
            ));
        }
        if (meta.height, meta.width, meta.n) != self.theta.dims() {
            return Err(Error::shape(
                "checkpoint",
                format!("{:?}", self.theta.dims()),
                format!("{:?}", (meta.height, meta.width, meta.n)),
            ));
        }
        let len = meta.height * meta.width * meta.n;
        let theta = read_f64(&sidecar.with_extension("logits.f64"), len)?;
        let moments = read_f64(&sidecar.with_extension("moments.f64"), 2 * len)?;
        let (v, m) = (moments[len..].to_vec(), moments[..len].to_vec());
        self.theta = Field::from_vec(meta.height, meta.width, meta.n, theta)?;
        self.state = OptimState {
            m: Field::from_vec(meta.height, meta.width, meta.n, m)?,
            v: Field::from_vec(meta.height, meta.width, meta.n, v)?,
            step: meta.step,
        };
        Ok(())
    }
}

/// Sidecar of the checkpoint with the highest step in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("");
        let step = name
            .strip_prefix("step_")
            .and_then(|s| s.strip_suffix(".json"))
            .and_then(|s| s.parse::<u64>().ok());
        if let Some(step) = step {
            if best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Reads just the logits of a checkpoint.
pub fn read_checkpoint_logits(sidecar: &Path) -> Result<LogitField> {
    let text = fs::read_to_string(sidecar).map_err(|e| Error::io(sidecar, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let data = read_f64(&sidecar.with_extension("logits.f64"), meta.height * meta.width * meta.n)?;
    Field::from_vec(meta.height, meta.width, meta.n, data)
}

fn write_f64<'b>(path: &Path, parts: impl IntoIterator<Item = &'b [f64]>) -> Result<()> {
    let mut bytes = Vec::new();
    for part in parts {
        for v in part {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f64(path: &Path, len: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != len * 8 {
        return Err(Error::shape("checkpoint data", format!("{} bytes", len * 8), format!("{} bytes", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect())
}

/// Runs a whole optimization in memory, without checkpoints.
pub fn run(
    config: &RunConfig,
    palette: &Palette,
    condition: &Condition,
    backend: &mut dyn GuidanceBackend,
    init_image: Option<&Image>,
) -> Result<RunResult> {
    let theta = initial_logits(config, palette, init_image)?;
    let mut trainer = Trainer::new(config.clone(), palette, condition.clone(), theta)?;
    let rows = trainer.run(backend, None, |_| Ok(()))?;
    trainer.result(rows)
}
