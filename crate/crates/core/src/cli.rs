//! Command-line front end: config files, subcommands and the on-disk layout
//! of a run.

use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::export;
use crate::gradcheck::{self, GradcheckOptions, Stage};
use crate::guidance::server::{self, EchoDelta};
use crate::guidance::{
    gmm_oracle, Condition, DeltaOracle, GuidanceBackend, NoiseSchedule, RemoteBackend, TimestepSchedule,
    DEFAULT_STEPS, DEFAULT_TIMEOUT,
};
use crate::imaging::{self, CannyParams, Image};
use crate::loss::{LossWeights, Sampling};
use crate::optimize::{self, InitMode, OptimConfig, RunConfig, TelemetryWriter, Trainer};
use crate::palette::{self, Palette};

#[derive(Debug, Parser)]
#[command(name = "pixeldistill", version, about = "Palette-constrained pixel art by score distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize a pixel-art image as described by a TOML config.
    Generate(GenerateArgs),
    /// Write an n-color palette file from an image by k-means.
    PaletteExtract(PaletteExtractArgs),
    /// Turn an argmax render or checkpoint into a chart, mosaic or CSV.
    Export(ExportArgs),
    /// Run the finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Serve echo-delta guidance over TCP or stdio, for protocol testing.
    ServeEcho(ServeEchoArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    pub config: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Continue from the latest checkpoint in the output directory.
    #[arg(long, conflicts_with = "force")]
    pub resume: bool,
    /// Override the config's output directory.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PaletteExtractArgs {
    pub image: PathBuf,
    #[arg(short)]
    pub n: usize,
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExportKind {
    Stitch,
    Mosaic,
    Csv,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// An argmax PNG or a checkpoint `.json` sidecar.
    pub input: PathBuf,
    /// Palette file or directory of tile PNGs.
    #[arg(long)]
    pub palette: PathBuf,
    #[arg(long, value_enum)]
    pub kind: ExportKind,
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long, default_value = "")]
    pub title: String,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 4)]
    pub size: usize,
    #[arg(short, default_value_t = 3)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Negate one stage's analytic gradient (negative control).
    #[arg(long, hide = true, value_parser = parse_stage)]
    pub inject_sign_fault: Option<Stage>,
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    Stage::ALL
        .into_iter()
        .find(|st| st.name() == s)
        .ok_or_else(|| format!("unknown stage {s:?}"))
}

#[derive(Debug, Args)]
pub struct ServeEchoArgs {
    /// Conditional target image.
    #[arg(long)]
    pub target: PathBuf,
    /// Unconditional target; flat gray when omitted.
    #[arg(long)]
    pub uncond: Option<PathBuf>,
    /// `host:port` to listen on.
    #[arg(long, conflicts_with = "stdio", required_unless_present = "stdio")]
    pub listen: Option<String>,
    /// Serve a single session on stdin/stdout.
    #[arg(long)]
    pub stdio: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PaletteSection {
    /// Text palette file.
    pub file: Option<PathBuf>,
    /// Directory of equally sized tile PNGs.
    pub tiles: Option<PathBuf>,
    /// Color count: k-means over the input image, or a hue wheel without one.
    pub n: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputSection {
    /// Reference image for edges, depth, k-means and image init.
    pub image: Option<PathBuf>,
    /// Depth map; derived from the image when omitted.
    pub depth: Option<PathBuf>,
    pub canny: bool,
    pub canny_low: f64,
    pub canny_high: f64,
}

impl Default for InputSection {
    fn default() -> Self {
        let c = CannyParams::default();
        InputSection {
            image: None,
            depth: None,
            canny: true,
            canny_low: c.low,
            canny_high: c.high,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSection {
    pub tau: f64,
    pub gumbel: bool,
    pub straight_through: bool,
    pub init: InitMode,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        let s = Sampling::default();
        GeneratorSection {
            tau: s.tau,
            gumbel: s.gumbel,
            straight_through: s.straight_through,
            init: InitMode::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSection {
    /// `delta:<png>`, `gmm:<toml>`, `remote:<host:port>` or
    /// `remote-stdio:<command line>`.
    pub spec: String,
    pub prompt: String,
    pub uncond_prompt: String,
    pub canny_scale: f64,
    pub depth_scale: f64,
    pub timeout_secs: u64,
}

impl Default for BackendSection {
    fn default() -> Self {
        let c = Condition::default();
        BackendSection {
            spec: String::new(),
            prompt: c.prompt,
            uncond_prompt: c.uncond_prompt,
            canny_scale: c.canny_scale,
            depth_scale: c.depth_scale,
            timeout_secs: DEFAULT_TIMEOUT.as_secs(),
        }
    }
}

/// The `generate` config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub output: PathBuf,
    pub steps: usize,
    pub seed: u64,
    pub size: [usize; 2],
    pub checkpoint_every: usize,
    pub palette: PaletteSection,
    pub input: InputSection,
    pub generator: GeneratorSection,
    pub loss: LossWeights,
    pub augment: AugmentConfig,
    pub timesteps: TimestepSchedule,
    pub optim: OptimConfig,
    pub backend: BackendSection,
}

impl Default for CliConfig {
    fn default() -> Self {
        let run = RunConfig::default();
        CliConfig {
            output: PathBuf::from("out"),
            steps: run.steps,
            seed: run.seed,
            size: run.size,
            checkpoint_every: run.checkpoint_every,
            palette: PaletteSection::default(),
            input: InputSection::default(),
            generator: GeneratorSection::default(),
            loss: run.loss,
            augment: run.augment,
            timesteps: run.timesteps,
            optim: run.optim,
            backend: BackendSection::default(),
        }
    }
}

fn absolutize(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl CliConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))
    }

    /// Reads a config and resolves its relative paths against the config's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
        let base = base.canonicalize().map_err(|e| Error::io(&base, e))?;
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        absolutize(base, &mut self.palette.file);
        absolutize(base, &mut self.palette.tiles);
        absolutize(base, &mut self.input.image);
        absolutize(base, &mut self.input.depth);
        if self.output.is_relative() {
            self.output = base.join(&self.output);
        }
        for prefix in ["delta:", "gmm:"] {
            if let Some(rest) = self.backend.spec.strip_prefix(prefix) {
                let p = Path::new(rest);
                if p.is_relative() {
                    self.backend.spec = format!("{prefix}{}", base.join(p).display());
                }
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            steps: self.steps,
            seed: self.seed,
            size: self.size,
            checkpoint_every: self.checkpoint_every,
            init: self.generator.init,
            sampling: Sampling {
                tau: self.generator.tau,
                gumbel: self.generator.gumbel,
                straight_through: self.generator.straight_through,
            },
            loss: self.loss,
            augment: self.augment.clone(),
            timesteps: self.timesteps,
            optim: self.optim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.palette.file.is_some() && self.palette.tiles.is_some() {
            return Err(Error::config("palette", "give either file or tiles, not both"));
        }
        if self.backend.spec.is_empty() {
            return Err(Error::config("backend.spec", "no guidance backend selected"));
        }
        BackendSpec::parse(&self.backend.spec)?;
        if matches!(self.generator.init, InitMode::Image { .. }) && self.input.image.is_none() {
            return Err(Error::config("input.image", "image init needs an input image"));
        }
        self.run_config().validate()
    }
}

/// A parsed `backend.spec`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BackendSpec {
    Delta(PathBuf),
    Gmm(PathBuf),
    Remote(String),
    RemoteStdio(Vec<String>),
}

impl BackendSpec {
    pub fn parse(spec: &str) -> Result<Self> {
        let (kind, rest) = spec
            .split_once(':')
            .ok_or_else(|| Error::config("backend.spec", format!("expected <kind>:<value>, got {spec:?}")))?;
        if rest.trim().is_empty() {
            return Err(Error::config("backend.spec", format!("{kind} needs a value")));
        }
        match kind {
            "delta" => Ok(BackendSpec::Delta(rest.into())),
            "gmm" => Ok(BackendSpec::Gmm(rest.into())),
            "remote" => Ok(BackendSpec::Remote(rest.to_string())),
            "remote-stdio" => Ok(BackendSpec::RemoteStdio(
                rest.split_whitespace().map(str::to_string).collect(),
            )),
            other => Err(Error::config(
                "backend.spec",
                format!("unknown backend {other:?} (delta, gmm, remote, remote-stdio)"),
            )),
        }
    }
}

/// Mixture description for `gmm:` backends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmFile {
    /// Component mean images.
    pub means: Vec<PathBuf>,
    pub weights: Vec<f64>,
    pub gamma: f64,
}

fn load_rgb(path: &Path, h: usize, w: usize) -> Result<Image> {
    Ok(imaging::bilinear_resize(&imaging::read_png(path)?.to_rgb(), h, w))
}

/// Builds the backend; in-process targets are resized to `target` (the
/// augmented size).
pub fn make_backend(section: &BackendSection, target: (usize, usize)) -> Result<Box<dyn GuidanceBackend>> {
    let schedule = || NoiseSchedule::linear_beta(DEFAULT_STEPS);
    let (h, w) = target;
    match BackendSpec::parse(&section.spec)? {
        BackendSpec::Delta(path) => {
            let tc = load_rgb(&path, h, w)?;
            Ok(Box::new(DeltaOracle::new(tc, Image::filled(h, w, 3, 0.5), schedule()?)?))
        }
        BackendSpec::Gmm(path) => {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let spec: GmmFile =
                toml::from_str(&text).map_err(|e| Error::config("gmm", e.message().to_string()))?;
            let base = path.parent().unwrap_or(Path::new("."));
            let means = spec
                .means
                .iter()
                .map(|m| load_rgb(&base.join(m), h, w))
                .collect::<Result<Vec<_>>>()?;
            Ok(Box::new(gmm_oracle(means, spec.weights, spec.gamma, schedule()?)?))
        }
        BackendSpec::Remote(addr) => Ok(Box::new(RemoteBackend::connect_tcp(
            &addr,
            std::time::Duration::from_secs(section.timeout_secs),
        )?)),
        BackendSpec::RemoteStdio(cmd) => Ok(Box::new(RemoteBackend::spawn(&cmd[0], &cmd[1..])?)),
    }
}

pub fn resolve_palette(cfg: &CliConfig, image: Option<&Image>) -> Result<Palette> {
    let p = &cfg.palette;
    if let Some(file) = &p.file {
        return palette::load_palette_file(file);
    }
    if let Some(dir) = &p.tiles {
        return palette::load_tile_palette(dir);
    }
    match (p.n, image) {
        (Some(n), Some(img)) => palette::kmeans_palette(img, n, cfg.seed),
        (Some(n), None) => Palette::hue_wheel(n),
        (None, _) => Err(Error::config(
            "palette",
            "no palette file, tile directory or color count (palette.n) given",
        )),
    }
}

fn build_condition(cfg: &CliConfig, image: Option<&Image>) -> Result<Condition> {
    let b = &cfg.backend;
    let mut cond = Condition {
        prompt: b.prompt.clone(),
        uncond_prompt: b.uncond_prompt.clone(),
        canny: None,
        depth: None,
        canny_scale: b.canny_scale,
        depth_scale: b.depth_scale,
    };
    if let Some(img) = image {
        if cfg.input.canny {
            let params = CannyParams {
                low: cfg.input.canny_low,
                high: cfg.input.canny_high,
            };
            cond.canny = Some(imaging::canny(img, params)?);
        }
        cond.depth = Some(imaging::pseudo_depth(img));
    }
    if let Some(path) = &cfg.input.depth {
        cond.depth = Some(imaging::luminance(&imaging::read_png(path)?));
    }
    Ok(cond)
}

fn prepare_output(dir: &Path, force: bool, resume: bool) -> Result<()> {
    let non_empty = dir.exists()
        && fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
    if resume {
        if !dir.exists() {
            return Err(Error::config("output", format!("{} does not exist; nothing to resume", dir.display())));
        }
        return Ok(());
    }
    if non_empty && !force {
        return Err(Error::config(
            "output",
            format!("{} is not empty; pass --force to overwrite", dir.display()),
        ));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let mut cfg = CliConfig::load(&args.config)?;
    if let Some(out) = &args.output {
        cfg.output = std::path::absolute(out).map_err(|e| Error::io(out, e))?;
    }
    cfg.validate()?;
    let out = cfg.output.clone();

    let image = cfg.input.image.as_ref().map(imaging::read_png).transpose()?.map(|i| i.to_rgb());
    let palette = resolve_palette(&cfg, image.as_ref())?;
    let condition = build_condition(&cfg, image.as_ref())?;
    let run = cfg.run_config();
    let settings = run.step_settings(&palette)?;
    let mut backend = make_backend(&cfg.backend, settings.target_size())?;
    log::info!(
        "backend {}, palette {} ({} elements), {} steps",
        backend.name(),
        palette.name(),
        palette.len(),
        run.steps
    );

    prepare_output(&out, args.force, args.resume)?;
    let resolved = out.join("resolved_config.toml");
    fs::write(&resolved, cfg.to_toml()?).map_err(|e| Error::io(&resolved, e))?;
    let palette_copy = out.join("palette.txt");
    if palette.is_plain() {
        fs::write(&palette_copy, palette.to_text()?).map_err(|e| Error::io(&palette_copy, e))?;
    }

    let theta = optimize::initial_logits(&run, &palette, image.as_ref())?;
    let mut trainer = Trainer::new(run, &palette, condition, theta)?;
    let checkpoints = out.join("checkpoints");
    let telemetry_path = out.join("telemetry.csv");
    if args.resume {
        if let Some(sidecar) = optimize::latest_checkpoint(&checkpoints)? {
            trainer.load_checkpoint(&sidecar)?;
            log::info!("resuming from step {}", trainer.step());
            if telemetry_path.exists() {
                optimize::truncate_telemetry(&telemetry_path, trainer.step())?;
            }
        }
    }
    let mut telemetry = TelemetryWriter::open(&telemetry_path, args.resume)?;
    let total = trainer.config().steps;
    let rows = trainer.run(backend.as_mut(), Some(&checkpoints), |row| {
        if row.step % 100 == 0 || row.step as usize == total {
            log::info!(
                "step {} t {} entropy {:.4} fft {:.4}",
                row.step,
                row.t,
                row.mean_norm_entropy,
                row.fft_loss
            );
        }
        telemetry.write(row)
    });
    telemetry.flush()?;
    let rows = rows?;
    let result = trainer.result(rows)?;

    imaging::write_png(out.join("argmax.png"), &result.argmax)?;
    imaging::write_png(out.join("softmax.png"), &result.softmax)?;
    imaging::write_png(out.join("preview_x8.png"), &imaging::upscale_nearest(&result.argmax, 8))?;
    imaging::write_png(out.join("entropy.png"), &imaging::heatmap(&result.entropy))?;
    println!("{}", out.display());
    Ok(())
}

pub fn cmd_palette_extract(args: &PaletteExtractArgs) -> Result<()> {
    let img = imaging::read_png(&args.image)?.to_rgb();
    let palette = palette::kmeans_palette(&img, args.n, args.seed)?;
    fs::write(&args.output, palette.to_text()?).map_err(|e| Error::io(&args.output, e))
}

fn load_any_palette(path: &Path) -> Result<Palette> {
    if path.is_dir() {
        palette::load_tile_palette(path)
    } else {
        palette::load_palette_file(path)
    }
}

pub fn cmd_export(args: &ExportArgs) -> Result<()> {
    let palette = load_any_palette(&args.palette)?;
    let is_checkpoint = args.input.extension().is_some_and(|e| e == "json");
    let (indices, h, w) = if is_checkpoint {
        let theta = optimize::read_checkpoint_logits(&args.input)?;
        if theta.n() != palette.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint has {} colors, palette has {}",
                theta.n(),
                palette.len()
            )));
        }
        (theta.argmax(), theta.height(), theta.width())
    } else {
        export::indices_from_render(&imaging::read_png(&args.input)?, &palette)?
    };
    let write = |text: String| fs::write(&args.output, text).map_err(|e| Error::io(&args.output, e));
    match args.kind {
        ExportKind::Stitch => write(export::render_chart_svg(&export::make_chart(
            &indices,
            h,
            w,
            &palette,
            &args.title,
        )?)),
        ExportKind::Csv => write(export::chart_csv(&indices, h, w)?),
        ExportKind::Mosaic => imaging::write_png(&args.output, &export::render_mosaic(&indices, h, w, &palette)?),
    }
}

/// Prints one line per stage; returns whether all passed.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let opts = GradcheckOptions {
        size: args.size,
        n: args.n,
        seed: args.seed,
        flip_sign: args.inject_sign_fault,
    };
    let results = gradcheck::run_gradchecks(&opts)?;
    for r in &results {
        println!(
            "{:<16} max rel err {:.3e} (threshold {:.0e}) {}",
            r.stage.name(),
            r.max_rel_err,
            r.stage.threshold(),
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    Ok(results.iter().all(|r| r.passed()))
}

pub fn cmd_serve_echo(args: &ServeEchoArgs) -> Result<()> {
    let tc = imaging::read_png(&args.target)?.to_rgb();
    let tu = match &args.uncond {
        Some(p) => imaging::read_png(p)?.to_rgb(),
        None => Image::filled(tc.height(), tc.width(), 3, 0.5),
    };
    let mut handler = EchoDelta::new(tc, tu, NoiseSchedule::linear_beta(DEFAULT_STEPS)?)?;
    if args.stdio {
        let stdin = std::io::stdin().lock();
        let stdout = std::io::stdout().lock();
        return server::serve_connection(stdin, stdout, &mut handler);
    }
    let addr = args.listen.as_deref().expect("clap requires --listen without --stdio");
    let listener = TcpListener::bind(addr).map_err(|e| Error::Backend(format!("cannot listen on {addr}: {e}")))?;
    eprintln!("listening on {}", listener.local_addr()?);
    server::serve_tcp(listener, &mut handler)
}

/// Runs a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a).map(|_| true),
        Command::PaletteExtract(a) => cmd_palette_extract(a).map(|_| true),
        Command::Export(a) => cmd_export(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::ServeEcho(a) => cmd_serve_echo(a).map(|_| true),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } | Error::PaletteTooSmall(_) | Error::InvalidArgument(_) => 2,
                _ => 1,
            }
        }
    }
}
