//! Command-line front end: degrade, train, restore, evaluate, benchmark,
//! preview, count and synth.

mod preview;
mod run_config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use hyper_restormer::checkpoint::{load_checkpoint, save_checkpoint};
use hyper_restormer::cube::{header_path, read_cube, write_cube, HsiCube};
use hyper_restormer::degradations::{
    bicubic_upsample, derive_seed, Degradation, DegradationSpec, NoiseLevel, StripeSpec,
};
use hyper_restormer::metrics::MetricsReport;
use hyper_restormer::model::{
    build_model, count_macs, count_macs_dense, count_parameters, count_parameters_dense, restore_cube, Task,
};
use hyper_restormer::synth::{synth_scene, SyntheticSceneSpec};
use hyper_restormer::training::{make_pairs, Dataset, OptimizerState, RunDir, Trainer};
use log::info;
use rayon::prelude::*;
use serde::Deserialize;

use run_config::{model_config_from_text, RunConfig};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<hyper_restormer::Error> for CliError {
    fn from(e: hyper_restormer::Error) -> Self {
        use hyper_restormer::Error as E;
        match e {
            E::Config(_) => CliError::Usage(e.to_string()),
            E::Numeric(_) => CliError::Numeric(e.to_string()),
            E::Shape(_) | E::Format(_) | E::Io { .. } => CliError::Data(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "hyper-restormer", version, about = "Hyperspectral image restoration")]
struct Cli {
    /// Log level (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DegradeTask {
    Noise,
    Stripes,
    Sr,
}

#[derive(Subcommand)]
enum Command {
    /// Corrupt a clean cube (or every cube in a directory).
    Degrade {
        #[arg(long, value_enum)]
        task: DegradeTask,
        #[arg(long = "in")]
        input: PathBuf,
        /// TOML with the task's parameters: `sigma`/`clip` for noise, stripe
        /// ranges for stripes, `scale` for sr.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Noise level in 8-bit units; overrides `--spec`.
        #[arg(long)]
        sigma: Option<f64>,
        /// Draw σ uniformly from [30, 70] per cube.
        #[arg(long, conflicts_with = "sigma")]
        blind: bool,
        /// Super-resolution factor; overrides `--spec`.
        #[arg(long)]
        scale: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the observation mask (stripes only).
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Train a model on every cube in a directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/checkpoints/last.ckpt`.
        #[arg(long)]
        resume: bool,
    },
    /// Run a trained model on a degraded cube.
    Restore {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Observation mask, required by models trained with a mask channel.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Compare a test cube against a reference.
    Evaluate {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time repeated restorations of one cube.
    Benchmark {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 5)]
        repeat: usize,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Write an 8-bit RGB PNG from three bands.
    Preview {
        #[arg(long = "in")]
        input: PathBuf,
        /// Zero-based band indices as `r,g,b`.
        #[arg(long, value_parser = parse_bands)]
        bands: [usize; 3],
        #[arg(long)]
        out: PathBuf,
    },
    /// Report parameter and multiply-accumulate counts.
    Count {
        /// Run config or bare model config.
        #[arg(long)]
        config: PathBuf,
        /// Spatial size as `HxW`; defaults to the working size.
        #[arg(long, value_parser = parse_hw)]
        hw: Option<(usize, usize)>,
    },
    /// Generate synthetic low-rank scenes.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// TOML scene spec; flags below override it.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_hw)]
        size: Option<(usize, usize)>,
        #[arg(long)]
        bands: Option<usize>,
        #[arg(long)]
        order: Option<usize>,
        /// Write this many scenes into the `--out` directory instead of one file.
        #[arg(long)]
        count: Option<usize>,
    },
}

fn parse_bands(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("band `{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into()
        .map_err(|v: Vec<usize>| format!("expected three bands, got {}", v.len()))
}

fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let h: usize = h.parse().map_err(|e| format!("height: {e}"))?;
    let w: usize = w.parse().map_err(|e| format!("width: {e}"))?;
    if h == 0 || w == 0 {
        return Err("sizes must be positive".into());
    }
    Ok((h, w))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))
}

fn load(path: &Path) -> CliResult<HsiCube> {
    let cube = read_cube(path)?;
    if !cube.is_finite() {
        return Err(CliError::Data(format!(
            "{} contains NaN or infinite values",
            path.display()
        )));
    }
    Ok(cube)
}

/// Cube files in a directory (those with a header sidecar), sorted by name.
fn cube_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Data(format!("cannot list {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_none_or(|e| e != "toml") && header_path(p).is_file())
        .collect();
    files.sort();
    Ok(files)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseParams {
    #[serde(default)]
    sigma: Option<NoiseLevel>,
    #[serde(default)]
    clip: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SrParams {
    scale: Option<usize>,
}

fn parse_params<T: for<'de> Deserialize<'de>>(text: &str, what: &str) -> CliResult<T> {
    toml::from_str(text).map_err(|e| CliError::Usage(format!("{what} spec: {e}")))
}

fn degradation_from_flags(
    task: DegradeTask,
    spec: Option<&Path>,
    sigma: Option<f64>,
    blind: bool,
    scale: Option<usize>,
) -> CliResult<Degradation> {
    let text = spec.map(read_text).transpose()?.unwrap_or_default();
    Ok(match task {
        DegradeTask::Noise => {
            let p: NoiseParams = parse_params(&text, "noise")?;
            let level = match (sigma, blind, p.sigma) {
                (Some(s), _, _) => NoiseLevel::Fixed(s),
                (None, true, _) => NoiseLevel::BLIND,
                (None, false, Some(l)) => l,
                (None, false, None) => return Err(CliError::Usage("noise needs --sigma, --blind or a spec".into())),
            };
            Degradation::Noise {
                sigma: level,
                clip: p.clip,
            }
        }
        DegradeTask::Stripes => {
            let s: StripeSpec = parse_params(&text, "stripe")?;
            s.validate()?;
            Degradation::Stripes(s)
        }
        DegradeTask::Sr => {
            let p: SrParams = parse_params(&text, "sr")?;
            let scale = scale
                .or(p.scale)
                .ok_or_else(|| CliError::Usage("sr needs --scale or a spec".into()))?;
            if scale < 2 {
                return Err(CliError::Usage(format!("scale must be at least 2, got {scale}")));
            }
            Degradation::Downsample { scale }
        }
    })
}

/// Writes the observation the model's user would actually have: the noisy
/// or striped cube, or the low-resolution cube for super-resolution.
fn degrade_one(spec: &DegradationSpec, input: &Path, index: u64, out: &Path, mask: Option<&Path>) -> CliResult<()> {
    let clean = load(input)?;
    let d = spec.apply(&clean, index)?;
    write_cube(out, d.low_res.as_ref().unwrap_or(&d.cube))?;
    if let (Some(path), Some(m)) = (mask, &d.mask) {
        write_cube(path, m)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_degrade(
    task: DegradeTask,
    input: &Path,
    spec: Option<&Path>,
    seed: u64,
    sigma: Option<f64>,
    blind: bool,
    scale: Option<usize>,
    out: &Path,
    mask: Option<&Path>,
) -> CliResult<()> {
    if mask.is_some() && !matches!(task, DegradeTask::Stripes) {
        return Err(CliError::Usage("--mask is only produced by the stripes task".into()));
    }
    let spec = DegradationSpec {
        degradation: degradation_from_flags(task, spec, sigma, blind, scale)?,
        seed,
    };
    if !input.is_dir() {
        // a single cube uses its own stream at index 0
        return degrade_one(&spec, input, 0, out, mask);
    }
    let files = cube_files(input)?;
    if files.is_empty() {
        return Err(CliError::Data(format!("no cube files in {}", input.display())));
    }
    let dir_err = |p: &Path, e: std::io::Error| CliError::Data(format!("cannot create {}: {e}", p.display()));
    fs::create_dir_all(out).map_err(|e| dir_err(out, e))?;
    if let Some(m) = mask {
        fs::create_dir_all(m).map_err(|e| dir_err(m, e))?;
    }
    files.par_iter().enumerate().try_for_each(|(i, f)| {
        let name = f.file_name().expect("listed files have names");
        let mpath = mask.map(|m| m.join(name));
        degrade_one(&spec, f, i as u64, &out.join(name), mpath.as_deref())
    })?;
    println!("degraded {} cubes into {}", files.len(), out.display());
    Ok(())
}

fn cmd_train(config: &Path, data: &Path, out: &Path, resume: bool) -> CliResult<()> {
    let text = read_text(config)?;
    let cfg = RunConfig::parse(&text)?;
    let files = cube_files(data)?;
    if files.is_empty() {
        return Err(CliError::Data(format!("no cube files in {}", data.display())));
    }
    let clean = files.iter().map(|f| load(f)).collect::<CliResult<Vec<_>>>()?;
    for (f, c) in files.iter().zip(&clean) {
        if c.channels() != cfg.model.channels {
            return Err(CliError::Data(format!(
                "{} has {} bands, config expects {}",
                f.display(),
                c.channels(),
                cfg.model.channels
            )));
        }
    }
    info!("loaded {} cubes from {}", clean.len(), data.display());
    let pairs = make_pairs(&clean, &cfg.degradation)?;
    let dataset = Dataset::split(pairs, cfg.train.val_fraction, cfg.train.seed);

    let run_dir = RunDir::create(out)?;
    let (mut state, mut opt) = if resume && run_dir.last_checkpoint().is_file() {
        let ck = load_checkpoint(run_dir.last_checkpoint())?;
        if ck.config != cfg.model {
            return Err(CliError::Usage(
                "model config differs from the checkpoint being resumed".into(),
            ));
        }
        let opt = ck
            .optimizer
            .ok_or_else(|| CliError::Data("checkpoint has no optimizer state".into()))?;
        info!("resuming at step {}", opt.step);
        (ck.state, opt)
    } else {
        let state = build_model(&cfg.model, cfg.train.seed)?;
        let opt = OptimizerState::new(&state.params);
        (state, opt)
    };
    run_dir.write_config(&cfg.to_toml()?)?;
    let last = run_dir.last_checkpoint();
    let trainer = Trainer {
        model: &cfg.model,
        config: &cfg.train,
        data: &dataset,
        run_dir: Some(run_dir),
    };
    let history = trainer.run(&mut state, &mut opt, |_| std::ops::ControlFlow::Continue(()))?;
    save_checkpoint(&last, &cfg.model, &state, Some(&opt))?;
    match history.epochs.last() {
        Some(r) => println!(
            "trained to step {} (train_l1 {:.5}); checkpoint {}",
            opt.step,
            r.train_l1,
            last.display()
        ),
        None => println!("nothing to do at step {}; checkpoint {}", opt.step, last.display()),
    }
    Ok(())
}

struct Loaded {
    config: hyper_restormer::model::ModelConfig,
    state: hyper_restormer::model::ModelState,
    input: HsiCube,
    mask: Option<HsiCube>,
}

fn load_for_inference(checkpoint: &Path, input: &Path, mask: Option<&Path>) -> CliResult<Loaded> {
    let ck = load_checkpoint(checkpoint)?;
    let config = ck.config;
    let mut cube = load(input)?;
    if cube.channels() != config.channels {
        return Err(CliError::Data(format!(
            "{} has {} bands, the model expects {}",
            input.display(),
            cube.channels(),
            config.channels
        )));
    }
    if let Task::Superres { scale } = config.task {
        cube = bicubic_upsample(&cube, scale)?;
    }
    let mask = match (config.mask_channel, mask) {
        (true, None) => return Err(CliError::Usage("this model needs --mask".into())),
        (true, Some(p)) => {
            let m = load(p)?;
            m.same_shape(&cube)?;
            Some(m)
        }
        (false, Some(_)) => {
            log::warn!("model has no mask channel; ignoring --mask");
            None
        }
        (false, None) => None,
    };
    Ok(Loaded {
        config,
        state: ck.state,
        input: cube,
        mask,
    })
}

fn cmd_restore(checkpoint: &Path, input: &Path, out: &Path, mask: Option<&Path>) -> CliResult<()> {
    let l = load_for_inference(checkpoint, input, mask)?;
    let restored = restore_cube(&l.input, l.mask.as_ref(), &l.state, &l.config)?;
    write_cube(out, &restored)?;
    let (c, h, w) = restored.dims();
    println!("restored {c}x{h}x{w} cube to {}", out.display());
    Ok(())
}

fn cmd_evaluate(reference: &Path, test: &Path, out: Option<&Path>) -> CliResult<()> {
    let r = load(reference)?;
    let t = load(test)?;
    let report = MetricsReport::compute(&r, &t)?;
    if let Some(p) = out {
        fs::write(p, report.to_text()).map_err(|e| CliError::Data(format!("cannot write {}: {e}", p.display())))?;
    }
    println!("{report}");
    Ok(())
}

fn cmd_benchmark(checkpoint: &Path, input: &Path, repeat: usize, mask: Option<&Path>) -> CliResult<()> {
    if repeat == 0 {
        return Err(CliError::Usage("--repeat must be at least 1".into()));
    }
    let l = load_for_inference(checkpoint, input, mask)?;
    // one untimed warm-up run
    restore_cube(&l.input, l.mask.as_ref(), &l.state, &l.config)?;
    let mut times = Vec::with_capacity(repeat);
    for _ in 0..repeat {
        let t0 = Instant::now();
        restore_cube(&l.input, l.mask.as_ref(), &l.state, &l.config)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let std = (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n).sqrt();
    let min = times.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = times.iter().cloned().fold(0.0, f64::max);
    let (c, h, w) = l.input.dims();
    println!("cube {c}x{h}x{w}, {repeat} runs");
    println!("mean {mean:.2} ms, std {std:.2} ms, min {min:.2} ms, max {max:.2} ms");
    println!("macs {}", count_macs(&l.config, h, w));
    Ok(())
}

fn cmd_preview(input: &Path, bands: [usize; 3], out: &Path) -> CliResult<()> {
    let cube = load(input)?;
    if let Some(&b) = bands.iter().find(|&&b| b >= cube.channels()) {
        return Err(CliError::Usage(format!(
            "band {b} out of range for a {}-band cube",
            cube.channels()
        )));
    }
    let rgb = preview::rgb_preview(&cube, bands);
    image::save_buffer_with_format(
        out,
        &rgb,
        cube.width() as u32,
        cube.height() as u32,
        image::ColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| CliError::Data(format!("cannot write {}: {e}", out.display())))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_count(config: &Path, hw: Option<(usize, usize)>) -> CliResult<()> {
    let cfg = model_config_from_text(&read_text(config)?)?;
    let (h, w) = hw.unwrap_or((cfg.working_size(), cfg.working_size()));
    let (p, pd) = (count_parameters(&cfg), count_parameters_dense(&cfg));
    let (m, md) = (count_macs(&cfg, h, w), count_macs_dense(&cfg, h, w));
    println!("size {h}x{w}");
    println!("parameters {p}");
    println!("parameters_dense {pd}");
    println!("parameter_ratio {:.4}", p as f64 / pd as f64);
    println!("macs {m}");
    println!("macs_dense {md}");
    println!("mac_ratio {:.4}", m as f64 / md as f64);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    out: &Path,
    spec: Option<&Path>,
    seed: Option<u64>,
    size: Option<(usize, usize)>,
    bands: Option<usize>,
    order: Option<usize>,
    count: Option<usize>,
) -> CliResult<()> {
    let mut s: SyntheticSceneSpec = match spec {
        Some(p) => parse_params(&read_text(p)?, "scene")?,
        None => SyntheticSceneSpec::default(),
    };
    if let Some(v) = seed {
        s.seed = v;
    }
    if let Some((h, w)) = size {
        s.height = h;
        s.width = w;
    }
    if let Some(v) = bands {
        s.bands = v;
    }
    if let Some(v) = order {
        s.mixture_order = v;
    }
    s.validate()?;
    match count {
        None => {
            write_cube(out, &synth_scene(&s)?)?;
            println!("wrote {}", out.display());
        }
        Some(n) => {
            fs::create_dir_all(out).map_err(|e| CliError::Data(format!("cannot create {}: {e}", out.display())))?;
            (0..n).into_par_iter().try_for_each(|i| {
                let spec = SyntheticSceneSpec {
                    seed: derive_seed(s.seed, i as u64),
                    ..s.clone()
                };
                write_cube(out.join(format!("scene_{i:04}.cube")), &synth_scene(&spec)?).map_err(CliError::from)
            })?;
            println!("wrote {n} scenes to {}", out.display());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Degrade {
            task,
            input,
            spec,
            seed,
            sigma,
            blind,
            scale,
            out,
            mask,
        } => cmd_degrade(
            task,
            &input,
            spec.as_deref(),
            seed,
            sigma,
            blind,
            scale,
            &out,
            mask.as_deref(),
        ),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => cmd_train(&config, &data, &out, resume),
        Command::Restore {
            checkpoint,
            input,
            out,
            mask,
        } => cmd_restore(&checkpoint, &input, &out, mask.as_deref()),
        Command::Evaluate { reference, test, out } => cmd_evaluate(&reference, &test, out.as_deref()),
        Command::Benchmark {
            checkpoint,
            input,
            repeat,
            mask,
        } => cmd_benchmark(&checkpoint, &input, repeat, mask.as_deref()),
        Command::Preview { input, bands, out } => cmd_preview(&input, bands, &out),
        Command::Count { config, hw } => cmd_count(&config, hw),
        Command::Synth {
            out,
            spec,
            seed,
            size,
            bands,
            order,
            count,
        } => cmd_synth(&out, spec.as_deref(), seed, size, bands, order, count),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code())
        }
    }
}
