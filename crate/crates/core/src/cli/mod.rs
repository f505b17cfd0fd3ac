use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use cgrseg::analysis::{count_flops, run_suite, DEFAULT_TOL};
use cgrseg::io::{colorize, gray_to_rgb, load_weights, read_ppm, reflect_pad, save_weights, write_pgm, ConfigFile};
use cgrseg::model::{export_attention, predict, ModelParams, PYRAMID_STRIDE};
use cgrseg::tensor::tape::{op_name, OpKind};
use cgrseg::train::train_toy_with;
use cgrseg::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "cgrseg", version, about = "Rectangular self-calibration segmentation toolkit")]
pub struct Cli {
    /// TOML file with [model] and [train] tables.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the per-module MAC and parameter ledger.
    Flops(FlopsArgs),
    /// Finite-difference check of every block's gradients.
    Gradcheck(GradcheckArgs),
    /// Train on synthetic shapes and write a weight file.
    TrainToy(TrainArgs),
    /// Segment a PPM image.
    Infer(InferArgs),
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// Input size as HxW. Defaults to the config's input size.
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(usize, usize)>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Coordinates per block (at least 20).
    #[arg(long, default_value_t = 24)]
    pub samples: usize,
    /// Corrupts the backward rule of one op.
    #[arg(long, hide = true, value_name = "OP")]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "WEIGHTS")]
    pub out: PathBuf,
    /// Metrics log path. Defaults to `<out>.log`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Binary PPM (P6) input.
    #[arg(long)]
    pub image: PathBuf,
    /// Label map as PGM (P5).
    #[arg(long)]
    pub out: PathBuf,
    /// Palette-colored labels as PPM.
    #[arg(long)]
    pub color: Option<PathBuf>,
    /// Attention heatmap of one stage, as `stage:out.ppm`. Repeatable.
    #[arg(long, value_name = "STAGE:PATH")]
    pub attn: Vec<String>,
    /// Reflect-pad to the next multiple of 64 and crop outputs back.
    #[arg(long)]
    pub pad: bool,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad dimension `{v}` in `{s}`"));
    Ok((num(h)?, num(w)?))
}

/// A failure plus the process exit code it maps to.
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_numerical() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

pub fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let cfg = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::Flops(a) => flops(&cfg, a, &mut out)?,
        Command::Gradcheck(a) => gradcheck(cli.seed.unwrap_or(0), a, &mut out)?,
        Command::TrainToy(a) => {
            let mut cfg = cfg;
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            train(&cfg, a, &mut out)?
        }
        Command::Infer(a) => infer(&cfg, a, &mut out)?,
    }
    Ok(())
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn flops(cfg: &ConfigFile, a: FlopsArgs, out: &mut impl Write) -> Result<()> {
    let (h, w) = a.size.unwrap_or((cfg.model.input_size[0], cfg.model.input_size[1]));
    let report = count_flops(&cfg.model, h, w)?;
    writeln!(out, "{report}").map_err(stdout_err)
}

fn gradcheck(seed: u64, a: GradcheckArgs, out: &mut impl Write) -> std::result::Result<(), Failure> {
    let fault = match a.inject_fault.as_deref() {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Failure {
            code: 1,
            message: format!(
                "unknown op `{name}`; one of: {}",
                OpKind::ALL.map(op_name).join(", ")
            ),
        })?),
    };
    let results = run_suite(seed, a.samples, fault)?;
    let io = |e| Failure::from(stdout_err(e));
    writeln!(out, "{:<10} {:>14} {:<40} {:>7}  status", "block", "max_rel_error", "worst", "samples").map_err(io)?;
    for r in &results {
        let status = if r.passed(DEFAULT_TOL) { "ok" } else { "FAIL" };
        writeln!(
            out,
            "{:<10} {:>14.3e} {:<40} {:>7}  {status}",
            r.block, r.max_rel_error, r.worst_param, r.samples
        )
        .map_err(io)?;
    }
    if let Some(bad) = results.iter().find(|r| !r.passed(DEFAULT_TOL)) {
        return Err(Failure {
            code: 2,
            message: format!(
                "gradient check failed in {}: {} has relative error {:.3e} > {DEFAULT_TOL:e}",
                bad.block, bad.worst_param, bad.max_rel_error
            ),
        });
    }
    Ok(())
}

fn default_log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log");
    PathBuf::from(s)
}

fn train(cfg: &ConfigFile, a: TrainArgs, out: &mut impl Write) -> Result<()> {
    let log_path = a.log.unwrap_or_else(|| default_log_path(&a.out));
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut write_err = None;
    let result = train_toy_with(&cfg.train, &cfg.model, |line| {
        if write_err.is_none() {
            if let Err(e) = writeln!(log, "{line}") {
                write_err = Some(e);
            }
        }
        if line.contains("miou=") {
            let _ = writeln!(out, "{line}");
        }
    });
    let finished = result.and_then(|o| {
        if let Some(e) = write_err {
            return Err(Error::io(&log_path, e));
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        save_weights(&a.out, &o.params.store)?;
        Ok(o)
    });
    match finished {
        Ok(o) => {
            writeln!(out, "final miou={:.6}", o.final_miou).map_err(stdout_err)?;
            writeln!(out, "wrote {} and {}", a.out.display(), log_path.display()).map_err(stdout_err)
        }
        Err(e) => {
            drop(log);
            let _ = std::fs::remove_file(&log_path);
            let _ = std::fs::remove_file(&a.out);
            Err(e)
        }
    }
}

fn crop<T: Copy>(values: &[T], full_w: usize, h: usize, w: usize) -> Vec<T> {
    (0..h).flat_map(|y| values[y * full_w..y * full_w + w].iter().copied()).collect()
}

fn infer(cfg: &ConfigFile, a: InferArgs, out: &mut impl Write) -> Result<()> {
    let attn: Vec<(&str, PathBuf)> = a
        .attn
        .iter()
        .map(|s| {
            s.split_once(':')
                .map(|(stage, path)| (stage, PathBuf::from(path)))
                .ok_or_else(|| Error::InvalidArgument(format!("--attn expects STAGE:PATH, got `{s}`")))
        })
        .collect::<Result<_>>()?;

    let mut params = ModelParams::init(&cfg.model, 0)?;
    load_weights(&a.weights, &mut params.store)?;
    for (stage, _) in &attn {
        if !params.stage_names().iter().any(|s| s == stage) {
            return Err(Error::UnknownStage((*stage).to_owned()));
        }
    }
    let img = read_ppm(&a.image)?;
    let [_, c, h, w] = img.dims();
    if c != cfg.model.in_channels {
        return Err(Error::Config(format!("image has {c} channels, model expects {}", cfg.model.in_channels)));
    }
    let up = |v: usize| v.div_ceil(PYRAMID_STRIDE) * PYRAMID_STRIDE;
    let (ph, pw) = (up(h), up(w));
    let x = if (ph, pw) == (h, w) {
        img
    } else if a.pad {
        reflect_pad(&img, ph, pw)?
    } else {
        return Err(Error::Config(format!(
            "image {h}x{w} is not a multiple of {PYRAMID_STRIDE}; pass --pad to reflect-pad it"
        )));
    };

    let labels = crop(&predict(&params, &x)?, pw, h, w);
    let bytes: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
    write_pgm(&a.out, w, h, &bytes)?;
    if let Some(path) = &a.color {
        colorize(&labels, w, h)?.write(path)?;
    }
    for (stage, path) in &attn {
        let map = export_attention(&params, &x, stage)?;
        gray_to_rgb(&crop(map.data(), pw, h, w), w, h)?.write(path)?;
    }
    writeln!(out, "wrote {} ({w}x{h})", a.out.display()).map_err(stdout_err)
}
