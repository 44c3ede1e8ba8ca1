//! `qcw`: drive weighted-calibration quantization runs from the command
//! line. Every subcommand resolves the experiment TOML, applies `--seed`
//! and `--out` overrides, and resumes any artifacts already on disk.
//!
//! Exit codes: 0 on success, 2 on configuration or artifact errors, 3 when
//! a numeric stage diverged or produced non-finite values.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qcw_core::config::ExperimentConfig;
use qcw_core::diagnostics::write_json;
use qcw_core::diffusion::{ddim_sample, NoiseSchedule};
use qcw_core::error::{Error, Result};
use qcw_core::model::Architecture;
use qcw_core::params::ParamVector;
use qcw_core::pipeline::{compare_over_seeds, run_full, run_verification, RunMode, StopStage};
use qcw_core::quant::{BlockPlan, QuantState};
use qcw_core::rng::stream;

#[derive(Parser)]
#[command(name = "qcw", version, about = "Weighted-calibration quantization laboratory")]
struct Cli {
    /// Experiment definition (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; overrides the configuration file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the floating-point denoiser and stop.
    TrainFp,
    /// Record the calibration corpus and stop.
    GenCalib,
    /// Quantize the model block by block.
    Calibrate(ModeArgs),
    /// Run the full pipeline and write diagnostics reports.
    Diagnose(ModeArgs),
    /// Check both weighting lemmas numerically and write the residuals.
    VerifyLemmas,
    /// Run the uniform and weighted arms over several seeds and tally wins.
    Compare {
        /// Seeds to run: comma-separated values, each a number or a
        /// half-open range like 1..20.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<String>,
    },
    /// Draw samples from the trained model and print or save them as CSV.
    Sample {
        #[arg(long, default_value_t = 256)]
        count: usize,
        /// Sample through the dequantized weight checkpoint instead of the
        /// floating-point model. Activation quantizers do not apply here.
        #[arg(long)]
        quantized: bool,
        /// Destination file; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ModeArgs {
    /// Keep uniform sample weights.
    #[arg(long, conflicts_with = "weighted")]
    uniform: bool,
    /// Learn sample weights before block reconstruction (the default).
    #[arg(long)]
    weighted: bool,
}

impl ModeArgs {
    fn mode(&self) -> RunMode {
        if self.uniform {
            RunMode::Uniform
        } else {
            RunMode::Weighted
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let config_path = cli.config.as_deref().ok_or_else(|| {
        Error::Config("a --config <path> pointing at an experiment TOML is required".to_string())
    })?;
    let cfg = ExperimentConfig::load(config_path)?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    let out_root = cli
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));

    match &cli.command {
        Command::TrainFp => {
            let out = run_full(&cfg, seed, RunMode::Weighted, &out_root, StopStage::FpTrain)?;
            println!("fp model ready under {}", out.root.display());
        }
        Command::GenCalib => {
            let out = run_full(&cfg, seed, RunMode::Weighted, &out_root, StopStage::Calibration)?;
            println!("calibration corpus ready under {}", out.root.display());
        }
        Command::Calibrate(mode) => {
            let out = run_full(&cfg, seed, mode.mode(), &out_root, StopStage::Quantize)?;
            println!("quantized checkpoints under {}", out.root.display());
        }
        Command::Diagnose(mode) => {
            let out = run_full(&cfg, seed, mode.mode(), &out_root, StopStage::Diagnostics)?;
            let profile = out.profile.ok_or_else(|| Error::InvalidArgument {
                name: "diagnose",
                why: "diagnostics produced no profile".to_string(),
            })?;
            println!(
                "validation mse {:.6e}; reports under {}",
                profile.profile.global,
                out.root.display()
            );
        }
        Command::VerifyLemmas => {
            let report = run_verification(&cfg, seed)?;
            std::fs::create_dir_all(&out_root)?;
            let path = out_root.join(format!("lemmas-s{seed}-{}.json", &report.config_hash[..8]));
            write_json(&path, &report)?;
            let direction = match report.lemma42.spearman {
                Some(r) => format!("{r:.3}"),
                None => "degenerate".to_string(),
            };
            println!(
                "composite residual {:.3e}, mse-only residual {:.3e}, direction correlation {direction}; wrote {}",
                report.lemma43.composite_residual,
                report.lemma43.mse_only_residual,
                path.display()
            );
        }
        Command::Compare { seeds } => {
            let seeds = expand_seeds(seeds)?;
            let sweep = compare_over_seeds(&cfg, &seeds, &out_root)?;
            write_json(&out_root.join("sweep.json"), &sweep)?;
            std::fs::write(out_root.join("sweep.csv"), sweep.to_csv())?;
            println!(
                "weighted at or below uniform on {}/{} seeds; worst group improved on {}/{}",
                sweep.improved,
                sweep.runs.len(),
                sweep.worst_group_improved,
                sweep.runs.len()
            );
        }
        Command::Sample {
            count,
            quantized,
            output,
        } => sample(&cfg, seed, &out_root, *count, *quantized, output.as_deref())?,
    }
    Ok(())
}

/// Expands `--seeds` tokens into a flat seed list. Each token is a plain
/// number or a half-open range `a..b`.
fn expand_seeds(tokens: &[String]) -> Result<Vec<u64>> {
    let parse = |s: &str| -> Result<u64> {
        s.trim()
            .parse()
            .map_err(|_| Error::Config(format!("invalid seed `{s}` in --seeds")))
    };
    let mut seeds = Vec::new();
    for tok in tokens {
        match tok.split_once("..") {
            Some((lo, hi)) => {
                let (lo, hi) = (parse(lo)?, parse(hi)?);
                if hi <= lo {
                    return Err(Error::Config(format!(
                        "empty seed range `{tok}` in --seeds"
                    )));
                }
                seeds.extend(lo..hi);
            }
            None => seeds.push(parse(tok)?),
        }
    }
    Ok(seeds)
}

/// Ensures the needed checkpoints exist (resuming if not), runs the
/// deterministic sampler, and emits one CSV row per sample.
fn sample(
    cfg: &ExperimentConfig,
    seed: u64,
    out_root: &Path,
    count: usize,
    quantized: bool,
    output: Option<&Path>,
) -> Result<()> {
    if count == 0 {
        return Err(Error::InvalidArgument {
            name: "sample",
            why: "count must be positive".to_string(),
        });
    }
    let d = &cfg.diffusion;
    let schedule = NoiseSchedule::linear(d.t_steps, d.beta_start, d.beta_end)?;
    let arch = Architecture::mlp(
        d.dataset.dim(),
        d.width,
        d.hidden,
        d.time_embed_dim,
        d.layer_norm,
    )?;
    let stop = if quantized {
        StopStage::Quantize
    } else {
        StopStage::FpTrain
    };
    let out = run_full(cfg, seed, RunMode::Weighted, out_root, stop)?;
    let fp = ParamVector::load(&out.root.join("checkpoints/fp.qcw"))?;
    let params = if quantized {
        let blocks = BlockPlan::new(&arch)?.len();
        let state = QuantState::load(
            &out.root
                .join(format!("checkpoints/quant-block{}.qcw", blocks - 1)),
        )?;
        state.effective_params(&fp)?
    } else {
        fp
    };
    let mut rng = stream(seed, "sample", 0);
    let points = ddim_sample(&schedule, &arch, &params, count, &mut rng)?;

    let mut csv = String::new();
    for c in 0..points.cols()? {
        if c > 0 {
            csv.push(',');
        }
        csv.push_str(&format!("x{c}"));
    }
    csv.push('\n');
    for r in 0..points.rows()? {
        for (c, v) in points.row_slice(r)?.iter().enumerate() {
            if c > 0 {
                csv.push(',');
            }
            csv.push_str(&format!("{v}"));
        }
        csv.push('\n');
    }
    match output {
        Some(path) => {
            std::fs::write(path, csv)?;
            println!("wrote {count} samples to {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}
