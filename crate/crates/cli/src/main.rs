use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fusion_cli::commands::{self, resolve_out};
use fusion_cli::{CliError, Preset, RunConfig};
use fusion_core::backbone::{Conditioning, Fusion};
use fusion_core::diffusion::Guidance;

#[derive(Parser, Debug)]
#[command(name = "uvit-fusion", version, about = "Early vs. intermediate text fusion for pixel diffusion")]
struct Cli {
    /// Built-in preset; defaults to tiny.
    #[arg(long, global = true, value_enum, conflicts_with = "config")]
    preset: Option<Preset>,
    /// Full run config (TOML), e.g. the config.toml of an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_fusion)]
    fusion: Option<Fusion>,
    #[arg(long, global = true, value_parser = parse_conditioning)]
    conditioning: Option<Conditioning>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Per-key override, e.g. `--set optim.lr=1e-3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a captioned-shapes dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Number of records; defaults to data.n_train.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train a denoiser on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Sample images for the given captions.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "prompt", required = true)]
        prompts: Vec<String>,
        /// Images per prompt.
        #[arg(long, default_value_t = 1)]
        n: usize,
        /// Guidance scale; defaults to sample.omega.
        #[arg(long, conflicts_with = "conditional")]
        omega: Option<f64>,
        /// Conditional prediction only, no guidance pass.
        #[arg(long)]
        conditional: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter and FLOP accounting.
    Flops {
        /// Report all four fusion x conditioning settings.
        #[arg(long)]
        all_settings: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Text-to-image attention spectra from a checkpoint.
    AnalyzeAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to eval.attn_prompts.
        #[arg(long = "prompt")]
        prompts: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Object-count alignment of generated images.
    EvalCount {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Guidance-scale sweep of Fréchet distance and count alignment.
    CfgSweep {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated; defaults to eval.omegas.
        #[arg(long, value_delimiter = ',')]
        omegas: Vec<f64>,
        /// Reference dataset; defaults to freshly rendered scenes.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved run config.
    ShowConfig,
}

fn parse_fusion(s: &str) -> Result<Fusion, String> {
    match s {
        "early" => Ok(Fusion::Early),
        "intermediate" => Ok(Fusion::Intermediate),
        _ => Err(format!("expected early or intermediate, got {s:?}")),
    }
}

fn parse_conditioning(s: &str) -> Result<Conditioning, String> {
    match s {
        "concat" => Ok(Conditioning::Concat),
        "crossattn" => Ok(Conditioning::CrossAttn),
        _ => Err(format!("expected concat or crossattn, got {s:?}")),
    }
}

impl Command {
    fn checkpoint(&self) -> Option<&Path> {
        match self {
            Command::Sample { checkpoint, .. }
            | Command::AnalyzeAttn { checkpoint, .. }
            | Command::EvalCount { checkpoint, .. }
            | Command::CfgSweep { checkpoint, .. } => Some(checkpoint),
            _ => None,
        }
    }
}

/// Preset or config file, then fusion/conditioning flags, then `--set`.
/// Without either source, a checkpoint's sibling config.toml is used.
fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let sibling = cli
        .command
        .checkpoint()
        .and_then(|c| c.parent().map(|p| p.join("config.toml")))
        .filter(|p| p.is_file());
    let mut cfg = match (&cli.config, cli.preset, sibling) {
        (Some(path), _, _) => RunConfig::load(path)?,
        (None, Some(p), _) => RunConfig::preset(p),
        (None, None, Some(path)) => {
            log::info!("using {}", path.display());
            RunConfig::load(&path)?
        }
        (None, None, None) => RunConfig::preset(Preset::Tiny),
    };
    if let Some(f) = cli.fusion {
        cfg.set_fusion(f);
    }
    if let Some(c) = cli.conditioning {
        cfg.model.conditioning = c;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::GenData { out, n } => {
            let path = commands::gen_data(&cfg, *n, &resolve_out(out))?;
            println!("wrote {}", path.display());
        }
        Command::Train { data, out, steps } => {
            let s = commands::train(&cfg, data, &resolve_out(out), *steps)?;
            println!(
                "wrote {} after {} steps; smoothed loss {:.4} ({:.3} of initial)",
                s.checkpoint.display(),
                s.losses.len(),
                s.smoothed.last().copied().unwrap_or(f64::NAN),
                s.loss_ratio()
            );
        }
        Command::Sample {
            checkpoint,
            prompts,
            n,
            omega,
            conditional,
            out,
        } => {
            let guidance = if *conditional {
                Guidance::Conditional
            } else {
                Guidance::Cfg(omega.unwrap_or(cfg.sample.omega))
            };
            let files = commands::sample_images(&cfg, checkpoint, prompts, *n, guidance, &resolve_out(out))?;
            println!("wrote {} samples", files.len());
        }
        Command::Flops { all_settings, out } => {
            let out = out.as_deref().map(resolve_out);
            let rows = commands::flops(&cfg, *all_settings, out.as_deref())?;
            print!("{}", commands::flops_table(&rows));
        }
        Command::AnalyzeAttn { checkpoint, prompts, out } => {
            let r = commands::analyze_attn(&cfg, checkpoint, prompts, &resolve_out(out))?;
            for l in &r.layers {
                let s: Vec<String> = l.sigma.iter().map(|v| format!("{v:.4}")).collect();
                println!("layer {} {:?}: {}", l.layer, l.kind, s.join(" "));
            }
        }
        Command::EvalCount { checkpoint, out } => {
            let (r, _) = commands::eval_count(&cfg, checkpoint, &resolve_out(out))?;
            println!("n {} avg_error {:.4} match_ratio {:.4}", r.n, r.avg_error, r.match_ratio);
        }
        Command::CfgSweep {
            checkpoint,
            omegas,
            data,
            out,
        } => {
            let omegas = if omegas.is_empty() { &cfg.eval.omegas } else { omegas };
            let rows = commands::cfg_sweep_cmd(&cfg, checkpoint, omegas, data.as_deref(), &resolve_out(out))?;
            print!("{}", fusion_core::eval::sweep_csv(&rows));
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
