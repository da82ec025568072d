//! `wand` command-line entry point: reproducible experiment commands over
//! the hybrid-attention engine. Exit codes: 0 success, 2 usage or config
//! error, 3 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CmdError;
use config::{load_config, RunConfig};
use wand_core::harness::{Strategy, TrainSettings};
use wand_core::masking::WindowSpec;

#[derive(Parser)]
#[command(
    name = "wand",
    version,
    about = "Hybrid global/sliding-window attention experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file (flat key = value sections); absent sections use defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override for data, init, and sampling
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoints and CSV reports
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the full-attention teacher on the synthetic task
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Optimizer steps (default from the config's train section, 5000)
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Adapt a student to a sliding window via curriculum + distillation
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint produced by `pretrain`
        #[arg(long)]
        teacher: PathBuf,
        /// Adaptation steps (default 2000)
        #[arg(long)]
        steps: Option<usize>,
        /// Target window W
        #[arg(long)]
        window: Option<usize>,
        /// Curriculum starting window
        #[arg(long)]
        window_start: Option<usize>,
        /// Soft-mask temperature at step 0
        #[arg(long)]
        tau_start: Option<f64>,
        /// Soft-mask temperature at the end of the curriculum
        #[arg(long)]
        tau_end: Option<f64>,
        /// Curriculum length in steps
        #[arg(long)]
        tc: Option<usize>,
        /// Weight of the KL distillation term
        #[arg(long)]
        lambda: Option<f64>,
        /// Skew coefficient of the KL mixture
        #[arg(long)]
        skew: Option<f64>,
        /// Disable the ground-truth cross-entropy term
        #[arg(long)]
        no_ce: bool,
        /// Disable the teacher KL term
        #[arg(long)]
        no_kl: bool,
        /// Train at the target window from step 0 (no curriculum)
        #[arg(long)]
        direct: bool,
    },
    /// Autoregressively decode tokens against a bounded cache
    Generate {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint
        #[arg(long)]
        ckpt: PathBuf,
        /// Number of tokens to generate
        #[arg(long, default_value_t = 64)]
        tokens: usize,
        /// Sliding window W, or `inf` for full attention
        #[arg(long, default_value = "inf", value_parser = parse_window)]
        window: WindowSpec,
        /// Sampling temperature; 0 means greedy
        #[arg(long, default_value_t = 0.0)]
        temp: f32,
        /// Top-k truncation; 0 disables it
        #[arg(long, default_value_t = 0)]
        top_k: usize,
        /// Synthetic style id for the conditioning prefix
        #[arg(long, default_value_t = 0)]
        style: usize,
    },
    /// Per-step decode latency: full attention vs sliding window
    Bench {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint; a fresh seeded init is used when absent
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Generated tokens per run (must be >= 4 * window)
        #[arg(long, default_value_t = 2048)]
        tokens: usize,
        /// Sliding window for the bounded variant
        #[arg(long, default_value_t = 32)]
        window: usize,
        /// Timed repeats per token index (median taken)
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Conditioning prefix length
        #[arg(long, default_value_t = 16)]
        prefix_len: usize,
    },
    /// Attention-mass decomposition of a full-attention model
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint
        #[arg(long)]
        ckpt: PathBuf,
        /// Window for the local-mass split
        #[arg(long, default_value_t = 32)]
        window: usize,
        /// Validation sequences to average over
        #[arg(long, default_value_t = 8)]
        seqs: usize,
    },
    /// KV-cache and FLOPs cost model; presets carry published baselines
    Cost {
        #[command(flatten)]
        common: Common,
        /// Preset: cosyvoice2-10s, indextts-10s, sparktts-10s
        #[arg(long)]
        preset: Option<String>,
        /// Conditioning prefix length (manual mode)
        #[arg(long, default_value_t = 0)]
        prefix: usize,
        /// Generated tokens (manual mode)
        #[arg(long, default_value_t = 0)]
        gen: usize,
        /// Sliding window (manual mode)
        #[arg(long, default_value_t = 0)]
        window: usize,
    },
    /// Loss-component x strategy ablation grid against one teacher
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint shared by every arm
        #[arg(long)]
        teacher: PathBuf,
        /// Grid name; only `default` exists
        #[arg(long, default_value = "default")]
        grid: String,
        /// Comma-separated seeds
        #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Worker threads over independent arms
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Adaptation steps per arm (default 2000)
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn parse_window(s: &str) -> Result<WindowSpec, String> {
    if s.eq_ignore_ascii_case("inf") {
        return Ok(WindowSpec::Unbounded);
    }
    let w: usize = s
        .parse()
        .map_err(|_| format!("window must be a positive integer or `inf`, got `{s}`"))?;
    if w == 0 {
        return Err("window must be >= 1 (or `inf`)".into());
    }
    Ok(WindowSpec::Bounded(w))
}

fn effective_config(common: &Common) -> Result<RunConfig, CmdError> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path).map_err(CmdError::Usage)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CmdError> {
    match cli.command {
        Command::Pretrain { common, steps } => {
            let mut cfg = effective_config(&common)?;
            if let Some(steps) = steps {
                cfg.train.steps = steps;
            }
            commands::cmd_pretrain(&cfg, &common.out)
        }
        Command::Adapt {
            common,
            teacher,
            steps,
            window,
            window_start,
            tau_start,
            tau_end,
            tc,
            lambda,
            skew,
            no_ce,
            no_kl,
            direct,
        } => {
            let mut cfg = effective_config(&common)?;
            if let Some(w) = window {
                cfg.schedule.w_target = w;
            }
            if let Some(w) = window_start {
                cfg.schedule.w_start = w;
            }
            if let Some(t) = tau_start {
                cfg.schedule.tau_start = t;
            }
            if let Some(t) = tau_end {
                cfg.schedule.tau_end = t;
            }
            if let Some(t) = tc {
                cfg.schedule.t_c = t;
            }
            if let Some(l) = lambda {
                cfg.distill.lambda = l;
            }
            if let Some(s) = skew {
                cfg.distill.skew = s;
            }
            if no_ce {
                cfg.distill.enable_ce = false;
            }
            if no_kl {
                cfg.distill.enable_kl = false;
            }
            let settings = TrainSettings {
                steps: steps.unwrap_or(2000),
                peak_lr: cfg.train.peak_lr / 2.0,
                ..TrainSettings::adapt_default()
            };
            let strategy = if direct {
                Strategy::Direct
            } else {
                Strategy::Curriculum
            };
            commands::cmd_adapt(&teacher, &cfg, strategy, &settings, &common.out)
        }
        Command::Generate {
            common,
            ckpt,
            tokens,
            window,
            temp,
            top_k,
            style,
        } => {
            let cfg = effective_config(&common)?;
            commands::cmd_generate(&ckpt, &cfg, tokens, window, temp, top_k, style, &common.out)
        }
        Command::Bench {
            common,
            ckpt,
            tokens,
            window,
            repeats,
            prefix_len,
        } => {
            let cfg = effective_config(&common)?;
            commands::cmd_bench(
                ckpt.as_deref(),
                &cfg,
                tokens,
                window,
                repeats,
                prefix_len,
                &common.out,
            )
        }
        Command::Analyze {
            common,
            ckpt,
            window,
            seqs,
        } => {
            let cfg = effective_config(&common)?;
            commands::cmd_analyze(&ckpt, &cfg, window, seqs, &common.out)
        }
        Command::Cost {
            common,
            preset,
            prefix,
            gen,
            window,
        } => {
            let cfg = effective_config(&common)?;
            commands::cmd_cost(preset.as_deref(), &cfg, prefix, gen, window, &common.out)
        }
        Command::Ablate {
            common,
            teacher,
            grid,
            seeds,
            jobs,
            steps,
        } => {
            if grid != "default" {
                return Err(CmdError::Usage(format!(
                    "unknown grid `{grid}`; only `default` exists"
                )));
            }
            let cfg = effective_config(&common)?;
            let settings = TrainSettings {
                steps: steps.unwrap_or(2000),
                peak_lr: cfg.train.peak_lr / 2.0,
                ..TrainSettings::adapt_default()
            };
            commands::cmd_ablate(&teacher, &cfg, &seeds, jobs, &settings, &common.out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
