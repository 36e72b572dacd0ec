use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mgt_cli::config::{Backend, QuantVariant, RunConfig};
use mgt_cli::harness::{load_run_file, run_to_dir};
use mgt_cli::presets;
use mgt_cli::sweep::{resolve_workers, run_sweep, write_rows, SweepSpec, WORKERS_ENV};
use mgt_cli::{config, CliResult};
use mgt_core::enhance::zigzag::ZigzagMode;
use mgt_core::predictor::RopeMerge;
use mgt_core::TinyTransformer;

#[derive(Parser)]
#[command(name = "mgt", version, about = "Masked generative Transformer sampling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    cfg_scale: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    condition: Option<u32>,
    /// Argmax selection from this step on.
    #[arg(long)]
    deterministic_from: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        let s = &mut cfg.sampler;
        if let Some(v) = self.seed {
            s.seed = v;
        }
        if let Some(v) = self.steps {
            s.steps = v;
        }
        if let Some(v) = self.cfg_scale {
            s.cfg_scale = v;
        }
        if let Some(v) = self.temperature {
            s.temperature = v;
        }
        if let Some(v) = self.condition {
            s.condition = v;
        }
        if self.deterministic_from.is_some() {
            s.deterministic_from = self.deterministic_from;
        }
    }
}

#[derive(Args)]
struct SweepArgs {
    /// Base run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed_start: u64,
    /// Worker threads; 0 or unset uses one per core.
    #[arg(long, env = WORKERS_ENV)]
    workers: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum PowKind {
    PowDown,
    PowUp,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum ZigzagModeArg {
    Masked,
    Recover,
    VanillaRandom,
}

#[derive(Clone, Copy, ValueEnum)]
enum RopeArg {
    Average,
    Destination,
}

#[derive(Subcommand)]
enum Command {
    /// Run one config (or replay a manifest) into --out.
    Run {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Generic sweep from a JSON spec with `base`, `axis`, `values`, `seeds`.
    Sweep {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = WORKERS_ENV)]
        workers: Option<usize>,
    },
    /// Cosine against (1-t)^rho and 1-t^rho schedules.
    SweepSchedule {
        #[command(flatten)]
        common: SweepArgs,
        #[arg(long, value_enum, default_value = "both")]
        kind: PowKind,
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0])]
        rho: Vec<f64>,
    },
    /// Inversion-scale sweep for one zigzag mode.
    ZigzagAblation {
        #[command(flatten)]
        common: SweepArgs,
        #[arg(long, value_enum, default_value = "masked")]
        mode: ZigzagModeArg,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 1.0, 2.0, 4.5, 9.0])]
        inversion_scale: Vec<f64>,
    },
    /// Noise-regularization curve comparison.
    NoiseRegAblation {
        #[command(flatten)]
        common: SweepArgs,
    },
    /// Differential-sampling percentage sweep.
    DiffAblation {
        #[command(flatten)]
        common: SweepArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 25.0, 50.0, 75.0, 100.0])]
        z: Vec<f64>,
    },
    /// First and second order solver at several strides.
    SolverBench {
        #[command(flatten)]
        common: SweepArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4])]
        stride: Vec<usize>,
    },
    /// Calibrate and compare quantization specs on the transformer backend.
    Quantize {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Held-out inputs for the error report.
        #[arg(long, default_value_t = 64)]
        eval_grids: usize,
    },
    /// Merging-ratio sweep on the transformer backend.
    TomeBench {
        #[command(flatten)]
        common: SweepArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.25, 0.5, 0.75])]
        ratio: Vec<f64>,
        #[arg(long, value_enum, default_value = "average")]
        rope: RopeArg,
    },
    /// Entropy and consecutive-step KL trajectories as CSV.
    TraceExport {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
}

fn load_base(path: Option<&Path>, overrides: &Overrides) -> CliResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => load_run_file(p)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn sweep_out(spec: &SweepSpec, args_out: &Path, workers: Option<usize>) -> CliResult<()> {
    let rows = run_sweep(spec, resolve_workers(workers)?)?;
    std::fs::create_dir_all(args_out)?;
    let path = args_out.join("sweep.csv");
    write_rows(&path, &rows)?;
    println!("{} rows -> {}", rows.len(), path.display());
    Ok(())
}

fn preset(common: &SweepArgs, build: impl FnOnce(RunConfig, u64) -> SweepSpec) -> CliResult<()> {
    let base = load_base(common.config.as_deref(), &common.overrides)?;
    let mut spec = build(base, common.seeds);
    spec.seed_start = common.seed_start;
    sweep_out(&spec, &common.out, common.workers)
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Run { input, out, overrides } => {
            let mut cfg = load_run_file(&input)?;
            overrides.apply(&mut cfg);
            let m = run_to_dir(&cfg, &out)?;
            println!("{} nfe={} loglik={} -> {}", m.config_hash, m.nfe, m.metrics.oracle_loglik, out.display());
            Ok(())
        }
        Command::Sweep { spec, out, workers } => {
            let s: SweepSpec = config::from_value(config::read_json(&spec)?)?;
            sweep_out(&s, &out, workers)
        }
        Command::SweepSchedule { common, kind, rho } => {
            let kinds: &[&str] = match kind {
                PowKind::PowDown => &["pow_down"],
                PowKind::PowUp => &["pow_up"],
                PowKind::Both => &["pow_down", "pow_up"],
            };
            preset(&common, |b, n| presets::schedule_sweep(b, kinds, &rho, n))
        }
        Command::ZigzagAblation { common, mode, inversion_scale } => {
            let mode = match mode {
                ZigzagModeArg::Masked => ZigzagMode::Masked,
                ZigzagModeArg::Recover => ZigzagMode::Recover,
                ZigzagModeArg::VanillaRandom => ZigzagMode::VanillaRandom,
            };
            preset(&common, |b, n| presets::zigzag_ablation(b, mode, &inversion_scale, n))
        }
        Command::NoiseRegAblation { common } => preset(&common, presets::noise_reg_ablation),
        Command::DiffAblation { common, z } => preset(&common, |b, n| presets::diff_ablation(b, &z, n)),
        Command::SolverBench { common, stride } => preset(&common, |b, n| presets::solver_bench(b, &stride, n)),
        Command::TomeBench { common, ratio, rope } => {
            let rope = match rope {
                RopeArg::Average => RopeMerge::Average,
                RopeArg::Destination => RopeMerge::Destination,
            };
            preset(&common, |b, n| presets::tome_bench(b, &ratio, rope, n))
        }
        Command::Quantize { config, out, eval_grids } => {
            let cfg = match &config {
                Some(p) => load_run_file(p)?,
                None => RunConfig::default(),
            };
            let model_cfg = match &cfg.backend {
                Backend::Transformer(t) => t.model.clone(),
                Backend::Oracle(_) => Default::default(),
            };
            let model = TinyTransformer::new(model_cfg)?;
            let q = cfg.quant.clone().unwrap_or_else(QuantVariant::default);
            let rows = presets::quantize_report(&model, &q, eval_grids, &out)?;
            for r in rows {
                println!("{:<16} act_layers={:<3} bytes={:<7} mse={:.6e}", r.method, r.act_layers, r.total_bytes, r.output_mse);
            }
            Ok(())
        }
        Command::TraceExport { input, out, seeds } => {
            let cfg = load_run_file(&input)?;
            presets::trace_export(&cfg, seeds, &out)?;
            println!("entropy.csv, kl.csv -> {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mgt: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

