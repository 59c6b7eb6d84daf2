use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ssg_core::config::RunConfig;
use ssg_core::experiments::{self, MetricsRow, CSV_HEADER};
use ssg_core::Error;

#[derive(Parser)]
#[command(name = "ssg-lab", version, about = "Self-swap guidance experiments on a toy diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the denoiser and write a checkpoint plus loss log.
    Train(Common),
    /// Sample with the configured guidance and score against held-out data.
    Sample(Common),
    /// One metrics row per sweep value.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// omega | ratio
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values, e.g. `0,0.5,1,2,4`.
        #[arg(long, allow_hyphen_values = true)]
        values: Option<String>,
    },
    /// Policy, swap-axis and CFG-compatibility grid.
    Ablate(Common),
    /// Record guidance magnitude maps over the sampling trajectory.
    Analyze(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    omega: Option<f64>,
    /// Sets both the spatial and the channel swap ratio.
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    method: Option<String>,
    /// Training steps for `train`, sampler steps otherwise.
    #[arg(long)]
    steps: Option<usize>,
}

impl Common {
    fn load(&self, training: bool) -> Result<RunConfig, Error> {
        let mut cfg = RunConfig::from_path(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.set(if training { "train.seed" } else { "eval.seed" }, &seed.to_string())?;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(w) = self.omega {
            cfg.set("guidance.omega", &w.to_string())?;
        }
        if let Some(r) = self.ratio {
            cfg.set("guidance.spatial_r", &r.to_string())?;
            cfg.set("guidance.channel_r", &r.to_string())?;
        }
        if let Some(p) = &self.policy {
            cfg.set("guidance.policy", p)?;
        }
        if let Some(m) = &self.method {
            cfg.set("guidance.method", m)?;
        }
        if let Some(n) = self.steps {
            cfg.set(if training { "train.steps" } else { "sampler.steps" }, &n.to_string())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_rows(rows: &[MetricsRow]) {
    println!("{CSV_HEADER}");
    for r in rows {
        println!("{}", r.csv_line());
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(c) => {
            let cfg = c.load(true)?;
            let every = (cfg.train.steps / 20).max(1);
            let report = experiments::cmd_train(&cfg, |step, loss| {
                if step % every == 0 {
                    eprintln!("step {step:>6}  loss {loss:.4}");
                }
            })?;
            eprintln!("checkpoint: {}", report.checkpoint_path.display());
            eprintln!("loss log:   {}", report.loss_path.display());
        }
        Command::Sample(c) => {
            let report = experiments::cmd_sample(&c.load(false)?)?;
            print_rows(std::slice::from_ref(&report.row));
            eprintln!("samples: {}", report.grid_path.display());
        }
        Command::Sweep { common, axis, values } => {
            let mut cfg = common.load(false)?;
            if let Some(a) = axis {
                cfg.set("sweep.axis", &a)?;
            }
            if let Some(v) = values {
                cfg.set("sweep.values", &v)?;
            }
            cfg.validate()?;
            print_rows(&experiments::cmd_sweep(&cfg)?);
        }
        Command::Ablate(c) => print_rows(&experiments::cmd_ablate(&c.load(false)?)?),
        Command::Analyze(c) => {
            let report = experiments::cmd_analyze(&c.load(false)?)?;
            println!("step,timestep,mean_magnitude");
            for r in &report.trace.records {
                println!("{},{},{:?}", r.step, r.timestep, r.mean_magnitude);
            }
            eprintln!("trace: {}", report.trace_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ssg-lab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
