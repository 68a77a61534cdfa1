//! `snuts`: sampling, comparison and benchmark subcommands.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use snuts_core::experiment::{
    cmd_approx, cmd_compare, cmd_diagnose, cmd_gradbench, cmd_sample, cmd_scale, ExperimentConfig, ExperimentError,
};
use snuts_core::models::ModelConfig;
use snuts_core::nuts::SamplingMode;

#[derive(Parser)]
#[command(name = "snuts", version, about = "Sparse-preconditioned No-U-Turn sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run each mode and write draws, stats, summary and metadata.
    Sample(Common),
    /// Efficiency table across modes and replicates.
    Compare(Common),
    /// Efficiency across a grid of model sizes.
    Scale(Common),
    /// Transformed-gradient cost per preconditioner.
    Gradbench(Common),
    /// Precision-sampling accuracy against a long reference run.
    Approx(Common),
    /// Recompute summary.csv from an existing run directory.
    Diagnose {
        /// Directory containing draws.csv.
        dir: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment config, or a meta.json from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    /// Model parameter as key=value; repeatable.
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,
    /// Data-generating seed of the model.
    #[arg(long)]
    data_seed: Option<u64>,
    /// Sampling mode; repeatable or comma separated.
    #[arg(long = "mode", value_delimiter = ',')]
    modes: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    iter: Option<usize>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model parameter varied by `scale` and `gradbench`.
    #[arg(long)]
    size_param: Option<String>,
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<f64>,
}

impl Common {
    fn resolve(self, replicates_default: Option<usize>) -> Result<ExperimentConfig, ExperimentError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_path(p)?,
            None => {
                let mut c = ExperimentConfig::default();
                if let Some(r) = replicates_default {
                    c.replicates = r;
                }
                c
            }
        };
        if let Some(m) = self.model {
            if m != cfg.model.name {
                cfg.model = ModelConfig { seed: cfg.model.seed, ..ModelConfig::new(&m) };
            }
        }
        for kv in &self.params {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| ExperimentError::Config(format!("--param expects key=value, got `{kv}`")))?;
            let v: f64 = v.parse().map_err(|_| ExperimentError::Config(format!("--param {k}: `{v}` is not a number")))?;
            cfg.model.params.insert(k.to_string(), v);
        }
        if let Some(s) = self.data_seed {
            cfg.model.seed = s;
        }
        if !self.modes.is_empty() {
            cfg.modes = self
                .modes
                .iter()
                .map(|m| m.parse::<SamplingMode>().map_err(ExperimentError::Config))
                .collect::<Result<_, _>>()?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(c) = self.chains {
            cfg.nuts.chains = c;
        }
        if let Some(w) = self.warmup {
            cfg.nuts.warmup = Some(w);
        }
        if let Some(i) = self.iter {
            cfg.nuts.iter = i;
        }
        if let Some(j) = self.jobs {
            cfg.jobs = j;
        }
        if let Some(r) = self.replicates {
            cfg.replicates = r;
        }
        if let Some(o) = self.out {
            cfg.out = o;
        }
        if let Some(k) = self.size_param {
            cfg.size_param = Some(k);
        }
        if !self.sizes.is_empty() {
            cfg.sizes = self.sizes;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn fmt(x: f64) -> String {
    format!("{x:.4}")
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Sample(c) => {
            let cfg = c.resolve(Some(1))?;
            for r in cmd_sample(&cfg)? {
                if let Ok((run, s)) = &r.outcome {
                    println!(
                        "{} rep {}: precond {}{} min ESS {} total {}s efficiency {} -> {}",
                        r.mode,
                        r.replicate,
                        run.precond,
                        run.fallback.as_ref().map_or(String::new(), |f| format!(" (fallback {f})")),
                        fmt(s.min_ess),
                        fmt(s.total_time),
                        fmt(s.efficiency),
                        r.dir.display()
                    );
                }
            }
        }
        Command::Compare(c) => {
            let cfg = c.resolve(None)?;
            println!("mode,replicate,status,total_time,min_ess,efficiency,mean_leapfrog,rel_efficiency");
            for r in cmd_compare(&cfg)? {
                println!(
                    "{},{},{},{},{},{},{},{}",
                    r.mode,
                    r.replicate,
                    r.status,
                    fmt(r.total_time),
                    fmt(r.min_ess),
                    fmt(r.efficiency),
                    fmt(r.mean_leapfrog),
                    fmt(r.rel_efficiency)
                );
            }
        }
        Command::Scale(c) => {
            let cfg = c.resolve(None)?;
            println!("size,mode,replicate,status,total_time,min_ess,efficiency,rel_efficiency");
            for r in cmd_scale(&cfg)? {
                println!(
                    "{},{},{},{},{},{},{},{}",
                    r.size.unwrap_or(f64::NAN),
                    r.mode,
                    r.replicate,
                    r.status,
                    fmt(r.total_time),
                    fmt(r.min_ess),
                    fmt(r.efficiency),
                    fmt(r.rel_efficiency)
                );
            }
        }
        Command::Gradbench(c) => {
            let cfg = c.resolve(None)?;
            println!("size,dim,precond,ratio,transform_only");
            for r in cmd_gradbench(&cfg)? {
                println!(
                    "{},{},{},{},{:.3e}",
                    r.size.map_or(String::new(), |s| s.to_string()),
                    r.dim,
                    r.precond,
                    fmt(r.ratio),
                    r.transform_only
                );
            }
        }
        Command::Approx(c) => {
            let cfg = c.resolve(None)?;
            let r = cmd_approx(&cfg)?;
            println!("status: {}", r.status);
            for row in &r.rows {
                println!("{}: precision {} nuts {}", row.name, fmt(row.w_precision), fmt(row.w_nuts));
            }
            println!(
                "mean {} / {}, max {} / {}, approximation {}s vs reference {}s",
                fmt(r.w_precision_mean),
                fmt(r.w_nuts_mean),
                fmt(r.w_precision_max),
                fmt(r.w_nuts_max),
                fmt(r.approx_seconds),
                fmt(r.reference_seconds)
            );
        }
        Command::Diagnose { dir } => {
            let t = cmd_diagnose(&dir)?;
            println!("name,mean,sd,ess_bulk,rhat");
            for r in &t.rows {
                println!("{},{},{},{},{}", r.name, fmt(r.mean), fmt(r.sd), fmt(r.ess_bulk), fmt(r.rhat));
            }
            println!("min ESS {} efficiency {}", fmt(t.min_ess), fmt(t.efficiency));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
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
