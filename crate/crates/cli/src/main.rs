use clap::Parser;
use h2cov::geometry::Geometry;
use h2cov::sampling::SampleLaw;
use h2cov::Error;
use h2cov_cli::{run_convergence, RunConfig, Switch};
use std::path::PathBuf;
use std::process::ExitCode;

/// Convergence sweep of the multilevel H² covariance estimator.
#[derive(Parser, Debug)]
#[command(name = "h2cov", version)]
struct Args {
    #[arg(long, default_value = "unit-square")]
    geometry: String,
    #[arg(long, default_value_t = 4)]
    lmax: usize,
    #[arg(long, default_value_t = 1)]
    alpha: u32,
    #[arg(long, default_value_t = 2)]
    beta: u32,
    #[arg(long, default_value_t = 0.8)]
    eta: f64,
    #[arg(long, default_value_t = 4)]
    nmin: usize,
    #[arg(long, default_value_t = 1.5)]
    delta: f64,
    #[arg(long, default_value = "normal")]
    law: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Target accuracy; selects the finest level instead of --lmax.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    csv_out: Option<PathBuf>,
    #[arg(long)]
    manifest_out: Option<PathBuf>,
    /// Serialized estimate of the finest level.
    #[arg(long)]
    kernel_out: Option<PathBuf>,
    #[arg(long, default_value = "off")]
    oracle: String,
    #[arg(long)]
    threads: Option<usize>,
    /// Record wall-clock times; `off` writes zeros.
    #[arg(long, default_value = "on")]
    timings: String,
    /// Memory cap in MiB for the level kernels of one level.
    #[arg(long, default_value_t = 8192)]
    mem_cap_mib: u64,
}

fn switch(name: &str, v: &str) -> Result<Switch, Error> {
    match v {
        "on" => Ok(Switch::On),
        "off" => Ok(Switch::Off),
        _ => Err(Error::Config(format!("--{name} expects on or off, got '{v}'"))),
    }
}

fn config(a: Args) -> Result<RunConfig, Error> {
    let c = RunConfig {
        geometry: a.geometry.parse::<Geometry>()?,
        lmax: a.lmax,
        alpha: a.alpha,
        beta: a.beta,
        eta: a.eta,
        n_min: a.nmin,
        delta: a.delta,
        law: a.law.parse::<SampleLaw>()?,
        seed: a.seed,
        eps: a.eps,
        csv_out: a.csv_out,
        manifest_out: a.manifest_out,
        kernel_out: a.kernel_out,
        oracle: switch("oracle", &a.oracle)?,
        threads: a.threads,
        timings: switch("timings", &a.timings)?,
        mem_cap_bytes: a.mem_cap_mib << 20,
        ..RunConfig::default()
    };
    c.validate()?;
    Ok(c)
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let cfg = match config(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    match run_convergence(&cfg) {
        Ok(out) => {
            for r in &out.records {
                println!(
                    "L={} eps={:.6e} time={:.3}s mem={}B iterations={}",
                    r.level, r.eps, r.time_sec, r.mem_bytes, r.iterations
                );
            }
            match out.warning {
                Some(w) => {
                    eprintln!("warning: {w}");
                    ExitCode::from(3)
                }
                None => ExitCode::SUCCESS,
            }
        }
        Err(e @ (Error::Config(_) | Error::InvalidArgument(_))) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(e @ (Error::ResourceCap(_) | Error::OracleCap { .. })) => {
            eprintln!("{e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
    }
}
