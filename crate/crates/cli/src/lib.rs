//! Convergence experiments for the multilevel H² covariance estimator: sweep
//! over the finest level, spectral error by power iteration, CSV and JSON
//! output.

// Negated float comparisons deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use h2cov::estimator::{level_for_epsilon, mlsce, sample_schedule, Multilevel};
use h2cov::geometry::Geometry;
use h2cov::h2::{CompressionParams, H2Kernel, ORACLE_CAP};
use h2cov::sampling::{reference_kernel, FieldSampler, SampleLaw, SamplerConfig, STREAM_POLICY};
use h2cov::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::PathBuf;
use std::time::Instant;

/// Absolute accuracy of the spectral error estimate.
pub const POWER_TOL: f64 = 1e-4;
/// Iteration cap of the power iteration.
pub const POWER_MAX_ITER: usize = 10_000;
/// Seed of the power iteration start vector.
const START_SEED: u64 = 0x5eed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn is_on(self) -> bool {
        self == Switch::On
    }
}

/// Settings of one convergence experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub geometry: Geometry,
    /// Finest level of the sweep; ignored when `eps` is given.
    pub lmax: usize,
    pub alpha: u32,
    pub beta: u32,
    pub eta: f64,
    pub n_min: usize,
    pub delta: f64,
    pub law: SampleLaw,
    pub seed: u64,
    /// Target accuracy; overrides `lmax` through the level rule.
    pub eps: Option<f64>,
    /// Decay rate of the covariance approximation error in `h`.
    pub gamma: f64,
    pub c_uni: f64,
    pub csv_out: Option<PathBuf>,
    pub manifest_out: Option<PathBuf>,
    /// Serialized estimate of the finest run.
    pub kernel_out: Option<PathBuf>,
    /// Dense cross-check of the spectral error on small meshes.
    pub oracle: Switch,
    pub threads: Option<usize>,
    /// Wall-clock measurement; off records zero times for reproducible output.
    pub timings: Switch,
    /// Upper bound on the bytes held by the level kernels of one run.
    pub mem_cap_bytes: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            geometry: Geometry::UnitSquare,
            lmax: 4,
            alpha: 1,
            beta: 2,
            eta: 0.8,
            n_min: 4,
            delta: 1.5,
            law: SampleLaw::Normal,
            seed: 0,
            eps: None,
            gamma: 1.0,
            c_uni: 4.0,
            csv_out: None,
            manifest_out: None,
            kernel_out: None,
            oracle: Switch::Off,
            threads: None,
            timings: Switch::On,
            mem_cap_bytes: 8 << 30,
        }
    }
}

impl RunConfig {
    pub fn params(&self) -> CompressionParams {
        CompressionParams {
            alpha: self.alpha,
            beta: self.beta,
            delta: self.delta,
            eta: self.eta,
            n_min: self.n_min,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params().validate()?;
        if !(self.gamma > 0.0) || !(self.c_uni > 1.0) {
            return Err(Error::Config("gamma must be positive and c_uni above 1".into()));
        }
        if let Some(e) = self.eps {
            if !(e > 0.0 && e < 1.0) {
                return Err(Error::Config(format!("eps must lie in (0, 1), got {e}")));
            }
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        Ok(())
    }

    /// Finest level of the sweep.
    pub fn finest_level(&self) -> Result<usize> {
        match self.eps {
            Some(e) => level_for_epsilon(e, self.gamma, self.geometry.dim(), self.c_uni),
            None => Ok(self.lmax),
        }
    }

    fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            law: self.law,
            seed: self.seed,
            ..SamplerConfig::default()
        }
    }
}

/// Structural diagnostics of the finest cluster tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub n_panels: usize,
    pub c_sp: usize,
    pub depth: usize,
    pub zeta: f64,
    pub q_bar: f64,
    pub far_blocks: usize,
    pub near_blocks: usize,
    pub kl_rank: usize,
}

/// Result of one level of the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub level: usize,
    /// Spectral error of the estimate against the sampled covariance.
    pub eps: f64,
    pub time_sec: f64,
    pub mem_bytes: u64,
    pub schedule: Vec<u64>,
    pub diagnostics: Diagnostics,
    pub iterations: usize,
    /// Dense spectral norm of the same error operator, if computed.
    pub eps_dense: Option<f64>,
}

/// Records of a sweep; `warning` is set when a resource cap ended it early.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub records: Vec<RunRecord>,
    pub warning: Option<String>,
}

/// Result of [`power_iteration`].
#[derive(Clone, Debug, PartialEq)]
pub struct PowerResult {
    pub value: f64,
    pub iterations: usize,
}

/// Largest eigenvalue modulus of a symmetric operator of size `n`. The
/// estimate is `‖A x_k‖` for normalized iterates, which converges to `|λ_max|`
/// also when `±λ_max` are both eigenvalues. Stops once successive estimates
/// differ by less than `tol_abs`.
pub fn power_iteration(
    n: usize,
    mut apply: impl FnMut(&DVector<f64>) -> DVector<f64>,
    tol_abs: f64,
    max_iter: usize,
) -> Result<PowerResult> {
    if !(tol_abs > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    if n == 0 {
        return Ok(PowerResult { value: 0.0, iterations: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(START_SEED);
    let mut x = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0) + 2.0);
    x.normalize_mut();
    let mut prev = f64::NAN;
    for it in 1..=max_iter {
        let y = apply(&x);
        let mu = y.norm();
        if mu == 0.0 {
            return Ok(PowerResult { value: 0.0, iterations: it });
        }
        if (mu - prev).abs() < tol_abs {
            return Ok(PowerResult { value: mu, iterations: it });
        }
        prev = mu;
        x = y / mu;
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        estimate: prev,
        vector: x.as_slice().to_vec(),
    })
}

/// Error operator `x ↦ B x − ½ D^{-1/2}(A + Aᵀ) D^{-1/2} x` between the sampled
/// covariance `B` and the Galerkin matrix `A` of the estimate, both in the
/// L²-orthonormal panel basis.
pub struct ErrorOperator<'a> {
    pub sampler: &'a FieldSampler,
    pub estimate: &'a H2Kernel,
    inv_sqrt_area: Vec<f64>,
}

impl<'a> ErrorOperator<'a> {
    pub fn new(sampler: &'a FieldSampler, estimate: &'a H2Kernel) -> Result<Self> {
        let mesh = sampler.mesh(sampler.finest());
        if mesh.len() != estimate.space.n_panels() {
            return Err(Error::StructureMismatch("estimate and sampler live on different meshes".into()));
        }
        let inv_sqrt_area = mesh.areas().iter().map(|a| 1.0 / a.sqrt()).collect();
        Ok(ErrorOperator { sampler, estimate, inv_sqrt_area })
    }

    pub fn len(&self) -> usize {
        self.inv_sqrt_area.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inv_sqrt_area.is_empty()
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let d = &self.inv_sqrt_area;
        let sx: Vec<f64> = x.iter().zip(d).map(|(v, s)| v * s).collect();
        let a = self.estimate.matvec(&sx);
        let at = self.estimate.matvec_transpose(&sx);
        let b = self.sampler.covariance_apply(x.as_slice());
        DVector::from_fn(x.len(), |i, _| b[i] - 0.5 * d[i] * (a[i] + at[i]))
    }

    /// Dense matrix of the operator, column by column.
    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            m.set_column(j, &self.apply(&e));
        }
        m
    }
}

/// Spectral norm of a dense matrix.
pub fn spectral_norm(m: DMatrix<f64>) -> f64 {
    h2cov::linalg::svd(m).singular_values.iter().cloned().fold(0.0, f64::max)
}

/// Builds the hierarchy up to `level`, runs the multilevel estimator and
/// measures its spectral error. Returns the record and the estimate.
pub fn run_level(config: &RunConfig, level: usize) -> Result<(RunRecord, H2Kernel)> {
    let start = Instant::now();
    let ml = Multilevel::build(config.geometry, level, config.params())?;
    let finest = &ml.spaces[level];
    let planned = finest.storage().bytes() as u64 * (level as u64 + 2);
    if planned > config.mem_cap_bytes {
        return Err(Error::ResourceCap(format!(
            "level {level} needs about {planned} bytes, cap is {}",
            config.mem_cap_bytes
        )));
    }
    let schedule = sample_schedule(level, config.gamma, config.geometry.dim(), config.c_uni)?;
    let kernel = reference_kernel(config.delta)?;
    let sampler = FieldSampler::new(ml.meshes(), kernel.as_ref(), config.sampler_config())?;
    let estimate = mlsce(&ml, &sampler, &schedule)?;
    let elapsed = start.elapsed().as_secs_f64();

    let op = ErrorOperator::new(&sampler, &estimate)?;
    let power = power_iteration(op.len(), |x| op.apply(x), POWER_TOL, POWER_MAX_ITER)?;
    let eps_dense = (config.oracle.is_on() && op.len() <= ORACLE_CAP).then(|| spectral_norm(op.dense()));

    let stats = finest.tree.stats(&finest.mesh);
    let storage = estimate.memory_footprint();
    let record = RunRecord {
        level,
        eps: power.value,
        time_sec: if config.timings.is_on() { elapsed } else { 0.0 },
        mem_bytes: storage.bytes() as u64,
        schedule: schedule.samples.clone(),
        diagnostics: Diagnostics {
            n_panels: finest.n_panels(),
            c_sp: finest.blocks.sparsity,
            depth: stats.depth,
            zeta: stats.zeta,
            q_bar: stats.q_bar,
            far_blocks: storage.far_blocks,
            near_blocks: storage.near_blocks,
            kl_rank: sampler.rank(),
        },
        iterations: power.iterations,
        eps_dense,
    };
    Ok((record, estimate))
}

/// Runs levels `0..=L` and writes the requested outputs. A resource cap ends
/// the sweep early and is reported in `warning`.
pub fn run_convergence(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    let body = || -> Result<RunOutcome> {
        let top = config.finest_level()?;
        let mut records = Vec::new();
        let mut warning = None;
        let mut last = None;
        for level in 0..=top {
            match run_level(config, level) {
                Ok((rec, est)) => {
                    records.push(rec);
                    last = Some(est);
                }
                Err(Error::ResourceCap(msg)) => {
                    warning = Some(msg);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let outcome = RunOutcome { records, warning };
        write_outputs(config, &outcome, last.as_ref())?;
        Ok(outcome)
    };
    match config.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(body),
        None => body(),
    }
}

fn write_outputs(config: &RunConfig, outcome: &RunOutcome, last: Option<&H2Kernel>) -> Result<()> {
    if let Some(path) = &config.csv_out {
        write_csv(std::fs::File::create(path)?, &outcome.records)?;
    }
    if let Some(path) = &config.manifest_out {
        let manifest = Manifest::new(config, outcome);
        std::fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    }
    if let (Some(path), Some(est)) = (&config.kernel_out, last) {
        est.write_binary(std::io::BufWriter::new(std::fs::File::create(path)?))?;
        let meta = path.with_extension("json");
        std::fs::write(meta, serde_json::to_string_pretty(&est.metadata())?)?;
    }
    Ok(())
}

/// JSON manifest of a sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub stream_policy: String,
    pub power_tol: f64,
    pub outcome: RunOutcome,
}

impl Manifest {
    pub fn new(config: &RunConfig, outcome: &RunOutcome) -> Self {
        Manifest {
            config: config.clone(),
            stream_policy: STREAM_POLICY.to_string(),
            power_tol: POWER_TOL,
            outcome: outcome.clone(),
        }
    }
}

/// One CSV row: `L, eps, time, mem, M0..M{L}`.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub level: usize,
    pub eps: f64,
    pub time_sec: f64,
    pub mem_bytes: u64,
    pub samples: Vec<u64>,
}

impl From<&RunRecord> for CsvRow {
    fn from(r: &RunRecord) -> Self {
        CsvRow {
            level: r.level,
            eps: r.eps,
            time_sec: r.time_sec,
            mem_bytes: r.mem_bytes,
            samples: r.schedule.clone(),
        }
    }
}

/// Writes the sweep table; sample columns of shorter schedules stay empty.
pub fn write_csv<W: Write>(out: W, records: &[RunRecord]) -> Result<()> {
    let width = records.iter().map(|r| r.schedule.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["L", "eps", "time", "mem"].iter().map(|s| s.to_string()).collect();
    header.extend((0..width).map(|l| format!("M{l}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in records {
        let mut row = vec![r.level.to_string(), r.eps.to_string(), r.time_sec.to_string(), r.mem_bytes.to_string()];
        row.extend((0..width).map(|l| r.schedule.get(l).map_or(String::new(), |m| m.to_string())));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a table written by [`write_csv`].
pub fn read_csv<R: Read>(input: R) -> Result<Vec<CsvRow>> {
    let mut rd = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let field = |i: usize| rec.get(i).ok_or_else(|| Error::Format(format!("missing column {i}")));
        let parse_err = |e: &dyn std::fmt::Display| Error::Format(e.to_string());
        let samples = (4..rec.len())
            .filter_map(|i| rec.get(i).filter(|s| !s.is_empty()))
            .map(|s| s.parse::<u64>().map_err(|e| parse_err(&e)))
            .collect::<Result<Vec<_>>>()?;
        rows.push(CsvRow {
            level: field(0)?.parse().map_err(|e| parse_err(&e))?,
            eps: field(1)?.parse().map_err(|e| parse_err(&e))?,
            time_sec: field(2)?.parse().map_err(|e| parse_err(&e))?,
            mem_bytes: field(3)?.parse().map_err(|e| parse_err(&e))?,
            samples,
        });
    }
    Ok(rows)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Least-squares slope of `log₂ y` against `x`.
pub fn log2_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let ly: Vec<f64> = y.iter().map(|v| v.log2()).collect();
    let mx = x.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
