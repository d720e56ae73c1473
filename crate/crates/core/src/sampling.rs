//! Reference covariance kernels, the pivoted-Cholesky Karhunen–Loève factor
//! and coupled multilevel sample draws.

use crate::geometry::{Mesh, Point};
use crate::quadrature::GaussRule;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

/// A symmetric covariance kernel evaluated pointwise.
///
/// Kernels of the form `κ(φ(x), φ(y))` may expose the feature map `φ` through
/// [`prepare`](KernelFunction::prepare) so that bulk assembly maps every
/// quadrature point only once.
pub trait KernelFunction: Send + Sync {
    fn eval(&self, x: &Point, y: &Point) -> f64 {
        self.eval_prepared(&self.prepare(x), &self.prepare(y))
    }

    fn prepare(&self, x: &Point) -> Point {
        *x
    }

    fn eval_prepared(&self, px: &Point, py: &Point) -> f64;

    /// Gevrey index of the kernel.
    fn delta(&self) -> f64 {
        1.0
    }

    fn name(&self) -> String;
}

fn dist(x: &Point, y: &Point) -> f64 {
    ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2)).sqrt()
}

/// `(1 + 3r + 27r²/7 + 18r³/7 + 27r⁴/35) e^{−3r}`.
pub fn matern92(r: f64) -> f64 {
    let p = 1.0 + r * (3.0 + r * (27.0 / 7.0 + r * (18.0 / 7.0 + r * 27.0 / 35.0)));
    p * (-3.0 * r).exp()
}

/// Matérn-9/2 type kernel `matern92(‖x − y‖)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Matern92;

impl KernelFunction for Matern92 {
    fn eval_prepared(&self, x: &Point, y: &Point) -> f64 {
        matern92(dist(x, y))
    }

    fn name(&self) -> String {
        "matern92".into()
    }
}

/// Gevrey-class warp `γ_δ(x) = (0.1 + Υ_δ(2x₁ − 1) x₁, x₂, x₃)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GevreyWarp {
    pub delta: f64,
}

impl GevreyWarp {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 1.0) {
            return Err(Error::InvalidArgument(format!("the warp needs delta > 1, got {delta}")));
        }
        Ok(GevreyWarp { delta })
    }

    /// `υ_δ(t) = exp(−t^{1/(1−δ)})` for `t > 0`, else 0.
    pub fn upsilon(&self, t: f64) -> f64 {
        if t > 0.0 {
            (-t.powf(1.0 / (1.0 - self.delta))).exp()
        } else {
            0.0
        }
    }

    /// `Υ_δ(t) = υ_δ(1 − t) / (υ_δ(1 − t) + υ_δ(t))`.
    pub fn partition(&self, t: f64) -> f64 {
        let a = self.upsilon(1.0 - t);
        let b = self.upsilon(t);
        a / (a + b)
    }

    pub fn apply(&self, x: &Point) -> Point {
        [0.1 + self.partition(2.0 * x[0] - 1.0) * x[0], x[1], x[2]]
    }
}

/// Warped point `γ_δ(x)`.
pub fn gevrey_warp(x: &Point, delta: f64) -> Result<Point> {
    Ok(GevreyWarp::new(delta)?.apply(x))
}

/// `matern92(‖γ_δ(x) − γ_δ(y)‖)`.
#[derive(Clone, Copy, Debug)]
pub struct WarpedMatern {
    pub warp: GevreyWarp,
}

impl WarpedMatern {
    pub fn new(delta: f64) -> Result<Self> {
        Ok(WarpedMatern {
            warp: GevreyWarp::new(delta)?,
        })
    }
}

impl KernelFunction for WarpedMatern {
    fn prepare(&self, x: &Point) -> Point {
        self.warp.apply(x)
    }

    fn eval_prepared(&self, x: &Point, y: &Point) -> f64 {
        matern92(dist(x, y))
    }

    fn delta(&self) -> f64 {
        self.warp.delta
    }

    fn name(&self) -> String {
        format!("warped-matern92(delta={})", self.warp.delta)
    }
}

/// Kernel from a closure, mostly for tests.
pub struct FnKernel<F: Fn(&Point, &Point) -> f64 + Send + Sync> {
    pub f: F,
    pub label: String,
}

impl<F: Fn(&Point, &Point) -> f64 + Send + Sync> FnKernel<F> {
    pub fn new(label: &str, f: F) -> Self {
        FnKernel { f, label: label.into() }
    }
}

impl<F: Fn(&Point, &Point) -> f64 + Send + Sync> KernelFunction for FnKernel<F> {
    fn eval_prepared(&self, x: &Point, y: &Point) -> f64 {
        (self.f)(x, y)
    }

    fn name(&self) -> String {
        self.label.clone()
    }
}

/// Matérn-9/2 for `δ = 1`, the warped kernel otherwise.
pub fn reference_kernel(delta: f64) -> Result<Box<dyn KernelFunction>> {
    if delta == 1.0 {
        Ok(Box::new(Matern92))
    } else {
        Ok(Box::new(WarpedMatern::new(delta)?))
    }
}

/// Mass-scaled Galerkin covariance `S = D^{-1/2} A D^{-1/2}` with
/// `A_ij = ∫∫ g φ_i φ_j`, evaluated entry by entry.
pub struct GalerkinCovariance<'a> {
    kernel: &'a dyn KernelFunction,
    points: Vec<Vec<(Point, f64)>>,
    areas: Vec<f64>,
}

impl<'a> GalerkinCovariance<'a> {
    pub fn new(mesh: &Mesh, kernel: &'a dyn KernelFunction, quad: usize) -> Self {
        let rule = GaussRule::new(quad);
        let points = mesh
            .panels
            .iter()
            .map(|p| p.quadrature(&rule).into_iter().map(|(x, w)| (kernel.prepare(&x), w)).collect())
            .collect();
        GalerkinCovariance {
            kernel,
            points,
            areas: mesh.areas(),
        }
    }

    pub fn len(&self) -> usize {
        self.areas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.areas.is_empty()
    }

    /// `A_ij`.
    pub fn galerkin(&self, i: usize, j: usize) -> f64 {
        let mut s = 0.0;
        for (x, wx) in &self.points[i] {
            let mut inner = 0.0;
            for (y, wy) in &self.points[j] {
                inner += wy * self.kernel.eval_prepared(x, y);
            }
            s += wx * inner;
        }
        s
    }

    /// `S_ij`.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.galerkin(i, j) / (self.areas[i] * self.areas[j]).sqrt()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.entry(i, i)).collect()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.entry(i, j)).collect()
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in 0..=j {
                let v = self.entry(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }
}

/// Low-rank factor `L` with `C ≈ L Lᵀ` from pivoted Cholesky.
#[derive(Clone, Debug, PartialEq)]
pub struct KLFactor {
    /// `n × r`.
    pub factor: DMatrix<f64>,
    pub pivots: Vec<usize>,
    pub tol: f64,
    pub residual_trace: f64,
    /// Residual trace before each step and after the last one.
    pub residual_history: Vec<f64>,
}

impl KLFactor {
    pub fn n(&self) -> usize {
        self.factor.nrows()
    }

    pub fn rank(&self) -> usize {
        self.factor.ncols()
    }
}

/// Greedy largest-diagonal pivoted Cholesky of an SPSD matrix given by its
/// diagonal and a column oracle; stops once the residual trace is at most `tol`.
pub fn pivoted_cholesky(diag: Vec<f64>, mut column: impl FnMut(usize) -> Vec<f64>, tol: f64) -> Result<KLFactor> {
    let n = diag.len();
    if let Some((i, &v)) = diag.iter().enumerate().find(|(_, &v)| v < -1e-10) {
        return Err(Error::NotPositiveSemidefinite { index: i, value: v });
    }
    let mut d = diag;
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut pivots = Vec::new();
    let mut trace: f64 = d.iter().map(|v| v.max(0.0)).sum();
    let mut history = vec![trace];
    while trace > tol && pivots.len() < n {
        let mut p = 0;
        for i in 1..n {
            if d[i] > d[p] {
                p = i;
            }
        }
        if d[p] <= 0.0 {
            break;
        }
        let mut c = column(p);
        for l in &cols {
            let lp = l[p];
            for i in 0..n {
                c[i] -= l[i] * lp;
            }
        }
        let s = d[p].sqrt();
        for v in c.iter_mut() {
            *v /= s;
        }
        for &q in &pivots {
            c[q] = 0.0;
        }
        c[p] = s;
        for i in 0..n {
            d[i] -= c[i] * c[i];
            if d[i] < -1e-10 * history[0].max(1.0) {
                return Err(Error::NotPositiveSemidefinite { index: i, value: d[i] });
            }
        }
        d[p] = 0.0;
        pivots.push(p);
        cols.push(c);
        trace = d.iter().map(|v| v.max(0.0)).sum();
        history.push(trace);
    }
    let r = cols.len();
    let factor = DMatrix::from_fn(n, r, |i, j| cols[j][i]);
    Ok(KLFactor {
        factor,
        pivots,
        tol,
        residual_trace: trace,
        residual_history: history,
    })
}

/// JSON header of a dumped KL factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KLHeader {
    pub n: usize,
    pub r: usize,
    pub tol: f64,
    pub residual_trace: f64,
    pub kernel: String,
    pub seed_policy: String,
    pub pivots: Vec<usize>,
}

impl KLFactor {
    /// Writes `<stem>.json` and `<stem>.bin` (column-major little-endian `f64`).
    pub fn save(&self, stem: &Path, kernel: &str) -> Result<()> {
        let header = KLHeader {
            n: self.n(),
            r: self.rank(),
            tol: self.tol,
            residual_trace: self.residual_trace,
            kernel: kernel.into(),
            seed_policy: STREAM_POLICY.into(),
            pivots: self.pivots.clone(),
        };
        std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&header)?)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(stem.with_extension("bin"))?);
        for v in self.factor.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<(Self, KLHeader)> {
        let header: KLHeader = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        let mut bytes = Vec::new();
        std::fs::File::open(stem.with_extension("bin"))?.read_to_end(&mut bytes)?;
        if bytes.len() != 8 * header.n * header.r {
            return Err(Error::Format("factor size does not match its header".into()));
        }
        let vals = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let factor = DMatrix::from_iterator(header.n, header.r, vals);
        Ok((
            KLFactor {
                factor,
                pivots: header.pivots.clone(),
                tol: header.tol,
                residual_trace: header.residual_trace,
                residual_history: vec![header.residual_trace],
            },
            header,
        ))
    }
}

/// Distribution of the KL coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleLaw {
    /// Standard normal.
    Normal,
    /// Uniform on `[−1, 1]` scaled by `√3` to unit variance.
    Uniform,
}

impl FromStr for SampleLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(SampleLaw::Normal),
            "uniform" => Ok(SampleLaw::Uniform),
            _ => Err(Error::Config(format!("unknown sample law '{s}'"))),
        }
    }
}

/// Documented stream derivation of the sample generator.
pub const STREAM_POLICY: &str = "ChaCha8(seed), stream = level << 40 | sample index (level = 0 for shared draws)";

/// Whether level-`ℓ` draws use their own streams or share them across levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Streams {
    PerLevel,
    Shared,
}

/// Coefficient vectors of one draw on a level and, if present, the level below.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleDraw {
    pub level: usize,
    pub index: u64,
    pub fine: Vec<f64>,
    pub coarse: Option<Vec<f64>>,
}

/// Area-weighted average of children: the L² projection onto the coarse
/// piecewise constants.
pub fn restrict(z_fine: &[f64], fine: &Mesh) -> Result<Vec<f64>> {
    let parents = fine.parent_of.as_ref().ok_or(Error::MissingParents(fine.level))?;
    let n = parents.iter().copied().max().map_or(0, |m| m + 1);
    let mut num = vec![0.0; n];
    let mut den = vec![0.0; n];
    for (c, &p) in parents.iter().enumerate() {
        let a = fine.panels[c].area;
        num[p] += a * z_fine[c];
        den[p] += a;
    }
    Ok(num.iter().zip(&den).map(|(a, b)| a / b).collect())
}

/// Embedding of coarse piecewise constants into the fine space.
pub fn prolong(z_coarse: &[f64], fine: &Mesh) -> Result<Vec<f64>> {
    let parents = fine.parent_of.as_ref().ok_or(Error::MissingParents(fine.level))?;
    Ok(parents.iter().map(|&p| z_coarse[p]).collect())
}

fn restrict_rows(z: &DMatrix<f64>, fine: &Mesh) -> Result<DMatrix<f64>> {
    let parents = fine.parent_of.as_ref().ok_or(Error::MissingParents(fine.level))?;
    let n = parents.iter().copied().max().map_or(0, |m| m + 1);
    let mut out = DMatrix::zeros(n, z.ncols());
    let mut den = vec![0.0; n];
    for (c, &p) in parents.iter().enumerate() {
        let a = fine.panels[c].area;
        den[p] += a;
        for j in 0..z.ncols() {
            out[(p, j)] += a * z[(c, j)];
        }
    }
    for (p, d) in den.iter().enumerate() {
        out.row_mut(p).scale_mut(1.0 / d);
    }
    Ok(out)
}

/// Settings of the Karhunen–Loève sampler.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub law: SampleLaw,
    pub seed: u64,
    pub streams: Streams,
    /// Gauss points per direction for the Galerkin covariance.
    pub quad: usize,
    /// Truncation `scale · 2^{−L}` of the residual trace.
    pub trunc_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            law: SampleLaw::Normal,
            seed: 0,
            streams: Streams::PerLevel,
            quad: 3,
            trunc_scale: 1e-3,
        }
    }
}

/// Truncated KL sampler with coefficient factors `Z_ℓ` on every level:
/// `Z_L = D^{-1/2} L` from pivoted Cholesky of the mass-scaled covariance and
/// `Z_{ℓ−1} = restrict(Z_ℓ)`.
#[derive(Clone, Debug)]
pub struct FieldSampler {
    pub config: SamplerConfig,
    pub kl: KLFactor,
    pub factors: Vec<DMatrix<f64>>,
    pub kernel_name: String,
    meshes: Vec<Mesh>,
}

impl FieldSampler {
    /// Builds the sampler for the meshes of levels `0..=L`.
    pub fn new(meshes: &[Mesh], kernel: &dyn KernelFunction, config: SamplerConfig) -> Result<Self> {
        let finest = meshes.last().ok_or(Error::EmptyMesh)?;
        let cov = GalerkinCovariance::new(finest, kernel, config.quad);
        let diag = cov.diagonal();
        let trace: f64 = diag.iter().sum();
        let h = 0.5f64.powi(finest.level as i32);
        let tol = (config.trunc_scale * h).max(1e-10 * trace);
        let kl = pivoted_cholesky(diag, |j| cov.column(j), tol)?;
        Self::from_factor(meshes, kl, kernel.name(), config)
    }

    pub fn from_factor(meshes: &[Mesh], kl: KLFactor, kernel_name: String, config: SamplerConfig) -> Result<Self> {
        let finest = meshes.last().ok_or(Error::EmptyMesh)?;
        if kl.n() != finest.len() {
            return Err(Error::StructureMismatch("factor size differs from the finest mesh".into()));
        }
        let mut z = kl.factor.clone();
        for (i, a) in finest.areas().iter().enumerate() {
            z.row_mut(i).scale_mut(1.0 / a.sqrt());
        }
        let mut factors = vec![z];
        for l in (1..meshes.len()).rev() {
            let coarse = restrict_rows(factors.last().unwrap(), &meshes[l])?;
            factors.push(coarse);
        }
        factors.reverse();
        Ok(FieldSampler {
            config,
            kl,
            factors,
            kernel_name,
            meshes: meshes.to_vec(),
        })
    }

    pub fn finest(&self) -> usize {
        self.factors.len() - 1
    }

    pub fn rank(&self) -> usize {
        self.kl.rank()
    }

    pub fn mesh(&self, level: usize) -> &Mesh {
        &self.meshes[level]
    }

    fn stream(&self, level: usize, index: u64) -> u64 {
        match self.config.streams {
            Streams::PerLevel => ((level as u64) << 40) | index,
            Streams::Shared => index,
        }
    }

    /// KL coordinates of draw `index` on `level`.
    pub fn coordinates(&self, level: usize, index: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.stream(level, index));
        let r = self.rank();
        match self.config.law {
            SampleLaw::Normal => (0..r).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
            SampleLaw::Uniform => {
                let u = Uniform::new_inclusive(-1.0, 1.0).unwrap();
                (0..r).map(|_| 3f64.sqrt() * rng.sample(u)).collect()
            }
        }
    }

    /// `z_ℓ = Z_ℓ y` for given coordinates.
    pub fn field(&self, level: usize, y: &[f64]) -> Vec<f64> {
        (&self.factors[level] * DVector::from_column_slice(y)).as_slice().to_vec()
    }

    /// Coupled draw: `z_ℓ = Z_ℓ y` and `z_{ℓ−1} = restrict(z_ℓ)`.
    pub fn draw(&self, level: usize, index: u64) -> Result<SampleDraw> {
        if level > self.finest() {
            return Err(Error::InvalidArgument(format!(
                "level {level} exceeds the finest sampler level {}",
                self.finest()
            )));
        }
        let fine = self.field(level, &self.coordinates(level, index));
        let coarse = if level > 0 {
            Some(restrict(&fine, &self.meshes[level])?)
        } else {
            None
        };
        Ok(SampleDraw {
            level,
            index,
            fine,
            coarse,
        })
    }

    /// Draws `indices` on `level` as matrix columns, with their restrictions.
    pub fn draw_block(&self, level: usize, indices: std::ops::Range<u64>) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> {
        if level > self.finest() {
            return Err(Error::InvalidArgument(format!("level {level} exceeds the sampler")));
        }
        let m = (indices.end - indices.start) as usize;
        let r = self.rank();
        let mut y = DMatrix::zeros(r, m);
        for (j, k) in indices.enumerate() {
            y.set_column(j, &DVector::from_vec(self.coordinates(level, k)));
        }
        let fine = &self.factors[level] * y;
        let coarse = if level > 0 {
            Some(restrict_rows(&fine, &self.meshes[level])?)
        } else {
            None
        };
        Ok((fine, coarse))
    }

    /// `B x = D^{1/2} Z_L Z_Lᵀ D^{1/2} x`: the truncated covariance operator on
    /// the finest level in the L²-orthonormal panel basis.
    pub fn covariance_apply(&self, x: &[f64]) -> Vec<f64> {
        let z = &self.factors[self.finest()];
        let areas = self.meshes[self.finest()].areas();
        let sx = DVector::from_iterator(x.len(), x.iter().zip(&areas).map(|(v, a)| v * a.sqrt()));
        let t = z.tr_mul(&sx);
        let y = z * t;
        y.iter().zip(&areas).map(|(v, a)| v * a.sqrt()).collect()
    }
}

/// One coupled draw from `sampler`.
pub fn draw_coupled(sampler: &FieldSampler, level: usize, index: u64) -> Result<SampleDraw> {
    sampler.draw(level, index)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matern_values() {
        assert_eq!(matern92(0.0), 1.0);
        assert!((matern92(1.0) - 11.2 * (-3.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn partition_ends() {
        let w = GevreyWarp::new(1.5).unwrap();
        assert_eq!(w.partition(-0.3), 1.0);
        assert_eq!(w.partition(0.0), 1.0);
        assert_eq!(w.partition(1.0), 0.0);
        assert!((w.partition(0.5) - 0.5).abs() < 1e-15);
        assert!(GevreyWarp::new(1.0).is_err());
    }
}
