//! Variable-order H² kernels on a single level: cluster operators, the
//! forward/backward transformations, projection of simple tensors, kernel
//! compression, matrix-vector products and serialization.

use crate::geometry::{BlockClusterTree, ClusterTree, Mesh, Point};
use crate::interp::{transfer_matrix, RankSchedule, TensorGrid};
use crate::linalg::{factor_pinv, FACTOR_CUTOFF};
use crate::quadrature::GaussRule;
use crate::sampling::KernelFunction;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::sync::Arc;

/// Default cap on the number of unknowns for dense reconstruction.
pub const ORACLE_CAP: usize = 4096;

/// Compression parameters shared by all levels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionParams {
    pub alpha: u32,
    pub beta: u32,
    pub delta: f64,
    pub eta: f64,
    pub n_min: usize,
}

impl Default for CompressionParams {
    fn default() -> Self {
        CompressionParams {
            alpha: 1,
            beta: 2,
            delta: 1.5,
            eta: 0.8,
            n_min: 4,
        }
    }
}

impl CompressionParams {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 1 {
            return Err(Error::Config("beta must be at least 1".into()));
        }
        if !(self.eta > 0.0) {
            return Err(Error::Config("eta must be positive".into()));
        }
        if self.n_min < 1 {
            return Err(Error::Config("n_min must be at least 1".into()));
        }
        if !(self.delta >= 1.0) {
            return Err(Error::Config("delta must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-cluster matrices of the piecewise-polynomial spaces `P_t^pw`.
///
/// Only clusters marked active (farfield clusters and their descendants)
/// carry transfer, moment and Gram data; the others are left empty.
#[derive(Clone, Debug)]
pub struct ClusterOperators {
    pub grids: Vec<TensorGrid>,
    pub active: Vec<bool>,
    /// `E_t`: maps parent nodal values to nodal values on `t` (active parents only).
    pub transfer: Vec<Option<DMatrix<f64>>>,
    /// `M_t` for leaves: `K_t × |t|`, columns in storage order.
    pub leaf_moments: Vec<Option<DMatrix<f64>>>,
    /// Rank-truncated square-root factor `F_t` with `F_tᵀ F_t = Q_t`.
    pub factor: Vec<DMatrix<f64>>,
    /// `Q_t⁺`.
    pub gram_pinv: Vec<DMatrix<f64>>,
    /// Panel areas in panel-id order.
    pub areas: Vec<f64>,
}

/// Leaf matrices by tensor Gauss quadrature with `n` points per direction on
/// every panel.
pub struct LeafMatrices {
    /// `M[a][j] = ∫_{panel j} L_a dμ`.
    pub moments: DMatrix<f64>,
    /// Weighted Lagrange values `A` with `AᵀA = Q`, `Q[a][b] = ∫ L_a L_b dμ`.
    pub values: DMatrix<f64>,
}

pub fn assemble_leaf(mesh: &Mesh, ids: &[usize], grid: &TensorGrid, n: usize) -> LeafMatrices {
    let rule = GaussRule::new(n);
    let k = grid.len();
    let pts: Vec<(Point, f64, usize)> = ids
        .iter()
        .enumerate()
        .flat_map(|(j, &i)| mesh.panels[i].quadrature(&rule).into_iter().map(move |(x, w)| (x, w, j)))
        .collect();
    let mut moments = DMatrix::zeros(k, ids.len());
    // Rows are quadrature points scaled by the square root of their weight.
    let mut values = DMatrix::zeros(pts.len(), k);
    for (c, (x, w, j)) in pts.iter().enumerate() {
        let l = grid.lagrange(x);
        let sw = w.sqrt();
        for b in 0..k {
            moments[(b, *j)] += l[b] * w;
            values[(c, b)] = l[b] * sw;
        }
    }
    LeafMatrices { moments, values }
}

/// `R[a][b] = ∫ L^{(1)}_a L^{(2)}_b dμ` over the panels `ids`, by tensor Gauss
/// quadrature with `n` points per direction.
pub fn assemble_leaf_cross(mesh: &Mesh, ids: &[usize], g1: &TensorGrid, g2: &TensorGrid, n: usize) -> DMatrix<f64> {
    let rule = GaussRule::new(n);
    let mut r = DMatrix::zeros(g1.len(), g2.len());
    for &i in ids {
        for (x, w) in mesh.panels[i].quadrature(&rule) {
            let a = DVector::from_vec(g1.lagrange(&x));
            let b = DVector::from_vec(g2.lagrange(&x));
            r.ger(w, &a, &b, 1.0);
        }
    }
    r
}

/// Moment matrix of a leaf: `M[a][j] = ∫_{panel j} L_a dμ`.
pub fn assemble_moment_leaf(mesh: &Mesh, ids: &[usize], grid: &TensorGrid) -> DMatrix<f64> {
    assemble_leaf(mesh, ids, grid, grid.order).moments
}

/// Marks clusters that lie in the farfield or below a farfield cluster.
pub fn active_clusters(tree: &ClusterTree, in_far: &[bool]) -> Vec<bool> {
    let mut active = vec![false; tree.len()];
    for t in 0..tree.len() {
        active[t] = in_far[t] || tree.clusters[t].parent.is_some_and(|p| active[p]);
    }
    active
}

impl ClusterOperators {
    pub fn assemble(mesh: &Mesh, tree: &ClusterTree, schedule: &RankSchedule, active: &[bool]) -> Result<Self> {
        let n = tree.len();
        let grids = (0..n)
            .map(|t| TensorGrid::new(tree.bbox(t), schedule.order(tree.level(t))))
            .collect::<Result<Vec<_>>>()?;
        let transfer: Vec<Option<DMatrix<f64>>> = (0..n)
            .into_par_iter()
            .map(|t| match tree.clusters[t].parent {
                Some(p) if active[p] => Some(transfer_matrix(&grids[p], &grids[t])),
                _ => None,
            })
            .collect();
        let leaf_data: Vec<Option<LeafMatrices>> = (0..n)
            .into_par_iter()
            .map(|t| {
                (active[t] && tree.is_leaf(t)).then(|| assemble_leaf(mesh, tree.indices(t), &grids[t], grids[t].order))
            })
            .collect();
        let mut factor: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); n];
        let mut gram_pinv: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); n];
        let mut leaf_moments = vec![None; n];
        // Clusters on one tree level are independent; levels go bottom-up.
        let mut by_level: Vec<Vec<usize>> = vec![Vec::new(); tree.depth + 1];
        for t in (0..n).filter(|&t| active[t]) {
            by_level[tree.level(t)].push(t);
        }
        let mut leaf_data = leaf_data;
        for level in by_level.iter().rev() {
            let done: Vec<(usize, DMatrix<f64>, DMatrix<f64>)> = level
                .par_iter()
                .map(|&t| {
                    let a = if let Some(leaf) = &leaf_data[t] {
                        leaf.values.clone()
                    } else {
                        let k = grids[t].len();
                        let blocks: Vec<DMatrix<f64>> = tree
                            .children(t)
                            .iter()
                            .map(|&c| &factor[c] * transfer[c].as_ref().unwrap())
                            .collect();
                        let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
                        let mut st = DMatrix::zeros(rows, k);
                        let mut r0 = 0;
                        for b in blocks {
                            st.rows_mut(r0, b.nrows()).copy_from(&b);
                            r0 += b.nrows();
                        }
                        st
                    };
                    let (f, p) = factor_pinv(a, FACTOR_CUTOFF);
                    (t, f, p)
                })
                .collect();
            for (t, f, p) in done {
                if f.nrows() == 0 {
                    return Err(Error::DegenerateCluster(t));
                }
                factor[t] = f;
                gram_pinv[t] = p;
                if let Some(leaf) = leaf_data[t].take() {
                    leaf_moments[t] = Some(leaf.moments);
                }
            }
        }
        Ok(ClusterOperators {
            grids,
            active: active.to_vec(),
            transfer,
            leaf_moments,
            factor,
            gram_pinv,
            areas: mesh.areas(),
        })
    }

    /// `Q_t = F_tᵀ F_t`.
    pub fn gram(&self, t: usize) -> DMatrix<f64> {
        self.factor[t].tr_mul(&self.factor[t])
    }

    /// Numerical rank of `Q_t`.
    pub fn gram_rank(&self, t: usize) -> usize {
        self.factor[t].nrows()
    }

    pub fn rank(&self, t: usize) -> usize {
        self.grids[t].len()
    }

    /// Moment matrix of `P_t^pw` against all panels of `t`, by the recursion
    /// `M_t = [E_{t'}ᵀ M_{t'}]`.
    pub fn cluster_moments(&self, tree: &ClusterTree, t: usize) -> DMatrix<f64> {
        if let Some(m) = &self.leaf_moments[t] {
            return m.clone();
        }
        let mut out = DMatrix::zeros(self.rank(t), tree.size(t));
        for &c in tree.children(t) {
            let block = self.transfer[c].as_ref().unwrap().transpose() * self.cluster_moments(tree, c);
            let off = tree.offset_in_parent(c);
            out.columns_mut(off, block.ncols()).copy_from(&block);
        }
        out
    }

    /// Forward transformation of several coefficient vectors at once.
    /// `z` has one row per panel (panel-id order) and one column per vector;
    /// the result holds `q_t` (`K_t × columns`) for every cluster.
    pub fn forward_many(&self, tree: &ClusterTree, z: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let cols = z.ncols();
        let mut q: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); tree.len()];
        for t in tree.postorder().into_iter().filter(|&t| self.active[t]) {
            q[t] = if let Some(m) = &self.leaf_moments[t] {
                let idx = tree.indices(t);
                let zt = DMatrix::from_fn(idx.len(), cols, |i, j| z[(idx[i], j)]);
                m * zt
            } else {
                let mut acc = DMatrix::zeros(self.rank(t), cols);
                for &c in tree.children(t) {
                    acc.gemm_tr(1.0, self.transfer[c].as_ref().unwrap(), &q[c], 1.0);
                }
                acc
            };
        }
        q
    }

    /// Forward transformation: leaf `q_t = M_t z_t`, otherwise `q_t = Σ E_{t'}ᵀ q_{t'}`.
    pub fn forward_transform(&self, tree: &ClusterTree, z: &[f64]) -> Vec<DVector<f64>> {
        let zm = DMatrix::from_column_slice(z.len(), 1, z);
        self.forward_many(tree, &zm)
            .into_iter()
            .map(|m| if m.ncols() == 0 { DVector::zeros(m.nrows()) } else { m.column(0).into_owned() })
            .collect()
    }

    /// Transpose of the forward transformation: pushes `y_t` down with `E_{t'}`
    /// and returns `Σ_leaves M_tᵀ y_t` in panel-id order.
    pub fn backward_transform(&self, tree: &ClusterTree, mut y: Vec<DVector<f64>>) -> DVector<f64> {
        let mut out = DVector::zeros(tree.n_panels());
        for t in (0..tree.len()).filter(|&t| self.active[t]) {
            if let Some(m) = &self.leaf_moments[t] {
                let r = m.transpose() * &y[t];
                for (k, &i) in tree.indices(t).iter().enumerate() {
                    out[i] += r[k];
                }
            } else {
                let yt = y[t].clone();
                for &c in tree.children(t) {
                    let e = self.transfer[c].as_ref().unwrap();
                    y[c].gemv(1.0, e, &yt, 1.0);
                }
            }
        }
        out
    }
}

/// Everything needed to hold H² kernels on one level.
#[derive(Clone, Debug)]
pub struct H2Space {
    pub mesh: Mesh,
    pub tree: ClusterTree,
    pub blocks: BlockClusterTree,
    pub schedule: RankSchedule,
    pub params: CompressionParams,
    pub ops: ClusterOperators,
    /// Clusters that are the row or column of some farfield leaf.
    pub in_far: Vec<bool>,
    pub fingerprint: u64,
}

impl H2Space {
    pub fn new(mesh: Mesh, tree: ClusterTree, params: CompressionParams) -> Result<Self> {
        params.validate()?;
        let blocks = BlockClusterTree::build(&tree, params.eta);
        let schedule = RankSchedule::new(params.alpha, params.beta, params.delta, tree.dim, tree.depth)?;
        let mut in_far = vec![false; tree.len()];
        for &(t, s) in &blocks.far {
            in_far[t] = true;
            in_far[s] = true;
        }
        let ops = ClusterOperators::assemble(&mesh, &tree, &schedule, &active_clusters(&tree, &in_far))?;
        let fingerprint = structure_hash(&mesh, &tree, &blocks, &params);
        Ok(H2Space {
            mesh,
            tree,
            blocks,
            schedule,
            params,
            ops,
            in_far,
            fingerprint,
        })
    }

    /// Builds mesh and cluster tree for a single level.
    pub fn build(geometry: crate::geometry::Geometry, level: usize, params: CompressionParams) -> Result<Self> {
        let mesh = crate::geometry::build_mesh(geometry, level);
        let tree = crate::geometry::build_cluster_tree(&mesh, params.n_min)?;
        Self::new(mesh, tree, params)
    }

    pub fn n_panels(&self) -> usize {
        self.mesh.len()
    }

    pub fn storage(&self) -> StorageStats {
        StorageStats::of_structure(&self.tree, &self.blocks, &self.schedule)
    }

    /// `u_t = Q_t⁺ q_t` for every cluster used in the farfield (others empty).
    pub fn local_solves(&self, q: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
        (0..self.tree.len())
            .into_par_iter()
            .map(|t| {
                if self.in_far[t] {
                    &self.ops.gram_pinv[t] * &q[t]
                } else {
                    DMatrix::zeros(0, 0)
                }
            })
            .collect()
    }
}

fn structure_hash(mesh: &Mesh, tree: &ClusterTree, blocks: &BlockClusterTree, p: &CompressionParams) -> u64 {
    let mut h = Sha256::new();
    h.update(mesh.geometry.name().as_bytes());
    h.update((mesh.level as u64).to_le_bytes());
    for &i in &tree.permutation {
        h.update((i as u64).to_le_bytes());
    }
    for c in &tree.clusters {
        h.update((c.range.start as u64).to_le_bytes());
        h.update((c.range.end as u64).to_le_bytes());
        h.update((c.level as u64).to_le_bytes());
        for &x in c.bbox.lo.iter().chain(&c.bbox.hi) {
            h.update(x.to_le_bytes());
        }
    }
    for &(t, s) in blocks.far.iter().chain(&blocks.near) {
        h.update((t as u64).to_le_bytes());
        h.update((s as u64).to_le_bytes());
    }
    h.update(p.alpha.to_le_bytes());
    h.update(p.beta.to_le_bytes());
    h.update(p.delta.to_le_bytes());
    h.update(p.eta.to_le_bytes());
    h.update((p.n_min as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Stored-scalar accounting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageStats {
    pub n_panels: usize,
    pub far_blocks: usize,
    pub near_blocks: usize,
    pub far_scalars: usize,
    pub near_scalars: usize,
    /// Per row-cluster level: `(level, far scalars, near scalars)`.
    pub per_level: Vec<(usize, usize, usize)>,
}

impl StorageStats {
    /// Scalars of any kernel on this structure: `Σ_far K_t K_s + Σ_near |t||s|`.
    pub fn of_structure(tree: &ClusterTree, blocks: &BlockClusterTree, schedule: &RankSchedule) -> Self {
        let mut per_level = vec![(0, 0, 0); tree.depth + 1];
        for (l, e) in per_level.iter_mut().enumerate() {
            e.0 = l;
        }
        let mut far = 0;
        for &(t, s) in &blocks.far {
            let c = schedule.rank(tree.level(t)) * schedule.rank(tree.level(s));
            far += c;
            per_level[tree.level(t)].1 += c;
        }
        let mut near = 0;
        for &(t, s) in &blocks.near {
            let c = tree.size(t) * tree.size(s);
            near += c;
            per_level[tree.level(t)].2 += c;
        }
        StorageStats {
            n_panels: tree.n_panels(),
            far_blocks: blocks.far.len(),
            near_blocks: blocks.near.len(),
            far_scalars: far,
            near_scalars: near,
            per_level,
        }
    }

    pub fn scalars(&self) -> usize {
        self.far_scalars + self.near_scalars
    }

    pub fn bytes(&self) -> usize {
        8 * self.scalars()
    }

    pub fn scalars_per_dof(&self) -> f64 {
        self.scalars() as f64 / self.n_panels as f64
    }

    /// CSV with columns `level,far_scalars,near_scalars`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "level,far_scalars,near_scalars")?;
        for (l, f, n) in &self.per_level {
            writeln!(out, "{l},{f},{n}")?;
        }
        Ok(())
    }
}

/// Compressed kernel: coefficient blocks in `P_t^pw ⊗ P_s^pw` on farfield
/// leaves and coefficient blocks in `V_h ⊗ V_h` on nearfield leaves.
///
/// A nearfield block `C` represents `Σ C_ij φ_i ⊗ φ_j` with panel indicators
/// `φ_i`; rows and columns follow the storage order of the clusters.
#[derive(Clone, Debug)]
pub struct H2Kernel {
    pub space: Arc<H2Space>,
    pub far: Vec<DMatrix<f64>>,
    pub near: Vec<DMatrix<f64>>,
}

impl H2Kernel {
    pub fn zeros(space: Arc<H2Space>) -> Self {
        let far = space
            .blocks
            .far
            .iter()
            .map(|&(t, s)| DMatrix::zeros(space.ops.rank(t), space.ops.rank(s)))
            .collect();
        let near = space
            .blocks
            .near
            .iter()
            .map(|&(t, s)| DMatrix::zeros(space.tree.size(t), space.tree.size(s)))
            .collect();
        H2Kernel { space, far, near }
    }

    fn check_compatible(&self, other: &H2Kernel) -> Result<()> {
        if self.space.fingerprint != other.space.fingerprint
            || self.far.len() != other.far.len()
            || self.near.len() != other.near.len()
        {
            return Err(Error::StructureMismatch("kernels live on different block trees".into()));
        }
        Ok(())
    }

    /// `self += a·x`.
    pub fn axpy(&mut self, a: f64, x: &H2Kernel) -> Result<()> {
        self.check_compatible(x)?;
        for (y, x) in self.far.iter_mut().zip(&x.far) {
            *y += x * a;
        }
        for (y, x) in self.near.iter_mut().zip(&x.near) {
            *y += x * a;
        }
        Ok(())
    }

    pub fn scale(&mut self, a: f64) {
        self.far.iter_mut().chain(self.near.iter_mut()).for_each(|b| b.scale_mut(a));
    }

    pub fn memory_footprint(&self) -> StorageStats {
        self.space.storage()
    }

    /// Largest deviation `‖block(t,s) − block(s,t)ᵀ‖_max` over all leaves.
    pub fn symmetry_defect(&self) -> f64 {
        let b = &self.space.blocks;
        let far = b.far.iter().enumerate().map(|(i, &(t, s))| {
            let j = b.far_index(s, t).expect("block tree is symmetric");
            (&self.far[i] - self.far[j].transpose()).amax()
        });
        let near = b.near.iter().enumerate().map(|(i, &(t, s))| {
            let j = b.near_index(s, t).expect("block tree is symmetric");
            (&self.near[i] - self.near[j].transpose()).amax()
        });
        far.chain(near).fold(0.0, f64::max)
    }

    /// Dense Galerkin matrix `A_ij = ∫∫ g φ_i(x) φ_j(y)` in panel-id order.
    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        self.to_dense_capped(ORACLE_CAP)
    }

    pub fn to_dense_capped(&self, cap: usize) -> Result<DMatrix<f64>> {
        let sp = &*self.space;
        let n = sp.n_panels();
        if n > cap {
            return Err(Error::OracleCap { size: n, cap });
        }
        let tree = &sp.tree;
        let moments: Vec<Option<DMatrix<f64>>> = (0..tree.len())
            .map(|t| sp.in_far[t].then(|| sp.ops.cluster_moments(tree, t)))
            .collect();
        let mut a = DMatrix::zeros(n, n);
        for (i, &(t, s)) in sp.blocks.far.iter().enumerate() {
            let (mt, ms) = (moments[t].as_ref().unwrap(), moments[s].as_ref().unwrap());
            let block = mt.transpose() * &self.far[i] * ms;
            scatter(&mut a, tree.indices(t), tree.indices(s), &block, |_, _| 1.0);
        }
        let ar = &sp.ops.areas;
        for (i, &(t, s)) in sp.blocks.near.iter().enumerate() {
            scatter(&mut a, tree.indices(t), tree.indices(s), &self.near[i], |r, c| ar[r] * ar[c]);
        }
        Ok(a)
    }

    /// `y = A x` with the Galerkin matrix of the kernel, in panel-id order.
    pub fn matvec(&self, x: &[f64]) -> DVector<f64> {
        let sp = &*self.space;
        let tree = &sp.tree;
        let q = sp.ops.forward_transform(tree, x);
        let mut y: Vec<DVector<f64>> = (0..tree.len()).map(|t| DVector::zeros(sp.ops.rank(t))).collect();
        for (i, &(t, s)) in sp.blocks.far.iter().enumerate() {
            y[t].gemv(1.0, &self.far[i], &q[s], 1.0);
        }
        let mut out = sp.ops.backward_transform(tree, y);
        let ar = &sp.ops.areas;
        for (i, &(t, s)) in sp.blocks.near.iter().enumerate() {
            let (it, is) = (tree.indices(t), tree.indices(s));
            let xs = DVector::from_iterator(is.len(), is.iter().map(|&j| ar[j] * x[j]));
            let r = &self.near[i] * xs;
            for (k, &j) in it.iter().enumerate() {
                out[j] += ar[j] * r[k];
            }
        }
        out
    }

    /// `y = Aᵀ x` with the Galerkin matrix of the kernel, in panel-id order.
    pub fn matvec_transpose(&self, x: &[f64]) -> DVector<f64> {
        let sp = &*self.space;
        let tree = &sp.tree;
        let q = sp.ops.forward_transform(tree, x);
        let mut y: Vec<DVector<f64>> = (0..tree.len()).map(|t| DVector::zeros(sp.ops.rank(t))).collect();
        for (i, &(t, s)) in sp.blocks.far.iter().enumerate() {
            y[s].gemv_tr(1.0, &self.far[i], &q[t], 1.0);
        }
        let mut out = sp.ops.backward_transform(tree, y);
        let ar = &sp.ops.areas;
        for (i, &(t, s)) in sp.blocks.near.iter().enumerate() {
            let (it, is) = (tree.indices(t), tree.indices(s));
            let xt = DVector::from_iterator(it.len(), it.iter().map(|&j| ar[j] * x[j]));
            let r = self.near[i].tr_mul(&xt);
            for (k, &j) in is.iter().enumerate() {
                out[j] += ar[j] * r[k];
            }
        }
        out
    }

    /// Blockwise L² projection of the kernel onto its own space. Farfield
    /// coefficients become the minimal-norm representation; the represented
    /// function does not change.
    pub fn project_onto_space(&self) -> H2Kernel {
        let ops = &self.space.ops;
        let far = self
            .space
            .blocks
            .far
            .iter()
            .zip(&self.far)
            .map(|(&(t, s), u)| {
                let rhs = ops.gram(t) * u * ops.gram(s);
                &ops.gram_pinv[t] * rhs * &ops.gram_pinv[s]
            })
            .collect();
        H2Kernel {
            space: self.space.clone(),
            far,
            near: self.near.clone(),
        }
    }
}

fn scatter(a: &mut DMatrix<f64>, rows: &[usize], cols: &[usize], block: &DMatrix<f64>, w: impl Fn(usize, usize) -> f64) {
    for (j, &c) in cols.iter().enumerate() {
        for (i, &r) in rows.iter().enumerate() {
            a[(r, c)] = block[(i, j)] * w(r, c);
        }
    }
}

/// L² projection `Π^H(z ⊗ z)` of a piecewise-constant function `z`
/// (coefficients in panel-id order).
pub fn project_simple_tensor(space: &Arc<H2Space>, z: &[f64]) -> H2Kernel {
    let zm = DMatrix::from_column_slice(z.len(), 1, z);
    project_outer_products(space, &zm, 1.0)
}

/// `scale · Σ_k Π^H(z_k ⊗ z_k)` over the columns `z_k` of `z`, formed
/// blockwise with one matrix product per block.
pub fn project_outer_products(space: &Arc<H2Space>, z: &DMatrix<f64>, scale: f64) -> H2Kernel {
    let sp = &**space;
    let tree = &sp.tree;
    let q = sp.ops.forward_many(tree, z);
    let u = sp.local_solves(&q);
    let far = sp
        .blocks
        .far
        .par_iter()
        .map(|&(t, s)| {
            let mut b = DMatrix::zeros(u[t].nrows(), u[s].nrows());
            b.gemm(scale, &u[t], &u[s].transpose(), 0.0);
            b
        })
        .collect();
    let near = sp
        .blocks
        .near
        .par_iter()
        .map(|&(t, s)| {
            let zt = rows_of(z, tree.indices(t));
            let zs = rows_of(z, tree.indices(s));
            let mut b = DMatrix::zeros(zt.nrows(), zs.nrows());
            b.gemm(scale, &zt, &zs.transpose(), 0.0);
            b
        })
        .collect();
    H2Kernel {
        space: space.clone(),
        far,
        near,
    }
}

fn rows_of(z: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), z.ncols(), |i, j| z[(idx[i], j)])
}

/// Kernel compression by iterated interpolation. Farfield coefficients are
/// the kernel values on the tensor grids of the block; nearfield blocks hold
/// the L² projection onto `V_h ⊗ V_h`, computed with `near_quad` Gauss points
/// per direction on every panel.
pub fn compress_kernel(space: &Arc<H2Space>, g: &dyn KernelFunction, near_quad: usize) -> H2Kernel {
    let sp = &**space;
    let tree = &sp.tree;
    let points: Vec<Vec<Point>> = sp.ops.grids.iter().map(|g| g.points()).collect();
    let far = sp
        .blocks
        .far
        .par_iter()
        .map(|&(t, s)| DMatrix::from_fn(points[t].len(), points[s].len(), |a, b| g.eval(&points[t][a], &points[s][b])))
        .collect();
    let rule = GaussRule::new(near_quad);
    let quad: Vec<Vec<(Point, f64)>> = sp.mesh.panels.iter().map(|p| p.quadrature(&rule)).collect();
    let areas = &sp.ops.areas;
    let near = sp
        .blocks
        .near
        .par_iter()
        .map(|&(t, s)| {
            let (it, is) = (tree.indices(t), tree.indices(s));
            DMatrix::from_fn(it.len(), is.len(), |a, b| {
                let (i, j) = (it[a], is[b]);
                galerkin_entry(g, &quad[i], &quad[j]) / (areas[i] * areas[j])
            })
        })
        .collect();
    H2Kernel {
        space: space.clone(),
        far,
        near,
    }
}

/// `∫∫ g(x, y)` over two panels given their quadrature points.
pub fn galerkin_entry(g: &dyn KernelFunction, qi: &[(Point, f64)], qj: &[(Point, f64)]) -> f64 {
    let mut s = 0.0;
    for (x, wx) in qi {
        let mut inner = 0.0;
        for (y, wy) in qj {
            inner += wy * g.eval(x, y);
        }
        s += wx * inner;
    }
    s
}

const MAGIC: &[u8; 8] = b"H2KERNEL";
const FORMAT_VERSION: u32 = 1;

/// JSON sidecar describing a serialized kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelMetadata {
    pub format_version: u32,
    pub tree_hash: String,
    pub geometry: String,
    pub level: usize,
    pub n_panels: usize,
    pub params: CompressionParams,
    pub far_blocks: usize,
    pub near_blocks: usize,
    pub scalars: usize,
}

impl H2Kernel {
    pub fn metadata(&self) -> KernelMetadata {
        let sp = &self.space;
        KernelMetadata {
            format_version: FORMAT_VERSION,
            tree_hash: format!("{:016x}", sp.fingerprint),
            geometry: sp.mesh.geometry.name().to_string(),
            level: sp.mesh.level,
            n_panels: sp.n_panels(),
            params: sp.params,
            far_blocks: self.far.len(),
            near_blocks: self.near.len(),
            scalars: sp.storage().scalars(),
        }
    }

    /// Binary layout (little endian): magic, version, tree hash, α, β, δ, η,
    /// n_min, block counts, then farfield and nearfield blocks in leaf order,
    /// each as `rows, cols` followed by row-major entries.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let p = &self.space.params;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.space.fingerprint.to_le_bytes())?;
        w.write_all(&p.alpha.to_le_bytes())?;
        w.write_all(&p.beta.to_le_bytes())?;
        w.write_all(&p.delta.to_le_bytes())?;
        w.write_all(&p.eta.to_le_bytes())?;
        w.write_all(&(p.n_min as u64).to_le_bytes())?;
        w.write_all(&(self.far.len() as u64).to_le_bytes())?;
        w.write_all(&(self.near.len() as u64).to_le_bytes())?;
        for b in self.far.iter().chain(&self.near) {
            w.write_all(&(b.nrows() as u64).to_le_bytes())?;
            w.write_all(&(b.ncols() as u64).to_le_bytes())?;
            for i in 0..b.nrows() {
                for j in 0..b.ncols() {
                    w.write_all(&b[(i, j)].to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(space: Arc<H2Space>, mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a serialized kernel".into()));
        }
        if read_u32(&mut r)? != FORMAT_VERSION {
            return Err(Error::Format("unsupported format version".into()));
        }
        if read_u64(&mut r)? != space.fingerprint {
            return Err(Error::StructureMismatch("tree hash differs from the target space".into()));
        }
        let p = &space.params;
        let header = (read_u32(&mut r)?, read_u32(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?, read_u64(&mut r)?);
        if header != (p.alpha, p.beta, p.delta, p.eta, p.n_min as u64) {
            return Err(Error::StructureMismatch("compression parameters differ".into()));
        }
        let (nf, nn) = (read_u64(&mut r)? as usize, read_u64(&mut r)? as usize);
        let mut out = H2Kernel::zeros(space);
        if nf != out.far.len() || nn != out.near.len() {
            return Err(Error::StructureMismatch("block counts differ".into()));
        }
        for b in out.far.iter_mut().chain(out.near.iter_mut()) {
            let (rows, cols) = (read_u64(&mut r)? as usize, read_u64(&mut r)? as usize);
            if (rows, cols) != b.shape() {
                return Err(Error::StructureMismatch("block shape differs".into()));
            }
            for i in 0..rows {
                for j in 0..cols {
                    b[(i, j)] = read_f64(&mut r)?;
                }
            }
        }
        Ok(out)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}
