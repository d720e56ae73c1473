//! Sample covariance estimators in H² format: the single-level estimator, the
//! multilevel estimator with its cross-level reduction, and the sample-number
//! schedule.

use crate::geometry::{BlockKind, Geometry, Mesh, NestedHierarchy};
use crate::h2::{assemble_leaf_cross, project_outer_products, CompressionParams, H2Kernel, H2Space};
use crate::interp::{transfer_matrix, TensorGrid};
use crate::sampling::FieldSampler;
use crate::{Error, Result};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Arc;

/// Number of samples drawn and projected together.
pub const SAMPLE_CHUNK: u64 = 32;

/// Sample numbers `M_0 ≥ … ≥ M_L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub levels: usize,
    pub samples: Vec<u64>,
    pub gamma: f64,
    pub dim: usize,
    pub c_uni: f64,
}

impl Schedule {
    /// Explicit sample numbers; they must be positive and nonincreasing.
    pub fn explicit(samples: Vec<u64>, gamma: f64, dim: usize, c_uni: f64) -> Result<Self> {
        if samples.is_empty() || samples.contains(&0) {
            return Err(Error::InvalidArgument("sample numbers must be positive".into()));
        }
        if samples.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidArgument("sample numbers must be nonincreasing".into()));
        }
        Ok(Schedule {
            levels: samples.len() - 1,
            samples,
            gamma,
            dim,
            c_uni,
        })
    }
}

/// `⌈x⌉`, treating values within rounding distance of an integer as that integer.
fn ceil_tol(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

/// `M_ℓ = M_0 C_uni^{−2ℓ(1+γ̃/d)/3}` with the three-case choice of `M_0`,
/// rounded up. `M_0` is at least one.
pub fn sample_schedule(levels: usize, gamma: f64, dim: usize, c_uni: f64) -> Result<Schedule> {
    if !(gamma > 0.0) || dim == 0 || !(c_uni > 1.0) {
        return Err(Error::InvalidArgument("schedule needs γ̃ > 0, d ≥ 1 and C_uni > 1".into()));
    }
    let (l, d) = (levels as f64, dim as f64);
    let two_g = 2.0 * gamma;
    let m0 = if (two_g - d).abs() <= 1e-12 * d {
        c_uni.powf(2.0 * gamma * l / d) * l * l
    } else if two_g > d {
        c_uni.powf(2.0 * gamma * l / d)
    } else {
        c_uni.powf(2.0 * (1.0 + gamma / d) * l / 3.0)
    };
    let m0 = m0.max(1.0);
    let samples = (0..=levels)
        .map(|k| {
            let m = m0 * c_uni.powf(-2.0 * k as f64 * (1.0 + gamma / d) / 3.0);
            (ceil_tol(m) as u64).max(1)
        })
        .collect();
    Ok(Schedule {
        levels,
        samples,
        gamma,
        dim,
        c_uni,
    })
}

/// `L = ⌈(d/γ̃)·|log(1/ε)/log C_uni|⌉`, at least zero.
pub fn level_for_epsilon(eps: f64, gamma: f64, dim: usize, c_uni: f64) -> Result<usize> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument(format!("ε must lie in (0, 1), got {eps}")));
    }
    if !(gamma > 0.0) || dim == 0 || !(c_uni > 1.0) {
        return Err(Error::InvalidArgument("level selection needs γ̃ > 0, d ≥ 1 and C_uni > 1".into()));
    }
    let l = dim as f64 / gamma * ((1.0 / eps).ln() / c_uni.ln()).abs();
    Ok(ceil_tol(l).max(0.0) as usize)
}

/// Meshes, nested cluster trees and H² spaces on levels `0..=L`.
#[derive(Clone, Debug)]
pub struct Multilevel {
    pub hierarchy: NestedHierarchy,
    pub spaces: Vec<Arc<H2Space>>,
}

impl Multilevel {
    pub fn build(geometry: Geometry, levels: usize, params: CompressionParams) -> Result<Self> {
        params.validate()?;
        let hierarchy = NestedHierarchy::build(geometry, levels, params.n_min)?;
        hierarchy.validate()?;
        Self::from_hierarchy(hierarchy, params)
    }

    pub fn from_hierarchy(hierarchy: NestedHierarchy, params: CompressionParams) -> Result<Self> {
        let spaces = hierarchy
            .meshes
            .iter()
            .zip(&hierarchy.trees)
            .map(|(m, t)| H2Space::new(m.clone(), t.clone(), params).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        Ok(Multilevel { hierarchy, spaces })
    }

    pub fn finest(&self) -> usize {
        self.spaces.len() - 1
    }

    pub fn meshes(&self) -> &[Mesh] {
        &self.hierarchy.meshes
    }
}

/// Single-level estimator `(1/M) Σ_k Π^H(z_k ⊗ z_k)` over draws `0..M` on
/// `level`, accumulated chunk by chunk in sample order.
pub fn sce(space: &Arc<H2Space>, sampler: &FieldSampler, level: usize, m: u64) -> Result<H2Kernel> {
    if m == 0 {
        return Err(Error::InvalidArgument("the estimator needs at least one sample".into()));
    }
    if sampler.mesh(level).len() != space.n_panels() {
        return Err(Error::StructureMismatch("sampler level and space differ".into()));
    }
    let mut acc = H2Kernel::zeros(space.clone());
    let scale = 1.0 / m as f64;
    for start in (0..m).step_by(SAMPLE_CHUNK as usize) {
        let end = (start + SAMPLE_CHUNK).min(m);
        let (fine, _) = sampler.draw_block(level, start..end)?;
        acc.axpy(1.0, &project_outer_products(space, &fine, scale))?;
    }
    Ok(acc)
}

/// Per-level kernels of the multilevel estimator; level `ℓ` holds the fine
/// terms of level `ℓ` minus the coarse terms of level `ℓ + 1`.
#[derive(Clone, Debug)]
pub struct LevelKernels {
    pub kernels: Vec<H2Kernel>,
}

/// Level kernels from coupled draws following `schedule`. The coarse part of a
/// level-`ℓ` difference is projected on level `ℓ − 1`.
pub fn level_kernels(ml: &Multilevel, sampler: &FieldSampler, schedule: &Schedule) -> Result<LevelKernels> {
    let levels = ml.finest();
    if schedule.levels != levels || sampler.finest() != levels {
        return Err(Error::StructureMismatch(format!(
            "schedule has {} levels, hierarchy {} and sampler {}",
            schedule.levels,
            levels,
            sampler.finest()
        )));
    }
    let mut kernels: Vec<H2Kernel> = ml.spaces.iter().map(|s| H2Kernel::zeros(s.clone())).collect();
    for (l, &m) in schedule.samples.iter().enumerate() {
        let scale = 1.0 / m as f64;
        for start in (0..m).step_by(SAMPLE_CHUNK as usize) {
            let end = (start + SAMPLE_CHUNK).min(m);
            let (fine, coarse) = sampler.draw_block(l, start..end)?;
            kernels[l].axpy(1.0, &project_outer_products(&ml.spaces[l], &fine, scale))?;
            if let Some(c) = coarse {
                kernels[l - 1].axpy(-1.0, &project_outer_products(&ml.spaces[l - 1], &c, scale))?;
            }
        }
    }
    Ok(LevelKernels { kernels })
}

/// Multilevel estimator: level kernels combined by [`multilevel_reduce`].
pub fn mlsce(ml: &Multilevel, sampler: &FieldSampler, schedule: &Schedule) -> Result<H2Kernel> {
    let lk = level_kernels(ml, sampler, schedule)?;
    multilevel_reduce(ml, &lk)
}

/// Cross-level matrices relating the spaces of a hierarchy to its finest level.
///
/// * `R^{(L,m)}_t[a][b] = ∫ ψ^{(L)}_a ψ^{(m)}_b` for `t ∈ T_m`,
/// * `N^{(L,m)}_t[a][j] = ∫ ψ^{(L)}_a φ^{(m)}_j` for `t ∈ T_m` and level-`m`
///   panels `j` of `t` in storage order,
///
/// where `ψ^{(L)}` is the basis of the level-`L` image of `t`.
pub struct CrossLevel<'a> {
    ml: &'a Multilevel,
    base_r: HashMap<usize, Vec<Option<DMatrix<f64>>>>,
    base_n: HashMap<usize, DMatrix<f64>>,
    cross_r: HashMap<(usize, usize), DMatrix<f64>>,
    cross_n: HashMap<(usize, usize), DMatrix<f64>>,
}

impl<'a> CrossLevel<'a> {
    pub fn new(ml: &'a Multilevel) -> Self {
        CrossLevel {
            ml,
            base_r: HashMap::new(),
            base_n: HashMap::new(),
            cross_r: HashMap::new(),
            cross_n: HashMap::new(),
        }
    }

    fn finest_space(&self) -> &'a H2Space {
        &self.ml.spaces[self.ml.finest()]
    }

    /// `R_t[a][b] = ∫ ψ_a L^F_b` on the finest level for every active cluster,
    /// with `L^F` the tensor Lagrange basis of `order` points on the box of `t`.
    pub fn base_r(&mut self, order: usize) -> Result<&[Option<DMatrix<f64>>]> {
        if !self.base_r.contains_key(&order) {
            let sp = self.finest_space();
            let tree = &sp.tree;
            let ops = &sp.ops;
            let fgrids = (0..tree.len())
                .map(|t| TensorGrid::new(tree.bbox(t), order))
                .collect::<Result<Vec<_>>>()?;
            let mut r: Vec<Option<DMatrix<f64>>> = vec![None; tree.len()];
            let leaves: Vec<(usize, DMatrix<f64>)> = tree
                .leaves
                .par_iter()
                .filter(|&&t| ops.active[t])
                .map(|&t| {
                    let n = ops.grids[t].order.max(order);
                    (t, assemble_leaf_cross(&sp.mesh, tree.indices(t), &ops.grids[t], &fgrids[t], n))
                })
                .collect();
            for (t, m) in leaves {
                r[t] = Some(m);
            }
            for t in tree.postorder() {
                if !ops.active[t] || tree.is_leaf(t) {
                    continue;
                }
                let mut acc = DMatrix::zeros(ops.rank(t), fgrids[t].len());
                for &c in tree.children(t) {
                    let e = ops.transfer[c].as_ref().expect("active cluster has transfer");
                    let f = transfer_matrix(&fgrids[t], &fgrids[c]);
                    acc += e.transpose() * r[c].as_ref().unwrap() * f;
                }
                r[t] = Some(acc);
            }
            self.base_r.insert(order, r);
        }
        Ok(&self.base_r[&order])
    }

    /// `N_c` on the finest level with respect to the panels of the level on
    /// which the support of `c` first appears, in that level's storage order.
    pub fn base_n(&mut self, c: usize) -> Result<DMatrix<f64>> {
        if let Some(n) = self.base_n.get(&c) {
            return Ok(n.clone());
        }
        let ml = self.ml;
        let h = &ml.hierarchy;
        let lmax = ml.finest();
        let sp = self.finest_space();
        let (tree, ops) = (&sp.tree, &sp.ops);
        if !ops.active[c] {
            return Err(Error::HierarchyMismatch(format!("cluster {c} has no operators")));
        }
        let out = if let Some(m) = &ops.leaf_moments[c] {
            m.clone()
        } else {
            let b = h.birth[lmax][c];
            let pre_b = h.preimage_at(lmax, c, b);
            let tb = &h.trees[b];
            let mut out = DMatrix::zeros(ops.rank(c), tb.size(pre_b));
            for &child in tree.children(c) {
                let e = ops.transfer[child].as_ref().unwrap();
                let part = e.transpose() * self.base_n(child)?;
                let cb = h.birth[lmax][child];
                if cb == b {
                    let pre_c = h.preimage_at(lmax, child, b);
                    let off = tb.clusters[pre_c].range.start - tb.clusters[pre_b].range.start;
                    let mut cols = out.columns_mut(off, part.ncols());
                    cols += &part;
                } else {
                    // Child panels live one level finer: add onto their parents.
                    let pre_c = h.preimage_at(lmax, child, cb);
                    let parents = h.meshes[cb].parent_of.as_ref().ok_or(Error::MissingParents(cb))?;
                    let start = tb.clusters[pre_b].range.start;
                    for (j, &i) in h.trees[cb].indices(pre_c).iter().enumerate() {
                        let col = tb.position[parents[i]] - start;
                        let mut dst = out.column_mut(col);
                        dst += part.column(j);
                    }
                }
            }
            out
        };
        self.base_n.insert(c, out.clone());
        Ok(out)
    }

    /// `R^{(L,m)}_t` for `t ∈ T_m`: `K^{(L)} × K^{(m)}`.
    pub fn cross_r(&mut self, m: usize, t: usize) -> Result<DMatrix<f64>> {
        if let Some(r) = self.cross_r.get(&(m, t)) {
            return Ok(r.clone());
        }
        let ml = self.ml;
        let lmax = ml.finest();
        let (sm, sl) = (&ml.spaces[m], &ml.spaces[lmax]);
        let img = ml.hierarchy.image(m, t, lmax);
        let out = if sm.tree.is_leaf(t) {
            let order = sm.ops.grids[t].order;
            if sm.ops.grids[t].axes != TensorGrid::new(sl.tree.bbox(img), order)?.axes {
                return Err(Error::HierarchyMismatch(format!("boxes of cluster {t} differ between levels")));
            }
            self.base_r(order)?[img]
                .clone()
                .ok_or_else(|| Error::HierarchyMismatch(format!("image of cluster {t} is not active")))?
        } else {
            if !sm.ops.active[t] {
                return Err(Error::HierarchyMismatch(format!("cluster {t} on level {m} has no operators")));
            }
            let mut acc = DMatrix::zeros(sl.ops.rank(img), sm.ops.rank(t));
            for &c in sm.tree.children(t) {
                let ci = ml.hierarchy.image(m, c, lmax);
                let el = sl.ops.transfer[ci]
                    .as_ref()
                    .ok_or_else(|| Error::HierarchyMismatch(format!("image of cluster {c} has no transfer")))?;
                let em = sm.ops.transfer[c].as_ref().unwrap();
                acc += el.transpose() * self.cross_r(m, c)? * em;
            }
            acc
        };
        self.cross_r.insert((m, t), out.clone());
        Ok(out)
    }

    /// `N^{(L,m)}_t` for `t ∈ T_m`: `K^{(L)} × |t|`, columns in `T_m` storage order.
    pub fn cross_n(&mut self, m: usize, t: usize) -> Result<DMatrix<f64>> {
        if let Some(n) = self.cross_n.get(&(m, t)) {
            return Ok(n.clone());
        }
        let ml = self.ml;
        let lmax = ml.finest();
        let (tm, sl) = (&ml.hierarchy.trees[m], &ml.spaces[lmax]);
        let img = ml.hierarchy.image(m, t, lmax);
        let out = if tm.is_leaf(t) {
            if ml.hierarchy.birth[lmax][img] != m {
                return Err(Error::HierarchyMismatch(format!("leaf {t} of level {m} is not born there")));
            }
            self.base_n(img)?
        } else {
            let mut out = DMatrix::zeros(sl.ops.rank(img), tm.size(t));
            for &c in tm.children(t) {
                let ci = ml.hierarchy.image(m, c, lmax);
                let el = sl.ops.transfer[ci]
                    .as_ref()
                    .ok_or_else(|| Error::HierarchyMismatch(format!("image of cluster {c} has no transfer")))?;
                let part = el.transpose() * self.cross_n(m, c)?;
                out.columns_mut(tm.offset_in_parent(c), part.ncols()).copy_from(&part);
            }
            out
        };
        self.cross_n.insert((m, t), out.clone());
        Ok(out)
    }
}

/// Blockwise projection of `Σ_ℓ g_ℓ` onto the finest H² space.
///
/// Farfield leaves of coarse levels are projected directly onto the farfield
/// leaf of their image; nearfield leaves are prolonged one level at a time and
/// either projected (if they became farfield), added to the nearfield of the
/// next level, or split along the block tree.
pub fn multilevel_reduce(ml: &Multilevel, input: &LevelKernels) -> Result<H2Kernel> {
    let lmax = ml.finest();
    if input.kernels.len() != lmax + 1 {
        return Err(Error::StructureMismatch(format!(
            "{} level kernels for {} levels",
            input.kernels.len(),
            lmax + 1
        )));
    }
    for (l, k) in input.kernels.iter().enumerate() {
        if k.space.fingerprint != ml.spaces[l].fingerprint {
            return Err(Error::StructureMismatch(format!("kernel {l} lives on a different space")));
        }
    }
    let sl = &ml.spaces[lmax];
    let mut out = input.kernels[lmax].clone();
    let mut near_acc: Vec<Vec<DMatrix<f64>>> = input.kernels.iter().map(|k| k.near.clone()).collect();
    let mut cross = CrossLevel::new(ml);
    let h = &ml.hierarchy;
    for m in 0..lmax {
        let sm = &ml.spaces[m];
        // Farfield to farfield.
        let mut maps: HashMap<usize, DMatrix<f64>> = HashMap::new();
        for &(t, s) in &sm.blocks.far {
            for c in [t, s] {
                if let std::collections::hash_map::Entry::Vacant(e) = maps.entry(c) {
                    let img = h.image(m, c, lmax);
                    e.insert(&sl.ops.gram_pinv[img] * cross.cross_r(m, c)?);
                }
            }
        }
        let projected: Vec<DMatrix<f64>> = sm
            .blocks
            .far
            .par_iter()
            .zip(&input.kernels[m].far)
            .map(|(&(t, s), u)| &maps[&t] * u * maps[&s].transpose())
            .collect();
        for (&(t, s), x) in sm.blocks.far.iter().zip(projected) {
            let (ti, si) = (h.image(m, t, lmax), h.image(m, s, lmax));
            let j = sl.blocks.far_index(ti, si).ok_or_else(|| {
                Error::HierarchyMismatch(format!("farfield block ({t}, {s}) of level {m} is no farfield leaf on level {lmax}"))
            })?;
            out.far[j] += x;
        }
        // Nearfield: prolong to level m + 1 and push through its block tree.
        let near = std::mem::take(&mut near_acc[m]);
        let tm = &h.trees[m];
        let tn = &h.trees[m + 1];
        let parents = h.meshes[m + 1].parent_of.as_ref().ok_or(Error::MissingParents(m + 1))?;
        let mut far_maps: HashMap<usize, DMatrix<f64>> = HashMap::new();
        for (&(t, s), c) in sm.blocks.near.iter().zip(&near) {
            let (ti, si) = (h.images[m][t], h.images[m][s]);
            let rows: Vec<usize> = tn.indices(ti).iter().map(|&i| tm.position[parents[i]] - tm.clusters[t].range.start).collect();
            let cols: Vec<usize> = tn.indices(si).iter().map(|&j| tm.position[parents[j]] - tm.clusters[s].range.start).collect();
            let prolonged = DMatrix::from_fn(rows.len(), cols.len(), |a, b| c[(rows[a], cols[b])]);
            push_block(
                ml,
                &mut cross,
                m + 1,
                ti,
                si,
                prolonged.as_view(),
                &mut near_acc[m + 1],
                &mut out.far,
                &mut far_maps,
            )?;
        }
    }
    out.near = std::mem::take(&mut near_acc[lmax]);
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn push_block(
    ml: &Multilevel,
    cross: &mut CrossLevel,
    l: usize,
    t: usize,
    s: usize,
    c: nalgebra::DMatrixView<f64>,
    near_acc: &mut [DMatrix<f64>],
    far_out: &mut [DMatrix<f64>],
    maps: &mut HashMap<usize, DMatrix<f64>>,
) -> Result<()> {
    let lmax = ml.finest();
    let sp = &ml.spaces[l];
    let tree = &sp.tree;
    match sp.blocks.kind(t, s) {
        BlockKind::Near(j) => {
            near_acc[j] += c;
        }
        BlockKind::Far(_) => {
            let sl = &ml.spaces[lmax];
            let h = &ml.hierarchy;
            for x in [t, s] {
                if let std::collections::hash_map::Entry::Vacant(e) = maps.entry(x) {
                    let img = h.image(l, x, lmax);
                    e.insert(&sl.ops.gram_pinv[img] * cross.cross_n(l, x)?);
                }
            }
            let (ti, si) = (h.image(l, t, lmax), h.image(l, s, lmax));
            let j = sl.blocks.far_index(ti, si).ok_or_else(|| {
                Error::HierarchyMismatch(format!("farfield block ({t}, {s}) of level {l} is no farfield leaf on level {lmax}"))
            })?;
            far_out[j] += &maps[&t] * c * maps[&s].transpose();
        }
        BlockKind::Inner => {
            let (t0, s0) = (tree.clusters[t].range.start, tree.clusters[s].range.start);
            for &tc in tree.children(t) {
                for &sc in tree.children(s) {
                    let (rt, rs) = (&tree.clusters[tc].range, &tree.clusters[sc].range);
                    let sub = c.view((rt.start - t0, rs.start - s0), (rt.len(), rs.len()));
                    push_block(ml, cross, l, tc, sc, sub, near_acc, far_out, maps)?;
                }
            }
        }
        BlockKind::Absent => {
            return Err(Error::HierarchyMismatch(format!("block ({t}, {s}) is missing on level {l}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_table_column() {
        let s = sample_schedule(4, 1.0, 2, 4.0).unwrap();
        assert_eq!(s.samples, vec![4096, 1024, 256, 64, 16]);
        assert_eq!(sample_schedule(0, 1.0, 2, 4.0).unwrap().samples, vec![1]);
    }

    #[test]
    fn epsilon_levels() {
        assert_eq!(level_for_epsilon(1.0 / 64.0, 1.0, 2, 4.0).unwrap(), 6);
        assert_eq!(level_for_epsilon(0.25, 1.0, 2, 4.0).unwrap(), 2);
        assert_eq!(level_for_epsilon(0.9, 1.0, 2, 4.0).unwrap(), 1);
        assert!(level_for_epsilon(1.5, 1.0, 2, 4.0).is_err());
    }
}
