//! Panel meshes, cluster trees, nested hierarchies and block-cluster trees.

use crate::quadrature::GaussRule;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::str::FromStr;

/// A point in the embedding space. Unused trailing coordinates are zero.
pub type Point = [f64; 3];

/// Built-in geometries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Geometry {
    /// `[0,1]²` with a 4×4 base grid.
    UnitSquare,
    /// Cube faces projected onto the unit sphere.
    QuadSphere,
    /// `[0,1]` split into `parts` segments, each refinement splitting every
    /// segment into `parts` pieces again.
    Interval { parts: usize },
}

impl Geometry {
    /// Dimension of the embedding space used for bounding boxes.
    pub fn dim(&self) -> usize {
        match self {
            Geometry::UnitSquare => 2,
            Geometry::QuadSphere => 3,
            Geometry::Interval { .. } => 1,
        }
    }

    /// Number of children per panel under uniform refinement.
    pub fn refinement_factor(&self) -> usize {
        match self {
            Geometry::UnitSquare | Geometry::QuadSphere => 4,
            Geometry::Interval { parts } => *parts,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Geometry::UnitSquare => "unit-square",
            Geometry::QuadSphere => "quad-sphere",
            Geometry::Interval { .. } => "interval",
        }
    }
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Geometry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit-square" => Ok(Geometry::UnitSquare),
            "quad-sphere" => Ok(Geometry::QuadSphere),
            _ => Err(Error::Config(format!("unknown geometry '{s}'"))),
        }
    }
}

/// A flat segment (two vertices) or a bilinear quadrilateral (four vertices,
/// counter-clockwise).
#[derive(Clone, Debug, PartialEq)]
pub struct Panel {
    pub id: usize,
    pub vertices: Vec<Point>,
    pub area: f64,
    pub centroid: Point,
}

impl Panel {
    pub fn new(id: usize, vertices: Vec<Point>) -> Self {
        assert!(vertices.len() == 2 || vertices.len() == 4);
        let mut panel = Panel {
            id,
            vertices,
            area: 0.0,
            centroid: [0.0; 3],
        };
        let rule = GaussRule::new(4);
        let mut area = 0.0;
        let mut c = [0.0; 3];
        for (x, w) in panel.quadrature(&rule) {
            area += w;
            for k in 0..3 {
                c[k] += w * x[k];
            }
        }
        panel.area = area;
        panel.centroid = c.map(|v| v / area);
        panel
    }

    /// Parametric dimension: 1 for segments, 2 for quadrilaterals.
    pub fn param_dim(&self) -> usize {
        if self.vertices.len() == 2 {
            1
        } else {
            2
        }
    }

    /// Image of the parameter point `(u, v) ∈ [0,1]²` (`v` ignored on segments).
    pub fn map(&self, u: f64, v: f64) -> Point {
        let vs = &self.vertices;
        let mut x = [0.0; 3];
        if vs.len() == 2 {
            for k in 0..3 {
                x[k] = (1.0 - u) * vs[0][k] + u * vs[1][k];
            }
        } else {
            let w = [(1.0 - u) * (1.0 - v), u * (1.0 - v), u * v, (1.0 - u) * v];
            for k in 0..3 {
                x[k] = (0..4).map(|i| w[i] * vs[i][k]).sum();
            }
        }
        x
    }

    /// Surface element of the parametrisation at `(u, v)`.
    pub fn jacobian(&self, u: f64, v: f64) -> f64 {
        let vs = &self.vertices;
        if vs.len() == 2 {
            return norm(sub(vs[1], vs[0]));
        }
        let mut du = [0.0; 3];
        let mut dv = [0.0; 3];
        for k in 0..3 {
            du[k] = (1.0 - v) * (vs[1][k] - vs[0][k]) + v * (vs[2][k] - vs[3][k]);
            dv[k] = (1.0 - u) * (vs[3][k] - vs[0][k]) + u * (vs[2][k] - vs[1][k]);
        }
        norm(cross(du, dv))
    }

    /// Tensor Gauss points and weights (surface element included).
    pub fn quadrature(&self, rule: &GaussRule) -> Vec<(Point, f64)> {
        let mut out = Vec::with_capacity(rule.len().pow(self.param_dim() as u32));
        if self.param_dim() == 1 {
            for (u, wu) in rule.nodes.iter().zip(&rule.weights) {
                out.push((self.map(*u, 0.0), wu * self.jacobian(*u, 0.0)));
            }
        } else {
            for (v, wv) in rule.nodes.iter().zip(&rule.weights) {
                for (u, wu) in rule.nodes.iter().zip(&rule.weights) {
                    out.push((self.map(*u, *v), wu * wv * self.jacobian(*u, *v)));
                }
            }
        }
        out
    }

    /// Children under uniform refinement, in parameter order.
    fn split(&self, parts: usize, first_id: usize, project: bool) -> Vec<Panel> {
        let fix = |p: Point| if project { normalize(p) } else { p };
        if self.param_dim() == 1 {
            (0..parts)
                .map(|c| {
                    let a = c as f64 / parts as f64;
                    let b = (c + 1) as f64 / parts as f64;
                    Panel::new(first_id + c, vec![self.map(a, 0.0), self.map(b, 0.0)])
                })
                .collect()
        } else {
            let sub = [(0.0, 0.0), (0.5, 0.0), (0.5, 0.5), (0.0, 0.5)];
            sub.iter()
                .enumerate()
                .map(|(c, &(u0, v0))| {
                    let corners = [(u0, v0), (u0 + 0.5, v0), (u0 + 0.5, v0 + 0.5), (u0, v0 + 0.5)];
                    let vs = corners.iter().map(|&(u, v)| fix(self.map(u, v))).collect();
                    Panel::new(first_id + c, vs)
                })
                .collect()
        }
    }
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: Point, b: Point) -> Point {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: Point) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn normalize(a: Point) -> Point {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// A panel decomposition of the domain on one refinement level.
#[derive(Clone, Debug)]
pub struct Mesh {
    pub geometry: Geometry,
    pub level: usize,
    pub panels: Vec<Panel>,
    /// Parent panel on the previous level; `None` on level 0.
    pub parent_of: Option<Vec<usize>>,
}

impl Mesh {
    pub fn dim(&self) -> usize {
        self.geometry.dim()
    }

    pub fn len(&self) -> usize {
        self.panels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.panels.is_empty()
    }

    pub fn areas(&self) -> Vec<f64> {
        self.panels.iter().map(|p| p.area).collect()
    }

    pub fn total_area(&self) -> f64 {
        self.panels.iter().map(|p| p.area).sum()
    }

    /// Mesh on level 0 of a geometry.
    pub fn base(geometry: Geometry) -> Mesh {
        let panels = match geometry {
            Geometry::UnitSquare => {
                let n = 4;
                let h = 1.0 / n as f64;
                let mut panels = Vec::with_capacity(n * n);
                for j in 0..n {
                    for i in 0..n {
                        let (x, y) = (i as f64 * h, j as f64 * h);
                        let vs = vec![[x, y, 0.0], [x + h, y, 0.0], [x + h, y + h, 0.0], [x, y + h, 0.0]];
                        panels.push(Panel::new(panels.len(), vs));
                    }
                }
                panels
            }
            Geometry::QuadSphere => {
                // Outward-oriented cube faces.
                let faces: [[Point; 4]; 6] = [
                    [[1., -1., -1.], [1., 1., -1.], [1., 1., 1.], [1., -1., 1.]],
                    [[-1., 1., -1.], [-1., -1., -1.], [-1., -1., 1.], [-1., 1., 1.]],
                    [[1., 1., -1.], [-1., 1., -1.], [-1., 1., 1.], [1., 1., 1.]],
                    [[-1., -1., -1.], [1., -1., -1.], [1., -1., 1.], [-1., -1., 1.]],
                    [[-1., -1., 1.], [1., -1., 1.], [1., 1., 1.], [-1., 1., 1.]],
                    [[-1., 1., -1.], [1., 1., -1.], [1., -1., -1.], [-1., -1., -1.]],
                ];
                faces
                    .iter()
                    .enumerate()
                    .map(|(i, f)| Panel::new(i, f.iter().map(|&p| normalize(p)).collect()))
                    .collect()
            }
            Geometry::Interval { parts } => (0..parts)
                .map(|i| {
                    let a = i as f64 / parts as f64;
                    let b = (i + 1) as f64 / parts as f64;
                    Panel::new(i, vec![[a, 0.0, 0.0], [b, 0.0, 0.0]])
                })
                .collect(),
        };
        Mesh {
            geometry,
            level: 0,
            panels,
            parent_of: None,
        }
    }

    /// Uniform refinement. Child `c` of panel `i` gets id `C·i + c`.
    pub fn refine(&self) -> Mesh {
        let parts = self.geometry.refinement_factor();
        let project = self.geometry == Geometry::QuadSphere;
        let mut panels = Vec::with_capacity(self.len() * parts);
        let mut parent_of = Vec::with_capacity(self.len() * parts);
        for p in &self.panels {
            for child in p.split(parts, panels.len(), project) {
                parent_of.push(p.id);
                panels.push(child);
            }
        }
        Mesh {
            geometry: self.geometry,
            level: self.level + 1,
            panels,
            parent_of: Some(parent_of),
        }
    }

    /// Children of every panel of the previous level, in id order.
    pub fn children_of_parents(&self) -> Result<Vec<Vec<usize>>> {
        let parents = self.parent_of.as_ref().ok_or(Error::MissingParents(self.level))?;
        let n_parent = parents.iter().copied().max().map_or(0, |m| m + 1);
        let mut children = vec![Vec::new(); n_parent];
        for (c, &p) in parents.iter().enumerate() {
            children[p].push(c);
        }
        Ok(children)
    }

    /// Plain-text dump, one panel per line: `id v0x v0y v0z ... area`.
    pub fn write_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for p in &self.panels {
            write!(out, "{}", p.id)?;
            for v in &p.vertices {
                write!(out, " {} {} {}", v[0], v[1], v[2])?;
            }
            writeln!(out, " {}", p.area)?;
        }
        Ok(())
    }
}

/// Mesh of `geometry` after `level` uniform refinements.
pub fn build_mesh(geometry: Geometry, level: usize) -> Mesh {
    let mut mesh = Mesh::base(geometry);
    for _ in 0..level {
        mesh = mesh.refine();
    }
    mesh
}

/// Like [`build_mesh`] but taking the geometry by name.
pub fn build_mesh_named(name: &str, level: usize) -> Result<Mesh> {
    Ok(build_mesh(name.parse()?, level))
}

/// Axis-aligned box `[lo_i, hi_i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoundingBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        BoundingBox { lo, hi }
    }

    pub fn from_points<'a>(dim: usize, points: impl IntoIterator<Item = &'a Point>) -> Self {
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for p in points {
            for k in 0..dim {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        BoundingBox { lo, hi }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }

    pub fn diam_inf(&self) -> f64 {
        (0..self.dim()).map(|k| self.width(k)).fold(0.0, f64::max)
    }

    /// Euclidean distance between the closed boxes.
    pub fn dist(&self, other: &BoundingBox) -> f64 {
        (0..self.dim())
            .map(|k| {
                let gap = (other.lo[k] - self.hi[k]).max(self.lo[k] - other.hi[k]).max(0.0);
                gap * gap
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            lo: self.lo.iter().zip(&other.lo).map(|(a, b)| a.min(*b)).collect(),
            hi: self.hi.iter().zip(&other.hi).map(|(a, b)| a.max(*b)).collect(),
        }
    }

    pub fn contains(&self, p: &Point, tol: f64) -> bool {
        (0..self.dim()).all(|k| p[k] >= self.lo[k] - tol && p[k] <= self.hi[k] + tol)
    }

    pub fn longest_axis(&self) -> usize {
        let mut best = 0;
        for k in 1..self.dim() {
            if self.width(k) > self.width(best) {
                best = k;
            }
        }
        best
    }
}

/// `max(diam∞ Q_t, diam∞ Q_s) ≤ 2η dist₂(Q_t, Q_s)`.
pub fn admissible(t: &BoundingBox, s: &BoundingBox, eta: f64) -> bool {
    let diam = t.diam_inf().max(s.diam_inf());
    let dist = t.dist(s);
    dist > 0.0 && diam <= 2.0 * eta * dist
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    pub range: Range<usize>,
    pub bbox: BoundingBox,
    pub children: Vec<usize>,
    pub parent: Option<usize>,
    pub level: usize,
}

/// Cluster tree stored as an arena in depth-first preorder; cluster 0 is the root.
#[derive(Clone, Debug)]
pub struct ClusterTree {
    pub clusters: Vec<Cluster>,
    /// Storage order: `permutation[k]` is the panel stored at position `k`.
    pub permutation: Vec<usize>,
    /// Inverse of `permutation`.
    pub position: Vec<usize>,
    pub leaves: Vec<usize>,
    pub depth: usize,
    pub n_min: usize,
    pub dim: usize,
}

impl ClusterTree {
    pub fn root(&self) -> usize {
        0
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn n_panels(&self) -> usize {
        self.permutation.len()
    }

    pub fn is_leaf(&self, t: usize) -> bool {
        self.clusters[t].children.is_empty()
    }

    pub fn children(&self, t: usize) -> &[usize] {
        &self.clusters[t].children
    }

    pub fn size(&self, t: usize) -> usize {
        self.clusters[t].range.len()
    }

    pub fn level(&self, t: usize) -> usize {
        self.clusters[t].level
    }

    pub fn bbox(&self, t: usize) -> &BoundingBox {
        &self.clusters[t].bbox
    }

    /// Panel ids of `t` in storage order.
    pub fn indices(&self, t: usize) -> &[usize] {
        &self.permutation[self.clusters[t].range.clone()]
    }

    /// Offset of child `c` inside the range of its parent.
    pub fn offset_in_parent(&self, c: usize) -> usize {
        let parent = self.clusters[c].parent.expect("root has no parent");
        self.clusters[c].range.start - self.clusters[parent].range.start
    }

    /// Clusters in postorder (children before parents).
    pub fn postorder(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.reverse();
        order
    }

    fn push(&mut self, cluster: Cluster) -> usize {
        self.clusters.push(cluster);
        self.clusters.len() - 1
    }

    fn finish(&mut self) {
        self.leaves = (0..self.len()).filter(|&t| self.is_leaf(t)).collect();
        self.depth = self.clusters.iter().map(|c| c.level).max().unwrap_or(0);
        self.position = vec![0; self.permutation.len()];
        for (k, &i) in self.permutation.iter().enumerate() {
            self.position[i] = k;
        }
    }

    /// Structural statistics used as diagnostics.
    pub fn stats(&self, mesh: &Mesh) -> TreeStats {
        let max_children = self.clusters.iter().map(|c| c.children.len()).max().unwrap_or(0);
        let leaf_sizes = self.leaves.iter().map(|&t| self.size(t));
        let min_leaf = leaf_sizes.clone().min().unwrap_or(0);
        let max_leaf = leaf_sizes.max().unwrap_or(0);
        let mut zeta: f64 = 1.0;
        let mut q_bar: f64 = 0.0;
        let mut c_cu: f64 = 0.0;
        let d = mesh.panels.first().map_or(1, |p| p.param_dim()) as i32;
        for (t, c) in self.clusters.iter().enumerate() {
            let measure: f64 = self.indices(t).iter().map(|&i| mesh.panels[i].area).sum();
            c_cu = c_cu.max(measure / c.bbox.diam_inf().powi(d));
            for &ch in &c.children {
                let cb = &self.clusters[ch].bbox;
                zeta = zeta.max(c.bbox.diam_inf() / cb.diam_inf());
                for k in 0..self.dim {
                    if c.bbox.width(k) > 1e-12 * c.bbox.diam_inf() {
                        q_bar = q_bar.max(cb.width(k) / c.bbox.width(k));
                    }
                }
            }
        }
        let leaf_diams: Vec<f64> = self.leaves.iter().map(|&t| self.bbox(t).diam_inf()).collect();
        let lmax = leaf_diams.iter().cloned().fold(0.0, f64::max);
        let lmin = leaf_diams.iter().cloned().fold(f64::INFINITY, f64::min);
        TreeStats {
            clusters: self.len(),
            leaves: self.leaves.len(),
            depth: self.depth,
            max_children,
            min_leaf,
            max_leaf,
            zeta,
            q_bar,
            c_cu,
            c_gr: (lmax / lmin).sqrt(),
        }
    }
}

/// Measured tree constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeStats {
    pub clusters: usize,
    pub leaves: usize,
    pub depth: usize,
    /// Largest number of children (`C_ab`).
    pub max_children: usize,
    pub min_leaf: usize,
    pub max_leaf: usize,
    /// Largest parent/child ratio of box diameters.
    pub zeta: f64,
    /// Largest per-axis child/parent width ratio.
    pub q_bar: f64,
    /// Largest `μ(t) / diam∞(Q_t)^d`.
    pub c_cu: f64,
    /// Square root of the largest to smallest leaf diameter ratio.
    pub c_gr: f64,
}

fn bbox_of(mesh: &Mesh, ids: &[usize]) -> BoundingBox {
    let dim = mesh.dim();
    BoundingBox::from_points(dim, ids.iter().flat_map(|&i| mesh.panels[i].vertices.iter()))
}

/// Cardinality-balanced split along the longest box axis, ties broken by id.
fn bisect(mesh: &Mesh, ids: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let axis = bbox_of(mesh, ids).longest_axis();
    let mut sorted = ids.to_vec();
    sorted.sort_by(|&a, &b| {
        mesh.panels[a].centroid[axis]
            .total_cmp(&mesh.panels[b].centroid[axis])
            .then(a.cmp(&b))
    });
    let right = sorted.split_off(sorted.len() / 2);
    (sorted, right)
}

/// Leaves of the bisection subtree over `ids`, in depth-first order.
fn bisection_leaves(mesh: &Mesh, ids: &[usize], n_min: usize, force_split: bool) -> Vec<Vec<usize>> {
    if ids.len() <= 1 || (ids.len() <= n_min && !force_split) {
        return vec![ids.to_vec()];
    }
    let (a, b) = bisect(mesh, ids);
    let mut out = bisection_leaves(mesh, &a, n_min, false);
    out.extend(bisection_leaves(mesh, &b, n_min, false));
    out
}

fn grow(tree: &mut ClusterTree, mesh: &Mesh, ids: Vec<usize>, parent: Option<usize>, level: usize) -> usize {
    let start = tree.permutation.len();
    let t = tree.push(Cluster {
        range: start..start,
        bbox: bbox_of(mesh, &ids),
        children: Vec::new(),
        parent,
        level,
    });
    if ids.len() > tree.n_min {
        let (a, b) = bisect(mesh, &ids);
        let ca = grow(tree, mesh, a, Some(t), level + 1);
        let cb = grow(tree, mesh, b, Some(t), level + 1);
        tree.clusters[t].children = vec![ca, cb];
    } else {
        tree.permutation.extend_from_slice(&ids);
    }
    tree.clusters[t].range = start..tree.permutation.len();
    t
}

/// Binary cardinality-balanced cluster tree with leaves of at most `n_min` panels.
pub fn build_cluster_tree(mesh: &Mesh, n_min: usize) -> Result<ClusterTree> {
    if mesh.is_empty() {
        return Err(Error::EmptyMesh);
    }
    if n_min == 0 {
        return Err(Error::InvalidArgument("n_min must be at least 1".into()));
    }
    let mut tree = ClusterTree {
        clusters: Vec::new(),
        permutation: Vec::with_capacity(mesh.len()),
        position: Vec::new(),
        leaves: Vec::new(),
        depth: 0,
        n_min,
        dim: mesh.dim(),
    };
    grow(&mut tree, mesh, (0..mesh.len()).collect(), None, 0);
    tree.finish();
    Ok(tree)
}

/// Nested refinement of `tree` onto `fine`: every cluster gets an image with
/// the same support, and the image of an old leaf receives as children the
/// leaves of a bisection subtree over its child panels. Returns the new tree
/// and the map from old clusters to their images.
pub fn refine_cluster_tree(tree: &ClusterTree, fine: &Mesh) -> Result<(ClusterTree, Vec<usize>)> {
    let children_of = fine.children_of_parents()?;
    if children_of.len() != tree.n_panels() {
        return Err(Error::HierarchyMismatch(format!(
            "tree has {} panels but the fine mesh refines {}",
            tree.n_panels(),
            children_of.len()
        )));
    }
    let mut out = ClusterTree {
        clusters: Vec::new(),
        permutation: Vec::with_capacity(fine.len()),
        position: Vec::new(),
        leaves: Vec::new(),
        depth: 0,
        n_min: tree.n_min,
        dim: tree.dim,
    };
    let mut image = vec![usize::MAX; tree.len()];

    fn lift(
        old: &ClusterTree,
        t: usize,
        out: &mut ClusterTree,
        fine: &Mesh,
        children_of: &[Vec<usize>],
        image: &mut [usize],
        parent: Option<usize>,
    ) -> usize {
        let start = out.permutation.len();
        let level = parent.map_or(0, |p| out.clusters[p].level + 1);
        let ids: Vec<usize> = old.indices(t).iter().flat_map(|&i| children_of[i].iter().copied()).collect();
        let nt = out.push(Cluster {
            range: start..start,
            bbox: bbox_of(fine, &ids),
            children: Vec::new(),
            parent,
            level,
        });
        image[t] = nt;
        let mut kids = Vec::new();
        if old.is_leaf(t) {
            for leaf in bisection_leaves(fine, &ids, old.n_min, true) {
                let s = out.permutation.len();
                out.permutation.extend_from_slice(&leaf);
                kids.push(out.push(Cluster {
                    range: s..out.permutation.len(),
                    bbox: bbox_of(fine, &leaf),
                    children: Vec::new(),
                    parent: Some(nt),
                    level: level + 1,
                }));
            }
        } else {
            for &c in old.children(t) {
                kids.push(lift(old, c, out, fine, children_of, image, Some(nt)));
            }
        }
        out.clusters[nt].children = kids;
        out.clusters[nt].range = start..out.permutation.len();
        nt
    }

    lift(tree, tree.root(), &mut out, fine, &children_of, &mut image, None);
    out.finish();
    Ok((out, image))
}

/// Meshes and nested cluster trees on levels `0..=L`.
#[derive(Clone, Debug)]
pub struct NestedHierarchy {
    pub meshes: Vec<Mesh>,
    pub trees: Vec<ClusterTree>,
    /// `images[ℓ][t]`: cluster of `T_{ℓ+1}` with the same support as `t ∈ T_ℓ`.
    pub images: Vec<Vec<usize>>,
    /// `preimages[ℓ][t']` for `t' ∈ T_{ℓ+1}`: the cluster of `T_ℓ` it corresponds to.
    pub preimages: Vec<Vec<Option<usize>>>,
    /// `birth[ℓ][t]`: first level on which the support of `t ∈ T_ℓ` appears.
    pub birth: Vec<Vec<usize>>,
}

impl NestedHierarchy {
    /// Builds the hierarchy by uniform mesh refinement and nested tree refinement.
    ///
    /// Bounding boxes of corresponding clusters are unified across levels, so
    /// that admissibility and interpolation grids agree on every level. On flat
    /// geometries this changes nothing.
    pub fn build(geometry: Geometry, levels: usize, n_min: usize) -> Result<Self> {
        let mut meshes = vec![Mesh::base(geometry)];
        let mut trees = vec![build_cluster_tree(&meshes[0], n_min)?];
        let mut images = Vec::new();
        for l in 0..levels {
            let fine = meshes[l].refine();
            let (tree, image) = refine_cluster_tree(&trees[l], &fine)?;
            meshes.push(fine);
            trees.push(tree);
            images.push(image);
        }
        let mut h = Self::assemble(meshes, trees, images);
        h.unify_boxes();
        Ok(h)
    }

    fn assemble(meshes: Vec<Mesh>, trees: Vec<ClusterTree>, images: Vec<Vec<usize>>) -> Self {
        let mut preimages = Vec::new();
        for (l, image) in images.iter().enumerate() {
            let mut pre = vec![None; trees[l + 1].len()];
            for (t, &nt) in image.iter().enumerate() {
                pre[nt] = Some(t);
            }
            preimages.push(pre);
        }
        let mut birth = vec![vec![0; trees[0].len()]];
        for l in 0..images.len() {
            let b = (0..trees[l + 1].len())
                .map(|t| preimages[l][t].map_or(l + 1, |old| birth[l][old]))
                .collect();
            birth.push(b);
        }
        NestedHierarchy {
            meshes,
            trees,
            images,
            preimages,
            birth,
        }
    }

    fn unify_boxes(&mut self) {
        let levels = self.images.len();
        for l in (0..levels).rev() {
            for t in 0..self.trees[l].len() {
                let nt = self.images[l][t];
                let b = self.trees[l].clusters[t].bbox.union(&self.trees[l + 1].clusters[nt].bbox);
                self.trees[l].clusters[t].bbox = b;
            }
        }
        for l in 0..levels {
            for t in 0..self.trees[l].len() {
                let nt = self.images[l][t];
                self.trees[l + 1].clusters[nt].bbox = self.trees[l].clusters[t].bbox.clone();
            }
        }
    }

    /// Finest level `L`.
    pub fn finest(&self) -> usize {
        self.trees.len() - 1
    }

    /// Image of `t ∈ T_from` in `T_to`, `from ≤ to`.
    pub fn image(&self, from: usize, t: usize, to: usize) -> usize {
        (from..to).fold(t, |t, l| self.images[l][t])
    }

    /// Cluster of `T_to` whose image in `T_from` is `t`, `to ≤ from`.
    ///
    /// Panics if `t` does not exist on level `to`.
    pub fn preimage_at(&self, from: usize, t: usize, to: usize) -> usize {
        (to..from).rev().fold(t, |t, l| self.preimages[l][t].expect("cluster exists on the requested level"))
    }

    /// Checks the support bijection between consecutive levels.
    pub fn validate(&self) -> Result<()> {
        for l in 0..self.images.len() {
            let fine = &self.meshes[l + 1];
            let parents = fine.parent_of.as_ref().ok_or(Error::MissingParents(l + 1))?;
            let (coarse, next) = (&self.trees[l], &self.trees[l + 1]);
            let mut hit = vec![false; next.len()];
            for t in 0..coarse.len() {
                let nt = self.images[l][t];
                if hit[nt] {
                    return Err(Error::HierarchyMismatch(format!("cluster {nt} on level {} hit twice", l + 1)));
                }
                hit[nt] = true;
                let mut a: Vec<usize> = coarse.indices(t).to_vec();
                let mut b: Vec<usize> = next.indices(nt).iter().map(|&i| parents[i]).collect();
                a.sort_unstable();
                b.sort_unstable();
                b.dedup();
                let count: usize = coarse.indices(t).len() * fine.geometry.refinement_factor();
                if a != b || next.size(nt) != count {
                    return Err(Error::HierarchyMismatch(format!("support of cluster {t} on level {l} differs")));
                }
            }
            for (nt, &h) in hit.iter().enumerate() {
                if !h && !next.is_leaf(nt) {
                    return Err(Error::HierarchyMismatch(format!(
                        "non-leaf cluster {nt} on level {} has no preimage",
                        l + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Classification of a cluster pair with respect to a block-cluster tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Far(usize),
    Near(usize),
    /// An inner node of the block tree.
    Inner,
    /// Not a node of the block tree.
    Absent,
}

/// Farfield and nearfield leaves of the block-cluster tree over `I×I`.
#[derive(Clone, Debug)]
pub struct BlockClusterTree {
    pub eta: f64,
    pub far: Vec<(usize, usize)>,
    pub near: Vec<(usize, usize)>,
    pub inner: Vec<(usize, usize)>,
    index: HashMap<(usize, usize), BlockKind>,
    /// Largest number of block-tree nodes sharing a row cluster.
    pub sparsity: usize,
}

impl BlockClusterTree {
    pub fn build(tree: &ClusterTree, eta: f64) -> Self {
        let mut b = BlockClusterTree {
            eta,
            far: Vec::new(),
            near: Vec::new(),
            inner: Vec::new(),
            index: HashMap::new(),
            sparsity: 0,
        };
        let mut rows = vec![0usize; tree.len()];
        b.descend(tree, tree.root(), tree.root(), &mut rows);
        b.sparsity = rows.into_iter().max().unwrap_or(0);
        b
    }

    fn descend(&mut self, tree: &ClusterTree, t: usize, s: usize, rows: &mut [usize]) {
        rows[t] += 1;
        if admissible(tree.bbox(t), tree.bbox(s), self.eta) {
            self.index.insert((t, s), BlockKind::Far(self.far.len()));
            self.far.push((t, s));
        } else if tree.is_leaf(t) || tree.is_leaf(s) {
            self.index.insert((t, s), BlockKind::Near(self.near.len()));
            self.near.push((t, s));
        } else {
            self.index.insert((t, s), BlockKind::Inner);
            self.inner.push((t, s));
            for &tc in tree.children(t) {
                for &sc in tree.children(s) {
                    self.descend(tree, tc, sc, rows);
                }
            }
        }
    }

    pub fn kind(&self, t: usize, s: usize) -> BlockKind {
        self.index.get(&(t, s)).copied().unwrap_or(BlockKind::Absent)
    }

    pub fn far_index(&self, t: usize, s: usize) -> Option<usize> {
        match self.kind(t, s) {
            BlockKind::Far(i) => Some(i),
            _ => None,
        }
    }

    pub fn near_index(&self, t: usize, s: usize) -> Option<usize> {
        match self.kind(t, s) {
            BlockKind::Near(i) => Some(i),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn admissibility_examples() {
        let a = BoundingBox::new(vec![0.0, 0.0], vec![1.0, 1.0]);
        let b = BoundingBox::new(vec![2.0, 2.0], vec![3.0, 3.0]);
        let c = BoundingBox::new(vec![1.0, 0.0], vec![2.0, 1.0]);
        assert!(admissible(&a, &b, 0.8));
        assert!(!admissible(&a, &c, 1e6));
        assert!(!admissible(&a, &a, 0.8));
        // Equality counts as admissible.
        let d = BoundingBox::new(vec![2.0, 0.0], vec![3.0, 1.0]);
        assert!(admissible(&a, &d, 0.5));
    }

    #[test]
    fn base_square() {
        let m = build_mesh(Geometry::UnitSquare, 0);
        assert_eq!(m.len(), 16);
        assert!(m.panels.iter().all(|p| (p.area - 1.0 / 16.0).abs() < 1e-15));
    }

    #[test]
    fn bisection_of_sixteen() {
        let m = build_mesh(Geometry::UnitSquare, 0);
        let t = build_cluster_tree(&m, 4).unwrap();
        assert_eq!(t.depth, 2);
        assert_eq!(t.leaves.len(), 4);
        assert!(t.leaves.iter().all(|&l| t.size(l) == 4));
    }
}
