//! Dense reference computations for testing. Everything here works pointwise
//! on quadrature points and uses plain product-form Lagrange polynomials and
//! SVD least squares, independently of the recursions in `h2cov`.

use h2cov::estimator::Multilevel;
use h2cov::geometry::{Mesh, Point};
use h2cov::h2::{H2Kernel, H2Space};
use h2cov::linalg::svd;
use h2cov::quadrature::GaussRule;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Lagrange basis on `nodes` at `x` by the product formula.
pub fn lagrange_naive(nodes: &[f64], x: f64) -> Vec<f64> {
    (0..nodes.len())
        .map(|j| {
            nodes
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != j)
                .map(|(_, &xi)| (x - xi) / (nodes[j] - xi))
                .product()
        })
        .collect()
}

/// Tensor Lagrange basis with axis 0 varying fastest.
pub fn tensor_lagrange(axes: &[Vec<f64>], x: &Point) -> Vec<f64> {
    let mut out = vec![1.0];
    for (ax, nodes) in axes.iter().enumerate() {
        let w = lagrange_naive(nodes, x[ax]);
        let mut next = Vec::with_capacity(out.len() * w.len());
        for wj in &w {
            next.extend(out.iter().map(|v| v * wj));
        }
        out = next;
    }
    out
}

/// Tensor Gauss points of every panel, grouped by panel id.
#[derive(Clone, Debug)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
    pub panel: Vec<usize>,
    per_panel: usize,
}

impl PointCloud {
    pub fn new(mesh: &Mesh, n: usize) -> Self {
        let rule = GaussRule::new(n);
        let mut points = Vec::new();
        let mut weights = Vec::new();
        let mut panel = Vec::new();
        for p in &mesh.panels {
            for (x, w) in p.quadrature(&rule) {
                points.push(x);
                weights.push(w);
                panel.push(p.id);
            }
        }
        let per_panel = points.len() / mesh.len();
        PointCloud {
            points,
            weights,
            panel,
            per_panel,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn of_panel(&self, i: usize) -> std::ops::Range<usize> {
        i * self.per_panel..(i + 1) * self.per_panel
    }
}

/// Pointwise values of the iterated-interpolation bases of one space.
pub struct BasisEvaluator<'a> {
    space: &'a H2Space,
    /// `up[c][a'][a] = L^{parent}_a(ξ^c_{a'})`.
    up: Vec<Option<DMatrix<f64>>>,
    leaf_of: Vec<usize>,
}

fn axes_of(space: &H2Space, t: usize) -> Vec<Vec<f64>> {
    space.ops.grids[t].axes.iter().map(|g| g.points.clone()).collect()
}

impl<'a> BasisEvaluator<'a> {
    pub fn new(space: &'a H2Space) -> Self {
        let tree = &space.tree;
        let up = (0..tree.len())
            .map(|c| {
                tree.clusters[c].parent.map(|p| {
                    let pa = axes_of(space, p);
                    let child_points = space.ops.grids[c].points();
                    let kp = space.ops.grids[p].len();
                    let mut m = DMatrix::zeros(child_points.len(), kp);
                    for (i, x) in child_points.iter().enumerate() {
                        m.row_mut(i).copy_from_slice(&tensor_lagrange(&pa, x));
                    }
                    m
                })
            })
            .collect();
        let mut leaf_of = vec![0; tree.n_panels()];
        for &l in &tree.leaves {
            for &i in tree.indices(l) {
                leaf_of[i] = l;
            }
        }
        BasisEvaluator { space, up, leaf_of }
    }

    /// `ψ^t_a(x)` for all `a`, where `x` lies on panel `panel` of this space.
    pub fn values(&self, t: usize, panel: usize, x: &Point) -> DVector<f64> {
        let tree = &self.space.tree;
        let mut c = self.leaf_of[panel];
        let mut v = DVector::from_vec(tensor_lagrange(&axes_of(self.space, c), x));
        while c != t {
            let p = tree.clusters[c].parent.expect("point lies inside the cluster");
            let m = self.up[c].as_ref().unwrap();
            v = m.tr_mul(&v);
            c = p;
        }
        v
    }
}

/// Blockwise dense L² projection onto the H² space of a function given by its
/// values on pairs of quadrature points.
pub struct DenseOracle<'a> {
    pub space: &'a H2Space,
    pub cloud: PointCloud,
    /// Point indices of each cluster, in cluster storage order.
    pub points_of: Vec<Vec<usize>>,
    /// `A_t⁺ W^{1/2}` for farfield clusters.
    proj: Vec<Option<DMatrix<f64>>>,
    /// `M_t[a][j] = Σ_{p ∈ panel j} w_p ψ_a(x_p)`.
    moments: Vec<Option<DMatrix<f64>>>,
}

/// Relative cutoff on singular values of weighted basis evaluations.
pub const SVD_CUTOFF: f64 = 1e-9;

/// Moore–Penrose inverse with relative cutoff [`SVD_CUTOFF`], through a thin
/// QR step for tall matrices.
pub fn pseudo_inverse(a: DMatrix<f64>) -> DMatrix<f64> {
    let (q, r) = if a.nrows() > a.ncols() {
        let qr = a.qr();
        (Some(qr.q()), qr.r())
    } else {
        (None, a)
    };
    let svd = svd(r);
    let smax = svd.singular_values.max();
    let inv = svd.singular_values.map(|s| if s > SVD_CUTOFF * smax { 1.0 / s } else { 0.0 });
    let pinv = svd.vt.transpose() * DMatrix::from_diagonal(&inv) * svd.u.transpose();
    match q {
        Some(q) => pinv * q.transpose(),
        None => pinv,
    }
}

impl<'a> DenseOracle<'a> {
    pub fn new(space: &'a H2Space, n: usize) -> Self {
        let cloud = PointCloud::new(&space.mesh, n);
        let tree = &space.tree;
        let eval = BasisEvaluator::new(space);
        let points_of: Vec<Vec<usize>> = (0..tree.len())
            .map(|t| tree.indices(t).iter().flat_map(|&i| cloud.of_panel(i)).collect())
            .collect();
        let mut proj = vec![None; tree.len()];
        let mut moments = vec![None; tree.len()];
        // Basis values on the points of each cluster, built bottom-up.
        let mut values: Vec<Option<DMatrix<f64>>> = vec![None; tree.len()];
        let mut row_of = vec![0usize; cloud.len()];
        for t in tree.postorder() {
            let pts = &points_of[t];
            let k = space.ops.rank(t);
            let b = if tree.is_leaf(t) {
                let axes = axes_of(space, t);
                let mut b = DMatrix::zeros(pts.len(), k);
                for (r, &p) in pts.iter().enumerate() {
                    b.row_mut(r).copy_from_slice(&tensor_lagrange(&axes, &cloud.points[p]));
                }
                b
            } else {
                for (r, &p) in pts.iter().enumerate() {
                    row_of[p] = r;
                }
                let mut b = DMatrix::zeros(pts.len(), k);
                for &c in tree.children(t) {
                    let bc = values[c].take().unwrap() * eval.up[c].as_ref().unwrap();
                    for (r, &p) in points_of[c].iter().enumerate() {
                        b.row_mut(row_of[p]).copy_from(&bc.row(r));
                    }
                }
                b
            };
            if space.in_far[t] {
                let sw = DVector::from_iterator(pts.len(), pts.iter().map(|&p| cloud.weights[p].sqrt()));
                let a = DMatrix::from_fn(pts.len(), k, |i, j| sw[i] * b[(i, j)]);
                let pinv = pseudo_inverse(a);
                proj[t] = Some(DMatrix::from_fn(k, pts.len(), |i, j| pinv[(i, j)] * sw[j]));
                let idx = tree.indices(t);
                let mut m = DMatrix::zeros(k, idx.len());
                for (r, &p) in pts.iter().enumerate() {
                    let col = r / cloud.per_panel;
                    for a in 0..k {
                        m[(a, col)] += cloud.weights[p] * b[(r, a)];
                    }
                }
                moments[t] = Some(m);
            }
            values[t] = Some(b);
        }
        DenseOracle {
            space,
            cloud,
            points_of,
            proj,
            moments,
        }
    }

    /// Galerkin matrix (panel-id order) of the projection of `g`, where
    /// `block(rows, cols)` returns `g(x_p, y_q)` for point indices `p ∈ rows`, `q ∈ cols`.
    pub fn project(&self, block: impl Fn(&[usize], &[usize]) -> DMatrix<f64>) -> DMatrix<f64> {
        let sp = self.space;
        let tree = &sp.tree;
        let n = sp.n_panels();
        let mut out = DMatrix::zeros(n, n);
        for &(t, s) in &sp.blocks.far {
            let g = block(&self.points_of[t], &self.points_of[s]);
            let x = self.proj[t].as_ref().unwrap() * g * self.proj[s].as_ref().unwrap().transpose();
            let gal = self.moments[t].as_ref().unwrap().transpose() * x * self.moments[s].as_ref().unwrap();
            for (j, &c) in tree.indices(s).iter().enumerate() {
                for (i, &r) in tree.indices(t).iter().enumerate() {
                    out[(r, c)] = gal[(i, j)];
                }
            }
        }
        for &(t, s) in &sp.blocks.near {
            for &i in tree.indices(t) {
                for &j in tree.indices(s) {
                    let (ri, rj): (Vec<usize>, Vec<usize>) = (self.cloud.of_panel(i).collect(), self.cloud.of_panel(j).collect());
                    let g = block(&ri, &rj);
                    let mut acc = 0.0;
                    for (a, &p) in ri.iter().enumerate() {
                        for (b, &q) in rj.iter().enumerate() {
                            acc += self.cloud.weights[p] * self.cloud.weights[q] * g[(a, b)];
                        }
                    }
                    out[(i, j)] = acc;
                }
            }
        }
        out
    }

    /// Galerkin matrix of `scale · Σ_k Π(z_k ⊗ z_k)` for the columns of `z`
    /// (rows in panel-id order). Uses `P_t (a bᵀ) P_sᵀ = (P_t a)(P_s b)ᵀ`.
    pub fn project_outer_products(&self, z: &DMatrix<f64>, scale: f64) -> DMatrix<f64> {
        let sp = self.space;
        let tree = &sp.tree;
        let n = sp.n_panels();
        let pz = DMatrix::from_fn(self.cloud.len(), z.ncols(), |p, k| z[(self.cloud.panel[p], k)]);
        let coeff: Vec<Option<DMatrix<f64>>> = (0..tree.len())
            .map(|t| self.proj[t].as_ref().map(|p| p * pz.select_rows(&self.points_of[t])))
            .collect();
        let mut out = DMatrix::zeros(n, n);
        for &(t, s) in &sp.blocks.far {
            let x = coeff[t].as_ref().unwrap() * coeff[s].as_ref().unwrap().transpose() * scale;
            let gal = self.moments[t].as_ref().unwrap().transpose() * x * self.moments[s].as_ref().unwrap();
            for (j, &c) in tree.indices(s).iter().enumerate() {
                for (i, &r) in tree.indices(t).iter().enumerate() {
                    out[(r, c)] = gal[(i, j)];
                }
            }
        }
        let panel_sum = |i: usize| -> DVector<f64> {
            let mut v = DVector::zeros(z.ncols());
            for p in self.cloud.of_panel(i) {
                v += pz.row(p).transpose() * self.cloud.weights[p];
            }
            v
        };
        for &(t, s) in &sp.blocks.near {
            for &i in tree.indices(t) {
                let zi = panel_sum(i);
                for &j in tree.indices(s) {
                    out[(i, j)] = scale * zi.dot(&panel_sum(j));
                }
            }
        }
        out
    }
}

/// Values of `Σ_ℓ g_ℓ` on all pairs of quadrature points of the finest mesh of
/// `ml`, evaluating every level's kernel pointwise from its blocks.
pub fn multilevel_pointwise(ml: &Multilevel, kernels: &[H2Kernel], cloud: &PointCloud) -> DMatrix<f64> {
    let lmax = ml.finest();
    let np = cloud.len();
    let mut g = DMatrix::zeros(np, np);
    for (m, kernel) in kernels.iter().enumerate() {
        let sp = &*ml.spaces[m];
        let tree = &sp.tree;
        // Ancestor on level m of every finest panel.
        let mut anc: Vec<usize> = (0..ml.spaces[lmax].n_panels()).collect();
        for l in (m + 1..=lmax).rev() {
            let parents = ml.meshes()[l].parent_of.as_ref().unwrap();
            anc = anc.iter().map(|&i| parents[i]).collect();
        }
        let mut pts_of_panel: Vec<Vec<usize>> = vec![Vec::new(); sp.n_panels()];
        for p in 0..np {
            pts_of_panel[anc[cloud.panel[p]]].push(p);
        }
        let eval = BasisEvaluator::new(sp);
        let cluster_pts = |t: usize| -> Vec<usize> { tree.indices(t).iter().flat_map(|&i| pts_of_panel[i].clone()).collect() };
        let basis = |t: usize, pts: &[usize]| -> DMatrix<f64> {
            let k = sp.ops.rank(t);
            let mut b = DMatrix::zeros(pts.len(), k);
            for (r, &p) in pts.iter().enumerate() {
                b.set_row(r, &eval.values(t, anc[cloud.panel[p]], &cloud.points[p]).transpose());
            }
            b
        };
        for (i, &(t, s)) in sp.blocks.far.iter().enumerate() {
            let (pt, ps) = (cluster_pts(t), cluster_pts(s));
            let v = basis(t, &pt) * &kernel.far[i] * basis(s, &ps).transpose();
            for (b, &q) in ps.iter().enumerate() {
                for (a, &p) in pt.iter().enumerate() {
                    g[(p, q)] += v[(a, b)];
                }
            }
        }
        for (i, &(t, s)) in sp.blocks.near.iter().enumerate() {
            for (a, &pi) in tree.indices(t).iter().enumerate() {
                for (b, &pj) in tree.indices(s).iter().enumerate() {
                    let c = kernel.near[i][(a, b)];
                    for &p in &pts_of_panel[pi] {
                        for &q in &pts_of_panel[pj] {
                            g[(p, q)] += c;
                        }
                    }
                }
            }
        }
    }
    g
}

/// Dense reduction oracle: pointwise sum of all levels, projected blockwise
/// onto the finest space. Returns the Galerkin matrix in panel-id order.
pub fn reduction_oracle(ml: &Multilevel, kernels: &[H2Kernel], n: usize) -> DMatrix<f64> {
    let oracle = DenseOracle::new(&ml.spaces[ml.finest()], n);
    let g = multilevel_pointwise(ml, kernels, &oracle.cloud);
    oracle.project(|r, c| g.select_rows(r).select_columns(c))
}

/// Kernel with independent standard normal coefficients in every block.
pub fn random_kernel(space: &std::sync::Arc<H2Space>, seed: u64) -> H2Kernel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut k = H2Kernel::zeros(space.clone());
    for b in k.far.iter_mut().chain(k.near.iter_mut()) {
        for v in b.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
    }
    k
}

/// Standard normal matrix.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

/// Relative Frobenius distance.
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}
