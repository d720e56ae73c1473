use h2cov::estimator::{level_for_epsilon, sample_schedule, Schedule};
use h2cov::geometry::{admissible, build_cluster_tree, build_mesh, BoundingBox, Geometry, NestedHierarchy};
use h2cov::h2::{project_outer_products, CompressionParams, H2Kernel, H2Space};
use h2cov::interp::{cheb_points, transfer_matrix, Grid1d, RankSchedule, TensorGrid};
use h2cov::sampling::{pivoted_cholesky, prolong, restrict};
use h2cov::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;
use std::sync::{Arc, OnceLock};

fn space_l2() -> &'static Arc<H2Space> {
    static SPACE: OnceLock<Arc<H2Space>> = OnceLock::new();
    SPACE.get_or_init(|| Arc::new(H2Space::build(Geometry::UnitSquare, 2, CompressionParams::default()).unwrap()))
}

fn matrix(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |i, j| data[(i * cols + j) % data.len()] + 0.01 * (i as f64) - 0.02 * (j as f64))
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_is_nonincreasing(levels in 0usize..9, gamma in 0.25f64..2.0, c_uni in 2.0f64..8.0) {
        let s = sample_schedule(levels, gamma, 2, c_uni).unwrap();
        prop_assert_eq!(s.samples.len(), levels + 1);
        prop_assert!(s.samples.iter().all(|&m| m >= 1));
        prop_assert!(s.samples.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn epsilon_level_meets_target(eps in 1e-4f64..0.99) {
        let l = level_for_epsilon(eps, 1.0, 2, 4.0).unwrap();
        prop_assert!(4f64.powf(-(l as f64) / 2.0) <= eps * (1.0 + 1e-12));
        prop_assert!(l == 0 || 4f64.powf(-((l - 1) as f64) / 2.0) > eps);
    }

    #[test]
    fn restrict_inverts_prolong(data in prop::collection::vec(-5.0f64..5.0, 64)) {
        let fine = build_mesh(Geometry::UnitSquare, 2);
        let back = restrict(&prolong(&data, &fine).unwrap(), &fine).unwrap();
        for (a, b) in back.iter().zip(&data) {
            prop_assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn chebyshev_interpolation_reproduces_polynomials(
        coef in prop::collection::vec(-3.0f64..3.0, 5),
        x in -1.0f64..2.0,
    ) {
        let g = Grid1d::chebyshev(5, -1.0, 2.0).unwrap();
        let p = |t: f64| coef.iter().rev().fold(0.0, |acc, c| acc * t + c);
        let l = g.lagrange(x);
        let v: f64 = l.iter().zip(&g.points).map(|(w, t)| w * p(*t)).sum();
        prop_assert!((v - p(x)).abs() < 1e-10 * (1.0 + p(x).abs()));
        prop_assert!((l.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn projection_is_linear(
        a in prop::collection::vec(-1.0f64..1.0, 64),
        b in prop::collection::vec(-1.0f64..1.0, 64),
        s in 0.1f64..3.0,
    ) {
        let sp = space_l2();
        let n = sp.n_panels();
        let za = matrix(n, 1, &a);
        let zb = matrix(n, 2, &b);
        let mut sum = project_outer_products(sp, &za, s);
        sum.axpy(1.0, &project_outer_products(sp, &zb, s)).unwrap();
        let mut both = DMatrix::zeros(n, 3);
        both.column_mut(0).copy_from(&za.column(0));
        both.columns_mut(1, 2).copy_from(&zb);
        let joint = project_outer_products(sp, &both, s);
        prop_assert!(rel(&sum.to_dense().unwrap(), &joint.to_dense().unwrap()) < 1e-12);
        let scale = joint.far.iter().chain(&joint.near).map(|m| m.amax()).fold(0.0, f64::max);
        prop_assert!(joint.symmetry_defect() <= 1e-12 * scale);
    }

    #[test]
    fn matvecs_match_dense(data in prop::collection::vec(-1.0f64..1.0, 32), x in prop::collection::vec(-1.0f64..1.0, 256)) {
        let sp = space_l2();
        let n = sp.n_panels();
        let mut k = project_outer_products(sp, &matrix(n, 2, &data), 1.0);
        let other = project_outer_products(sp, &matrix(n, 1, &x), 1.0);
        k.far.iter_mut().zip(&other.far).for_each(|(f, o)| *f += 0.3 * o.transpose());
        k.near.iter_mut().zip(&other.near).for_each(|(f, o)| *f -= 0.7 * o);
        let d = k.to_dense().unwrap();
        let xv = nalgebra::DVector::from_column_slice(&x);
        let y = k.matvec(&x);
        let yt = k.matvec_transpose(&x);
        prop_assert!((&y - &d * &xv).norm() < 1e-11 * (1.0 + y.norm()));
        prop_assert!((&yt - d.transpose() * &xv).norm() < 1e-11 * (1.0 + yt.norm()));
    }

    #[test]
    fn admissibility_is_symmetric(
        lo in prop::collection::vec(-2.0f64..2.0, 4),
        w in prop::collection::vec(0.01f64..1.5, 4),
        eta in 0.1f64..2.0,
    ) {
        let t = BoundingBox::new(vec![lo[0], lo[1]], vec![lo[0] + w[0], lo[1] + w[1]]);
        let s = BoundingBox::new(vec![lo[2], lo[3]], vec![lo[2] + w[2], lo[3] + w[3]]);
        prop_assert_eq!(admissible(&t, &s, eta), admissible(&s, &t, eta));
        prop_assert!(!admissible(&t, &t, eta));
    }
}

#[test]
fn schedule_rejects_bad_input() {
    assert!(Schedule::explicit(vec![1, 2], 1.0, 2, 4.0).is_err());
    assert!(Schedule::explicit(vec![0], 1.0, 2, 4.0).is_err());
    assert!(sample_schedule(2, 0.0, 2, 4.0).is_err());
    assert!(matches!(level_for_epsilon(0.0, 1.0, 2, 4.0), Err(Error::InvalidArgument(_) | Error::Config(_))));
}

#[test]
fn rank_schedule_grows_towards_root() {
    let s = RankSchedule::new(1, 2, 1.5, 2, 6).unwrap();
    let ranks: Vec<usize> = (0..=6).map(|l| s.rank(l)).collect();
    assert!(ranks.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(s.order(6), 3);
    assert_eq!(s.rank(6), 9);
}

#[test]
fn transfer_matrix_interpolates_parent_basis() {
    let parent = TensorGrid::new(&BoundingBox::new(vec![0.0, 0.0], vec![1.0, 1.0]), 4).unwrap();
    let child = TensorGrid::new(&BoundingBox::new(vec![0.0, 0.5], vec![0.5, 1.0]), 3).unwrap();
    let e = transfer_matrix(&parent, &child);
    assert_eq!(e.shape(), (child.len(), parent.len()));
    // Child interpolation of a parent Lagrange polynomial of degree < 3 per axis is exact.
    let f = |p: &[f64; 3]| 1.0 + p[0] - 2.0 * p[1] + p[0] * p[1];
    let coeff = nalgebra::DVector::from_iterator(parent.len(), parent.points().iter().map(f));
    let on_child = &e * &coeff;
    for (i, p) in child.points().iter().enumerate() {
        assert!((on_child[i] - f(p)).abs() < 1e-12);
    }
}

#[test]
fn chebyshev_points_are_distinct_and_inside() {
    let p = cheb_points(6, 0.0, 2.0).unwrap();
    assert!(p.iter().all(|&x| x > 0.0 && x < 2.0));
    assert!(p.windows(2).all(|w| w[0] != w[1]));
    assert!(cheb_points(0, 0.0, 1.0).is_err());
}

#[test]
fn cluster_tree_partitions_panels() {
    let mesh = build_mesh(Geometry::UnitSquare, 3);
    let tree = build_cluster_tree(&mesh, 4).unwrap();
    let mut all: Vec<usize> = (0..tree.len()).filter(|&t| tree.is_leaf(t)).flat_map(|t| tree.indices(t).to_vec()).collect();
    all.sort_unstable();
    assert_eq!(all, (0..mesh.len()).collect::<Vec<_>>());
    assert!((0..tree.len()).filter(|&t| tree.is_leaf(t)).all(|t| tree.size(t) <= 4));
}

#[test]
fn hierarchy_is_nested() {
    let h = NestedHierarchy::build(Geometry::UnitSquare, 3, 4).unwrap();
    h.validate().unwrap();
    assert_eq!(h.meshes.iter().map(|m| m.len()).collect::<Vec<_>>(), vec![16, 64, 256, 1024]);
}

#[test]
fn pivoted_cholesky_recovers_low_rank() {
    let f = DMatrix::from_fn(12, 3, |i, j| ((i + 1) as f64).powi(j as i32) / 10f64.powi(j as i32));
    let c = &f * f.transpose();
    let kl = pivoted_cholesky((0..12).map(|i| c[(i, i)]).collect(), |j| c.column(j).iter().cloned().collect(), 1e-12).unwrap();
    assert!(kl.rank() <= 3);
    assert!((&kl.factor * kl.factor.transpose() - &c).norm() < 1e-8 * c.norm());
}

#[test]
fn kernel_serialization_round_trip() {
    let sp = space_l2();
    let z = matrix(sp.n_panels(), 3, &[0.3, -1.2, 0.8, 2.0, -0.5]);
    let k = project_outer_products(sp, &z, 0.25);
    let mut buf = Vec::new();
    k.write_binary(&mut buf).unwrap();
    let back = H2Kernel::read_binary(sp.clone(), buf.as_slice()).unwrap();
    assert_eq!(back.far, k.far);
    assert_eq!(back.near, k.near);
    let mut corrupt = buf.clone();
    corrupt[0] ^= 0xff;
    assert!(H2Kernel::read_binary(sp.clone(), corrupt.as_slice()).is_err());
    let other = Arc::new(H2Space::build(Geometry::UnitSquare, 1, CompressionParams::default()).unwrap());
    assert!(H2Kernel::read_binary(other, buf.as_slice()).is_err());
}

#[test]
fn compression_params_validation() {
    let bad = [
        CompressionParams { beta: 0, ..CompressionParams::default() },
        CompressionParams { eta: 0.0, ..CompressionParams::default() },
        CompressionParams { n_min: 0, ..CompressionParams::default() },
        CompressionParams { delta: 0.5, ..CompressionParams::default() },
    ];
    for p in bad {
        assert!(p.validate().is_err(), "{p:?}");
    }
    CompressionParams::default().validate().unwrap();
}

#[test]
fn kl_factor_files_round_trip() {
    let f = DMatrix::from_fn(8, 2, |i, j| 1.0 + (i * (j + 1)) as f64 * 0.1);
    let c = &f * f.transpose();
    let kl = pivoted_cholesky((0..8).map(|i| c[(i, i)]).collect(), |j| c.column(j).iter().cloned().collect(), 1e-12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("kl");
    kl.save(&stem, "test-kernel").unwrap();
    let (back, header) = h2cov::sampling::KLFactor::load(&stem).unwrap();
    assert_eq!(back.factor, kl.factor);
    assert_eq!(back.pivots, kl.pivots);
    assert_eq!((header.n, header.r, header.kernel.as_str()), (8, kl.rank(), "test-kernel"));
}
