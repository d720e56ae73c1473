use h2cov::estimator::{multilevel_reduce, LevelKernels, Multilevel};
use h2cov::geometry::Geometry;
use h2cov::h2::{project_outer_products, CompressionParams, H2Space};
use h2cov_testkit::*;
use std::sync::Arc;
use std::time::Instant;

#[test]
fn naive_lagrange_is_cardinal() {
    let nodes = [0.0, 0.3, 1.0];
    for (i, &x) in nodes.iter().enumerate() {
        let v = lagrange_naive(&nodes, x);
        for (j, &w) in v.iter().enumerate() {
            assert_eq!(w, if i == j { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn projection_matches_oracle_small() {
    let sp = Arc::new(H2Space::build(Geometry::UnitSquare, 2, CompressionParams::default()).unwrap());
    let oracle = DenseOracle::new(&sp, 3);
    let z = random_matrix(sp.n_panels(), 2, 7);
    let k = project_outer_products(&sp, &z, 0.5);
    let err = rel_err(&k.to_dense().unwrap(), &oracle.project_outer_products(&z, 0.5));
    assert!(err < 1e-10, "relative error {err}");
}

#[test]
fn reduction_matches_oracle_small() {
    let t0 = Instant::now();
    let ml = Multilevel::build(Geometry::UnitSquare, 2, CompressionParams::default()).unwrap();
    let kernels: Vec<_> = ml.spaces.iter().enumerate().map(|(l, s)| random_kernel(s, 11 + l as u64)).collect();
    let lk = LevelKernels { kernels: kernels.clone() };
    let out = multilevel_reduce(&ml, &lk).unwrap();
    let t1 = t0.elapsed();
    let reference = reduction_oracle(&ml, &kernels, 3);
    let err = rel_err(&out.to_dense().unwrap(), &reference);
    eprintln!("reduce {:?} total {:?} err {err:e}", t1, t0.elapsed());
    assert!(err < 1e-10, "relative error {err}");
}
