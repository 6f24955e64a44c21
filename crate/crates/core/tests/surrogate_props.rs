mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use surrogate_uq::basis::{build_design_matrix, BasisSpec};
use surrogate_uq::oracle::random_instance;
use surrogate_uq::surrogate::{fit, LinearFit, TrainingSet};

use common::{mat_rel_err, random_transform, rel_err, rng};

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 48,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

/// (training, spec, design matrix) with N_s - N_p >= 3.
fn instance(seed: u64, n_a: usize, degree: u32, n_x: usize, extra: usize) -> (TrainingSet, BasisSpec, DMatrix<f64>) {
    let n_p = BasisSpec::total_degree(degree, vec![[-1.0, 1.0]; n_a]).unwrap().n_basis();
    let (t, spec) = random_instance(n_p + extra, n_a, degree, n_x, 0.25, seed).unwrap();
    let m = build_design_matrix(&spec, t.inputs()).unwrap().into_matrix();
    (t, spec, m)
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn row_and_site_permutation_equivariance(
        seed in any::<u64>(), n_a in 1usize..=3, degree in 0u32..=2, n_x in 1usize..=3, extra in 3usize..10,
    ) {
        let (t, spec, _) = instance(seed, n_a, degree, n_x, extra);
        let base = fit(&t, &spec).unwrap();
        let mut r = rng(seed ^ 0x5eed);
        let n_s = t.n_samples();
        let mut perm: Vec<usize> = (0..n_s).collect();
        for i in (1..n_s).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let mut sites: Vec<usize> = (0..n_x).collect();
        sites.rotate_left(1);
        let tp = TrainingSet::new(
            DMatrix::from_fn(n_s, n_a, |i, k| t.inputs()[(perm[i], k)]),
            DMatrix::from_fn(n_s, n_x, |i, x| t.outputs()[(perm[i], sites[x])]),
            sites.iter().map(|&x| t.site_labels()[x].clone()).collect(),
        ).unwrap();
        let p = fit(&tp, &spec).unwrap();
        let expect = DMatrix::from_fn(base.c_hat().nrows(), n_x, |nu, x| base.c_hat()[(nu, sites[x])]);
        prop_assert!(mat_rel_err(p.c_hat(), &expect) <= 1e-12);
        prop_assert!(rel_err(p.chi2_min(), base.chi2_min()) <= 1e-12);
        prop_assert!(mat_rel_err(p.linear().h_matrix(), base.linear().h_matrix()) <= 1e-12);
    }

    #[test]
    fn basis_change_equivariance(
        seed in any::<u64>(), n_a in 1usize..=2, degree in 1u32..=2, n_x in 1usize..=3, extra in 3usize..10,
    ) {
        let (t, _, m) = instance(seed, n_a, degree, n_x, extra);
        let base = LinearFit::from_design(&m, t.outputs()).unwrap();
        let tm = random_transform(m.ncols(), &mut rng(seed.wrapping_add(1)));
        let changed = LinearFit::from_design(&(&m * tm.transpose()), t.outputs()).unwrap();
        let expect = tm.transpose().lu().solve(base.c_hat()).unwrap();
        prop_assert!(mat_rel_err(changed.c_hat(), &expect) <= 1e-10);
        prop_assert!(mat_rel_err(changed.h_matrix(), &(&tm * base.h_matrix() * tm.transpose())) <= 1e-10);
        prop_assert!(rel_err(changed.chi2_min(), base.chi2_min()) <= 1e-10);
        let shift = changed.evidence().unwrap().log_evidence - base.evidence().unwrap().log_evidence;
        let expected = -(n_x as f64) * tm.determinant().abs().ln();
        prop_assert!((shift - expected).abs() <= 1e-9);
    }

    #[test]
    fn duplicate_row_equals_double_weight(
        seed in any::<u64>(), n_a in 1usize..=3, degree in 0u32..=2, n_x in 1usize..=2, extra in 3usize..10, pick in any::<prop::sample::Index>(),
    ) {
        let (t, _, m) = instance(seed, n_a, degree, n_x, extra);
        let i = pick.index(t.n_samples());
        let dup_m = m.clone().insert_row(m.nrows(), 0.0);
        let mut dup_m = dup_m;
        dup_m.row_mut(m.nrows()).copy_from(&m.row(i));
        let mut dup_z = t.outputs().clone().insert_row(m.nrows(), 0.0);
        dup_z.row_mut(m.nrows()).copy_from(&t.outputs().row(i));
        let dup = LinearFit::from_design(&dup_m, &dup_z).unwrap();

        // weight 2 on row i via sqrt(W) scaling of the normal equations
        let mut wm = m.clone();
        let mut wz = t.outputs().clone();
        wm.row_mut(i).scale_mut(2f64.sqrt());
        wz.row_mut(i).scale_mut(2f64.sqrt());
        let weighted = LinearFit::from_design(&wm, &wz).unwrap();
        prop_assert!(mat_rel_err(dup.c_hat(), weighted.c_hat()) <= 1e-10);
        prop_assert!(mat_rel_err(dup.h_matrix(), weighted.h_matrix()) <= 1e-12);
        prop_assert!((dup.chi2_min() - weighted.chi2_min()).abs() <= 1e-10 * t.outputs().norm_squared());
    }

    #[test]
    fn coefficient_covariance_symmetric_psd(
        seed in any::<u64>(), n_a in 1usize..=3, degree in 0u32..=2, n_x in 1usize..=3, extra in 3usize..10,
    ) {
        let (t, spec, _) = instance(seed, n_a, degree, n_x, extra);
        let post = fit(&t, &spec).unwrap();
        let cov = post.linear().covariance_matrix().unwrap();
        prop_assert!(mat_rel_err(&cov, &cov.transpose()) <= 1e-12);
        let eig = cov.clone().symmetric_eigen().eigenvalues;
        prop_assert!(eig.min() >= -1e-12 * eig.max().abs());
        let n_p = spec.n_basis();
        for x in 0..n_x {
            for y in 0..n_x {
                if x != y {
                    prop_assert_eq!(post.coefficient_covariance(0, x, n_p - 1, y).unwrap(), 0.0);
                }
            }
        }
    }

    #[test]
    fn chi2_zero_iff_in_span(
        seed in any::<u64>(), n_a in 1usize..=3, degree in 0u32..=2, n_x in 1usize..=3, extra in 3usize..10,
    ) {
        let (t, _, m) = instance(seed, n_a, degree, n_x, extra);
        let noisy = LinearFit::from_design(&m, t.outputs()).unwrap();
        prop_assert!(noisy.chi2_min() > 1e-8 * t.outputs().norm_squared());
        prop_assert!(!noisy.is_exact_fit());
        let mut r = rng(seed ^ 7);
        let z = &m * DMatrix::from_fn(m.ncols(), n_x, |_, _| r.random_range(-2.0..2.0));
        let exact = LinearFit::from_design(&m, &z).unwrap();
        prop_assert!(exact.chi2_min() >= 0.0);
        prop_assert!(exact.chi2_min() <= 1e-20 * z.norm_squared().max(1.0));
    }
}
