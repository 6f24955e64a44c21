//! Multivariate Legendre bases on an affinely scaled box.
//!
//! A basis function is a tensor product of univariate Legendre polynomials,
//! one per input parameter, evaluated at the coordinate mapped from
//! `[lo_k, hi_k]` onto `[-1, 1]`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative distance outside the domain that is silently clamped.
pub const DOMAIN_TOLERANCE: f64 = 1e-12;

/// Polynomial degree per input parameter.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultiIndex(pub Vec<u32>);

impl MultiIndex {
    pub fn zeros(n: usize) -> Self {
        MultiIndex(vec![0; n])
    }

    pub fn total_degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_constant(&self) -> bool {
        self.0.iter().all(|&e| e == 0)
    }
}

impl From<Vec<u32>> for MultiIndex {
    fn from(v: Vec<u32>) -> Self {
        MultiIndex(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Legendre,
}

/// All multi-indices of `n_params` entries with total degree at most
/// `degree`, in graded lexicographic order: by total degree, then by
/// decreasing exponent of the first parameter, then the second, and so on.
pub fn total_degree_index_set(n_params: usize, degree: u32) -> Vec<MultiIndex> {
    assert!(n_params >= 1, "n_params must be positive");
    let mut out = Vec::new();
    let mut current = vec![0u32; n_params];
    for d in 0..=degree {
        push_compositions(&mut current, 0, d, &mut out);
    }
    out
}

fn push_compositions(current: &mut [u32], pos: usize, remaining: u32, out: &mut Vec<MultiIndex>) {
    if pos + 1 == current.len() {
        current[pos] = remaining;
        out.push(MultiIndex(current.to_vec()));
        return;
    }
    for e in (0..=remaining).rev() {
        current[pos] = e;
        push_compositions(current, pos + 1, remaining - e, out);
    }
    current[pos] = 0;
}

#[derive(Debug, Deserialize)]
struct RawBasisSpec {
    family: Family,
    indices: Vec<MultiIndex>,
    domain: Vec<[f64; 2]>,
}

/// Basis family, ordered multi-index set and input domain.
///
/// Serialized as `{"family":"legendre","indices":[[...],...],"domain":[[lo,hi],...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBasisSpec")]
pub struct BasisSpec {
    family: Family,
    indices: Vec<MultiIndex>,
    domain: Vec<[f64; 2]>,
}

impl TryFrom<RawBasisSpec> for BasisSpec {
    type Error = Error;

    fn try_from(raw: RawBasisSpec) -> Result<Self> {
        BasisSpec::new(raw.family, raw.indices, raw.domain)
    }
}

impl BasisSpec {
    pub fn new(family: Family, indices: Vec<MultiIndex>, domain: Vec<[f64; 2]>) -> Result<Self> {
        if domain.is_empty() {
            return Err(Error::contract("basis domain must have at least one parameter"));
        }
        for (k, &[lo, hi]) in domain.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::contract(format!(
                    "domain interval {k} = [{lo}, {hi}] must be finite with lo < hi"
                )));
            }
        }
        if indices.is_empty() {
            return Err(Error::contract("basis needs at least one multi-index"));
        }
        if !indices[0].is_constant() {
            return Err(Error::contract("index 0 must be the constant multi-index"));
        }
        let mut seen = std::collections::HashSet::with_capacity(indices.len());
        for (i, idx) in indices.iter().enumerate() {
            if idx.len() != domain.len() {
                return Err(Error::contract(format!(
                    "multi-index {i} has {} entries, expected {}",
                    idx.len(),
                    domain.len()
                )));
            }
            if !seen.insert(idx) {
                return Err(Error::contract(format!("duplicate multi-index {:?}", idx.0)));
            }
        }
        Ok(BasisSpec {
            family,
            indices,
            domain,
        })
    }

    /// Total-degree Legendre basis on the given box.
    pub fn total_degree(degree: u32, domain: Vec<[f64; 2]>) -> Result<Self> {
        if domain.is_empty() {
            return Err(Error::contract("basis domain must have at least one parameter"));
        }
        let indices = total_degree_index_set(domain.len(), degree);
        BasisSpec::new(Family::Legendre, indices, domain)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    pub fn domain(&self) -> &[[f64; 2]] {
        &self.domain
    }

    /// Number of basis functions, `N_p`.
    pub fn n_basis(&self) -> usize {
        self.indices.len()
    }

    /// Number of input parameters, `N_a`.
    pub fn n_params(&self) -> usize {
        self.domain.len()
    }

    fn max_degrees(&self) -> Vec<usize> {
        (0..self.n_params())
            .map(|k| self.indices.iter().map(|m| m.0[k] as usize).max().unwrap_or(0))
            .collect()
    }

    /// Maps `a` into the reference cube. Coordinates outside the domain by
    /// more than the tolerance are an error unless `clamp_all` is set, in
    /// which case they are clamped too. Returns whether anything beyond the
    /// tolerance was clamped.
    pub fn reference_coords(&self, a: &[f64], clamp_all: bool) -> Result<(Vec<f64>, bool)> {
        if a.len() != self.n_params() {
            return Err(Error::contract(format!(
                "parameter vector has {} entries, basis expects {}",
                a.len(),
                self.n_params()
            )));
        }
        let mut clamped = false;
        let mut t = Vec::with_capacity(a.len());
        for (k, (&ak, &[lo, hi])) in a.iter().zip(&self.domain).enumerate() {
            let width = hi - lo;
            let excess = if ak < lo {
                (lo - ak) / width
            } else if ak > hi {
                (ak - hi) / width
            } else {
                0.0
            };
            let violation = || Error::DomainViolation {
                row: None,
                coord: k,
                value: ak,
                lo,
                hi,
            };
            if !ak.is_finite() {
                return Err(violation());
            }
            if excess > DOMAIN_TOLERANCE {
                if !clamp_all {
                    return Err(violation());
                }
                clamped = true;
            }
            let tk = 2.0 * (ak - lo) / width - 1.0;
            t.push(tk.clamp(-1.0, 1.0));
        }
        Ok((t, clamped))
    }

    fn eval_reference_into(&self, t: &[f64], max_deg: &[usize], table: &mut Vec<Vec<f64>>, out: &mut [f64]) {
        table.resize_with(t.len(), Vec::new);
        for (k, (&tk, &dk)) in t.iter().zip(max_deg).enumerate() {
            table[k].resize(dk + 1, 0.0);
            legendre_values(tk, &mut table[k]);
        }
        for (o, idx) in out.iter_mut().zip(&self.indices) {
            *o = idx
                .0
                .iter()
                .enumerate()
                .fold(1.0, |acc, (k, &e)| acc * table[k][e as usize]);
        }
    }

    /// Evaluates all basis functions at a reference-cube point.
    pub fn eval_reference(&self, t: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_basis()];
        let mut table = Vec::new();
        self.eval_reference_into(t, &self.max_degrees(), &mut table, &mut out);
        out
    }
}

/// Fills `out[n] = P_n(x)` for `n < out.len()` via the three-term recurrence.
pub fn legendre_values(x: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = x;
    }
    for n in 1..out.len().saturating_sub(1) {
        let nf = n as f64;
        out[n + 1] = ((2.0 * nf + 1.0) * x * out[n] - nf * out[n - 1]) / (nf + 1.0);
    }
}

/// Evaluates every basis function of `spec` at the parameter vector `a`.
pub fn eval_basis(spec: &BasisSpec, a: &[f64]) -> Result<Vec<f64>> {
    let (t, _) = spec.reference_coords(a, false)?;
    Ok(spec.eval_reference(&t))
}

/// Reusable evaluator that avoids per-call allocation in hot loops.
pub struct BasisEvaluator<'a> {
    spec: &'a BasisSpec,
    max_deg: Vec<usize>,
    table: Vec<Vec<f64>>,
}

impl<'a> BasisEvaluator<'a> {
    pub fn new(spec: &'a BasisSpec) -> Self {
        BasisEvaluator {
            spec,
            max_deg: spec.max_degrees(),
            table: Vec::new(),
        }
    }

    /// Writes `Phi(a)` into `out`; returns whether `a` had to be clamped
    /// beyond the tolerance (only possible with `clamp_all`).
    pub fn eval_into(&mut self, a: &[f64], clamp_all: bool, out: &mut [f64]) -> Result<bool> {
        let (t, clamped) = self.spec.reference_coords(a, clamp_all)?;
        self.spec
            .eval_reference_into(&t, &self.max_deg, &mut self.table, out);
        Ok(clamped)
    }
}

/// `N_s x N_p` matrix of basis evaluations at the training inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    entries: DMatrix<f64>,
}

impl DesignMatrix {
    /// Wraps an arbitrary feature matrix, e.g. a recombined basis.
    pub fn from_matrix(entries: DMatrix<f64>) -> Self {
        DesignMatrix { entries }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn n_rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n_basis(&self) -> usize {
        self.entries.ncols()
    }
}

/// Builds the design matrix for the rows of `samples` (`N_s x N_a`).
pub fn build_design_matrix(spec: &BasisSpec, samples: &DMatrix<f64>) -> Result<DesignMatrix> {
    let n_p = spec.n_basis();
    let mut entries = DMatrix::zeros(samples.nrows(), n_p);
    let mut eval = BasisEvaluator::new(spec);
    let mut row = vec![0.0; n_p];
    let mut a = vec![0.0; samples.ncols()];
    for i in 0..samples.nrows() {
        for (k, ak) in a.iter_mut().enumerate() {
            *ak = samples[(i, k)];
        }
        eval.eval_into(&a, false, &mut row).map_err(|e| match e {
            Error::DomainViolation {
                coord, value, lo, hi, ..
            } => Error::DomainViolation {
                row: Some(i),
                coord,
                value,
                lo,
                hi,
            },
            other => other,
        })?;
        for (j, &v) in row.iter().enumerate() {
            entries[(i, j)] = v;
        }
    }
    Ok(DesignMatrix { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn idx(v: &[u32]) -> MultiIndex {
        MultiIndex(v.to_vec())
    }

    #[test]
    fn index_sets_are_graded_lex() {
        assert_eq!(
            total_degree_index_set(1, 2),
            vec![idx(&[0]), idx(&[1]), idx(&[2])]
        );
        assert_eq!(
            total_degree_index_set(2, 2),
            vec![
                idx(&[0, 0]),
                idx(&[1, 0]),
                idx(&[0, 1]),
                idx(&[2, 0]),
                idx(&[1, 1]),
                idx(&[0, 2])
            ]
        );
        assert_eq!(total_degree_index_set(4, 2).len(), 15);
        assert_eq!(total_degree_index_set(3, 0), vec![idx(&[0, 0, 0])]);
    }

    #[test]
    fn index_set_counts_match_binomial() {
        fn binom(n: u64, k: u64) -> u64 {
            (1..=k).fold(1, |acc, i| acc * (n + 1 - i) / i)
        }
        for n in 1..=5usize {
            for d in 0..=5u32 {
                assert_eq!(
                    total_degree_index_set(n, d).len() as u64,
                    binom(n as u64 + d as u64, d as u64)
                );
            }
        }
    }

    #[test]
    fn simple_evaluations() {
        let spec = BasisSpec::total_degree(2, vec![[2.0, 6.0]]).unwrap();
        let v = eval_basis(&spec, &[4.0]).unwrap();
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 0.0);
        let top = eval_basis(&spec, &[6.0]).unwrap();
        assert_eq!(top[2], 1.0);
    }

    #[test]
    fn tiny_excursions_are_clamped_larger_ones_rejected() {
        let spec = BasisSpec::total_degree(1, vec![[0.0, 1.0], [-1.0, 1.0]]).unwrap();
        let v = eval_basis(&spec, &[1.0 + 5e-13, 0.0]).unwrap();
        assert_eq!(v[1], 1.0);
        match eval_basis(&spec, &[0.5, 1.01]) {
            Err(Error::DomainViolation { coord: 1, .. }) => {}
            other => panic!("expected domain violation, got {other:?}"),
        }
        assert!(eval_basis(&spec, &[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn spec_validation() {
        let dom = vec![[0.0, 1.0]];
        assert!(BasisSpec::new(Family::Legendre, vec![idx(&[1])], dom.clone()).is_err());
        assert!(BasisSpec::new(
            Family::Legendre,
            vec![idx(&[0]), idx(&[1]), idx(&[1])],
            dom.clone()
        )
        .is_err());
        assert!(BasisSpec::new(Family::Legendre, vec![idx(&[0])], vec![[1.0, 1.0]]).is_err());
        assert!(BasisSpec::new(Family::Legendre, vec![idx(&[0, 0])], dom).is_err());
    }

    #[test]
    fn json_shape_is_fixed() {
        let spec = BasisSpec::total_degree(1, vec![[-1.0, 1.0]]).unwrap();
        let s = serde_json::to_string(&spec).unwrap();
        assert_eq!(s, r#"{"family":"legendre","indices":[[0],[1]],"domain":[[-1.0,1.0]]}"#);
        let back: BasisSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, spec);
        let bad = r#"{"family":"legendre","indices":[[1]],"domain":[[-1.0,1.0]]}"#;
        assert!(serde_json::from_str::<BasisSpec>(bad).is_err());
    }

    #[test]
    fn design_matrix_examples() {
        let spec = BasisSpec::total_degree(1, vec![[-1.0, 1.0]]).unwrap();
        let samples = DMatrix::from_column_slice(3, 1, &[-1.0, 0.0, 1.0]);
        let m = build_design_matrix(&spec, &samples).unwrap();
        assert_eq!(
            m.matrix(),
            &DMatrix::from_row_slice(3, 2, &[1.0, -1.0, 1.0, 0.0, 1.0, 1.0])
        );

        let empty = build_design_matrix(&spec, &DMatrix::zeros(0, 1)).unwrap();
        assert_eq!((empty.n_rows(), empty.n_basis()), (0, 2));

        let bad = DMatrix::from_column_slice(2, 1, &[0.0, 3.0]);
        match build_design_matrix(&spec, &bad) {
            Err(Error::DomainViolation { row: Some(1), .. }) => {}
            other => panic!("expected row-tagged violation, got {other:?}"),
        }
    }

    #[test]
    fn design_matrix_rows_reproduce_evaluation() {
        let spec = BasisSpec::total_degree(2, vec![[-1.0, 1.0], [0.0, 2.0], [-3.0, 5.0], [1.0, 1.5]])
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples = DMatrix::from_fn(100, 4, |_, k| {
            let [lo, hi] = spec.domain()[k];
            rng.random_range(lo..=hi)
        });
        let m = build_design_matrix(&spec, &samples).unwrap();
        assert_eq!((m.n_rows(), m.n_basis()), (100, 15));
        for i in 0..100 {
            assert_eq!(m.matrix()[(i, 0)], 1.0);
            let a: Vec<f64> = samples.row(i).iter().copied().collect();
            let row = eval_basis(&spec, &a).unwrap();
            for (j, v) in row.iter().enumerate() {
                assert_eq!(v.to_bits(), m.matrix()[(i, j)].to_bits());
            }
        }
    }

    #[test]
    fn legendre_recurrence_matches_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = vec![0.0; 7];
        for _ in 0..200 {
            let x: f64 = rng.random_range(-1.0..=1.0);
            legendre_values(x, &mut p);
            assert_eq!(p[0], 1.0);
            assert_eq!(p[1], x);
            assert_abs_diff_eq!(p[2], 0.5 * (3.0 * x * x - 1.0), epsilon = 1e-14);
            assert_abs_diff_eq!(p[3], 0.5 * (5.0 * x.powi(3) - 3.0 * x), epsilon = 1e-14);
            for n in 1..6 {
                let nf = n as f64;
                let resid =
                    (nf + 1.0) * p[n + 1] - (2.0 * nf + 1.0) * x * p[n] + nf * p[n - 1];
                assert!(resid.abs() <= 1e-14, "n={n} resid={resid}");
            }
        }
        legendre_values(1.0, &mut p);
        assert!(p.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn affine_map_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let lo: f64 = rng.random_range(-10.0..0.0);
            let hi = lo + rng.random_range(0.1..10.0);
            let spec = BasisSpec::total_degree(4, vec![[lo, hi]]).unwrap();
            let reference = BasisSpec::total_degree(4, vec![[-1.0, 1.0]]).unwrap();
            let a = rng.random_range(lo..=hi);
            let t = 2.0 * (a - lo) / (hi - lo) - 1.0;
            let lhs = eval_basis(&spec, &[a]).unwrap();
            let rhs = eval_basis(&reference, &[t]).unwrap();
            for (l, r) in lhs.iter().zip(&rhs) {
                assert_abs_diff_eq!(l, r, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn tensor_product_structure() {
        let uni = BasisSpec::total_degree(4, vec![[-1.0, 1.0]]).unwrap();
        let bi = BasisSpec::total_degree(8, vec![[-1.0, 1.0], [-1.0, 1.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (x, y): (f64, f64) = (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
            let px = eval_basis(&uni, &[x]).unwrap();
            let py = eval_basis(&uni, &[y]).unwrap();
            let pxy = eval_basis(&bi, &[x, y]).unwrap();
            for (nu, m) in bi.indices().iter().enumerate() {
                let (i, j) = (m.0[0] as usize, m.0[1] as usize);
                if i <= 4 && j <= 4 {
                    assert_abs_diff_eq!(pxy[nu], px[i] * py[j], epsilon = 1e-14);
                }
            }
        }
    }
}
