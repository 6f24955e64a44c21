//! Propagation of the input-parameter posterior through a fitted surrogate.
//!
//! With basis moments `g_ν = E[Φ_ν(a)]` and `G_νν' = E[Φ_ν(a) Φ_ν'(a)]` over
//! the input posterior:
//!
//! ```text
//! E[z_x]            = gᵀ Ĉ_x
//! Cov_naive(x, x')  = Ĉ_xᵀ (G - g gᵀ) Ĉ_x'
//! surrogate term    = σ̂² tr(G H_s⁻¹)          (added to the diagonal only)
//! trust ratio_x     = σ̂² tr(G H_s⁻¹) / (Ĉ_xᵀ G Ĉ_x)
//! ```

use nalgebra::{DMatrix, DVector};

use crate::basis::{BasisEvaluator, BasisSpec};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::surrogate::{CoefficientPosterior, Dims, LinearFit};

/// Default threshold of the trust-ratio rule.
pub const DEFAULT_EPSILON: f64 = 1e-3;

/// Largest input-posterior weight that may be clamped into the domain.
pub const MAX_CLAMPED_WEIGHT: f64 = 0.01;

/// Weighted samples (draws or quadrature nodes) representing `p(a | d_exp)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputPosterior {
    samples: DMatrix<f64>,
    weights: Vec<f64>,
}

impl InputPosterior {
    /// Builds the posterior; `None` weights means uniform. Weights are
    /// renormalized when they do not sum to one within 1e-12.
    pub fn new(samples: DMatrix<f64>, weights: Option<Vec<f64>>) -> Result<Self> {
        let n = samples.nrows();
        if n == 0 || samples.ncols() == 0 {
            return Err(Error::contract("input posterior needs at least one sample"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("input posterior samples must be finite"));
        }
        let mut weights = weights.unwrap_or_else(|| vec![1.0 / n as f64; n]);
        if weights.len() != n {
            return Err(Error::contract(format!(
                "{} weights for {n} samples",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::contract("weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::contract("weights sum to zero"));
        }
        if (total - 1.0).abs() > 1e-12 {
            if (total - 1.0).abs() > 1e-6 {
                log::warn!("input-posterior weights sum to {total}; renormalizing");
            }
            weights.iter_mut().for_each(|w| *w /= total);
        }
        Ok(InputPosterior { samples, weights })
    }

    /// Single atom at `a` with weight one.
    pub fn point_mass(a: &[f64]) -> Self {
        InputPosterior {
            samples: DMatrix::from_row_slice(1, a.len(), a),
            weights: vec![1.0],
        }
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn n_params(&self) -> usize {
        self.samples.ncols()
    }
}

/// First and second weighted moments of the basis functions.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMoments {
    /// Basis the moments were computed for; `None` for raw features.
    pub spec: Option<BasisSpec>,
    pub g_vec: DVector<f64>,
    pub g_mat: DMatrix<f64>,
    pub n_clamped: usize,
    pub clamped_weight: f64,
}

impl BasisMoments {
    /// Moments of arbitrary feature rows (`N_j x N_p`) under `weights`.
    pub fn from_features(features: &DMatrix<f64>, weights: &[f64]) -> Result<Self> {
        if features.nrows() != weights.len() {
            return Err(Error::contract("feature rows and weights differ in length"));
        }
        let n_p = features.ncols();
        let mut acc = Accumulator::new(n_p);
        let mut row = vec![0.0; n_p];
        for (j, &w) in weights.iter().enumerate() {
            for (k, r) in row.iter_mut().enumerate() {
                *r = features[(j, k)];
            }
            acc.add(w, &row);
        }
        Ok(acc.finish(None))
    }

    pub fn n_basis(&self) -> usize {
        self.g_vec.len()
    }

    /// `G - g gᵀ`.
    pub fn centered(&self) -> DMatrix<f64> {
        &self.g_mat - &self.g_vec * self.g_vec.transpose()
    }
}

struct Accumulator {
    g: DVector<f64>,
    gm: DMatrix<f64>,
    n_clamped: usize,
    clamped_weight: f64,
}

impl Accumulator {
    fn new(n_p: usize) -> Self {
        Accumulator {
            g: DVector::zeros(n_p),
            gm: DMatrix::zeros(n_p, n_p),
            n_clamped: 0,
            clamped_weight: 0.0,
        }
    }

    fn add(&mut self, w: f64, phi: &[f64]) {
        let n = phi.len();
        for i in 0..n {
            let wi = w * phi[i];
            self.g[i] += wi;
            for (j, pj) in phi.iter().enumerate().skip(i) {
                self.gm[(i, j)] += wi * pj;
            }
        }
    }

    fn merge(mut self, other: Accumulator) -> Self {
        self.g += other.g;
        self.gm += other.gm;
        self.n_clamped += other.n_clamped;
        self.clamped_weight += other.clamped_weight;
        self
    }

    fn finish(mut self, spec: Option<BasisSpec>) -> BasisMoments {
        let n = self.g.len();
        for i in 0..n {
            for j in 0..i {
                self.gm[(i, j)] = self.gm[(j, i)];
            }
        }
        BasisMoments {
            spec,
            g_vec: self.g,
            g_mat: self.gm,
            n_clamped: self.n_clamped,
            clamped_weight: self.clamped_weight,
        }
    }
}

/// Weighted basis moments over the input posterior. Samples outside the
/// domain are clamped onto it and counted; more than 1% clamped weight is
/// an error.
pub fn basis_moments(spec: &BasisSpec, input: &InputPosterior, exec: Execution) -> Result<BasisMoments> {
    if input.n_params() != spec.n_params() {
        return Err(Error::contract(format!(
            "input posterior has {} parameters, basis expects {}",
            input.n_params(),
            spec.n_params()
        )));
    }
    let n_p = spec.n_basis();
    let samples = input.samples();
    let weights = input.weights();
    let acc = par::chunked_reduce(
        exec,
        input.len(),
        par::DEFAULT_CHUNK,
        |_, range| -> Result<Accumulator> {
            let mut acc = Accumulator::new(n_p);
            let mut eval = BasisEvaluator::new(spec);
            let mut phi = vec![0.0; n_p];
            let mut a = vec![0.0; samples.ncols()];
            for j in range {
                for (k, ak) in a.iter_mut().enumerate() {
                    *ak = samples[(j, k)];
                }
                if eval.eval_into(&a, true, &mut phi)? {
                    acc.n_clamped += 1;
                    acc.clamped_weight += weights[j];
                }
                acc.add(weights[j], &phi);
            }
            Ok(acc)
        },
        |a, b| Ok(a?.merge(b?)),
    )
    .expect("input posterior is non-empty")?;
    if acc.clamped_weight > MAX_CLAMPED_WEIGHT {
        return Err(Error::DomainCoverage {
            clamped_weight: acc.clamped_weight,
            n_clamped: acc.n_clamped,
        });
    }
    if acc.n_clamped > 0 {
        log::warn!(
            "{} input-posterior samples (weight {:.2e}) clamped into the basis domain",
            acc.n_clamped,
            acc.clamped_weight
        );
    }
    Ok(acc.finish(Some(spec.clone())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurrogateStatus {
    /// Surrogate uncertainty included in `cov_total`.
    Included,
    /// Surrogate uncertainty deliberately left out.
    Excluded,
    /// Requested but undefined because `(N_s - N_p) N_x <= 2`.
    Undefined,
}

impl SurrogateStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SurrogateStatus::Included => "included",
            SurrogateStatus::Excluded => "excluded",
            SurrogateStatus::Undefined => "covariance-undefined",
        }
    }
}

/// Propagated observable moments per site.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationResult {
    pub site_labels: Vec<String>,
    pub mean: Vec<f64>,
    pub cov_naive: DMatrix<f64>,
    pub cov_total: DMatrix<f64>,
    /// Variance added to every site, `σ̂² tr(G H_s⁻¹)`.
    pub surrogate_term: f64,
    /// `surrogate_term / cov_total_xx`.
    pub surrogate_share: Vec<f64>,
    /// Surrogate term over the uncentered second moment `Ĉ_xᵀ G Ĉ_x`.
    pub trust_ratio: Vec<f64>,
    /// Surrogate term over the naive variance, for diagnostics.
    pub trust_ratio_centered: Vec<f64>,
    pub epsilon: f64,
    pub trustworthy: Vec<bool>,
    pub status: SurrogateStatus,
}

impl PropagationResult {
    pub fn n_sites(&self) -> usize {
        self.mean.len()
    }

    pub fn var_naive(&self) -> Vec<f64> {
        self.cov_naive.diagonal().iter().copied().collect()
    }

    pub fn var_total(&self) -> Vec<f64> {
        self.cov_total.diagonal().iter().copied().collect()
    }
}

pub(crate) fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon.is_finite() && epsilon > 0.0 {
        Ok(())
    } else {
        Err(Error::contract(format!("epsilon = {epsilon} must be finite and positive")))
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        f64::INFINITY
    }
}

/// Shared assembly for plain and kernelized propagation.
///
/// `second_diag` holds the uncentered surrogate second moments per site and
/// `surrogate_term` the (possibly undefined) coefficient-uncertainty term.
#[allow(clippy::too_many_arguments)]
pub(crate) fn assemble(
    site_labels: Vec<String>,
    mean: Vec<f64>,
    cov_naive: DMatrix<f64>,
    second_diag: &[f64],
    surrogate_term: Option<f64>,
    dims: Dims,
    include_surrogate: bool,
    epsilon: f64,
) -> Result<PropagationResult> {
    check_epsilon(epsilon)?;
    let n_x = mean.len();
    let naive_diag: Vec<f64> = cov_naive.diagonal().iter().copied().collect();
    let (trust_ratio, trust_ratio_centered) = match surrogate_term {
        Some(s) => (
            second_diag.iter().map(|&d| ratio(s, d)).collect(),
            naive_diag.iter().map(|&d| ratio(s, d)).collect(),
        ),
        None => (vec![f64::NAN; n_x], vec![f64::NAN; n_x]),
    };
    let trustworthy = trust_ratio.iter().map(|&r: &f64| r < epsilon).collect();
    let mut result = PropagationResult {
        site_labels,
        mean,
        cov_total: cov_naive.clone(),
        cov_naive,
        surrogate_term: 0.0,
        surrogate_share: vec![0.0; n_x],
        trust_ratio,
        trust_ratio_centered,
        epsilon,
        trustworthy,
        status: SurrogateStatus::Excluded,
    };
    if !include_surrogate {
        return Ok(result);
    }
    let Some(s) = surrogate_term else {
        result.status = SurrogateStatus::Undefined;
        return Err(Error::CovarianceUndefined {
            n_s: dims.n_s,
            n_p: dims.n_p,
            n_x: dims.n_x,
            naive: Some(Box::new(result)),
        });
    };
    for x in 0..n_x {
        result.cov_total[(x, x)] += s;
    }
    result.surrogate_term = s;
    result.surrogate_share = (0..n_x)
        .map(|x| {
            let t = result.cov_total[(x, x)];
            if t > 0.0 {
                (s / t).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();
    result.status = SurrogateStatus::Included;
    Ok(result)
}

fn check_moments(fit: &LinearFit, moments: &BasisMoments) -> Result<()> {
    if moments.n_basis() != fit.dims().n_p {
        return Err(Error::contract(format!(
            "moments cover {} basis functions, surrogate has {}",
            moments.n_basis(),
            fit.dims().n_p
        )));
    }
    Ok(())
}

fn check_spec(post: &CoefficientPosterior, moments: &BasisMoments) -> Result<()> {
    match &moments.spec {
        Some(s) if s == post.spec() => Ok(()),
        _ => Err(Error::contract(
            "basis moments were computed for a different basis than the surrogate",
        )),
    }
}

/// `σ̂² tr(G H_s⁻¹)`, or `None` when the covariance is undefined.
pub fn surrogate_term(fit: &LinearFit, moments: &BasisMoments) -> Result<Option<f64>> {
    check_moments(fit, moments)?;
    Ok(fit
        .sigma2_hat()
        .map(|s2| s2 * moments.g_mat.component_mul(&fit.h_inverse()).sum()))
}

pub fn propagate_mean_linear(fit: &LinearFit, moments: &BasisMoments) -> Result<Vec<f64>> {
    check_moments(fit, moments)?;
    Ok((fit.c_hat().transpose() * &moments.g_vec).iter().copied().collect())
}

pub fn propagate_linear(
    fit: &LinearFit,
    moments: &BasisMoments,
    site_labels: Vec<String>,
    include_surrogate: bool,
    epsilon: f64,
) -> Result<PropagationResult> {
    let mean = propagate_mean_linear(fit, moments)?;
    let c = fit.c_hat();
    let mut cov_naive = c.transpose() * moments.centered() * c;
    symmetrize(&mut cov_naive);
    let second_diag: Vec<f64> = (0..c.ncols())
        .map(|x| {
            let cx = c.column(x);
            (cx.transpose() * &moments.g_mat * cx)[(0, 0)]
        })
        .collect();
    let term = surrogate_term(fit, moments)?;
    assemble(
        site_labels,
        mean,
        cov_naive,
        &second_diag,
        term,
        fit.dims(),
        include_surrogate,
        epsilon,
    )
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Observable mean `gᵀ Ĉ` per site.
pub fn propagate_mean(post: &CoefficientPosterior, moments: &BasisMoments) -> Result<Vec<f64>> {
    check_spec(post, moments)?;
    propagate_mean_linear(post.linear(), moments)
}

/// Naive and total observable covariance. On a degrees-of-freedom
/// violation with `include_surrogate` the error carries the naive result.
pub fn propagate_covariance(
    post: &CoefficientPosterior,
    moments: &BasisMoments,
    include_surrogate: bool,
    epsilon: f64,
) -> Result<PropagationResult> {
    check_spec(post, moments)?;
    propagate_linear(
        post.linear(),
        moments,
        post.site_labels().to_vec(),
        include_surrogate,
        epsilon,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrustReport {
    pub ratio: Vec<f64>,
    pub ratio_centered: Vec<f64>,
    pub trustworthy: Vec<bool>,
    pub epsilon: f64,
}

/// Trust ratio per site; a site is trustworthy when its ratio is below
/// `epsilon`. A vanishing denominator yields `+inf`.
pub fn trust_ratio(post: &CoefficientPosterior, moments: &BasisMoments, epsilon: f64) -> Result<TrustReport> {
    check_epsilon(epsilon)?;
    post.dims().check_covariance()?;
    let r = propagate_covariance(post, moments, true, epsilon)?;
    Ok(TrustReport {
        ratio: r.trust_ratio,
        ratio_centered: r.trust_ratio_centered,
        trustworthy: r.trustworthy,
        epsilon,
    })
}

/// Compound column index `site * n_times + time`.
pub fn flatten_spacetime(n_sites: usize, n_times: usize, site: usize, time: usize) -> Result<usize> {
    if site >= n_sites || time >= n_times {
        return Err(Error::contract(format!(
            "(site {site}, time {time}) outside {n_sites} x {n_times}"
        )));
    }
    Ok(site * n_times + time)
}

/// Inverse of [`flatten_spacetime`].
pub fn unflatten_spacetime(n_sites: usize, n_times: usize, index: usize) -> Result<(usize, usize)> {
    if n_times == 0 || index >= n_sites * n_times {
        return Err(Error::contract(format!(
            "compound index {index} outside {n_sites} x {n_times}"
        )));
    }
    Ok((index / n_times, index % n_times))
}
