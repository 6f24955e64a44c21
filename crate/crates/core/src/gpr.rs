//! Kernelized surrogate: the linear trend model with a Gaussian-process
//! likelihood covariance `Δ² K_s`.
//!
//! Replacing `χ²` by `(Z - M C)ᵀ K_s⁻¹ (Z - M C)` turns every closed form of
//! the plain analysis into its kernelized counterpart via
//! `H_s → H̃_s = M_sᵀ K_s⁻¹ M_s` and `χ²_min → χ̃²_min`. Internally this is a
//! plain fit of the whitened system `L⁻¹ M_s`, `L⁻¹ Z_s` with `L Lᵀ = K_s`.
//!
//! Predictions follow universal kriging: the trend `Φ(a)ᵀ Ĉ` plus the kernel
//! correction `k_*ᵀ K_s⁻¹ (Z_s - M_s Ĉ)`, with predictive variance
//! `σ̂² [k(a,a) - k_*ᵀ K_s⁻¹ k_* + rᵀ H̃_s⁻¹ r]`, `r = Φ(a) - M_sᵀ K_s⁻¹ k_*`.
//! The nugget enters `K_s` only; `k(a,a)` is the noise-free amplitude.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::basis::{build_design_matrix, BasisEvaluator, BasisSpec};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::propagate::{self, InputPosterior, PropagationResult, MAX_CLAMPED_WEIGHT};
use crate::surrogate::{EvidenceReport, LinearFit, TrainingSet};

/// Nugget relative to the amplitude when none is given.
pub const DEFAULT_RELATIVE_NUGGET: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    SquaredExponential,
}

#[derive(Debug, Deserialize)]
struct RawKernel {
    family: KernelFamily,
    amplitude2: f64,
    lengthscales: Vec<f64>,
    nugget: Option<f64>,
}

/// Squared-exponential covariance with per-dimension lengthscales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKernel")]
pub struct Kernel {
    family: KernelFamily,
    amplitude2: f64,
    lengthscales: Vec<f64>,
    nugget: f64,
}

impl TryFrom<RawKernel> for Kernel {
    type Error = Error;

    fn try_from(raw: RawKernel) -> Result<Self> {
        let nugget = raw.nugget.unwrap_or(DEFAULT_RELATIVE_NUGGET * raw.amplitude2);
        let k = Kernel::new(raw.amplitude2, raw.lengthscales, nugget)?;
        Ok(Kernel {
            family: raw.family,
            ..k
        })
    }
}

impl Kernel {
    pub fn new(amplitude2: f64, lengthscales: Vec<f64>, nugget: f64) -> Result<Self> {
        if !(amplitude2 > 0.0 && amplitude2.is_finite()) {
            return Err(Error::contract(format!("amplitude2 = {amplitude2} must be positive")));
        }
        if lengthscales.is_empty() || lengthscales.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::contract("lengthscales must be positive and finite"));
        }
        if !(nugget >= 0.0 && nugget.is_finite()) {
            return Err(Error::contract(format!("nugget = {nugget} must be non-negative")));
        }
        Ok(Kernel {
            family: KernelFamily::SquaredExponential,
            amplitude2,
            lengthscales,
            nugget,
        })
    }

    /// Kernel whose training covariance is exactly the identity and whose
    /// latent process vanishes: unit nugget, negligible amplitude and
    /// lengthscales. Reproduces the plain surrogate.
    pub fn white(n_params: usize) -> Self {
        Kernel {
            family: KernelFamily::SquaredExponential,
            amplitude2: f64::MIN_POSITIVE,
            lengthscales: vec![f64::MIN_POSITIVE; n_params],
            nugget: 1.0,
        }
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn amplitude2(&self) -> f64 {
        self.amplitude2
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn nugget(&self) -> f64 {
        self.nugget
    }

    pub fn n_params(&self) -> usize {
        self.lengthscales.len()
    }

    /// Multiplies amplitude and nugget by `s`.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        Kernel::new(self.amplitude2 * s, self.lengthscales.clone(), self.nugget * s)
    }

    /// Noise-free covariance `k(a, b)`.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a
            .iter()
            .zip(b)
            .zip(&self.lengthscales)
            .map(|((x, y), l)| {
                let d = (x - y) / l;
                d * d
            })
            .sum();
        self.amplitude2 * (-0.5 * r2).exp()
    }
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// Covariance between the rows of `a` (`m x N_a`) and `b` (`n x N_a`). When
/// both are the same point set the nugget is added to the diagonal.
pub fn kernel_matrix(kernel: &Kernel, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() != kernel.n_params() || b.ncols() != kernel.n_params() {
        return Err(Error::contract(format!(
            "points have {}/{} coordinates, kernel expects {}",
            a.ncols(),
            b.ncols(),
            kernel.n_params()
        )));
    }
    let ra: Vec<Vec<f64>> = (0..a.nrows()).map(|i| row(a, i)).collect();
    let rb: Vec<Vec<f64>> = (0..b.nrows()).map(|j| row(b, j)).collect();
    let mut k = DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| kernel.eval(&ra[i], &rb[j]));
    if a == b {
        for i in 0..a.nrows() {
            k[(i, i)] += kernel.nugget;
        }
    }
    Ok(k)
}

/// Posterior of the kernelized surrogate at fixed hyperparameters.
#[derive(Debug, Clone)]
pub struct GprPosterior {
    spec: BasisSpec,
    site_labels: Vec<String>,
    kernel: Kernel,
    inputs: DMatrix<f64>,
    design: DMatrix<f64>,
    k_chol: Cholesky<f64, Dyn>,
    logdet_k: f64,
    /// `K_s⁻¹ (Z_s - M_s Ĉ)`.
    alpha: DMatrix<f64>,
    fit: LinearFit,
}

pub fn fit_gpr(training: &TrainingSet, spec: &BasisSpec, kernel: &Kernel) -> Result<GprPosterior> {
    if training.n_params() != spec.n_params() {
        return Err(Error::contract("training inputs and basis differ in dimension"));
    }
    if training.n_samples() < spec.n_basis() {
        return Err(Error::Underdetermined {
            n_s: training.n_samples(),
            n_p: spec.n_basis(),
        });
    }
    let design = build_design_matrix(spec, training.inputs())?.into_matrix();
    let k = kernel_matrix(kernel, training.inputs(), training.inputs())?;
    let k_chol = Cholesky::new(k).ok_or(Error::KernelSingular)?;
    let l = k_chol.l();
    let m_w = l.solve_lower_triangular(&design).ok_or(Error::KernelSingular)?;
    let z_w = l
        .solve_lower_triangular(training.outputs())
        .ok_or(Error::KernelSingular)?;
    let fit = LinearFit::from_design(&m_w, &z_w)?;
    let resid = training.outputs() - &design * fit.c_hat();
    let alpha = k_chol.solve(&resid);
    let logdet_k = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(GprPosterior {
        spec: spec.clone(),
        site_labels: training.site_labels().to_vec(),
        kernel: kernel.clone(),
        inputs: training.inputs().clone(),
        design,
        k_chol,
        logdet_k,
        alpha,
        fit,
    })
}

/// Predictive moments at one input point.
#[derive(Debug, Clone, PartialEq)]
pub struct GprPrediction {
    pub mean: Vec<f64>,
    /// `k(a,a) - k_*ᵀ K_s⁻¹ k_*`, clamped at zero.
    pub kernel_factor: f64,
    /// `rᵀ H̃_s⁻¹ r`, the trend-coefficient uncertainty.
    pub coefficient_factor: f64,
    pub sigma2_hat: Option<f64>,
}

impl GprPrediction {
    /// Per-site predictive variance `σ̂² (kernel + coefficient factor)`.
    pub fn variance(&self) -> Option<f64> {
        self.sigma2_hat
            .map(|s2| s2 * (self.kernel_factor + self.coefficient_factor))
    }
}

impl GprPosterior {
    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn site_labels(&self) -> &[String] {
        &self.site_labels
    }

    /// The whitened fit: `Ĉ̃`, `H̃_s`, `χ̃²_min`, `σ̂²`.
    pub fn linear(&self) -> &LinearFit {
        &self.fit
    }

    pub fn c_hat_tilde(&self) -> &DMatrix<f64> {
        self.fit.c_hat()
    }

    pub fn chi2_tilde_min(&self) -> f64 {
        self.fit.chi2_min()
    }

    pub fn logdet_k(&self) -> f64 {
        self.logdet_k
    }

    pub fn k_cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.k_chol
    }

    /// Evidence with `H̃_s`, `χ̃²_min` and the `-(N_x/2) log|K_s|` term.
    pub fn evidence(&self) -> Result<EvidenceReport> {
        self.fit.evidence_with_kernel(self.logdet_k)
    }

    fn predict_with_phi(&self, a: &[f64], phi: &[f64]) -> GprPrediction {
        let n_s = self.inputs.nrows();
        let mut k_star = DVector::zeros(n_s);
        let mut xi = vec![0.0; self.inputs.ncols()];
        for i in 0..n_s {
            for (k, v) in xi.iter_mut().enumerate() {
                *v = self.inputs[(i, k)];
            }
            k_star[i] = self.kernel.eval(a, &xi);
        }
        let v = self.k_chol.solve(&k_star);
        let c = self.fit.c_hat();
        let mean = (0..c.ncols())
            .map(|x| {
                let trend: f64 = phi.iter().zip(c.column(x).iter()).map(|(p, c)| p * c).sum();
                trend + k_star.dot(&self.alpha.column(x))
            })
            .collect();
        let kernel_factor = (self.kernel.amplitude2 - k_star.dot(&v)).max(0.0);
        let r = DVector::from_column_slice(phi) - self.design.tr_mul(&v);
        let h_inv_r = self.fit.h_cholesky().solve(&r);
        GprPrediction {
            mean,
            kernel_factor,
            coefficient_factor: r.dot(&h_inv_r),
            sigma2_hat: self.fit.sigma2_hat(),
        }
    }

    pub fn predictive(&self, a: &[f64]) -> Result<GprPrediction> {
        let phi = crate::basis::eval_basis(&self.spec, a)?;
        Ok(self.predict_with_phi(a, &phi))
    }
}

pub fn gpr_predictive(post: &GprPosterior, a: &[f64]) -> Result<GprPrediction> {
    post.predictive(a)
}

struct GprAccumulator {
    mean: DVector<f64>,
    second: DMatrix<f64>,
    variance_factor: f64,
    n_clamped: usize,
    clamped_weight: f64,
}

/// First and second moments of the predictive mean over the input
/// posterior, with the raw surrogate term when `σ̂²` is defined.
struct GprMoments {
    mean: DVector<f64>,
    second: DMatrix<f64>,
    term: Option<f64>,
}

fn gpr_moments(post: &GprPosterior, input: &InputPosterior, exec: Execution) -> Result<GprMoments> {
    if input.n_params() != post.spec.n_params() {
        return Err(Error::contract("input posterior and basis differ in dimension"));
    }
    let n_x = post.fit.dims().n_x;
    let n_p = post.spec.n_basis();
    let samples = input.samples();
    let weights = input.weights();
    let acc = par::chunked_reduce(
        exec,
        input.len(),
        par::DEFAULT_CHUNK,
        |_, range| -> Result<GprAccumulator> {
            let mut acc = GprAccumulator {
                mean: DVector::zeros(n_x),
                second: DMatrix::zeros(n_x, n_x),
                variance_factor: 0.0,
                n_clamped: 0,
                clamped_weight: 0.0,
            };
            let mut eval = BasisEvaluator::new(&post.spec);
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
                let p = post.predict_with_phi(&a, &phi);
                let w = weights[j];
                for x in 0..n_x {
                    acc.mean[x] += w * p.mean[x];
                    for y in x..n_x {
                        acc.second[(x, y)] += w * p.mean[x] * p.mean[y];
                    }
                }
                acc.variance_factor += w * (p.kernel_factor + p.coefficient_factor);
            }
            Ok(acc)
        },
        |a, b| {
            let (mut a, b) = (a?, b?);
            a.mean += b.mean;
            a.second += b.second;
            a.variance_factor += b.variance_factor;
            a.n_clamped += b.n_clamped;
            a.clamped_weight += b.clamped_weight;
            Ok(a)
        },
    )
    .expect("input posterior is non-empty")?;
    if acc.clamped_weight > MAX_CLAMPED_WEIGHT {
        return Err(Error::DomainCoverage {
            clamped_weight: acc.clamped_weight,
            n_clamped: acc.n_clamped,
        });
    }
    let mut second = acc.second;
    for x in 0..n_x {
        for y in 0..x {
            second[(x, y)] = second[(y, x)];
        }
    }
    Ok(GprMoments {
        mean: acc.mean,
        second,
        term: post.fit.sigma2_hat().map(|s2| s2 * acc.variance_factor),
    })
}

fn assemble_moments(
    post: &GprPosterior,
    m: GprMoments,
    include_surrogate: bool,
    epsilon: f64,
) -> Result<PropagationResult> {
    let mut cov_naive = &m.second - &m.mean * m.mean.transpose();
    propagate::symmetrize(&mut cov_naive);
    let second_diag: Vec<f64> = m.second.diagonal().iter().copied().collect();
    propagate::assemble(
        post.site_labels.clone(),
        m.mean.iter().copied().collect(),
        cov_naive,
        &second_diag,
        m.term,
        post.fit.dims(),
        include_surrogate,
        epsilon,
    )
}

/// Propagates the input posterior through the kernelized surrogate at fixed
/// hyperparameters. The surrogate term is `σ̂² E[k(a,a) - k_*ᵀK⁻¹k_* + rᵀH̃⁻¹r]`.
pub fn propagate_gpr(
    post: &GprPosterior,
    input: &InputPosterior,
    include_surrogate: bool,
    epsilon: f64,
    exec: Execution,
) -> Result<PropagationResult> {
    propagate::check_epsilon(epsilon)?;
    let m = gpr_moments(post, input, exec)?;
    assemble_moments(post, m, include_surrogate, epsilon)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaPoint {
    pub kernel: Kernel,
    pub weight: f64,
}

#[derive(Debug, Deserialize)]
struct RawThetaGrid {
    points: Vec<ThetaPoint>,
}

/// Discrete hyperparameter grid with prior weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawThetaGrid")]
pub struct ThetaGrid {
    points: Vec<ThetaPoint>,
}

impl TryFrom<RawThetaGrid> for ThetaGrid {
    type Error = Error;

    fn try_from(raw: RawThetaGrid) -> Result<Self> {
        ThetaGrid::new(raw.points)
    }
}

impl ThetaGrid {
    pub fn new(mut points: Vec<ThetaPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::contract("theta grid is empty"));
        }
        if points.iter().any(|p| !(p.weight > 0.0 && p.weight.is_finite())) {
            return Err(Error::contract("theta grid weights must be positive"));
        }
        let total: f64 = points.iter().map(|p| p.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            if (total - 1.0).abs() > 1e-6 {
                log::warn!("theta grid weights sum to {total}; renormalizing");
            }
            points.iter_mut().for_each(|p| p.weight /= total);
        }
        Ok(ThetaGrid { points })
    }

    pub fn single(kernel: Kernel) -> Self {
        ThetaGrid {
            points: vec![ThetaPoint { kernel, weight: 1.0 }],
        }
    }

    pub fn points(&self) -> &[ThetaPoint] {
        &self.points
    }
}

/// How the grid components are weighted in the mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ThetaWeighting {
    /// Prior weights as given.
    #[default]
    Prior,
    /// Prior weights times the kernelized evidence, renormalized.
    Evidence,
}

/// Weighted mixture of per-θ posteriors.
#[derive(Debug, Clone)]
pub struct GprMixture {
    components: Vec<(f64, GprPosterior)>,
    /// Grid indices that failed to fit, with the reason.
    pub dropped: Vec<(usize, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixturePrediction {
    pub mean: Vec<f64>,
    /// Law-of-total-variance mixture variance per site, when every component
    /// has a defined `σ̂²`.
    pub variance: Option<Vec<f64>>,
}

pub fn marginalize_theta(
    training: &TrainingSet,
    spec: &BasisSpec,
    grid: &ThetaGrid,
    weighting: ThetaWeighting,
    exec: Execution,
) -> Result<GprMixture> {
    let fits = par::map_indices(exec, grid.points.len(), |i| {
        let post = fit_gpr(training, spec, &grid.points[i].kernel)?;
        let log_w = match weighting {
            ThetaWeighting::Prior => grid.points[i].weight.ln(),
            ThetaWeighting::Evidence => grid.points[i].weight.ln() + post.evidence()?.log_evidence,
        };
        Ok::<_, Error>((log_w, post))
    });
    let mut components = Vec::new();
    let mut dropped = Vec::new();
    for (i, r) in fits.into_iter().enumerate() {
        match r {
            Ok(c) => components.push(c),
            Err(e) => {
                log::warn!("theta grid point {i} dropped: {e}");
                dropped.push((i, e.to_string()));
            }
        }
    }
    if components.is_empty() {
        return Err(Error::AllFailed(dropped));
    }
    let max = components.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = components.iter().map(|c| (c.0 - max).exp()).sum();
    let components = components
        .into_iter()
        .map(|(lw, p)| ((lw - max).exp() / total, p))
        .collect();
    Ok(GprMixture {
        components,
        dropped,
    })
}

impl GprMixture {
    pub fn components(&self) -> &[(f64, GprPosterior)] {
        &self.components
    }

    pub fn predictive(&self, a: &[f64]) -> Result<MixturePrediction> {
        let preds = self
            .components
            .iter()
            .map(|(w, p)| Ok((*w, p.predictive(a)?)))
            .collect::<Result<Vec<_>>>()?;
        let n_x = preds[0].1.mean.len();
        let mean: Vec<f64> = (0..n_x)
            .map(|x| preds.iter().map(|(w, p)| w * p.mean[x]).sum())
            .collect();
        let variance = preds
            .iter()
            .map(|(_, p)| p.variance())
            .collect::<Option<Vec<_>>>()
            .map(|vars| {
                (0..n_x)
                    .map(|x| {
                        preds
                            .iter()
                            .zip(&vars)
                            .map(|((w, p), v)| w * (v + (p.mean[x] - mean[x]).powi(2)))
                            .sum()
                    })
                    .collect()
            });
        Ok(MixturePrediction { mean, variance })
    }

    /// Mixture of per-θ propagations. Means, second moments and surrogate
    /// terms are averaged with the mixture weights, so the mixture covariance
    /// includes the spread of the component means.
    pub fn propagate(
        &self,
        input: &InputPosterior,
        include_surrogate: bool,
        epsilon: f64,
        exec: Execution,
    ) -> Result<PropagationResult> {
        propagate::check_epsilon(epsilon)?;
        let first = &self.components[0].1;
        let n_x = first.fit.dims().n_x;
        let mut mixed = GprMoments {
            mean: DVector::zeros(n_x),
            second: DMatrix::zeros(n_x, n_x),
            term: Some(0.0),
        };
        for (w, post) in &self.components {
            let m = gpr_moments(post, input, exec)?;
            mixed.mean += m.mean * *w;
            mixed.second += m.second * *w;
            mixed.term = match (mixed.term, m.term) {
                (Some(t), Some(s)) => Some(t + w * s),
                _ => None,
            };
        }
        assemble_moments(first, mixed, include_surrogate, epsilon)
    }
}
