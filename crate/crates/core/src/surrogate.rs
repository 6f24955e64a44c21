//! Bayesian analysis of a generalized linear surrogate.
//!
//! With a Gaussian likelihood of unknown scale `Δ` (Jeffreys prior `1/Δ`) and
//! a flat prior on the coefficients, the coefficient posterior is a matrix
//! Student-t:
//!
//! ```text
//! p(C | Z_s) ∝ χ²(C)^(-N_sx/2),   χ²(C) = χ²_min + tr{(C - Ĉ)ᵀ H_s (C - Ĉ)}
//! Ĉ = H_s⁻¹ M_sᵀ Z_s,   H_s = M_sᵀ M_s
//! Cov(C_νx, C_ν'x') = σ̂² (H_s⁻¹)_νν' δ_xx',   σ̂² = χ²_min / ((N_s - N_p) N_x - 2)
//! ```
//!
//! `Ĉ` and `χ²_min` come from a thin QR factorization of the design matrix.
//! Solves and log-determinants use the Cholesky factor of the explicit Gram
//! matrix `H_s`, which is also what the posterior artifact stores, so a
//! reloaded posterior reproduces downstream results bit for bit.

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::basis::{build_design_matrix, eval_basis, BasisSpec, DesignMatrix};
use crate::error::{Error, Result};
use crate::par::{self, Execution};

/// Largest accepted condition number of the design matrix.
pub const MAX_CONDITION: f64 = 1e12;

/// Smallest `χ²_min` for which the evidence is evaluated.
pub const CHI2_FLOOR: f64 = 1e-300;

/// `χ²_min` at or below this fraction of `‖Z_s‖²` is roundoff of an exact fit.
pub const CHI2_RELATIVE_FLOOR: f64 = 1e-24;

/// Simulation design points and observables, `D_sim = {A_s, Z_s}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    inputs: DMatrix<f64>,
    outputs: DMatrix<f64>,
    site_labels: Vec<String>,
}

impl TrainingSet {
    pub fn new(inputs: DMatrix<f64>, outputs: DMatrix<f64>, site_labels: Vec<String>) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::contract("training set needs at least one sample"));
        }
        if inputs.nrows() != outputs.nrows() {
            return Err(Error::contract(format!(
                "inputs have {} rows but outputs have {}",
                inputs.nrows(),
                outputs.nrows()
            )));
        }
        if outputs.ncols() == 0 || inputs.ncols() == 0 {
            return Err(Error::contract("training set needs at least one input and one site"));
        }
        if site_labels.len() != outputs.ncols() {
            return Err(Error::contract(format!(
                "{} site labels for {} output columns",
                site_labels.len(),
                outputs.ncols()
            )));
        }
        if let Some(((i, j), v)) = find_non_finite(&inputs) {
            return Err(Error::contract(format!("input ({i}, {j}) = {v} is not finite")));
        }
        if let Some(((i, j), v)) = find_non_finite(&outputs) {
            return Err(Error::contract(format!("output ({i}, {j}) = {v} is not finite")));
        }
        Ok(TrainingSet {
            inputs,
            outputs,
            site_labels,
        })
    }

    /// Training set with generated labels `x0, x1, ...`.
    pub fn unlabeled(inputs: DMatrix<f64>, outputs: DMatrix<f64>) -> Result<Self> {
        let labels = (0..outputs.ncols()).map(|x| format!("x{x}")).collect();
        TrainingSet::new(inputs, outputs, labels)
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn outputs(&self) -> &DMatrix<f64> {
        &self.outputs
    }

    pub fn site_labels(&self) -> &[String] {
        &self.site_labels
    }

    pub fn n_samples(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn n_sites(&self) -> usize {
        self.outputs.ncols()
    }
}

fn find_non_finite(m: &DMatrix<f64>) -> Option<((usize, usize), f64)> {
    (0..m.nrows())
        .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
        .map(|ij| (ij, m[ij]))
        .find(|(_, v)| !v.is_finite())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_s: usize,
    pub n_p: usize,
    pub n_x: usize,
}

impl Dims {
    /// `(N_s - N_p) N_x - 2`, the denominator of `σ̂²`.
    pub fn dof_denominator(&self) -> i64 {
        (self.n_s as i64 - self.n_p as i64) * self.n_x as i64 - 2
    }

    pub fn covariance_defined(&self) -> bool {
        self.dof_denominator() > 0
    }

    /// `N_sx - N_bx`, the Student-t degrees of freedom.
    pub fn student_dof(&self) -> i64 {
        (self.n_s as i64 - self.n_p as i64) * self.n_x as i64
    }

    pub fn check_covariance(&self) -> Result<()> {
        if self.covariance_defined() {
            Ok(())
        } else {
            Err(self.covariance_error())
        }
    }

    pub(crate) fn covariance_error(&self) -> Error {
        Error::CovarianceUndefined {
            n_s: self.n_s,
            n_p: self.n_p,
            n_x: self.n_x,
            naive: None,
        }
    }
}

/// Sum of squared residuals `tr{(Z - M C)ᵀ (Z - M C)}`.
pub fn chi2(training: &TrainingSet, design: &DesignMatrix, coeffs: &DMatrix<f64>) -> Result<f64> {
    chi2_raw(design.matrix(), training.outputs(), coeffs)
}

pub(crate) fn chi2_raw(m: &DMatrix<f64>, z: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() != z.nrows() || m.ncols() != c.nrows() || z.ncols() != c.ncols() {
        return Err(Error::contract(format!(
            "non-conformable shapes: M {}x{}, Z {}x{}, C {}x{}",
            m.nrows(),
            m.ncols(),
            z.nrows(),
            z.ncols(),
            c.nrows(),
            c.ncols()
        )));
    }
    Ok((z - m * c).norm_squared())
}

/// Least-squares fit of arbitrary features: everything the posterior needs
/// that does not depend on how the features were produced.
#[derive(Debug, Clone)]
pub struct LinearFit {
    c_hat: DMatrix<f64>,
    h: DMatrix<f64>,
    h_chol: Cholesky<f64, Dyn>,
    chi2_min: f64,
    sigma2_hat: Option<f64>,
    dims: Dims,
    condition: Option<f64>,
    z_norm2: Option<f64>,
}

impl LinearFit {
    /// Fits `outputs ≈ design · C`.
    pub fn from_design(design: &DMatrix<f64>, outputs: &DMatrix<f64>) -> Result<Self> {
        let (n_s, n_p) = design.shape();
        if outputs.nrows() != n_s {
            return Err(Error::contract(format!(
                "design has {n_s} rows but outputs have {}",
                outputs.nrows()
            )));
        }
        if n_s < n_p {
            return Err(Error::Underdetermined { n_s, n_p });
        }
        let condition = check_conditioning(design)?;

        let qr = design.clone().qr();
        let qtz = qr.q().tr_mul(outputs);
        let c_hat = qr
            .r()
            .solve_upper_triangular(&qtz)
            .ok_or(Error::SingularDesign {
                condition: f64::INFINITY,
                columns: Vec::new(),
            })?;
        let chi2_min = (outputs - design * &c_hat).norm_squared();

        let h = gram(design);
        let mut fit = LinearFit::from_parts(c_hat, h, chi2_min, n_s)?;
        fit.condition = Some(condition);
        fit.z_norm2 = Some(outputs.norm_squared());
        Ok(fit)
    }

    /// Rebuilds a fit from stored quantities, re-factorizing `H_s`.
    pub fn from_parts(c_hat: DMatrix<f64>, h: DMatrix<f64>, chi2_min: f64, n_s: usize) -> Result<Self> {
        let n_p = c_hat.nrows();
        if h.shape() != (n_p, n_p) {
            return Err(Error::contract(format!(
                "H has shape {:?}, expected {n_p}x{n_p}",
                h.shape()
            )));
        }
        if !(chi2_min >= 0.0 && chi2_min.is_finite()) {
            return Err(Error::contract(format!("chi2_min = {chi2_min} must be finite and >= 0")));
        }
        for i in 0..n_p {
            for j in 0..i {
                if h[(i, j)] != h[(j, i)] {
                    return Err(Error::contract("H is not symmetric"));
                }
            }
        }
        let h_chol = Cholesky::new(h.clone()).ok_or(Error::SingularDesign {
            condition: f64::INFINITY,
            columns: Vec::new(),
        })?;
        let dims = Dims {
            n_s,
            n_p,
            n_x: c_hat.ncols(),
        };
        let sigma2_hat = dims
            .covariance_defined()
            .then(|| chi2_min / dims.dof_denominator() as f64);
        Ok(LinearFit {
            c_hat,
            h,
            h_chol,
            chi2_min,
            sigma2_hat,
            dims,
            condition: None,
            z_norm2: None,
        })
    }

    /// Posterior mean `Ĉ`, `N_p x N_x`.
    pub fn c_hat(&self) -> &DMatrix<f64> {
        &self.c_hat
    }

    /// Gram matrix `H_s = M_sᵀ M_s`.
    pub fn h_matrix(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn h_cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.h_chol
    }

    pub fn h_inverse(&self) -> DMatrix<f64> {
        self.h_chol.inverse()
    }

    pub fn logdet_h(&self) -> f64 {
        2.0 * self.h_chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn chi2_min(&self) -> f64 {
        self.chi2_min
    }

    /// Bayesian estimate of `Δ²`; `None` when `(N_s - N_p) N_x <= 2`.
    pub fn sigma2_hat(&self) -> Option<f64> {
        self.sigma2_hat
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Condition number of the design matrix, when fitted from one.
    pub fn condition(&self) -> Option<f64> {
        self.condition
    }

    pub fn coefficient_covariance(&self, nu: usize, x: usize, nu_p: usize, x_p: usize) -> Result<f64> {
        let Dims { n_p, n_x, .. } = self.dims;
        if nu >= n_p || nu_p >= n_p || x >= n_x || x_p >= n_x {
            return Err(Error::contract(format!(
                "index ({nu},{x}),({nu_p},{x_p}) out of range for {n_p}x{n_x} coefficients"
            )));
        }
        let s2 = self.sigma2_hat.ok_or_else(|| self.dims.covariance_error())?;
        if x != x_p {
            return Ok(0.0);
        }
        // single column of H⁻¹
        let mut e = DMatrix::zeros(n_p, 1);
        e[(nu_p, 0)] = 1.0;
        self.h_chol.solve_mut(&mut e);
        Ok(s2 * e[(nu, 0)])
    }

    /// Full `N_bx x N_bx` coefficient covariance with compound index
    /// `l = x * N_p + ν`.
    pub fn covariance_matrix(&self) -> Result<DMatrix<f64>> {
        let s2 = self.sigma2_hat.ok_or_else(|| self.dims.covariance_error())?;
        let Dims { n_p, n_x, .. } = self.dims;
        let hinv = self.h_inverse() * s2;
        let mut out = DMatrix::zeros(n_p * n_x, n_p * n_x);
        for x in 0..n_x {
            out.view_mut((x * n_p, x * n_p), (n_p, n_p)).copy_from(&hinv);
        }
        Ok(out)
    }

    /// True when `χ²_min` is indistinguishable from an exact interpolation.
    pub fn is_exact_fit(&self) -> bool {
        !(self.chi2_min >= CHI2_FLOOR)
            || self
                .z_norm2
                .is_some_and(|z2| self.chi2_min <= CHI2_RELATIVE_FLOOR * z2)
    }

    pub fn evidence(&self) -> Result<EvidenceReport> {
        self.evidence_with_kernel(0.0)
    }

    pub(crate) fn evidence_with_kernel(&self, logdet_k: f64) -> Result<EvidenceReport> {
        let rep = evidence_from_parts(self.dims, self.logdet_h(), self.chi2_min, logdet_k)?;
        if self.is_exact_fit() {
            return Err(Error::InterpolationDegenerate {
                chi2_min: self.chi2_min,
            });
        }
        Ok(rep)
    }

    pub fn predict_features(&self, phi: &[f64]) -> Vec<f64> {
        (0..self.dims.n_x)
            .map(|x| phi.iter().zip(self.c_hat.column(x).iter()).map(|(p, c)| p * c).sum())
            .collect()
    }
}

pub(crate) fn gram(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut h = m.tr_mul(m);
    let n = h.nrows();
    for i in 0..n {
        for j in 0..i {
            h[(j, i)] = h[(i, j)];
        }
    }
    h
}

fn check_conditioning(m: &DMatrix<f64>) -> Result<f64> {
    if m.ncols() == 0 {
        return Err(Error::contract("design matrix has no columns"));
    }
    let svd = m.clone().svd(false, true);
    let s = &svd.singular_values;
    let s_max = s.iter().cloned().fold(0.0, f64::max);
    let s_min = s.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if s_min > 0.0 { s_max / s_min } else { f64::INFINITY };
    if condition.is_finite() && condition <= MAX_CONDITION && s_max.is_finite() {
        return Ok(condition);
    }
    let v_t = svd.v_t.expect("right singular vectors were requested");
    let mut columns = Vec::new();
    for (i, &si) in s.iter().enumerate() {
        if si <= s_max / MAX_CONDITION || si == s_min {
            for j in 0..m.ncols() {
                if v_t[(i, j)].abs() > 0.1 && !columns.contains(&j) {
                    columns.push(j);
                }
            }
        }
    }
    columns.sort_unstable();
    Err(Error::SingularDesign { condition, columns })
}

/// Log-evidence broken into its additive terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvidenceComponents {
    /// `log Ω_{N_bx}` with `Ω_n = 2 π^{n/2} / Γ(n/2)`.
    pub log_solid_angle: f64,
    /// `-½ log|𝐇|` for the block matrix `𝐇 = H_s ⊗ 1_{N_x}`, i.e. `-(N_x/2) log|H_s|`.
    pub neg_half_logdet_h: f64,
    /// `-((N_sx - N_bx)/2) log χ²_min`.
    pub chi2_exponent_term: f64,
    /// `log Γ(N_bx/2) + log Γ((N_sx-N_bx)/2) - log Γ(N_sx/2)`.
    pub log_gamma_terms: f64,
    /// `-(N_x/2) log|K_s|` for kernelized likelihoods, zero otherwise.
    pub neg_half_logdet_k: f64,
}

impl EvidenceComponents {
    pub fn sum(&self) -> f64 {
        self.log_solid_angle
            + self.neg_half_logdet_h
            + self.chi2_exponent_term
            + self.log_gamma_terms
            + self.neg_half_logdet_k
    }
}

/// Evidence of a surrogate model class for the training data.
///
/// The flat coefficient prior is improper, so only differences between
/// models fitted to the same data are meaningful. The reported value pairs
/// the full solid angle with the complete Beta function and is therefore
/// twice the normalizing integral of `χ²(C)^(-N_sx/2)`; see
/// [`EvidenceReport::log_normalizer`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvidenceReport {
    pub log_evidence: f64,
    pub components: EvidenceComponents,
    pub n_sx: usize,
    pub n_bx: usize,
}

impl EvidenceReport {
    /// `log ∫ χ²(C)^(-N_sx/2) dC`, i.e. `log_evidence - log 2`.
    pub fn log_normalizer(&self) -> f64 {
        self.log_evidence - std::f64::consts::LN_2
    }
}

pub(crate) fn evidence_from_parts(dims: Dims, logdet_h: f64, chi2_min: f64, logdet_k: f64) -> Result<EvidenceReport> {
    let n_sx = dims.n_s * dims.n_x;
    let n_bx = dims.n_p * dims.n_x;
    if n_sx <= n_bx {
        return Err(Error::EvidenceUndefined { n_sx, n_bx });
    }
    if !(chi2_min >= CHI2_FLOOR) {
        return Err(Error::InterpolationDegenerate { chi2_min });
    }
    let nb = n_bx as f64;
    let ns = n_sx as f64;
    let nx = dims.n_x as f64;
    let components = EvidenceComponents {
        log_solid_angle: log_solid_angle(n_bx),
        neg_half_logdet_h: -0.5 * nx * logdet_h,
        chi2_exponent_term: -0.5 * (ns - nb) * chi2_min.ln(),
        log_gamma_terms: ln_gamma(nb / 2.0) + ln_gamma((ns - nb) / 2.0) - ln_gamma(ns / 2.0),
        neg_half_logdet_k: -0.5 * nx * logdet_k,
    };
    Ok(EvidenceReport {
        log_evidence: components.sum(),
        components,
        n_sx,
        n_bx,
    })
}

/// `log(2 π^{n/2} / Γ(n/2))`.
pub fn log_solid_angle(n: usize) -> f64 {
    let nf = n as f64;
    std::f64::consts::LN_2 + 0.5 * nf * std::f64::consts::PI.ln() - ln_gamma(nf / 2.0)
}

/// Exact Student-t posterior of the surrogate coefficients.
#[derive(Debug, Clone)]
pub struct CoefficientPosterior {
    spec: BasisSpec,
    site_labels: Vec<String>,
    fit: LinearFit,
}

impl CoefficientPosterior {
    pub fn from_fit(spec: BasisSpec, site_labels: Vec<String>, fit: LinearFit) -> Result<Self> {
        if fit.dims().n_p != spec.n_basis() {
            return Err(Error::contract(format!(
                "fit has {} coefficients, basis has {}",
                fit.dims().n_p,
                spec.n_basis()
            )));
        }
        if site_labels.len() != fit.dims().n_x {
            return Err(Error::contract("site label count does not match the fit"));
        }
        Ok(CoefficientPosterior {
            spec,
            site_labels,
            fit,
        })
    }

    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    pub fn site_labels(&self) -> &[String] {
        &self.site_labels
    }

    pub fn linear(&self) -> &LinearFit {
        &self.fit
    }

    pub fn c_hat(&self) -> &DMatrix<f64> {
        self.fit.c_hat()
    }

    pub fn chi2_min(&self) -> f64 {
        self.fit.chi2_min()
    }

    pub fn sigma2_hat(&self) -> Option<f64> {
        self.fit.sigma2_hat()
    }

    pub fn dims(&self) -> Dims {
        self.fit.dims()
    }

    pub fn coefficient_covariance(&self, nu: usize, x: usize, nu_p: usize, x_p: usize) -> Result<f64> {
        self.fit.coefficient_covariance(nu, x, nu_p, x_p)
    }

    /// Posterior-mean surrogate prediction `Φ(a)ᵀ Ĉ` per site.
    pub fn predict_mean(&self, a: &[f64]) -> Result<Vec<f64>> {
        let phi = eval_basis(&self.spec, a)?;
        Ok(self.fit.predict_features(&phi))
    }
}

pub fn fit(training: &TrainingSet, spec: &BasisSpec) -> Result<CoefficientPosterior> {
    if training.n_params() != spec.n_params() {
        return Err(Error::contract(format!(
            "training inputs have {} parameters, basis expects {}",
            training.n_params(),
            spec.n_params()
        )));
    }
    if training.n_samples() < spec.n_basis() {
        return Err(Error::Underdetermined {
            n_s: training.n_samples(),
            n_p: spec.n_basis(),
        });
    }
    let design = build_design_matrix(spec, training.inputs())?;
    let fit = LinearFit::from_design(design.matrix(), training.outputs())?;
    CoefficientPosterior::from_fit(spec.clone(), training.site_labels().to_vec(), fit)
}

pub fn log_evidence(training: &TrainingSet, spec: &BasisSpec) -> Result<EvidenceReport> {
    let n_sx = training.n_samples() * training.n_sites();
    let n_bx = spec.n_basis() * training.n_sites();
    if n_sx <= n_bx {
        return Err(Error::EvidenceUndefined { n_sx, n_bx });
    }
    fit(training, spec)?.linear().evidence()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelScore {
    /// Position of the spec in the input list.
    pub id: usize,
    pub n_basis: usize,
    pub log_evidence: f64,
    pub probability: f64,
}

#[derive(Debug)]
pub struct ModelComparison {
    /// Successful specs, best first.
    pub ranked: Vec<ModelScore>,
    pub failures: Vec<(usize, Error)>,
}

/// Ranks candidate bases by evidence; failures are reported per spec.
pub fn compare_models(training: &TrainingSet, specs: &[BasisSpec], exec: Execution) -> Result<ModelComparison> {
    if specs.is_empty() {
        return Err(Error::contract("no candidate models"));
    }
    let results = par::map_indices(exec, specs.len(), |i| log_evidence(training, &specs[i]));
    let mut ranked = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in results.into_iter().enumerate() {
        match r {
            Ok(rep) => ranked.push(ModelScore {
                id,
                n_basis: specs[id].n_basis(),
                log_evidence: rep.log_evidence,
                probability: 0.0,
            }),
            Err(e) => failures.push((id, e)),
        }
    }
    if ranked.is_empty() {
        return Err(Error::AllFailed(
            failures.into_iter().map(|(i, e)| (i, e.to_string())).collect(),
        ));
    }
    let max = ranked.iter().map(|m| m.log_evidence).fold(f64::NEG_INFINITY, f64::max);
    let norm: f64 = ranked.iter().map(|m| (m.log_evidence - max).exp()).sum();
    for m in &mut ranked {
        m.probability = (m.log_evidence - max).exp() / norm;
    }
    ranked.sort_by(|a, b| {
        b.log_evidence
            .total_cmp(&a.log_evidence)
            .then(a.n_basis.cmp(&b.n_basis))
            .then(a.id.cmp(&b.id))
    });
    Ok(ModelComparison { ranked, failures })
}

/// Draws from the matrix Student-t coefficient posterior:
/// `C = Ĉ + L U sqrt(χ²_min / g)` with `L Lᵀ = H_s⁻¹`, `U` standard normal and
/// `g ~ χ²(N_sx - N_bx)`.
#[derive(Debug, Clone)]
pub struct CoefficientSampler {
    c_hat: DMatrix<f64>,
    /// Upper-triangular `Lᵀ` of the Cholesky factor of `H_s`.
    l_t: DMatrix<f64>,
    chi2_min: f64,
    chi: ChiSquared<f64>,
}

impl CoefficientSampler {
    pub fn new(fit: &LinearFit) -> Result<Self> {
        fit.dims().check_covariance()?;
        let dof = fit.dims().student_dof() as f64;
        Ok(CoefficientSampler {
            c_hat: fit.c_hat().clone(),
            l_t: fit.h_cholesky().l().transpose(),
            chi2_min: fit.chi2_min(),
            chi: ChiSquared::new(dof).map_err(|e| Error::contract(e.to_string()))?,
        })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        let (n_p, n_x) = self.c_hat.shape();
        let mut u = DMatrix::from_fn(n_p, n_x, |_, _| rng.sample::<f64, _>(StandardNormal));
        self.l_t.solve_upper_triangular_mut(&mut u);
        let g = self.chi.sample(rng);
        let scale = (self.chi2_min / g).sqrt();
        &self.c_hat + u * scale
    }
}

/// Deterministic per-chunk generator: chunk `c` uses stream `c` of the seed.
pub fn chunk_rng(seed: u64, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk as u64);
    rng
}

/// `n` posterior draws, reproducible for a fixed seed.
pub fn sample_coefficients(post: &CoefficientPosterior, n: usize, seed: u64) -> Result<Vec<DMatrix<f64>>> {
    let sampler = CoefficientSampler::new(post.linear())?;
    let chunks = par::chunked_reduce(
        Execution::Parallel,
        n,
        par::DEFAULT_CHUNK,
        |c, range| {
            let mut rng = chunk_rng(seed, c);
            range.map(|_| sampler.draw(&mut rng)).collect::<Vec<_>>()
        },
        |mut a, mut b| {
            a.append(&mut b);
            a
        },
    );
    Ok(chunks.unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn linear_spec() -> BasisSpec {
        BasisSpec::total_degree(1, vec![[-1.0, 1.0]]).unwrap()
    }

    fn training(a: &[f64], z: &[f64]) -> TrainingSet {
        TrainingSet::unlabeled(
            DMatrix::from_column_slice(a.len(), 1, a),
            DMatrix::from_column_slice(z.len(), 1, z),
        )
        .unwrap()
    }

    #[test]
    fn chi2_examples() {
        let t = training(&[-1.0, 0.0, 1.0], &[0.0, 1.0, 2.0]);
        let d = build_design_matrix(&linear_spec(), t.inputs()).unwrap();
        let c = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        assert_eq!(chi2(&t, &d, &c).unwrap(), 0.0);

        let t = training(&[-1.0, 0.0, 1.0], &[0.0, 1.0, 3.0]);
        let c = DMatrix::from_column_slice(2, 1, &[4.0 / 3.0, 1.5]);
        assert_relative_eq!(chi2(&t, &d, &c).unwrap(), 1.0 / 6.0, max_relative = 1e-14);

        let wrong = DMatrix::zeros(3, 1);
        assert!(matches!(chi2(&t, &d, &wrong), Err(Error::Contract(_))));
    }

    #[test]
    fn fit_examples() {
        let post = fit(&training(&[-1.0, 0.0, 1.0], &[0.0, 1.0, 2.0]), &linear_spec()).unwrap();
        assert_relative_eq!(post.c_hat()[0], 1.0, max_relative = 1e-14);
        assert_relative_eq!(post.c_hat()[1], 1.0, max_relative = 1e-14);
        assert!(post.chi2_min() < 1e-28);
        assert!(post.sigma2_hat().is_none());
        assert!(matches!(
            post.coefficient_covariance(0, 0, 0, 0),
            Err(Error::CovarianceUndefined { .. })
        ));

        let a = [-1.0, -0.5, 0.0, 0.5, 1.0];
        let z: Vec<f64> = a.iter().map(|x| x * x).collect();
        let post = fit(&training(&a, &z), &linear_spec()).unwrap();
        assert_relative_eq!(post.c_hat()[0], 0.5, max_relative = 1e-14);
        assert!(post.c_hat()[1].abs() < 1e-15);
        assert_relative_eq!(post.chi2_min(), 0.875, max_relative = 1e-14);
        assert_relative_eq!(post.sigma2_hat().unwrap(), 0.875, max_relative = 1e-14);
        assert_relative_eq!(
            post.coefficient_covariance(0, 0, 0, 0).unwrap(),
            0.175,
            max_relative = 1e-14
        );
        assert_relative_eq!(
            post.coefficient_covariance(1, 0, 1, 0).unwrap(),
            0.875 / 2.5,
            max_relative = 1e-14
        );

        let zero = fit(&training(&a, &[0.0; 5]), &linear_spec()).unwrap();
        assert!(zero.c_hat().iter().all(|&c| c == 0.0));
        assert_eq!(zero.chi2_min(), 0.0);
    }

    #[test]
    fn fit_errors() {
        let spec = BasisSpec::total_degree(3, vec![[-1.0, 1.0]]).unwrap();
        assert!(matches!(
            fit(&training(&[-1.0, 0.0, 1.0], &[0.0, 1.0, 2.0]), &spec),
            Err(Error::Underdetermined { n_s: 3, n_p: 4 })
        ));
        // all samples at the same point: columns 1 and 2 are constant multiples of column 0
        let spec2 = BasisSpec::total_degree(2, vec![[-1.0, 1.0]]).unwrap();
        match fit(&training(&[0.5; 6], &[1.0; 6]), &spec2) {
            Err(Error::SingularDesign { columns, .. }) => assert!(!columns.is_empty()),
            other => panic!("expected singular design, got {other:?}"),
        }
    }

    #[test]
    fn cross_site_covariance_is_zero() {
        let a: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];
        let outputs = DMatrix::from_fn(5, 2, |i, x| a[i].powi(2 + x as i32));
        let t = TrainingSet::unlabeled(DMatrix::from_column_slice(5, 1, &a), outputs).unwrap();
        let post = fit(&t, &linear_spec()).unwrap();
        for nu in 0..2 {
            for nup in 0..2 {
                assert_eq!(post.coefficient_covariance(nu, 0, nup, 1).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn evidence_components() {
        assert_relative_eq!(log_solid_angle(2), (2.0 * std::f64::consts::PI).ln(), max_relative = 1e-15);
        assert_relative_eq!(log_solid_angle(1), 2f64.ln(), max_relative = 1e-14);
        assert_relative_eq!(log_solid_angle(3), (4.0 * std::f64::consts::PI).ln(), max_relative = 1e-14);

        let a = [-1.0, -0.5, 0.0, 0.5, 1.0];
        let t = training(&a, &[1.0, 0.3, 0.1, 0.2, 0.9]);
        let rep = log_evidence(&t, &linear_spec()).unwrap();
        assert_relative_eq!(rep.components.sum(), rep.log_evidence, max_relative = 1e-12);

        let t = training(&[-1.0, 1.0], &[0.0, 1.0]);
        assert!(matches!(
            log_evidence(&t, &linear_spec()),
            Err(Error::EvidenceUndefined { n_sx: 2, n_bx: 2 })
        ));
        let t = training(&[-1.0, 0.0, 1.0], &[0.0, 1.0, 2.0]);
        assert!(matches!(
            log_evidence(&t, &linear_spec()),
            Err(Error::InterpolationDegenerate { .. })
        ));
    }

    #[test]
    fn predict_examples() {
        let post = fit(&training(&[-1.0, 0.0, 1.0], &[0.0, 1.0, 2.0]), &linear_spec()).unwrap();
        assert_relative_eq!(post.predict_mean(&[0.5]).unwrap()[0], 1.5, max_relative = 1e-14);
        for (a, z) in [(-1.0, 0.0), (0.0, 1.0), (1.0, 2.0)] {
            assert!((post.predict_mean(&[a]).unwrap()[0] - z).abs() <= 1e-12 * z.abs().max(1.0));
        }
        let c = BasisSpec::total_degree(0, vec![[-1.0, 1.0]]).unwrap();
        let post = fit(&training(&[-1.0, 0.0, 1.0], &[2.0, 2.0, 2.0]), &c).unwrap();
        assert_relative_eq!(post.predict_mean(&[0.3]).unwrap()[0], 2.0, max_relative = 1e-15);
        assert!(post.predict_mean(&[3.0]).is_err());
    }

    #[test]
    fn compare_identical_specs_split_evenly() {
        let a = [-1.0, -0.5, 0.0, 0.5, 1.0];
        let t = training(&a, &[1.0, 0.3, 0.1, 0.2, 0.9]);
        let specs = vec![linear_spec(), linear_spec()];
        let cmp = compare_models(&t, &specs, Execution::Sequential).unwrap();
        assert_eq!(cmp.ranked.len(), 2);
        assert_eq!(cmp.ranked[0].log_evidence, cmp.ranked[1].log_evidence);
        assert_relative_eq!(cmp.ranked[0].probability, 0.5, max_relative = 1e-15);
        assert_eq!(cmp.ranked[0].id, 0);
    }

    #[test]
    fn compare_excludes_invalid_specs() {
        let a = [-1.0, -0.5, 0.0, 0.5, 1.0];
        let t = training(&a, &[1.0, 0.3, 0.1, 0.2, 0.9]);
        let big = BasisSpec::total_degree(4, vec![[-1.0, 1.0]]).unwrap();
        let specs = vec![linear_spec(), big];
        let cmp = compare_models(&t, &specs, Execution::Parallel).unwrap();
        assert_eq!(cmp.ranked.len(), 1);
        assert_eq!(cmp.ranked[0].probability, 1.0);
        assert!(matches!(cmp.failures[0], (1, Error::EvidenceUndefined { .. })));

        let only_bad = vec![BasisSpec::total_degree(4, vec![[-1.0, 1.0]]).unwrap(); 2];
        assert!(matches!(
            compare_models(&t, &only_bad, Execution::Sequential),
            Err(Error::AllFailed(_))
        ));
    }

    #[test]
    fn sampling_is_reproducible() {
        let a = [-1.0, -0.5, 0.0, 0.5, 1.0, 0.25];
        let t = training(&a, &[1.0, 0.3, 0.1, 0.2, 0.9, 0.0]);
        let post = fit(&t, &linear_spec()).unwrap();
        assert!(sample_coefficients(&post, 0, 1).unwrap().is_empty());
        let s1 = sample_coefficients(&post, 3000, 42).unwrap();
        let s2 = sample_coefficients(&post, 3000, 42).unwrap();
        assert_eq!(s1, s2);
        assert_ne!(s1, sample_coefficients(&post, 3000, 43).unwrap());

        let t = training(&[-1.0, 0.0, 1.0], &[0.0, 1.0, 3.0]);
        let post = fit(&t, &linear_spec()).unwrap();
        assert!(matches!(
            sample_coefficients(&post, 10, 1),
            Err(Error::CovarianceUndefined { .. })
        ));
    }
}
