//! Brute-force verifiers for the closed forms, and the toy simulator that
//! drives the demo.
//!
//! The quadrature oracle integrates `(χ²(C))^(-N_sx/2)` over the coefficients
//! with `χ²` evaluated directly from the residuals, never via the
//! completed-square form. Each axis is mapped as `c = center + scale·sinh(t)`
//! and integrated with the trapezoid rule in `t`; the map turns the algebraic
//! Student-t tails into exponentially decaying ones, so a finite `t` range
//! covers them to near machine precision.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::basis::{build_design_matrix, eval_basis, BasisSpec, DesignMatrix};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::propagate::InputPosterior;
use crate::surrogate::{chunk_rng, CoefficientPosterior, CoefficientSampler, LinearFit, TrainingSet};

/// Largest tensor grid the quadrature oracle will evaluate.
pub const MAX_TOTAL_NODES: usize = 10_000_000;
/// Largest coefficient dimension `N_p·N_x` the quadrature oracle accepts.
pub const MAX_QUADRATURE_DIM: usize = 3;
/// Successive refinements differing by more than this are an error.
pub const REFINEMENT_TOLERANCE: f64 = 1e-4;
/// Refinement stops once successive levels agree to this.
const TARGET_CHANGE: f64 = 1e-11;
/// Initial trapezoid step in the mapped variable.
const INITIAL_STEP: f64 = 1.0;

/// One axis of the sinh-mapped grid: nodes `center + scale·sinh(t)` for
/// `nodes` equispaced `t` in `[-t_max, t_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadratureAxis {
    pub center: f64,
    pub scale: f64,
    pub t_max: f64,
    pub nodes: usize,
}

impl QuadratureAxis {
    /// Extent of the grid on either side of the center.
    pub fn half_width(&self) -> f64 {
        self.scale * self.t_max.sinh()
    }

    fn step(&self) -> f64 {
        2.0 * self.t_max / (self.nodes - 1) as f64
    }

    fn refined(&self) -> Self {
        QuadratureAxis {
            nodes: 2 * self.nodes - 1,
            ..*self
        }
    }
}

/// Tensor grid over the compound coefficient index `l = x·N_p + ν`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadratureGrid {
    axes: Vec<QuadratureAxis>,
}

impl QuadratureGrid {
    /// The half-width must cover at least 8 scales and the node count must be
    /// odd so the center is a node.
    pub fn new(axes: Vec<QuadratureAxis>) -> Result<Self> {
        if axes.is_empty() || axes.len() > MAX_QUADRATURE_DIM {
            return Err(Error::contract(format!(
                "quadrature dimension {} outside 1..={MAX_QUADRATURE_DIM}",
                axes.len()
            )));
        }
        for (l, a) in axes.iter().enumerate() {
            if !(a.scale > 0.0 && a.scale.is_finite() && a.center.is_finite()) {
                return Err(Error::contract(format!("axis {l}: invalid center or scale")));
            }
            if a.nodes < 3 || a.nodes % 2 == 0 {
                return Err(Error::contract(format!("axis {l}: node count must be odd and >= 3")));
            }
            if !(a.t_max.sinh() >= 8.0) {
                return Err(Error::contract(format!("axis {l}: grid covers fewer than 8 scales")));
            }
        }
        let grid = QuadratureGrid { axes };
        if grid.total_nodes() > MAX_TOTAL_NODES {
            return Err(Error::contract(format!(
                "{} quadrature nodes exceed the limit of {MAX_TOTAL_NODES}",
                grid.total_nodes()
            )));
        }
        Ok(grid)
    }

    /// Grid centered on `Ĉ` with the closed-form posterior standard deviations
    /// as scales. The `t` range is chosen from the Student-t degrees of
    /// freedom so the truncated second-moment tail is below about 1e-13.
    pub fn for_fit(fit: &LinearFit) -> Result<Self> {
        let dims = fit.dims();
        let n_bx = dims.n_p * dims.n_x;
        if n_bx > MAX_QUADRATURE_DIM {
            return Err(Error::contract(format!(
                "N_p·N_x = {n_bx} exceeds the quadrature limit {MAX_QUADRATURE_DIM}"
            )));
        }
        dims.check_covariance()?;
        let nu = dims.student_dof() as f64;
        let t_max = (2f64.ln() + 13.0 * 10f64.ln() / (nu - 2.0)).clamp(3.0, 40.0);
        let nodes = 2 * (t_max / INITIAL_STEP).ceil() as usize + 1;
        let cov = fit.covariance_matrix()?;
        let c = fit.c_hat();
        let axes = (0..n_bx)
            .map(|l| QuadratureAxis {
                center: c[(l % dims.n_p, l / dims.n_p)],
                scale: cov[(l, l)].sqrt(),
                t_max,
                nodes,
            })
            .collect();
        QuadratureGrid::new(axes)
    }

    pub fn axes(&self) -> &[QuadratureAxis] {
        &self.axes
    }

    pub fn total_nodes(&self) -> usize {
        self.axes.iter().map(|a| a.nodes).product()
    }

    /// Shifts every center by `offset[l]` scales.
    pub fn shifted(&self, offset: &[f64]) -> Result<Self> {
        let axes = self
            .axes
            .iter()
            .zip(offset)
            .map(|(a, o)| QuadratureAxis {
                center: a.center + o * a.scale,
                ..*a
            })
            .collect();
        QuadratureGrid::new(axes)
    }

    fn refined(&self) -> Self {
        QuadratureGrid {
            axes: self.axes.iter().map(QuadratureAxis::refined).collect(),
        }
    }
}

/// Numerically integrated moments of `(χ²(C))^(-N_sx/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureMoments {
    /// Log of the integral itself.
    pub log_norm: f64,
    /// `N_p x N_x` posterior mean.
    pub mean: DMatrix<f64>,
    /// Covariance over the compound index `l = x·N_p + ν`.
    pub covariance: DMatrix<f64>,
    pub nodes_per_axis: Vec<usize>,
    /// Largest scaled change between the last two refinement levels.
    pub rel_change: f64,
}

struct Sums {
    s0: f64,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

fn integrate_level(
    m: &DMatrix<f64>,
    z: &DMatrix<f64>,
    grid: &QuadratureGrid,
    log_chi2_ref: f64,
    exec: Execution,
) -> Sums {
    let (n_s, n_p) = m.shape();
    let n_x = z.ncols();
    let d = grid.axes.len();
    let half_n = 0.5 * (n_s * n_x) as f64;
    let m_rows: Vec<f64> = (0..n_s).flat_map(|i| (0..n_p).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).collect();
    let z_rows: Vec<f64> = (0..n_s).flat_map(|i| (0..n_x).map(move |x| (i, x))).map(|(i, x)| z[(i, x)]).collect();
    // per-axis node offsets and weights
    let tables: Vec<(Vec<f64>, Vec<f64>)> = grid
        .axes
        .iter()
        .map(|a| {
            let h = a.step();
            (0..a.nodes)
                .map(|k| {
                    let t = -a.t_max + k as f64 * h;
                    (a.scale * t.sinh(), h * a.scale * t.cosh())
                })
                .unzip()
        })
        .collect();
    let centers: Vec<f64> = grid.axes.iter().map(|a| a.center).collect();
    par::chunked_reduce(
        exec,
        grid.total_nodes(),
        par::DEFAULT_CHUNK * 16,
        |_, range| {
            let mut acc = Sums {
                s0: 0.0,
                s1: vec![0.0; d],
                s2: vec![0.0; d * d],
            };
            let mut off = vec![0.0; d];
            let mut coef = vec![0.0; n_p * n_x];
            for node in range {
                let mut rem = node;
                let mut w = 1.0;
                for (l, (offs, ws)) in tables.iter().enumerate() {
                    let n = offs.len();
                    let k = rem % n;
                    rem /= n;
                    off[l] = offs[k];
                    w *= ws[k];
                    coef[l] = centers[l] + offs[k];
                }
                let mut chi2 = 0.0;
                for i in 0..n_s {
                    for x in 0..n_x {
                        let mut pred = 0.0;
                        for nu in 0..n_p {
                            pred += m_rows[i * n_p + nu] * coef[x * n_p + nu];
                        }
                        let r = z_rows[i * n_x + x] - pred;
                        chi2 += r * r;
                    }
                }
                let f = w * (-half_n * (chi2.ln() - log_chi2_ref)).exp();
                acc.s0 += f;
                for a in 0..d {
                    acc.s1[a] += f * off[a];
                    for b in 0..d {
                        acc.s2[a * d + b] += f * off[a] * off[b];
                    }
                }
            }
            acc
        },
        |mut a, b| {
            a.s0 += b.s0;
            a.s1.iter_mut().zip(&b.s1).for_each(|(x, y)| *x += y);
            a.s2.iter_mut().zip(&b.s2).for_each(|(x, y)| *x += y);
            a
        },
    )
    .expect("grid is non-empty")
}

fn moments_from_sums(
    s: &Sums,
    grid: &QuadratureGrid,
    n_p: usize,
    n_x: usize,
    log_chi2_ref: f64,
    n_sx: usize,
) -> QuadratureMoments {
    let d = grid.axes.len();
    let shift: Vec<f64> = s.s1.iter().map(|v| v / s.s0).collect();
    let mean = DMatrix::from_fn(n_p, n_x, |nu, x| {
        let l = x * n_p + nu;
        grid.axes[l].center + shift[l]
    });
    let covariance = DMatrix::from_fn(d, d, |a, b| s.s2[a * d + b] / s.s0 - shift[a] * shift[b]);
    QuadratureMoments {
        log_norm: s.s0.ln() - 0.5 * n_sx as f64 * log_chi2_ref,
        mean,
        covariance,
        nodes_per_axis: grid.axes.iter().map(|a| a.nodes).collect(),
        rel_change: f64::NAN,
    }
}

fn scaled_change(a: &QuadratureMoments, b: &QuadratureMoments) -> f64 {
    let d = b.covariance.nrows();
    let sd: Vec<f64> = (0..d).map(|l| b.covariance[(l, l)].abs().sqrt()).collect();
    let mut change = (a.log_norm - b.log_norm).abs();
    let n_p = b.mean.nrows();
    for l in 0..d {
        let (nu, x) = (l % n_p, l / n_p);
        let scale = b.mean[(nu, x)].abs().max(sd[l]);
        change = change.max((a.mean[(nu, x)] - b.mean[(nu, x)]).abs() / scale);
        for k in 0..d {
            let scale = sd[l] * sd[k];
            change = change.max((a.covariance[(l, k)] - b.covariance[(l, k)]).abs() / scale);
        }
    }
    change
}

/// Integrates the zeroth, first and second moments of the unnormalized
/// marginal posterior `(χ²(C))^(-N_sx/2)` by refining the grid until
/// successive levels agree or the node limit is reached.
pub fn quadrature_posterior_moments(
    training: &TrainingSet,
    design: &DesignMatrix,
    grid: &QuadratureGrid,
    exec: Execution,
) -> Result<QuadratureMoments> {
    let m = design.matrix();
    let z = training.outputs();
    if m.nrows() != z.nrows() {
        return Err(Error::contract("design and outputs differ in row count"));
    }
    let (n_s, n_p) = m.shape();
    let n_x = z.ncols();
    let n_bx = n_p * n_x;
    if n_bx != grid.axes.len() {
        return Err(Error::contract(format!(
            "grid has {} axes, the coefficients have {n_bx} entries",
            grid.axes.len()
        )));
    }
    if n_bx > MAX_QUADRATURE_DIM {
        return Err(Error::contract(format!("N_p·N_x = {n_bx} exceeds {MAX_QUADRATURE_DIM}")));
    }
    let n_sx = n_s * n_x;
    if n_sx <= n_bx + 2 {
        return Err(Error::contract(format!(
            "quadrature needs N_sx > N_bx + 2, got N_sx = {n_sx}, N_bx = {n_bx}"
        )));
    }
    let centers = DMatrix::from_fn(n_p, n_x, |nu, x| grid.axes[x * n_p + nu].center);
    let r = z - m * &centers;
    let log_chi2_ref = r.norm_squared().ln();

    let mut grid = grid.clone();
    let mut prev = moments_from_sums(
        &integrate_level(m, z, &grid, log_chi2_ref, exec),
        &grid,
        n_p,
        n_x,
        log_chi2_ref,
        n_sx,
    );
    let mut change = f64::INFINITY;
    while change > TARGET_CHANGE {
        let next_grid = grid.refined();
        if next_grid.total_nodes() > MAX_TOTAL_NODES {
            break;
        }
        grid = next_grid;
        let next = moments_from_sums(
            &integrate_level(m, z, &grid, log_chi2_ref, exec),
            &grid,
            n_p,
            n_x,
            log_chi2_ref,
            n_sx,
        );
        change = scaled_change(&prev, &next);
        prev = next;
    }
    if !(change <= REFINEMENT_TOLERANCE) {
        return Err(Error::QuadratureNotConverged { rel_change: change });
    }
    prev.rel_change = change;
    Ok(prev)
}

/// Trace form `tr(ZᵀZ - ZᵀM H⁻¹ MᵀZ)` of the minimal misfit.
pub fn chi2_projector(training: &TrainingSet, design: &DesignMatrix) -> Result<f64> {
    let m = design.matrix();
    let z = training.outputs();
    let h = m.transpose() * m;
    let chol = h.cholesky().ok_or(Error::SingularDesign {
        condition: f64::INFINITY,
        columns: vec![],
    })?;
    let mtz = m.transpose() * z;
    let proj = mtz.transpose() * chol.solve(&mtz);
    Ok((z.transpose() * z).trace() - proj.trace())
}

/// Outcome of the Jeffreys-prior constancy check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiemannReport {
    /// `(max - min) / mean` of `det R` across the coefficient points.
    pub spread: f64,
    /// Largest relative deviation of the numerical `R` from the closed form.
    pub max_closed_form_error: f64,
    pub determinants: Vec<f64>,
    /// `R` is rank deficient; `spread` is then undefined.
    pub singular: bool,
}

/// Closed-form Fisher metric `R_ij = Σ_k Φ_i(a_k) Φ_j(a_k)` of one site.
pub fn riemann_metric(spec: &BasisSpec, samples: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = build_design_matrix(spec, samples)?.into_matrix();
    Ok(m.transpose() * m)
}

/// Compares the closed-form metric with central-difference Hessians of the
/// log-likelihood `-χ²(C)/2` at each coefficient point, averaged over
/// `n_sim` data sets simulated at that point with unit noise.
pub fn riemann_prior_check(
    spec: &BasisSpec,
    samples: &DMatrix<f64>,
    c_points: &[DMatrix<f64>],
    n_sim: usize,
    seed: u64,
) -> Result<RiemannReport> {
    if c_points.len() < 2 {
        return Err(Error::contract("riemann_prior_check needs at least two coefficient points"));
    }
    if n_sim == 0 {
        return Err(Error::contract("riemann_prior_check needs at least one simulated data set"));
    }
    let (n_p, n_x) = c_points[0].shape();
    if n_p != spec.n_basis() || c_points.iter().any(|c| c.shape() != (n_p, n_x)) {
        return Err(Error::contract("coefficient points must all be N_p x N_x"));
    }
    let m = build_design_matrix(spec, samples)?.into_matrix();
    let r_site = m.transpose() * &m;
    let n_bx = n_p * n_x;
    let closed = DMatrix::from_fn(n_bx, n_bx, |a, b| {
        if a / n_p == b / n_p {
            r_site[(a % n_p, b % n_p)]
        } else {
            0.0
        }
    });
    let rank = r_site.clone().svd(false, false).rank(1e-12 * r_site.norm().max(f64::MIN_POSITIVE));
    if rank < n_p {
        return Ok(RiemannReport {
            spread: f64::NAN,
            max_closed_form_error: f64::NAN,
            determinants: vec![0.0; c_points.len()],
            singular: true,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 1.0;
    let mut max_err: f64 = 0.0;
    let mut dets = Vec::with_capacity(c_points.len());
    for c in c_points {
        let mut hess = DMatrix::zeros(n_bx, n_bx);
        for _ in 0..n_sim {
            let noise = DMatrix::from_fn(m.nrows(), n_x, |_, _| rng.sample::<f64, _>(StandardNormal));
            let z = &m * c + noise;
            let neg_ll = |cc: &DMatrix<f64>| 0.5 * (&z - &m * cc).norm_squared();
            for a in 0..n_bx {
                for b in 0..n_bx {
                    let at = |da: f64, db: f64| {
                        let mut cc = c.clone();
                        cc[(a % n_p, a / n_p)] += da;
                        cc[(b % n_p, b / n_p)] += db;
                        neg_ll(&cc)
                    };
                    let d2 = (at(step, step) - at(step, -step) - at(-step, step) + at(-step, -step))
                        / (4.0 * step * step);
                    hess[(a, b)] += d2;
                }
            }
        }
        hess /= n_sim as f64;
        let scale = closed.amax();
        max_err = max_err.max((&hess - &closed).amax() / scale);
        dets.push(hess.determinant());
    }
    let (lo, hi) = dets
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    let mean = dets.iter().sum::<f64>() / dets.len() as f64;
    Ok(RiemannReport {
        spread: (hi - lo) / mean.abs(),
        max_closed_form_error: max_err,
        determinants: dets,
        singular: false,
    })
}

/// Empirical moments of `g(a|C)` under joint sampling of inputs and
/// coefficients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloEstimate {
    pub n_draws: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub se_mean: Vec<f64>,
    pub se_variance: Vec<f64>,
}

/// Draws `a` from the weighted input samples and `C` from the Student-t
/// posterior, `n_draws` times, and returns per-site moments with standard
/// errors. Deterministic for a fixed seed.
pub fn monte_carlo_propagation(
    post: &CoefficientPosterior,
    input: &InputPosterior,
    n_draws: usize,
    seed: u64,
    exec: Execution,
) -> Result<MonteCarloEstimate> {
    if n_draws < 2 {
        return Err(Error::contract("Monte Carlo needs at least two draws"));
    }
    let sampler = CoefficientSampler::new(post.linear())?;
    let features = build_design_matrix(post.spec(), input.samples())?.into_matrix();
    let picker = WeightedIndex::new(input.weights()).map_err(|e| Error::contract(e.to_string()))?;
    let n_x = post.dims().n_x;
    let n_p = post.dims().n_p;
    let shift: Vec<f64> = post.predict_mean(&input.samples().row(0).iter().copied().collect::<Vec<_>>())?;
    let sums = par::chunked_reduce(
        exec,
        n_draws,
        par::DEFAULT_CHUNK,
        |chunk, range| {
            let mut rng = chunk_rng(seed, chunk);
            let mut s = vec![[0.0f64; 4]; n_x];
            for _ in range {
                let j = picker.sample(&mut rng);
                let c = sampler.draw(&mut rng);
                for (x, sx) in s.iter_mut().enumerate() {
                    let mut y = 0.0;
                    for nu in 0..n_p {
                        y += features[(j, nu)] * c[(nu, x)];
                    }
                    let d = y - shift[x];
                    let d2 = d * d;
                    sx[0] += d;
                    sx[1] += d2;
                    sx[2] += d2 * d;
                    sx[3] += d2 * d2;
                }
            }
            s
        },
        |mut a, b| {
            for (sa, sb) in a.iter_mut().zip(&b) {
                for k in 0..4 {
                    sa[k] += sb[k];
                }
            }
            a
        },
    )
    .expect("n_draws > 0");
    let n = n_draws as f64;
    let mut est = MonteCarloEstimate {
        n_draws,
        mean: vec![],
        variance: vec![],
        se_mean: vec![],
        se_variance: vec![],
    };
    for (x, s) in sums.iter().enumerate() {
        let (e1, e2, e3, e4) = (s[0] / n, s[1] / n, s[2] / n, s[3] / n);
        let m2 = e2 - e1 * e1;
        let m4 = e4 - 4.0 * e1 * e3 + 6.0 * e1 * e1 * e2 - 3.0 * e1.powi(4);
        let var = m2 * n / (n - 1.0);
        est.mean.push(shift[x] + e1);
        est.variance.push(var);
        est.se_mean.push((var / n).sqrt());
        est.se_variance.push(((m4 - m2 * m2).max(0.0) / n).sqrt());
    }
    Ok(est)
}

/// Number of inputs of the toy simulator.
pub const TOY_PARAMS: usize = 4;
/// Strength of the late-time misspecification.
pub const TOY_CUBIC_STRENGTH: f64 = 0.6;

/// Synthetic simulator on `[-1,1]⁴`:
///
/// `z(a, site, t) = q_site(a) + κ τ² c_site(a)`, `τ = t / (N_t - 1)`, with
///
/// - `q_site(a) = 1 + 0.5 s + (0.8 - 0.2 s) a₀ - 0.5 a₁ + 0.3 s a₂ + 0.4 a₀² - 0.3 a₁ a₃ + 0.2 a₂²`
/// - `c_site(a) = a₀³ + a₀ a₁ a₂ - (0.5 + 0.5 s) a₁² a₃ + 0.8 s a₂³`
///
/// for site number `s` and `κ` = [`TOY_CUBIC_STRENGTH`]. It is exactly
/// quadratic at `t = 0`, constant in `t` at `a = 0`, and increasingly
/// cubic as `t` grows.
pub fn toy_simulator(a: &[f64], site: usize, t: usize, n_t: usize) -> Result<f64> {
    if a.len() != TOY_PARAMS {
        return Err(Error::contract(format!("toy simulator takes {TOY_PARAMS} inputs")));
    }
    if let Some(k) = a.iter().position(|v| !(-1.0..=1.0).contains(v)) {
        return Err(Error::DomainViolation {
            row: None,
            coord: k,
            value: a[k],
            lo: -1.0,
            hi: 1.0,
        });
    }
    if n_t == 0 || t >= n_t {
        return Err(Error::contract(format!("time index {t} outside 0..{n_t}")));
    }
    let tau = if n_t == 1 { 0.0 } else { t as f64 / (n_t - 1) as f64 };
    let s = site as f64;
    let [a0, a1, a2, a3] = [a[0], a[1], a[2], a[3]];
    let q = 1.0 + 0.5 * s + (0.8 - 0.2 * s) * a0 - 0.5 * a1 + 0.3 * s * a2 + 0.4 * a0 * a0
        - 0.3 * a1 * a3
        + 0.2 * a2 * a2;
    let c = a0.powi(3) + a0 * a1 * a2 - (0.5 + 0.5 * s) * a1 * a1 * a3 + 0.8 * s * a2.powi(3);
    Ok(q + TOY_CUBIC_STRENGTH * tau * tau * c)
}

/// One entry of the `verify` report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyCheck {
    pub check: String,
    pub tolerance: f64,
    pub observed: f64,
    pub pass: bool,
}

impl VerifyCheck {
    pub fn new(check: impl Into<String>, tolerance: f64, observed: f64) -> Self {
        VerifyCheck {
            check: check.into(),
            tolerance,
            observed,
            pass: observed <= tolerance,
        }
    }
}

/// Largest relative deviation, with `floor` guarding near-zero references.
pub fn max_rel_diff(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(floor))
        .fold(0.0, f64::max)
}

/// Quadrature agreement of one data set: `(mean, covariance)` relative errors
/// against the closed form, plus the moments for evidence-ratio checks.
pub fn quadrature_agreement(
    training: &TrainingSet,
    spec: &BasisSpec,
    exec: Execution,
) -> Result<(f64, f64, QuadratureMoments, LinearFit)> {
    let design = build_design_matrix(spec, training.inputs())?;
    let fit = LinearFit::from_design(design.matrix(), training.outputs())?;
    let grid = QuadratureGrid::for_fit(&fit)?;
    let q = quadrature_posterior_moments(training, &design, &grid, exec)?;
    let mean_err = max_rel_diff(q.mean.as_slice(), fit.c_hat().as_slice(), 0.0);
    let cov = fit.covariance_matrix()?;
    let cov_err = max_rel_diff(q.covariance.as_slice(), cov.as_slice(), cov.diagonal().max());
    Ok((mean_err, cov_err, q, fit))
}

/// Runs the oracle checks on one training set: quadrature mean, covariance
/// and evidence ratio against a seeded perturbed copy, Riemann-prior
/// constancy and the projector form of `χ²_min`.
pub fn verify_report(training: &TrainingSet, spec: &BasisSpec, seed: u64, exec: Execution) -> Result<Vec<VerifyCheck>> {
    let mut checks = Vec::new();
    let (mean_err, cov_err, q1, fit1) = quadrature_agreement(training, spec, exec)?;
    checks.push(VerifyCheck::new("quadrature-mean", 1e-6, mean_err));
    checks.push(VerifyCheck::new("quadrature-covariance", 1e-5, cov_err));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = fit1.sigma2_hat().unwrap_or(1.0).sqrt().max(1e-3);
    let z2 = training.outputs().map(|v| v + 0.5 * sd * rng.sample::<f64, _>(StandardNormal));
    let t2 = TrainingSet::new(training.inputs().clone(), z2, training.site_labels().to_vec())?;
    let (_, _, q2, fit2) = quadrature_agreement(&t2, spec, exec)?;
    let ratio_quad = q1.log_norm - q2.log_norm;
    let ratio_ev = fit1.evidence()?.log_evidence - fit2.evidence()?.log_evidence;
    checks.push(VerifyCheck::new("evidence-ratio", 1e-5, ((ratio_quad - ratio_ev).exp() - 1.0).abs()));

    let c1 = fit1.c_hat().clone();
    let c2 = c1.map(|v| v + 1.0 + rng.random::<f64>());
    let rep = riemann_prior_check(spec, training.inputs(), &[c1, c2], 3, seed)?;
    checks.push(VerifyCheck::new(
        "riemann-prior",
        1e-8,
        if rep.singular { f64::INFINITY } else { rep.spread },
    ));

    let design = build_design_matrix(spec, training.inputs())?;
    let proj = chi2_projector(training, &design)?;
    checks.push(VerifyCheck::new(
        "chi2-projector",
        1e-12,
        (proj - fit1.chi2_min()).abs() / fit1.chi2_min().max(f64::MIN_POSITIVE),
    ));
    Ok(checks)
}

/// Seeded synthetic instance for the oracle checks: `n_s` uniform inputs on
/// `[-1,1]^n_a`, outputs from random coefficients plus unit-scale noise.
pub fn random_instance(n_s: usize, n_a: usize, degree: u32, n_x: usize, noise: f64, seed: u64) -> Result<(TrainingSet, BasisSpec)> {
    let spec = BasisSpec::total_degree(degree, vec![[-1.0, 1.0]; n_a])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = DMatrix::from_fn(n_s, n_a, |_, _| rng.random_range(-1.0..1.0));
    let coeffs = DMatrix::from_fn(spec.n_basis(), n_x, |_, _| rng.random_range(0.5..2.0));
    let mut outputs = build_design_matrix(&spec, &inputs)?.into_matrix() * coeffs;
    outputs.iter_mut().for_each(|v| *v += noise * rng.sample::<f64, _>(StandardNormal));
    Ok((TrainingSet::unlabeled(inputs, outputs)?, spec))
}

/// Brute-force mean of the predictive surrogate over a point-mass mixture.
pub fn brute_force_mean(post: &CoefficientPosterior, input: &InputPosterior) -> Result<Vec<f64>> {
    let mut mean = DVector::zeros(post.dims().n_x);
    for (j, w) in input.weights().iter().enumerate() {
        let a: Vec<f64> = input.samples().row(j).iter().copied().collect();
        let phi = DVector::from_vec(eval_basis(post.spec(), &a)?);
        mean += post.c_hat().transpose() * phi * *w;
    }
    Ok(mean.iter().copied().collect())
}
