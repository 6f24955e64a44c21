//! Command-line workflows: fit, evidence, propagate, trust, demo, verify.
//!
//! Each subcommand is a plain function over its argument struct so the
//! pipelines can be driven from tests without spawning the binary.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::basis::BasisSpec;
use crate::demo::{run_demo, DemoConfig, DemoResult, DEMO_HEADER};
use crate::error::{Error, Result};
use crate::gpr::{marginalize_theta, Kernel, ThetaGrid, ThetaWeighting};
use crate::io::{self, format_g17};
use crate::oracle::{random_instance, verify_report, VerifyCheck};
use crate::par::{self, Execution};
use crate::propagate::{basis_moments, propagate_covariance, trust_ratio, PropagationResult, TrustReport, DEFAULT_EPSILON};
use crate::surrogate::{compare_models, fit, Dims, TrainingSet};

#[derive(Debug, Parser)]
#[command(name = "surrogate-uq", version, about = "Bayesian surrogates with propagated surrogate uncertainty")]
pub struct Cli {
    /// Worker threads for the data-parallel kernels
    #[arg(long, global = true, env = "SURROGATE_UQ_THREADS")]
    pub threads: Option<usize>,

    /// Run every kernel on the calling thread
    #[arg(long, global = true)]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a surrogate and write the posterior artifact
    Fit(FitArgs),
    /// Rank polynomial degrees by evidence
    Evidence(EvidenceArgs),
    /// Propagate an input posterior through a fitted surrogate
    Propagate(PropagateArgs),
    /// Report the trust ratio of a fitted surrogate
    Trust(TrustArgs),
    /// Run the toy-simulator pipeline and emit plot-ready bands
    Demo(DemoArgs),
    /// Re-check the closed forms against brute-force oracles
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Args)]
pub struct TrainingArgs {
    /// Training inputs CSV, one named column per parameter
    #[arg(long)]
    pub inputs: PathBuf,
    /// Training outputs CSV, flat columns or long format sample,site,time,value
    #[arg(long)]
    pub outputs: PathBuf,
}

#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
pub struct BasisArgs {
    /// Total polynomial degree; the domain is inferred from the inputs
    #[arg(long)]
    pub degree: Option<u32>,
    /// Explicit basis spec JSON
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

impl BasisArgs {
    pub fn resolve(&self, training: &TrainingSet) -> Result<BasisSpec> {
        match (&self.degree, &self.spec) {
            (_, Some(path)) => io::read_json(path),
            (Some(d), None) => BasisSpec::total_degree(*d, io::inferred_domain(training.inputs())?),
            (None, None) => Err(Error::contract("either a degree or a basis spec is required")),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub training: TrainingArgs,
    #[command(flatten)]
    pub basis: BasisArgs,
    /// Where to write the posterior artifact JSON
    #[arg(long)]
    pub artifact: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvidenceArgs {
    #[command(flatten)]
    pub training: TrainingArgs,
    /// Comma-separated total degrees to compare
    #[arg(long, value_delimiter = ',', required = true)]
    pub degrees: Vec<u32>,
    /// Ranked table CSV (also printed)
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GprArgs {
    /// Kernel JSON; switches propagation to the kernelized surrogate
    #[arg(long, conflicts_with = "theta_grid", requires = "gpr_inputs")]
    pub kernel: Option<PathBuf>,
    /// Hyperparameter grid JSON for the kernelized surrogate
    #[arg(long, requires = "gpr_inputs")]
    pub theta_grid: Option<PathBuf>,
    /// Weight grid points by prior times evidence instead of prior alone
    #[arg(long)]
    pub evidence_weighting: bool,
    /// Training inputs CSV, required with a kernel
    #[arg(long = "inputs", id = "gpr_inputs", requires = "gpr_outputs")]
    pub inputs: Option<PathBuf>,
    /// Training outputs CSV, required with a kernel
    #[arg(long = "outputs", id = "gpr_outputs")]
    pub outputs: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PropagateArgs {
    /// Posterior artifact JSON written by `fit`
    #[arg(long)]
    pub artifact: PathBuf,
    /// Input posterior CSV: parameter columns plus optional __weight
    #[arg(long)]
    pub input_posterior: PathBuf,
    /// Result CSV; printed when omitted
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Trust threshold
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Leave the surrogate-uncertainty term out of the total variance
    #[arg(long)]
    pub exclude_surrogate: bool,
    #[command(flatten)]
    pub gpr: GprArgs,
}

#[derive(Debug, Clone, Args)]
pub struct TrustArgs {
    #[arg(long)]
    pub artifact: PathBuf,
    #[arg(long)]
    pub input_posterior: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Report CSV; printed when omitted
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DemoArgs {
    #[arg(long, default_value_t = 100)]
    pub n_s: usize,
    #[arg(long, default_value_t = 50)]
    pub n_t: usize,
    #[arg(long, default_value_t = 2)]
    pub n_sites: usize,
    #[arg(long, default_value_t = 2)]
    pub degree: u32,
    /// Samples representing the input posterior
    #[arg(long, default_value_t = 4000)]
    pub n_input: usize,
    /// Standard deviation of the input posterior per parameter
    #[arg(long, default_value_t = 0.03)]
    pub input_sd: f64,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Band CSV; printed when omitted
    #[arg(long)]
    pub output: Option<PathBuf>,
}

impl DemoArgs {
    pub fn config(&self) -> DemoConfig {
        DemoConfig {
            n_s: self.n_s,
            n_t: self.n_t,
            n_sites: self.n_sites,
            degree: self.degree,
            n_input: self.n_input,
            input_sd: self.input_sd,
            seed: self.seed,
            epsilon: self.epsilon,
        }
    }
}

impl Default for DemoArgs {
    fn default() -> Self {
        let c = DemoConfig::default();
        DemoArgs {
            n_s: c.n_s,
            n_t: c.n_t,
            n_sites: c.n_sites,
            degree: c.degree,
            n_input: c.n_input,
            input_sd: c.input_sd,
            seed: c.seed,
            epsilon: c.epsilon,
            output: None,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    /// Training inputs CSV; a seeded synthetic instance is used when omitted
    #[arg(long, requires = "outputs")]
    pub inputs: Option<PathBuf>,
    #[arg(long, requires = "inputs")]
    pub outputs: Option<PathBuf>,
    /// Total degree for user data (N_p·N_x must not exceed 3)
    #[arg(long, default_value_t = 0)]
    pub degree: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report JSON; printed when omitted
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn emit(path: Option<&Path>, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => {
            let mut f = std::fs::File::create(p).map_err(|e| {
                Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display())))
            })?;
            write(&mut f)
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write(&mut lock)
        }
    }
}

/// What `fit` reports besides writing the artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub dims: Dims,
    pub chi2_min: f64,
    pub sigma2_hat: Option<f64>,
    pub condition: Option<f64>,
}

impl fmt::Display for FitSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let Dims { n_s, n_p, n_x } = self.dims;
        writeln!(f, "N_s        {n_s}")?;
        writeln!(f, "N_p        {n_p}")?;
        writeln!(f, "N_x        {n_x}")?;
        writeln!(f, "chi2_min   {}", format_g17(self.chi2_min))?;
        match self.sigma2_hat {
            Some(s) => writeln!(f, "sigma2_hat {}", format_g17(s))?,
            None => writeln!(f, "sigma2_hat undefined")?,
        }
        if let Some(c) = self.condition {
            writeln!(f, "condition  {c:.6e}")?;
        }
        let status = if self.dims.covariance_defined() {
            "ok"
        } else {
            "covariance-undefined: (N_s - N_p)·N_x <= 2"
        };
        write!(f, "dof        {status}")
    }
}

pub fn cmd_fit(args: &FitArgs) -> Result<FitSummary> {
    let (_, training) = io::read_training(&args.training.inputs, &args.training.outputs)?;
    let spec = args.basis.resolve(&training)?;
    let post = fit(&training, &spec)?;
    io::write_artifact(&args.artifact, &post)?;
    Ok(FitSummary {
        dims: post.dims(),
        chi2_min: post.chi2_min(),
        sigma2_hat: post.sigma2_hat(),
        condition: post.linear().condition(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceRow {
    pub degree: u32,
    pub n_p: usize,
    pub log_evidence: f64,
    pub posterior_prob: f64,
    pub status: String,
}

pub const EVIDENCE_HEADER: [&str; 5] = ["degree", "N_p", "log_evidence", "posterior_prob", "status"];

impl EvidenceRow {
    fn fields(&self) -> Vec<String> {
        vec![
            self.degree.to_string(),
            self.n_p.to_string(),
            format_g17(self.log_evidence),
            format_g17(self.posterior_prob),
            self.status.clone(),
        ]
    }
}

/// Ranks the degrees for a loaded training set; failing degrees follow the
/// ranked ones with their error tag as status.
pub fn evidence_table(training: &TrainingSet, degrees: &[u32], exec: Execution) -> Result<Vec<EvidenceRow>> {
    let domain = io::inferred_domain(training.inputs())?;
    let specs = degrees
        .iter()
        .map(|&d| BasisSpec::total_degree(d, domain.clone()))
        .collect::<Result<Vec<_>>>()?;
    let cmp = compare_models(training, &specs, exec)?;
    let mut rows: Vec<EvidenceRow> = cmp
        .ranked
        .iter()
        .map(|s| EvidenceRow {
            degree: degrees[s.id],
            n_p: s.n_basis,
            log_evidence: s.log_evidence,
            posterior_prob: s.probability,
            status: "ok".into(),
        })
        .collect();
    rows.extend(cmp.failures.iter().map(|(id, e)| EvidenceRow {
        degree: degrees[*id],
        n_p: specs[*id].n_basis(),
        log_evidence: f64::NAN,
        posterior_prob: 0.0,
        status: e.status_tag().into(),
    }));
    Ok(rows)
}

pub fn cmd_evidence(args: &EvidenceArgs, exec: Execution) -> Result<Vec<EvidenceRow>> {
    let (_, training) = io::read_training(&args.training.inputs, &args.training.outputs)?;
    let rows = evidence_table(&training, &args.degrees, exec)?;
    let fields: Vec<Vec<String>> = rows.iter().map(EvidenceRow::fields).collect();
    if let Some(p) = &args.output {
        io::write_rows_file(p, &EVIDENCE_HEADER, &fields)?;
    }
    emit(None, |w| io::write_rows(w, &EVIDENCE_HEADER, &fields))?;
    Ok(rows)
}

fn check_input_dims(names: &[String], spec: &BasisSpec) -> Result<()> {
    if names.len() != spec.n_params() {
        return Err(Error::contract(format!(
            "input posterior has {} parameter columns, the surrogate expects {}",
            names.len(),
            spec.n_params()
        )));
    }
    Ok(())
}

/// Runs the propagation and writes the CSV. When the surrogate term is
/// requested but undefined, the naive result is still written before the
/// error is returned.
pub fn cmd_propagate(args: &PropagateArgs, exec: Execution) -> Result<PropagationResult> {
    let post = io::read_artifact(&args.artifact)?;
    let (names, input) = io::read_input_posterior_file(&args.input_posterior)?;
    check_input_dims(&names, post.spec())?;
    let include = !args.exclude_surrogate;
    let result = match (&args.gpr.kernel, &args.gpr.theta_grid) {
        (None, None) => {
            let moments = basis_moments(post.spec(), &input, exec)?;
            propagate_covariance(&post, &moments, include, args.epsilon)
        }
        (kernel, grid) => {
            let (Some(inputs), Some(outputs)) = (&args.gpr.inputs, &args.gpr.outputs) else {
                return Err(Error::contract("kernelized propagation needs --inputs and --outputs"));
            };
            let (_, training) = io::read_training(inputs, outputs)?;
            if training.site_labels() != post.site_labels() {
                log::warn!("training site labels differ from the artifact's; using the training labels");
            }
            let grid = match (kernel, grid) {
                (Some(k), _) => ThetaGrid::single(io::read_json::<Kernel>(k)?),
                (None, Some(g)) => io::read_json::<ThetaGrid>(g)?,
                (None, None) => unreachable!(),
            };
            let weighting = if args.gpr.evidence_weighting {
                ThetaWeighting::Evidence
            } else {
                ThetaWeighting::Prior
            };
            let mix = marginalize_theta(&training, post.spec(), &grid, weighting, exec)?;
            mix.propagate(&input, include, args.epsilon, exec)
        }
    };
    match result {
        Ok(r) => {
            emit(args.output.as_deref(), |w| io::write_propagation_csv(w, &r))?;
            Ok(r)
        }
        Err(Error::CovarianceUndefined { n_s, n_p, n_x, naive: Some(r) }) => {
            emit(args.output.as_deref(), |w| io::write_propagation_csv(w, &r))?;
            Err(Error::CovarianceUndefined { n_s, n_p, n_x, naive: Some(r) })
        }
        Err(e) => Err(e),
    }
}

pub const TRUST_HEADER: [&str; 4] = ["site", "trust_ratio", "trust_ratio_centered", "trustworthy"];

pub fn cmd_trust(args: &TrustArgs, exec: Execution) -> Result<TrustReport> {
    let post = io::read_artifact(&args.artifact)?;
    let (names, input) = io::read_input_posterior_file(&args.input_posterior)?;
    check_input_dims(&names, post.spec())?;
    let moments = basis_moments(post.spec(), &input, exec)?;
    let report = trust_ratio(&post, &moments, args.epsilon)?;
    let rows: Vec<Vec<String>> = post
        .site_labels()
        .iter()
        .enumerate()
        .map(|(x, label)| {
            vec![
                label.clone(),
                format_g17(report.ratio[x]),
                format_g17(report.ratio_centered[x]),
                report.trustworthy[x].to_string(),
            ]
        })
        .collect();
    emit(args.output.as_deref(), |w| io::write_rows(w, &TRUST_HEADER, &rows))?;
    Ok(report)
}

pub fn cmd_demo(args: &DemoArgs, exec: Execution) -> Result<DemoResult> {
    let result = run_demo(&args.config(), exec)?;
    let rows: Vec<Vec<String>> = result.rows.iter().map(|r| r.fields()).collect();
    emit(args.output.as_deref(), |w| io::write_rows(w, &DEMO_HEADER, &rows))?;
    Ok(result)
}

pub fn cmd_verify(args: &VerifyArgs, exec: Execution) -> Result<Vec<VerifyCheck>> {
    let (training, spec) = match (&args.inputs, &args.outputs) {
        (Some(i), Some(o)) => {
            let (_, t) = io::read_training(i, o)?;
            let spec = BasisSpec::total_degree(args.degree, io::inferred_domain(t.inputs())?)?;
            (t, spec)
        }
        _ => random_instance(8, 1, 1, 1, 0.3, args.seed)?,
    };
    let checks = verify_report(&training, &spec, args.seed, exec)?;
    emit(args.output.as_deref(), |w| {
        serde_json::to_writer_pretty(&mut *w, &checks)?;
        writeln!(w)?;
        Ok(())
    })?;
    Ok(checks)
}

/// Dispatches a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    par::init_threads(cli.threads);
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match &cli.command {
        Command::Fit(a) => println!("{}", cmd_fit(a)?),
        Command::Evidence(a) => {
            cmd_evidence(a, exec)?;
        }
        Command::Propagate(a) => {
            cmd_propagate(a, exec)?;
        }
        Command::Trust(a) => {
            cmd_trust(a, exec)?;
        }
        Command::Demo(a) => {
            let r = cmd_demo(a, exec)?;
            eprintln!(
                "median surrogate share: first quartile {:.4}, last quartile {:.4}",
                r.share_first_quartile, r.share_last_quartile
            );
        }
        Command::Verify(a) => {
            let checks = cmd_verify(a, exec)?;
            let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.check.as_str()).collect();
            if !failed.is_empty() {
                return Err(Error::contract(format!("oracle checks failed: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}
