//! File formats: CSV training data and input posteriors, the posterior
//! artifact JSON, and CSV reports.
//!
//! Floats are written with 17 significant digits and a `.` separator
//! regardless of locale.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::error::{Error, Result};
use crate::propagate::{flatten_spacetime, InputPosterior, PropagationResult};
use crate::surrogate::{CoefficientPosterior, Dims, LinearFit, TrainingSet};

pub const ARTIFACT_FORMAT_VERSION: u32 = 1;
/// Name of the optional weight column of an input-posterior CSV.
pub const WEIGHT_COLUMN: &str = "__weight";
/// Relative padding added to each side of an inferred input domain.
pub const DOMAIN_MARGIN: f64 = 0.01;

/// Formats like C's `%.17g`: enough digits to round-trip any `f64`.
pub fn format_g17(v: f64) -> String {
    if v.is_nan() {
        return "NaN".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{v:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..17).contains(&exp) {
        let decimals = (16 - exp) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        let m = trim_zeros(mantissa.to_string());
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn parse_field(raw: &str, line: usize, column: &str) -> Result<f64> {
    let v: f64 = raw.trim().parse().map_err(|_| Error::Parse {
        line,
        column: Some(column.to_string()),
        message: format!("cannot parse {raw:?} as a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            column: Some(column.to_string()),
            message: format!("non-finite value {raw:?}"),
        });
    }
    Ok(v)
}

/// A numeric CSV table with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: DMatrix<f64>,
}

/// Reads a headed CSV whose every field is a finite number.
pub fn read_numeric_csv<R: Read>(reader: R) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if headers.is_empty() {
        return Err(Error::Parse {
            line: 1,
            column: None,
            message: "missing header row".into(),
        });
    }
    let mut data = Vec::new();
    let mut n_rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        for (raw, name) in rec.iter().zip(&headers) {
            data.push(parse_field(raw, line, name)?);
        }
        n_rows += 1;
    }
    if n_rows == 0 {
        return Err(Error::Parse {
            line: 1,
            column: None,
            message: "no data rows".into(),
        });
    }
    Ok(Table {
        rows: DMatrix::from_row_slice(n_rows, headers.len(), &data),
        headers,
    })
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

/// Training outputs, either one column per observable or long format with
/// columns `sample,site,time,value`.
fn read_outputs<R: Read>(reader: R, n_samples: usize) -> Result<(DMatrix<f64>, Vec<String>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if headers != ["sample", "site", "time", "value"] {
        let mut data = Vec::new();
        let mut n_rows = 0;
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            for (raw, name) in rec.iter().zip(&headers) {
                data.push(parse_field(raw, line, name)?);
            }
            n_rows += 1;
        }
        return Ok((DMatrix::from_row_slice(n_rows, headers.len(), &data), headers));
    }

    let mut sites: Vec<String> = Vec::new();
    let mut site_ids: HashMap<String, usize> = HashMap::new();
    let mut entries = Vec::new();
    let mut n_t = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let int = |i: usize, name: &str| -> Result<usize> {
            rec[i].parse().map_err(|_| Error::Parse {
                line,
                column: Some(name.into()),
                message: format!("expected a non-negative integer, got {:?}", &rec[i]),
            })
        };
        let sample = int(0, "sample")?;
        let time = int(2, "time")?;
        let site = rec[1].to_string();
        let next = sites.len();
        let id = *site_ids.entry(site.clone()).or_insert_with(|| {
            sites.push(site);
            next
        });
        if sample >= n_samples {
            return Err(Error::Parse {
                line,
                column: Some("sample".into()),
                message: format!("sample {sample} but only {n_samples} training inputs"),
            });
        }
        n_t = n_t.max(time + 1);
        entries.push((line, sample, id, time, parse_field(&rec[3], line, "value")?));
    }
    let n_sites = sites.len();
    let mut z = DMatrix::from_element(n_samples, n_sites * n_t, f64::NAN);
    for (line, sample, site, time, v) in entries {
        let col = flatten_spacetime(n_sites, n_t, site, time)?;
        if !z[(sample, col)].is_nan() {
            return Err(Error::Parse {
                line,
                column: None,
                message: format!("duplicate entry for sample {sample}, site {}, time {time}", sites[site]),
            });
        }
        z[(sample, col)] = v;
    }
    if let Some(k) = z.iter().position(|v| v.is_nan()) {
        let (i, col) = (k % n_samples, k / n_samples);
        return Err(Error::contract(format!(
            "long-format outputs miss sample {i}, site {}, time {}",
            sites[col / n_t],
            col % n_t
        )));
    }
    let labels = (0..n_sites * n_t)
        .map(|col| format!("{}@{}", sites[col / n_t], col % n_t))
        .collect();
    Ok((z, labels))
}

/// Reads training inputs and outputs. Rows are matched by position; long-format
/// outputs refer to input rows through their 0-based `sample` column.
pub fn read_training(inputs: &Path, outputs: &Path) -> Result<(Vec<String>, TrainingSet)> {
    let table = read_numeric_csv(open(inputs)?)?;
    let (z, labels) = read_outputs(open(outputs)?, table.rows.nrows())?;
    let training = TrainingSet::new(table.rows, z, labels)?;
    Ok((table.headers, training))
}

/// Reads an input posterior: named parameter columns plus an optional
/// `__weight` column.
pub fn read_input_posterior<R: Read>(reader: R) -> Result<(Vec<String>, InputPosterior)> {
    let table = read_numeric_csv(reader)?;
    let wcol = table.headers.iter().position(|h| h == WEIGHT_COLUMN);
    let names: Vec<String> = table
        .headers
        .iter()
        .filter(|h| *h != WEIGHT_COLUMN)
        .cloned()
        .collect();
    let n = table.rows.nrows();
    let cols: Vec<usize> = (0..table.headers.len()).filter(|&c| Some(c) != wcol).collect();
    let samples = DMatrix::from_fn(n, cols.len(), |i, k| table.rows[(i, cols[k])]);
    let weights = wcol.map(|c| table.rows.column(c).iter().copied().collect());
    Ok((names, InputPosterior::new(samples, weights)?))
}

pub fn read_input_posterior_file(path: &Path) -> Result<(Vec<String>, InputPosterior)> {
    read_input_posterior(open(path)?)
}

/// Per-parameter box spanning the training inputs, padded by
/// [`DOMAIN_MARGIN`] of the range on each side.
pub fn inferred_domain(inputs: &DMatrix<f64>) -> Result<Vec<[f64; 2]>> {
    (0..inputs.ncols())
        .map(|k| {
            let col = inputs.column(k);
            let (lo, hi) = (col.min(), col.max());
            if lo >= hi {
                return Err(Error::contract(format!(
                    "input column {k} is constant; cannot infer its domain"
                )));
            }
            let pad = DOMAIN_MARGIN * (hi - lo);
            Ok([lo - pad, hi + pad])
        })
        .collect()
}

/// Serialized coefficient posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorArtifact {
    pub spec: BasisSpec,
    pub c_hat: Vec<Vec<f64>>,
    pub h_matrix: Vec<Vec<f64>>,
    pub chi2_min: f64,
    pub sigma2_hat: Option<f64>,
    pub dims: Dims,
    pub site_labels: Vec<String>,
    pub format_version: u32,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_of(rows: &[Vec<f64>], n_rows: usize, n_cols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != n_rows || rows.iter().any(|r| r.len() != n_cols) {
        return Err(Error::contract(format!("artifact {what} is not {n_rows} x {n_cols}")));
    }
    Ok(DMatrix::from_fn(n_rows, n_cols, |i, j| rows[i][j]))
}

impl PosteriorArtifact {
    pub fn from_posterior(post: &CoefficientPosterior) -> Self {
        PosteriorArtifact {
            spec: post.spec().clone(),
            c_hat: rows_of(post.c_hat()),
            h_matrix: rows_of(post.linear().h_matrix()),
            chi2_min: post.chi2_min(),
            sigma2_hat: post.sigma2_hat(),
            dims: post.dims(),
            site_labels: post.site_labels().to_vec(),
            format_version: ARTIFACT_FORMAT_VERSION,
        }
    }

    /// Rebuilds the posterior, re-factorizing `H_s`.
    pub fn into_posterior(self) -> Result<CoefficientPosterior> {
        if self.format_version != ARTIFACT_FORMAT_VERSION {
            return Err(Error::contract(format!(
                "unsupported artifact format version {}",
                self.format_version
            )));
        }
        let Dims { n_s, n_p, n_x } = self.dims;
        if n_p != self.spec.n_basis() || self.site_labels.len() != n_x {
            return Err(Error::contract("artifact dims disagree with its spec or site labels"));
        }
        let c_hat = matrix_of(&self.c_hat, n_p, n_x, "c_hat")?;
        let h = matrix_of(&self.h_matrix, n_p, n_p, "h_matrix")?;
        let fit = LinearFit::from_parts(c_hat, h, self.chi2_min, n_s)?;
        match (fit.sigma2_hat(), self.sigma2_hat) {
            (Some(a), Some(b)) if (a - b).abs() <= 1e-12 * a.abs().max(b.abs()) => {}
            (None, None) => {}
            (a, b) => {
                return Err(Error::contract(format!(
                    "artifact sigma2_hat {b:?} disagrees with chi2_min and dims ({a:?})"
                )))
            }
        }
        CoefficientPosterior::from_fit(self.spec, self.site_labels, fit)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(std::io::BufReader::new(open(path)?))?)
}

pub fn write_artifact(path: &Path, post: &CoefficientPosterior) -> Result<()> {
    write_json(path, &PosteriorArtifact::from_posterior(post))
}

pub fn read_artifact(path: &Path) -> Result<CoefficientPosterior> {
    read_json::<PosteriorArtifact>(path)?.into_posterior()
}

pub const PROPAGATION_HEADER: [&str; 9] = [
    "site",
    "mean",
    "var_naive",
    "var_total",
    "surrogate_term",
    "surrogate_share",
    "trust_ratio",
    "trustworthy",
    "status",
];

/// One row per site; `status` records whether the surrogate term was
/// included, excluded or undefined.
pub fn write_propagation_csv<W: Write>(writer: W, result: &PropagationResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(PROPAGATION_HEADER)?;
    let (naive, total) = (result.var_naive(), result.var_total());
    for x in 0..result.n_sites() {
        w.write_record([
            result.site_labels[x].clone(),
            format_g17(result.mean[x]),
            format_g17(naive[x]),
            format_g17(total[x]),
            format_g17(result.surrogate_term),
            format_g17(result.surrogate_share[x]),
            format_g17(result.trust_ratio[x]),
            result.trustworthy[x].to_string(),
            result.status.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_propagation_file(path: &Path, result: &PropagationResult) -> Result<()> {
    write_propagation_csv(create(path)?, result)
}

/// Writes rows of already formatted fields under `header`.
pub fn write_rows<W: Write>(writer: W, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rows_file(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_rows(create(path)?, header, rows)
}
