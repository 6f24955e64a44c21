//! End-to-end run on the toy simulator: per-time-index surrogates propagated
//! under a narrow input posterior, reported as plot-ready bands.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::basis::{total_degree_index_set, BasisSpec};
use crate::error::{Error, Result};
use crate::io::format_g17;
use crate::oracle::{toy_simulator, TOY_PARAMS};
use crate::par::{self, Execution};
use crate::propagate::{basis_moments, propagate_covariance, InputPosterior, DEFAULT_EPSILON};
use crate::surrogate::{fit, TrainingSet};

/// Center of the demo input posterior.
pub const INPUT_CENTER: [f64; TOY_PARAMS] = [0.2, -0.1, 0.3, 0.0];

#[derive(Debug, Clone, PartialEq)]
pub struct DemoConfig {
    pub n_s: usize,
    pub n_t: usize,
    pub n_sites: usize,
    pub degree: u32,
    /// Samples representing the input posterior.
    pub n_input: usize,
    /// Per-parameter standard deviation of the input posterior.
    pub input_sd: f64,
    pub seed: u64,
    pub epsilon: f64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            n_s: 100,
            n_t: 50,
            n_sites: 2,
            degree: 2,
            n_input: 4000,
            input_sd: 0.03,
            seed: 2024,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoRow {
    pub time: usize,
    pub site: usize,
    pub mean: f64,
    pub sd_naive: f64,
    pub sd_total: f64,
    pub surrogate_share: f64,
    pub trust_ratio: f64,
    pub trustworthy: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoResult {
    pub rows: Vec<DemoRow>,
    /// Median surrogate share over sites and the first quarter of times.
    pub share_first_quartile: f64,
    /// Same over the last quarter of times.
    pub share_last_quartile: f64,
}

pub const DEMO_HEADER: [&str; 12] = [
    "time",
    "site",
    "mean",
    "sd_naive",
    "sd_total",
    "lower_naive",
    "upper_naive",
    "lower_total",
    "upper_total",
    "surrogate_share",
    "trust_ratio",
    "trustworthy",
];

impl DemoRow {
    pub fn fields(&self) -> Vec<String> {
        vec![
            self.time.to_string(),
            self.site.to_string(),
            format_g17(self.mean),
            format_g17(self.sd_naive),
            format_g17(self.sd_total),
            format_g17(self.mean - self.sd_naive),
            format_g17(self.mean + self.sd_naive),
            format_g17(self.mean - self.sd_total),
            format_g17(self.mean + self.sd_total),
            format_g17(self.surrogate_share),
            format_g17(self.trust_ratio),
            self.trustworthy.to_string(),
        ]
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Gaussian around [`INPUT_CENTER`], resampled until inside `[-0.95, 0.95]⁴`.
fn input_posterior(n: usize, sd: f64, rng: &mut ChaCha8Rng) -> Result<InputPosterior> {
    let normal = Normal::new(0.0, sd).map_err(|e| Error::contract(e.to_string()))?;
    let mut samples = DMatrix::zeros(n, TOY_PARAMS);
    for j in 0..n {
        for k in 0..TOY_PARAMS {
            samples[(j, k)] = loop {
                let v = INPUT_CENTER[k] + normal.sample(rng);
                if v.abs() <= 0.95 {
                    break v;
                }
            };
        }
    }
    InputPosterior::new(samples, None)
}

/// Fits one surrogate per time index over all sites and propagates the
/// input posterior through each.
pub fn run_demo(config: &DemoConfig, exec: Execution) -> Result<DemoResult> {
    if config.n_t == 0 || config.n_sites == 0 || config.n_input == 0 {
        return Err(Error::contract("demo needs at least one time, site and input sample"));
    }
    let n_p = total_degree_index_set(TOY_PARAMS, config.degree).len();
    if config.n_s < n_p {
        return Err(Error::Underdetermined {
            n_s: config.n_s,
            n_p,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let inputs = DMatrix::from_fn(config.n_s, TOY_PARAMS, |_, _| rng.random_range(-1.0..=1.0));
    let input = input_posterior(config.n_input, config.input_sd, &mut rng)?;
    let spec = BasisSpec::total_degree(config.degree, vec![[-1.0, 1.0]; TOY_PARAMS])?;
    let moments = basis_moments(&spec, &input, exec)?;
    let labels: Vec<String> = (0..config.n_sites).map(|s| format!("site{s}")).collect();

    let per_time = par::map_indices(exec, config.n_t, |t| -> Result<Vec<DemoRow>> {
        let mut z = DMatrix::zeros(config.n_s, config.n_sites);
        for i in 0..config.n_s {
            let a: Vec<f64> = inputs.row(i).iter().copied().collect();
            for s in 0..config.n_sites {
                z[(i, s)] = toy_simulator(&a, s, t, config.n_t)?;
            }
        }
        let training = TrainingSet::new(inputs.clone(), z, labels.clone())?;
        let post = fit(&training, &spec)?;
        let r = propagate_covariance(&post, &moments, true, config.epsilon)?;
        let (naive, total) = (r.var_naive(), r.var_total());
        Ok((0..config.n_sites)
            .map(|s| DemoRow {
                time: t,
                site: s,
                mean: r.mean[s],
                sd_naive: naive[s].max(0.0).sqrt(),
                sd_total: total[s].max(0.0).sqrt(),
                surrogate_share: r.surrogate_share[s],
                trust_ratio: r.trust_ratio[s],
                trustworthy: r.trustworthy[s],
            })
            .collect())
    });
    let mut rows = Vec::with_capacity(config.n_t * config.n_sites);
    for r in per_time {
        rows.extend(r?);
    }
    let quarter = (config.n_t / 4).max(1);
    let share_in = |keep: &dyn Fn(usize) -> bool| {
        median(rows.iter().filter(|r| keep(r.time)).map(|r| r.surrogate_share).collect())
    };
    let share_first_quartile = share_in(&|t| t < quarter);
    let share_last_quartile = share_in(&|t| t + quarter >= config.n_t);
    Ok(DemoResult {
        rows,
        share_first_quartile,
        share_last_quartile,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn surrogate_share_grows_with_time() {
        let config = DemoConfig {
            n_t: 12,
            ..DemoConfig::default()
        };
        let r = run_demo(&config, Execution::Parallel).unwrap();
        assert_eq!(r.rows.len(), 24);
        assert!(r.share_first_quartile < r.share_last_quartile);
        assert!(r.rows[0].surrogate_share < 1e-12);
    }

    #[test]
    fn underdetermined_before_simulating() {
        let config = DemoConfig {
            n_s: 10,
            ..DemoConfig::default()
        };
        assert!(matches!(
            run_demo(&config, Execution::Sequential),
            Err(Error::Underdetermined { n_s: 10, n_p: 15 })
        ));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}

