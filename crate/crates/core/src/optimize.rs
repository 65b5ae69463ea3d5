//! One-dimensional Bayesian optimization of the merge weight.
//!
//! A zero-mean Gaussian process with a squared-exponential kernel models the
//! objective; the next point maximizes expected improvement over a dense
//! grid plus the midpoints between evaluated points. Everything is
//! deterministic: the same config and objective always produce the same log.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

use crate::error::{Error, Result};

const SCAN_POINTS: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub bounds: [f64; 2],
    pub budget: usize,
    pub init_points: usize,
    pub seed: u64,
    pub noise_floor: f64,
    pub kernel_lengthscale: f64,
    pub kernel_variance: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            bounds: [0.0, 1.0],
            budget: 10,
            init_points: 3,
            seed: 0,
            noise_floor: 1e-6,
            kernel_lengthscale: 0.2,
            kernel_variance: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.bounds;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidArgument(format!(
                "bounds [{lo}, {hi}] are degenerate"
            )));
        }
        if self.budget == 0 || self.init_points == 0 {
            return Err(Error::InvalidArgument(
                "budget and init_points must be positive".into(),
            ));
        }
        if self.init_points > self.budget {
            return Err(Error::InvalidArgument(format!(
                "init_points {} exceeds budget {}",
                self.init_points, self.budget
            )));
        }
        for (name, v) in [
            ("noise_floor", self.noise_floor),
            ("kernel_lengthscale", self.kernel_lengthscale),
            ("kernel_variance", self.kernel_variance),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Initial design: evenly spaced over the bounds, endpoints included;
    /// a single point sits at the midpoint.
    pub fn initial_design(&self) -> Vec<f64> {
        let [lo, hi] = self.bounds;
        match self.init_points {
            0 => vec![],
            1 => vec![0.5 * (lo + hi)],
            n => (0..n)
                .map(|i| {
                    if i == n - 1 {
                        hi
                    } else {
                        lo + (hi - lo) * i as f64 / (n - 1) as f64
                    }
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub lambda: f64,
    pub score: f64,
}

/// Every evaluation of a run, in order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialLog {
    trials: Vec<Trial>,
}

impl TrialLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, trial: Trial) {
        self.trials.push(trial);
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    /// Lowest score; ties go to the smaller lambda.
    pub fn best(&self) -> Option<Trial> {
        self.trials.iter().copied().reduce(|best, t| {
            if t.score < best.score || (t.score == best.score && t.lambda < best.lambda) {
                t
            } else {
                best
            }
        })
    }

    pub fn best_lambda(&self) -> Option<f64> {
        self.best().map(|t| t.lambda)
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best().map(|t| t.score)
    }

    /// One `{"lambda","wer","index"}` object per trial, then a
    /// `{"best_lambda","best_wer"}` summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (index, t) in self.trials.iter().enumerate() {
            let line = serde_json::json!({"lambda": t.lambda, "wer": t.score, "index": index});
            writeln!(out, "{line}").expect("writing to a String");
        }
        if let Some(best) = self.best() {
            let line = serde_json::json!({"best_lambda": best.lambda, "best_wer": best.score});
            writeln!(out, "{line}").expect("writing to a String");
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Line {
            Trial { lambda: f64, wer: f64, index: usize },
            Summary { best_lambda: f64, best_wer: f64 },
        }

        let mut log = TrialLog::new();
        let mut summary = None;
        for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parsed: Line = serde_json::from_str(line)
                .map_err(|e| Error::Parse(format!("trial log line {}: {e}", lineno + 1)))?;
            match parsed {
                Line::Trial { lambda, wer, index } => {
                    if index != log.len() {
                        return Err(Error::Parse(format!(
                            "trial log line {}: index {index} out of sequence",
                            lineno + 1
                        )));
                    }
                    log.push(Trial { lambda, score: wer });
                }
                Line::Summary { best_lambda, best_wer } => summary = Some((best_lambda, best_wer)),
            }
        }
        if let Some((lambda, score)) = summary {
            if log.best() != Some(Trial { lambda, score }) {
                return Err(Error::Parse("trial log summary disagrees with its trials".into()));
            }
        }
        Ok(log)
    }
}

/// Gaussian-process regression in one dimension.
#[derive(Debug, Clone)]
pub struct GaussianProcess {
    xs: Vec<f64>,
    chol: Vec<Vec<f64>>,
    weights: Vec<f64>,
    lengthscale: f64,
    variance: f64,
}

impl GaussianProcess {
    pub fn fit(points: &[(f64, f64)], lengthscale: f64, variance: f64, noise: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("GP needs at least one observation".into()));
        }
        let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
        let n = xs.len();
        let mut gram = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                gram[i][j] = se_kernel(xs[i], xs[j], lengthscale, variance);
            }
            gram[i][i] += noise;
        }
        let chol = cholesky(&gram)?;
        let weights = backward_solve(&chol, &forward_solve(&chol, &ys));
        Ok(GaussianProcess {
            xs,
            chol,
            weights,
            lengthscale,
            variance,
        })
    }

    /// Posterior mean and standard deviation at `x`.
    pub fn predict(&self, x: f64) -> (f64, f64) {
        let k: Vec<f64> = self
            .xs
            .iter()
            .map(|&xi| se_kernel(x, xi, self.lengthscale, self.variance))
            .collect();
        let mean = k.iter().zip(&self.weights).map(|(a, b)| a * b).sum();
        let v = forward_solve(&self.chol, &k);
        let var = self.variance - v.iter().map(|x| x * x).sum::<f64>();
        (mean, var.max(0.0).sqrt())
    }
}

fn se_kernel(a: f64, b: f64, lengthscale: f64, variance: f64) -> f64 {
    let d = a - b;
    variance * (-d * d / (2.0 * lengthscale * lengthscale)).exp()
}

fn cholesky(m: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = m.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = m[i][i] - s;
                if !(d > 0.0) {
                    return Err(Error::Numerical(
                        "kernel matrix is not positive definite".into(),
                    ));
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (m[i][j] - s) / l[j][j];
            }
        }
    }
    Ok(l)
}

fn forward_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; b.len()];
    for i in 0..b.len() {
        let s: f64 = (0..i).map(|k| l[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / l[i][i];
    }
    x
}

fn backward_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k][i] * x[k]).sum();
        x[i] = (b[i] - s) / l[i][i];
    }
    x
}

/// Posterior of a GP fitted to every trial in `log`, with the kernel and
/// noise settings from `config`.
pub fn gp_posterior(log: &TrialLog, query: f64, config: &OptimizerConfig) -> Result<(f64, f64)> {
    let points: Vec<(f64, f64)> = log.trials().iter().map(|t| (t.lambda, t.score)).collect();
    let gp = GaussianProcess::fit(
        &points,
        config.kernel_lengthscale,
        config.kernel_variance,
        config.noise_floor,
    )?;
    Ok(gp.predict(query))
}

/// Expected improvement below `best` for a minimization problem.
pub fn expected_improvement(mean: f64, stddev: f64, best: f64) -> f64 {
    let gain = best - mean;
    if stddev <= 0.0 {
        return gain.max(0.0);
    }
    let z = gain / stddev;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    (gain * std_normal.cdf(z) + stddev * std_normal.pdf(z)).max(0.0)
}

/// Candidate set for the acquisition scan: an even grid over the bounds plus
/// the midpoints between adjacent evaluated points, sorted and deduplicated.
pub fn acquisition_candidates(log: &TrialLog, bounds: [f64; 2]) -> Vec<f64> {
    let [lo, hi] = bounds;
    let mut out: Vec<f64> = (0..SCAN_POINTS)
        .map(|i| {
            if i == SCAN_POINTS - 1 {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (SCAN_POINTS - 1) as f64
            }
        })
        .collect();
    let mut seen: Vec<f64> = log.trials().iter().map(|t| t.lambda).collect();
    seen.sort_by(f64::total_cmp);
    seen.dedup();
    out.extend(seen.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

fn propose(log: &TrialLog, config: &OptimizerConfig) -> Result<f64> {
    let points: Vec<(f64, f64)> = log.trials().iter().map(|t| (t.lambda, t.score)).collect();
    let gp = GaussianProcess::fit(
        &points,
        config.kernel_lengthscale,
        config.kernel_variance,
        config.noise_floor,
    )?;
    let best = log.best_score().expect("proposals follow the initial design");
    let mut choice = (f64::NEG_INFINITY, config.bounds[0]);
    for x in acquisition_candidates(log, config.bounds) {
        let (mean, std) = gp.predict(x);
        let ei = expected_improvement(mean, std, best);
        if ei > choice.0 {
            choice = (ei, x);
        }
    }
    Ok(choice.1)
}

/// An optimization run that stopped early; `partial` holds every trial that
/// completed before the failure.
#[derive(Debug, Error)]
#[error("optimization aborted after {} trials: {source}", partial.len())]
pub struct OptimizeError {
    pub partial: TrialLog,
    #[source]
    pub source: Error,
}

/// Runs exactly `config.budget` sequential evaluations of `objective`.
pub fn optimize<F>(mut objective: F, config: &OptimizerConfig) -> Result<TrialLog, OptimizeError>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut log = TrialLog::new();
    let fail = |log: &TrialLog, source| OptimizeError {
        partial: log.clone(),
        source,
    };
    config.validate().map_err(|e| fail(&log, e))?;

    let design = config.initial_design();
    for step in 0..config.budget {
        let lambda = match design.get(step) {
            Some(&x) => x,
            None => propose(&log, config).map_err(|e| fail(&log, e))?,
        };
        let score = objective(lambda).map_err(|e| fail(&log, e))?;
        if !score.is_finite() {
            return Err(fail(
                &log,
                Error::Numerical(format!("objective returned {score} at lambda {lambda}")),
            ));
        }
        log::debug!("trial {step}: lambda={lambda} score={score}");
        log.push(Trial { lambda, score });
    }
    Ok(log)
}
