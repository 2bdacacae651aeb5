//! Monte-Carlo study harness: repeated simulation and estimation with
//! bias / SD / RMSE / coverage accounting per estimator and parameter.

use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::blip::BuiltinBlip;
use crate::config::EstimationConfig;
use crate::error::{Error, Result};
use crate::estimators::{run_menu, MenuId};
use crate::par;
use crate::rng::{derive_seed, StreamKind};
use crate::simulator::{simulate, SimulationConfig};

/// Controlled model misspecifications for robustness studies. Each toggle
/// changes exactly one nuisance model; the effective configuration is echoed
/// in the report.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Misspecification {
    /// Drop the current outcome from the initiation model, hiding the main
    /// confounder.
    pub drop_outcome_from_propensity: bool,
    /// Reduce every outcome regression to an intercept.
    pub intercept_only_h: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub replicates: usize,
    /// Patients per replicate.
    pub n: usize,
    pub estimators: Vec<MenuId>,
    pub estimation: EstimationConfig,
    /// Data-generating parameters; `n` and `seed` are set per replicate.
    pub simulation: SimulationConfig,
    pub misspecification: Misspecification,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            replicates: 200,
            n: 2000,
            estimators: vec![
                MenuId::Preliminary,
                MenuId::DrPreliminary,
                MenuId::DrIdentity,
                MenuId::DrOptimal,
            ],
            estimation: EstimationConfig::default(),
            simulation: SimulationConfig::default(),
            misspecification: Misspecification::default(),
            seed: 0,
        }
    }
}

impl StudyConfig {
    /// The estimation configuration with misspecification toggles applied.
    pub fn effective_estimation(&self) -> EstimationConfig {
        let mut config = self.estimation.clone();
        if self.misspecification.drop_outcome_from_propensity {
            config.propensity.features.retain(|f| f != "y");
        }
        if self.misspecification.intercept_only_h {
            config.nuisance.h_features.clear();
            config.nuisance.prelim_h_features.clear();
        }
        config
    }

    /// True parameter vector padded to the blip dimension (the quadratic
    /// month term of the three-parameter model is truly zero).
    pub fn truth(&self) -> Vec<f64> {
        let dim = match self.estimation.blip {
            BuiltinBlip::TwoParam => 2,
            BuiltinBlip::ThreeParam => 3,
        };
        let mut truth = vec![0.0; dim];
        truth[0] = self.simulation.psi_true[0];
        truth[1] = self.simulation.psi_true[1];
        truth
    }

    fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("a study needs at least one replicate".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("a study needs at least one estimator".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamStats {
    pub parameter: usize,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    /// Monte-Carlo standard deviation (population normalization, so that
    /// `rmse^2 = bias^2 + sd^2` holds exactly).
    pub sd: f64,
    pub rmse: f64,
    pub mean_sandwich_se: f64,
    /// Fraction of replicates whose sandwich Wald interval covers the truth.
    pub ci_coverage: f64,
}

/// One-year effect `12 (ψ₁ + ψ₂ m + …)` summaries at each initiation month.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonthEffectStats {
    pub month: i32,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorStudySummary {
    pub menu: MenuId,
    pub params: Vec<ParamStats>,
    pub one_year_effects: Vec<MonthEffectStats>,
    pub failures: usize,
    /// Set when more than 10% of replicates failed.
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub estimators: Vec<EstimatorStudySummary>,
    pub runtime_seconds: f64,
}

/// One-year-effect feature row at month `m` for the built-in blips:
/// `12 * (1, m, m^2, ...)` truncated to the dimension.
fn one_year_features(dim: usize, m: i32) -> Vec<f64> {
    (0..dim)
        .map(|j| 12.0 * f64::from(m).powi(j as i32))
        .collect()
}

/// Runs the study: per replicate, simulate a fresh cohort and run every
/// requested estimator. Replicates are independent and indexed, so the
/// report is identical for a given seed regardless of worker count.
pub fn run_study(config: &StudyConfig) -> Result<StudyReport> {
    config.validate()?;
    let start = Instant::now();
    let estimation = config.effective_estimation();
    let truth = config.truth();
    let dim = truth.len();

    type ReplicateOutcome = Vec<Result<(Vec<f64>, Vec<f64>)>>;
    let replicate_results: Vec<Result<ReplicateOutcome>> =
        par::map_indexed(config.replicates, |r| {
            let sim = SimulationConfig {
                n: config.n,
                seed: derive_seed(config.seed, StreamKind::StudyReplicate, &[r as u64]),
                ..config.simulation.clone()
            };
            let cohort = simulate(&sim)?;
            let runs = run_menu(&cohort.observed, &config.estimators, &estimation)?;
            Ok(runs
                .into_iter()
                .map(|run| run.map(|res| (res.psi_hat, res.standard_errors)))
                .collect())
        });

    let mut per_estimator: Vec<Vec<(Vec<f64>, Vec<f64>)>> =
        vec![Vec::with_capacity(config.replicates); config.estimators.len()];
    let mut failures = vec![0usize; config.estimators.len()];
    for replicate in replicate_results {
        let replicate = replicate?;
        for (e, run) in replicate.into_iter().enumerate() {
            match run {
                Ok(values) => per_estimator[e].push(values),
                Err(_) => failures[e] += 1,
            }
        }
    }

    let z = 1.959_963_984_540_054_f64;
    let months: Vec<i32> =
        (config.simulation.initiation_first..=config.simulation.initiation_last).collect();
    let mut summaries = Vec::with_capacity(config.estimators.len());
    for (e, &menu) in config.estimators.iter().enumerate() {
        let runs = &per_estimator[e];
        let n_ok = runs.len();
        let mut params = Vec::with_capacity(dim);
        for j in 0..dim {
            let estimates: Vec<f64> = runs.iter().map(|(psi, _)| psi[j]).collect();
            let ses: Vec<f64> = runs.iter().map(|(_, se)| se[j]).collect();
            let stats = moments(&estimates, truth[j]);
            let covered = estimates
                .iter()
                .zip(&ses)
                .filter(|(est, se)| (*est - truth[j]).abs() <= z * **se)
                .count();
            params.push(ParamStats {
                parameter: j + 1,
                truth: truth[j],
                mean: stats.mean,
                bias: stats.bias,
                sd: stats.sd,
                rmse: stats.rmse,
                mean_sandwich_se: mean(&ses),
                ci_coverage: if n_ok > 0 {
                    covered as f64 / n_ok as f64
                } else {
                    f64::NAN
                },
            });
        }
        let one_year_effects = months
            .iter()
            .map(|&m| {
                let features = one_year_features(dim, m);
                let truth_effect: f64 = features.iter().zip(&truth).map(|(f, t)| f * t).sum();
                let effects: Vec<f64> = runs
                    .iter()
                    .map(|(psi, _)| features.iter().zip(psi).map(|(f, v)| f * v).sum())
                    .collect();
                let stats = moments(&effects, truth_effect);
                MonthEffectStats {
                    month: m,
                    truth: truth_effect,
                    mean: stats.mean,
                    bias: stats.bias,
                    sd: stats.sd,
                    rmse: stats.rmse,
                }
            })
            .collect();
        summaries.push(EstimatorStudySummary {
            menu,
            params,
            one_year_effects,
            failures: failures[e],
            flagged: failures[e] * 10 > config.replicates,
        });
    }

    Ok(StudyReport {
        config: config.clone(),
        estimators: summaries,
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}

struct Moments {
    mean: f64,
    bias: f64,
    sd: f64,
    rmse: f64,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

fn moments(values: &[f64], truth: f64) -> Moments {
    if values.is_empty() {
        return Moments {
            mean: f64::NAN,
            bias: f64::NAN,
            sd: f64::NAN,
            rmse: f64::NAN,
        };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let bias = mean - truth;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    Moments {
        mean,
        bias,
        sd,
        rmse: (bias * bias + var).sqrt(),
    }
}

/// Writes the per-(estimator, parameter) table.
pub fn write_report_csv(report: &StudyReport, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    let mut out = BufWriter::new(file);
    writeln!(
        out,
        "estimator,parameter,truth,mean,bias,sd,rmse,mean_sandwich_se,ci_coverage,failures,flagged"
    )?;
    for summary in &report.estimators {
        for p in &summary.params {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                summary.menu.label(),
                p.parameter,
                p.truth,
                p.mean,
                p.bias,
                p.sd,
                p.rmse,
                p.mean_sandwich_se,
                p.ci_coverage,
                summary.failures,
                summary.flagged
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Writes the per-(estimator, month) one-year-effect table.
pub fn write_effects_csv(report: &StudyReport, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    let mut out = BufWriter::new(file);
    writeln!(out, "estimator,month,truth_effect,mean_effect,bias,sd,rmse")?;
    for summary in &report.estimators {
        for eff in &summary.one_year_effects {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                summary.menu.label(),
                eff.month,
                eff.truth,
                eff.mean,
                eff.bias,
                eff.sd,
                eff.rmse
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_identity_holds() {
        let values = [1.0, 2.0, 5.0, -3.0, 4.0];
        let stats = moments(&values, 1.5);
        let lhs = stats.rmse * stats.rmse;
        let rhs = stats.bias * stats.bias + stats.sd * stats.sd;
        assert!((lhs - rhs).abs() <= 1e-9 * rhs.abs().max(1.0));
    }

    #[test]
    fn misspecification_toggles_are_scoped() {
        let mut config = StudyConfig::default();
        config.misspecification.drop_outcome_from_propensity = true;
        let eff = config.effective_estimation();
        assert!(!eff.propensity.features.contains(&"y".to_string()));
        // only the propensity changed
        assert_eq!(eff.nuisance, config.estimation.nuisance);

        let mut config = StudyConfig::default();
        config.misspecification.intercept_only_h = true;
        let eff = config.effective_estimation();
        assert!(eff.nuisance.h_features.is_empty());
        assert!(eff.nuisance.prelim_h_features.is_empty());
        assert_eq!(eff.propensity, config.estimation.propensity);
    }

    #[test]
    fn one_year_effect_features() {
        assert_eq!(one_year_features(2, 10), vec![12.0, 120.0]);
        assert_eq!(one_year_features(3, 6), vec![12.0, 72.0, 432.0]);
    }
}
