//! Cohort simulator with retained counterfactual trajectories.
//!
//! Outcomes under "never treat" follow a random-walk-with-drift model from a
//! lognormal baseline; treatment initiation follows a pooled logistic hazard
//! in injection-drug use, the current untreated outcome, and month. Observed
//! outcomes add the blip effect `(ψ₁ + ψ₂ T)(k - T)` after initiation, so the
//! untreated path is the exact counterfactual for every patient, not just in
//! mean. There is no censoring.
//!
//! Patients are generated on independent counter-based streams; cohorts are
//! byte-identical for a given seed regardless of worker count.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{CovariateSchema, LongitudinalDataset, MonthRow, PatientRecord, WindowRule};
use crate::error::{Error, Result};
use crate::fit::expit;
use crate::par;
use crate::rng::{stream, StreamKind};

/// Baseline lognormal parameters for one group: the outcome at the first
/// month is `exp(N(mu, sd^2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineLognormal {
    pub mu: f64,
    pub sd: f64,
}

/// Noise standard deviation schedule: `sd_early` through `month_early`,
/// linear interpolation to `sd_late` at `month_late`, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub month_early: i32,
    pub sd_early: f64,
    pub month_late: i32,
    pub sd_late: f64,
}

impl NoiseSchedule {
    pub fn std(&self, k: i32) -> f64 {
        if k <= self.month_early {
            self.sd_early
        } else if k >= self.month_late {
            self.sd_late
        } else {
            let frac = f64::from(k - self.month_early) / f64::from(self.month_late - self.month_early);
            self.sd_early + (self.sd_late - self.sd_early) * frac
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub n: usize,
    /// True blip parameters (per-month effect intercept and month slope).
    pub psi_true: [f64; 2],
    /// True initiation-hazard coefficients: intercept, injection-drug use,
    /// current outcome, month.
    pub theta_true: [f64; 4],
    /// Monthly drift of the untreated outcome.
    pub xi_true: f64,
    pub idu_fraction: f64,
    pub baseline_non_idu: BaselineLognormal,
    pub baseline_idu: BaselineLognormal,
    pub noise: NoiseSchedule,
    pub first_month: i32,
    pub last_month: i32,
    /// Months at which initiation can occur (inclusive).
    pub initiation_first: i32,
    pub initiation_last: i32,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            n: 1000,
            psi_true: [25.0, -0.7],
            theta_true: [-2.4, -0.42, -0.0035, -0.026],
            xi_true: -10.0,
            idu_fraction: 0.10,
            baseline_non_idu: BaselineLognormal { mu: 6.0, sd: 0.4 },
            baseline_idu: BaselineLognormal { mu: 6.6, sd: 0.5 },
            noise: NoiseSchedule {
                month_early: 7,
                sd_early: 41.0,
                month_late: 19,
                sd_late: 21.5,
            },
            first_month: 6,
            last_month: 30,
            initiation_first: 6,
            initiation_last: 18,
            seed: 0,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.idu_fraction) {
            return Err(Error::Config(format!(
                "idu_fraction must lie in [0, 1], got {}",
                self.idu_fraction
            )));
        }
        if self.noise.sd_early < 0.0 || self.noise.sd_late < 0.0 {
            return Err(Error::Config("noise standard deviations must be >= 0".into()));
        }
        if self.first_month > self.initiation_first
            || self.initiation_first > self.initiation_last
            || self.initiation_last > self.last_month
        {
            return Err(Error::Config(format!(
                "months must satisfy first <= initiation range <= last, got {} <= {}..{} <= {}",
                self.first_month, self.initiation_first, self.initiation_last, self.last_month
            )));
        }
        Ok(())
    }

    pub fn true_params(&self) -> crate::blip::BlipParams {
        crate::blip::BlipParams::new(self.psi_true.to_vec()).expect("finite truth")
    }
}

/// A simulated cohort: the observable dataset plus every patient's untreated
/// counterfactual path and the generating configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedCohort {
    pub observed: LongitudinalDataset,
    /// Untreated outcome path per patient, aligned with
    /// `first_month..=last_month` and with dataset order.
    pub counterfactual_untreated: Vec<Vec<f64>>,
    pub truth: SimulationConfig,
}

struct RawPatient {
    idu: bool,
    path: Vec<f64>,
    initiation: Option<i32>,
}

fn simulate_patient(config: &SimulationConfig, index: usize) -> RawPatient {
    let mut rng = stream(config.seed, StreamKind::SimulatePatient, &[index as u64]);
    let idu = rng.random::<f64>() < config.idu_fraction;
    let baseline = if idu {
        config.baseline_idu
    } else {
        config.baseline_non_idu
    };
    let z: f64 = rng.sample(StandardNormal);
    let y0 = (baseline.mu + baseline.sd * z).exp();

    let n_months = (config.last_month - config.first_month + 1) as usize;
    let mut path = Vec::with_capacity(n_months);
    path.push(y0);
    for k in (config.first_month + 1)..=config.last_month {
        let eps: f64 = rng.sample::<f64, _>(StandardNormal) * config.noise.std(k);
        let prev = *path.last().expect("non-empty path");
        path.push(config.xi_true + prev + eps);
    }

    let theta = config.theta_true;
    let mut initiation = None;
    for m in config.initiation_first..=config.initiation_last {
        let y_m = path[(m - config.first_month) as usize];
        let eta = theta[0] + theta[1] * f64::from(u8::from(idu)) + theta[2] * y_m + theta[3] * f64::from(m);
        if rng.random::<f64>() < expit(eta) {
            initiation = Some(m);
            break;
        }
    }
    RawPatient {
        idu,
        path,
        initiation,
    }
}

/// Generates a cohort under the configured data-generating process.
pub fn simulate(config: &SimulationConfig) -> Result<SimulatedCohort> {
    config.validate()?;
    let raws = par::map_indexed(config.n, |i| simulate_patient(config, i));

    let width = config.n.max(1).to_string().len().max(4);
    let psi = config.psi_true;
    let mut patients = Vec::with_capacity(config.n);
    let mut counterfactuals = Vec::with_capacity(config.n);
    for (i, raw) in raws.into_iter().enumerate() {
        let injdrug = f64::from(u8::from(raw.idu));
        let months: Vec<MonthRow> = (config.first_month..=config.last_month)
            .map(|k| {
                let y_untreated = raw.path[(k - config.first_month) as usize];
                let (a, y) = match raw.initiation {
                    Some(t) if k > t => (
                        1,
                        y_untreated + (psi[0] + psi[1] * f64::from(t)) * f64::from(k - t),
                    ),
                    Some(t) if k == t => (1, y_untreated),
                    _ => (0, y_untreated),
                };
                MonthRow {
                    month: k,
                    a,
                    y,
                    covariates: vec![injdrug],
                }
            })
            .collect();
        patients.push(PatientRecord::from_rows(format!("p{i:0width$}"), months)?);
        counterfactuals.push(raw.path);
    }

    let observed = LongitudinalDataset::new(
        patients,
        CovariateSchema::new(["injdrug"]),
        Some(config.initiation_last),
        WindowRule::default(),
    )?;
    Ok(SimulatedCohort {
        observed,
        counterfactual_untreated: counterfactuals,
        truth: config.clone(),
    })
}

/// Cohort-level calibration summaries.
#[derive(Debug, Clone, Serialize)]
pub struct MarginalChecks {
    /// Fraction of non-IDU patients untreated before the initiation window
    /// who initiate by its last month.
    pub treated_by_last_non_idu: f64,
    pub idu_fraction: f64,
    pub baseline_median_non_idu: f64,
    pub baseline_median_idu: f64,
    /// Risk-set size by decision month.
    pub risk_set_sizes: Vec<(i32, usize)>,
}

pub fn marginal_checks(cohort: &SimulatedCohort) -> MarginalChecks {
    let ds = &cohort.observed;
    let idu_idx = ds
        .schema()
        .index_of("injdrug")
        .expect("simulated schema has injdrug");
    let mut non_idu = 0usize;
    let mut non_idu_treated = 0usize;
    let mut idu = 0usize;
    let mut base_non_idu = Vec::new();
    let mut base_idu = Vec::new();
    for p in ds.patients() {
        let first = p.months().first().expect("non-empty record");
        let is_idu = first.covariates[idu_idx] > 0.5;
        if is_idu {
            idu += 1;
            base_idu.push(first.y);
        } else {
            non_idu += 1;
            base_non_idu.push(first.y);
            if p.initiation().is_some_and(|t| t <= cohort.truth.initiation_last) {
                non_idu_treated += 1;
            }
        }
    }
    let risk_set_sizes = ds
        .decision_months()
        .map(|m| (m, ds.at_risk(m).len()))
        .collect();
    MarginalChecks {
        treated_by_last_non_idu: if non_idu > 0 {
            non_idu_treated as f64 / non_idu as f64
        } else {
            f64::NAN
        },
        idu_fraction: idu as f64 / ds.n_patients().max(1) as f64,
        baseline_median_non_idu: median(&mut base_non_idu),
        baseline_median_idu: median(&mut base_idu),
        risk_set_sizes,
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn deterministic_config(force_initiation_at_first: bool) -> SimulationConfig {
        SimulationConfig {
            n: 1,
            baseline_non_idu: BaselineLognormal {
                mu: 400.0f64.ln(),
                sd: 0.0,
            },
            baseline_idu: BaselineLognormal {
                mu: 400.0f64.ln(),
                sd: 0.0,
            },
            noise: NoiseSchedule {
                month_early: 7,
                sd_early: 0.0,
                month_late: 19,
                sd_late: 0.0,
            },
            theta_true: [if force_initiation_at_first { 50.0 } else { -50.0 }, 0.0, 0.0, 0.0],
            idu_fraction: 0.0,
            ..SimulationConfig::default()
        }
    }

    #[test]
    fn untreated_recursion_without_noise() {
        let cohort = simulate(&deterministic_config(false)).unwrap();
        let p = &cohort.observed.patients()[0];
        assert_eq!(p.initiation(), None);
        assert!((p.outcome(6).unwrap() - 400.0).abs() < 1e-9);
        assert!((p.outcome(7).unwrap() - 390.0).abs() < 1e-9);
        assert!((p.outcome(8).unwrap() - 380.0).abs() < 1e-9);
    }

    #[test]
    fn treated_path_adds_per_month_effect() {
        let cohort = simulate(&deterministic_config(true)).unwrap();
        let p = &cohort.observed.patients()[0];
        assert_eq!(p.initiation(), Some(6));
        // effect per month for T = 6 is 25 - 0.7 * 6 = 20.8
        assert!((p.outcome(7).unwrap() - 410.8).abs() < 1e-9);
        assert_eq!(p.row(6).unwrap().a, 1);
        assert!((cohort.counterfactual_untreated[0][1] - 390.0).abs() < 1e-9);
    }

    #[test]
    fn noise_schedule_interpolates_linearly() {
        let config = SimulationConfig::default();
        assert_eq!(config.noise.std(7), 41.0);
        assert_eq!(config.noise.std(19), 21.5);
        assert_eq!(config.noise.std(25), 21.5);
        assert!((config.noise.std(13) - 31.25).abs() < 1e-12);
    }

    #[test]
    fn consistency_and_rank_preservation_hold_exactly() {
        let config = SimulationConfig {
            n: 200,
            seed: 42,
            ..SimulationConfig::default()
        };
        let cohort = simulate(&config).unwrap();
        let psi = config.psi_true;
        for (p, path) in cohort
            .observed
            .patients()
            .iter()
            .zip(&cohort.counterfactual_untreated)
        {
            for row in p.months() {
                let y0 = path[(row.month - config.first_month) as usize];
                match p.initiation() {
                    Some(t) if row.month > t => {
                        let effect = (psi[0] + psi[1] * f64::from(t)) * f64::from(row.month - t);
                        assert_eq!(row.y, y0 + effect);
                    }
                    _ => assert_eq!(row.y, y0),
                }
                assert_eq!(row.a, u8::from(p.initiation().is_some_and(|t| row.month >= t)));
            }
        }
    }

    #[test]
    fn same_seed_reproduces_cohort() {
        let config = SimulationConfig {
            n: 64,
            seed: 7,
            ..SimulationConfig::default()
        };
        let a = simulate(&config).unwrap();
        let b = simulate(&config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn marginal_checks_report_groups() {
        let config = SimulationConfig {
            n: 4000,
            seed: 11,
            ..SimulationConfig::default()
        };
        let cohort = simulate(&config).unwrap();
        let checks = marginal_checks(&cohort);
        assert!((checks.idu_fraction - 0.10).abs() < 0.02);
        // lognormal median = exp(mu)
        assert!((checks.baseline_median_non_idu - 6.0f64.exp()).abs() < 15.0);
        // risk sets shrink over time
        let sizes: Vec<usize> = checks.risk_set_sizes.iter().map(|&(_, n)| n).collect();
        assert!(sizes.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn invalid_config_rejected() {
        let config = SimulationConfig {
            idu_fraction: 1.5,
            ..SimulationConfig::default()
        };
        assert!(simulate(&config).is_err());
    }
}
