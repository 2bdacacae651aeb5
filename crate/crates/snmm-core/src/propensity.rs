//! Pooled logistic models for treatment initiation and censoring, and
//! inverse-probability-of-censoring weights.

use std::ops::Range;

use crate::data::{LongitudinalDataset, PatientRecord};
use crate::error::{Error, Result};
use crate::fit::{self, LogisticModel, RowSource};
use crate::terms::{Row, TermSet};

/// Which pooled person-month model to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PooledOutcome {
    /// Treatment initiation among patients still untreated and in follow-up:
    /// one row per (patient, decision month), outcome `A_m`.
    Initiation,
    /// Remaining uncensored: one row per follow-up month with a next month,
    /// outcome 1 when the next month is observed.
    Censoring,
}

struct PersonMonthSource<'a> {
    ds: &'a LongitudinalDataset,
    terms: &'a TermSet,
    outcome: PooledOutcome,
}

impl RowSource for PersonMonthSource<'_> {
    fn n_features(&self) -> usize {
        self.terms.len()
    }

    fn feature_names(&self) -> Vec<String> {
        self.terms.names()
    }

    fn n_groups(&self) -> usize {
        self.ds.n_patients()
    }

    fn n_outcomes(&self) -> usize {
        1
    }

    fn visit(&self, groups: Range<usize>, cb: &mut dyn FnMut(&[f64], &[f64], f64)) -> Result<()> {
        let mut x = vec![0.0; self.terms.len()];
        for patient in &self.ds.patients()[groups] {
            match self.outcome {
                PooledOutcome::Initiation => {
                    for m in self.ds.decision_months() {
                        if !patient.observed(m) || !patient.untreated_before(m) {
                            continue;
                        }
                        self.terms.eval_into(
                            Row {
                                patient,
                                m,
                                k: None,
                            },
                            &mut x,
                        )?;
                        let y = f64::from(u8::from(patient.initiation() == Some(m)));
                        cb(&x, &[y], 1.0);
                    }
                }
                PooledOutcome::Censoring => {
                    // The row at month m predicts being uncensored at m + 1;
                    // months followed through the administrative end
                    // contribute no final row.
                    let last_possible = self.ds.max_month() - 1;
                    for m in patient.start_month()..=patient.last_month().min(last_possible) {
                        self.terms.eval_into(
                            Row {
                                patient,
                                m,
                                k: None,
                            },
                            &mut x,
                        )?;
                        let y = f64::from(u8::from(patient.observed(m + 1)));
                        cb(&x, &[y], 1.0);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Pooled logistic model for the probability of initiating treatment at `m`
/// given an untreated history.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityModel {
    model: LogisticModel,
    terms: TermSet,
}

/// Pooled logistic model for the probability of remaining uncensored.
#[derive(Debug, Clone, PartialEq)]
pub struct CensoringModel {
    model: LogisticModel,
    terms: TermSet,
}

/// Fits the pooled person-month logistic regression for either outcome.
pub fn fit_pooled_logistic(
    ds: &LongitudinalDataset,
    outcome: PooledOutcome,
    features: &[String],
) -> Result<(LogisticModel, TermSet)> {
    let terms = TermSet::compile(features, ds.schema(), false)?;
    let src = PersonMonthSource {
        ds,
        terms: &terms,
        outcome,
    };
    let model = fit::fit_logistic(&src)?;
    Ok((model, terms))
}

impl PropensityModel {
    pub fn fit(ds: &LongitudinalDataset, features: &[String]) -> Result<Self> {
        let (model, terms) = fit_pooled_logistic(ds, PooledOutcome::Initiation, features)?;
        Ok(PropensityModel { model, terms })
    }

    /// Builds a model from fixed coefficients (intercept first, then one per
    /// feature term) without fitting.
    pub fn from_coefficients(
        ds: &LongitudinalDataset,
        features: &[String],
        coef: Vec<f64>,
    ) -> Result<Self> {
        let terms = TermSet::compile(features, ds.schema(), false)?;
        if coef.len() != terms.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} coefficients (intercept + features), got {}",
                terms.len(),
                coef.len()
            )));
        }
        let feature_names = terms.names();
        Ok(PropensityModel {
            model: LogisticModel {
                coef,
                feature_names,
                iterations: 0,
                final_score_norm: f64::NAN,
                log_likelihood: f64::NAN,
                n_rows: 0.0,
                n_events: 0.0,
            },
            terms,
        })
    }

    /// `pr(A_m = 1 | untreated history, covariates at m)`.
    pub fn predict(&self, patient: &PatientRecord, m: i32) -> Result<f64> {
        let mut buf = Vec::new();
        self.predict_with(patient, m, &mut buf)
    }

    /// As [`PropensityModel::predict`], reusing a caller-owned buffer.
    pub fn predict_with(&self, patient: &PatientRecord, m: i32, buf: &mut Vec<f64>) -> Result<f64> {
        buf.resize(self.terms.len(), 0.0);
        self.terms.eval_into(Row { patient, m, k: None }, buf)?;
        Ok(self.model.predict(buf))
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.model.coef
    }

    pub fn model(&self) -> &LogisticModel {
        &self.model
    }

    /// Per-patient sums of score contributions at the fitted coefficients.
    pub fn per_patient_scores(&self, ds: &LongitudinalDataset) -> Result<Vec<Vec<f64>>> {
        let src = PersonMonthSource {
            ds,
            terms: &self.terms,
            outcome: PooledOutcome::Initiation,
        };
        fit::per_group_scores(&src, &self.model)
    }
}

impl CensoringModel {
    pub fn fit(ds: &LongitudinalDataset, features: &[String]) -> Result<Self> {
        let (model, terms) = fit_pooled_logistic(ds, PooledOutcome::Censoring, features)?;
        Ok(CensoringModel { model, terms })
    }

    /// Probability of remaining uncensored at month `m + 1` given history
    /// through `m`.
    pub fn survival(&self, patient: &PatientRecord, m: i32) -> Result<f64> {
        let mut x = vec![0.0; self.terms.len()];
        self.terms.eval_into(Row { patient, m, k: None }, &mut x)?;
        Ok(self.model.predict(&x))
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.model.coef
    }
}

/// Inverse-probability-of-censoring weights `W_{m,k}`, stored as per-patient
/// cumulative log survival probabilities.
#[derive(Debug, Clone)]
pub struct CensoringWeights {
    /// `cum[i][j]` = sum of log survival predictions for patient `i` over the
    /// first `j` observed months; `W_{m,k} = exp(cum[m] - cum[k])`.
    cum: Vec<Vec<f64>>,
    starts: Vec<i32>,
}

impl CensoringWeights {
    /// `W_{m,k}` for the patient at `patient_idx`; requires `m <= k` within
    /// the patient's observed range.
    pub fn weight(&self, patient_idx: usize, m: i32, k: i32) -> f64 {
        debug_assert!(k >= m);
        let start = self.starts[patient_idx];
        let c = &self.cum[patient_idx];
        let im = (m - start) as usize;
        let ik = (k - start) as usize;
        (c[im] - c[ik]).exp()
    }
}

/// Computes `W_{m,k} = 1 / prod_{p=m+1}^{k} pr(C_p = 0 | history through p-1)`
/// for every patient. Errors when any predicted survival probability falls
/// below the positivity floor.
pub fn ipcw_weights(
    model: &CensoringModel,
    ds: &LongitudinalDataset,
    floor: f64,
) -> Result<CensoringWeights> {
    let mut cum = Vec::with_capacity(ds.n_patients());
    let mut starts = Vec::with_capacity(ds.n_patients());
    for patient in ds.patients() {
        let n_months = patient.months().len();
        let mut c = Vec::with_capacity(n_months + 1);
        c.push(0.0);
        let mut acc = 0.0;
        // log survival for months start .. last-1 (the factor for predicting
        // month j+1 uses history at j); the final cumulative entry is only
        // used as the m-side of a weight, never the k-side.
        for offset in 0..n_months.saturating_sub(1) {
            let m = patient.start_month() + offset as i32;
            let p = model.survival(patient, m)?;
            if p < floor {
                return Err(Error::PositivityViolation {
                    probability: p,
                    floor,
                });
            }
            acc += p.ln();
            c.push(acc);
        }
        if n_months >= 1 {
            c.push(acc);
        }
        cum.push(c);
        starts.push(patient.start_month());
    }
    Ok(CensoringWeights { cum, starts })
}

/// Term weights for the estimating equations and nuisance regressions.
#[derive(Debug, Clone)]
pub enum Weights {
    /// No censoring correction; every weight is 1.
    Unit,
    Ipcw(CensoringWeights),
}

impl Weights {
    #[inline]
    pub fn weight(&self, patient_idx: usize, m: i32, k: i32) -> f64 {
        match self {
            Weights::Unit => 1.0,
            Weights::Ipcw(w) => w.weight(patient_idx, m, k),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CovariateSchema, MonthRow, WindowRule};
    use crate::fit::expit;

    fn dataset_with_initiations(ts: &[Option<i32>]) -> LongitudinalDataset {
        let patients: Vec<PatientRecord> = ts
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let months = (0..=6)
                    .map(|m| MonthRow {
                        month: m,
                        a: u8::from(t.is_some_and(|t| m >= t)),
                        y: 10.0 + f64::from(m) + f64::from(i as i32),
                        covariates: vec![f64::from(u8::from(i % 2 == 0))],
                    })
                    .collect();
                PatientRecord::from_rows(format!("p{i:02}"), months).unwrap()
            })
            .collect();
        LongitudinalDataset::new(
            patients,
            CovariateSchema::new(["grp"]),
            Some(4),
            WindowRule {
                lag_min: 1,
                lag_max: 2,
            },
        )
        .unwrap()
    }

    #[test]
    fn intercept_only_initiation_fit() {
        // 16 patients, 4 initiate at month 0: risk rows = 4*5 (treated at 0
        // leave after one row) + 12*5 = 64 rows, 4 events -> fraction 1/16
        let ts: Vec<Option<i32>> = (0..16).map(|i| (i % 4 == 0).then_some(0)).collect();
        let ds = dataset_with_initiations(&ts);
        let model = PropensityModel::fit(&ds, &[]).unwrap();
        // events: 4; rows: treated contribute 1 row each (month 0), untreated 5 rows
        let rows = 4.0 + 12.0 * 5.0;
        let expected = (4.0f64 / (rows - 4.0)).ln();
        assert!((model.coefficients()[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn predict_matches_hand_computed_expit() {
        let ds = dataset_with_initiations(&[None, Some(2)]);
        let model = PropensityModel::from_coefficients(
            &ds,
            &["grp".to_string(), "y".to_string(), "m".to_string()],
            vec![-2.4, -0.42, -0.0035, -0.026],
        )
        .unwrap();
        // patient p00 (grp=1): y at m=6 is 16, so eta = -2.4 -0.42 -0.056 -0.156
        let p = model.predict(&ds.patients()[0], 6).unwrap();
        let eta = -2.4 - 0.42 - 0.0035 * 16.0 - 0.026 * 6.0;
        assert!((p - expit(eta)).abs() < 1e-12);
        // zero coefficients predict one half
        let half = PropensityModel::from_coefficients(
            &ds,
            &["grp".to_string()],
            vec![0.0, 0.0],
        )
        .unwrap();
        assert_eq!(half.predict(&ds.patients()[0], 3).unwrap(), 0.5);
    }

    #[test]
    fn injdrug_multiplies_odds() {
        let ds = dataset_with_initiations(&[None, None]);
        let model = PropensityModel::from_coefficients(
            &ds,
            &["grp".to_string(), "y".to_string(), "m".to_string()],
            vec![-2.4, -0.42, -0.0035, -0.026],
        )
        .unwrap();
        // p00 has grp=1, p01 has grp=0; same month, outcomes differ by 1
        // so evaluate odds analytically instead
        let p1 = model.predict(&ds.patients()[0], 2).unwrap();
        let y1 = ds.patients()[0].outcome(2).unwrap();
        let eta0 = -2.4 - 0.0035 * y1 - 0.026 * 2.0;
        let odds0 = eta0.exp();
        let odds1 = p1 / (1.0 - p1);
        assert!((odds1 / odds0 - (-0.42f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn all_zero_initiations_fail_to_converge() {
        let ds = dataset_with_initiations(&[None, None, None, None]);
        match PropensityModel::fit(&ds, &[]) {
            Err(Error::Separation { .. }) => {}
            other => panic!("expected separation error, got {other:?}"),
        }
    }

    fn censoring_dataset() -> LongitudinalDataset {
        // p0 observed 0..=6 (uncensored), p1 observed 0..=3 (censored at 4)
        let p0 = PatientRecord::from_rows(
            "p0",
            (0..=6)
                .map(|m| MonthRow {
                    month: m,
                    a: 0,
                    y: 1.0,
                    covariates: vec![],
                })
                .collect(),
        )
        .unwrap();
        let p1 = PatientRecord::from_rows(
            "p1",
            (0..=3)
                .map(|m| MonthRow {
                    month: m,
                    a: 0,
                    y: 1.0,
                    covariates: vec![],
                })
                .collect(),
        )
        .unwrap();
        LongitudinalDataset::new(
            vec![p0, p1],
            CovariateSchema::new(Vec::<String>::new()),
            Some(4),
            WindowRule {
                lag_min: 1,
                lag_max: 2,
            },
        )
        .unwrap()
    }

    #[test]
    fn censoring_fit_matches_event_fraction() {
        let ds = censoring_dataset();
        let model = CensoringModel::fit(&ds, &[]).unwrap();
        // rows: p0 contributes months 0..=5 (6 rows, all uncensored at next),
        // p1 months 0..=3 (4 rows, last one censored at 4)
        let frac: f64 = 9.0 / 10.0;
        let expected = (frac / (1.0 - frac)).ln();
        assert!((model.coefficients()[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn ipcw_weight_product_formula() {
        let ds = censoring_dataset();
        let model = CensoringModel::fit(&ds, &[]).unwrap();
        let w = ipcw_weights(&model, &ds, 0.01).unwrap();
        let p = expit(model.coefficients()[0]);
        // empty product at k = m
        assert!((w.weight(0, 3, 3) - 1.0).abs() < 1e-12);
        // two factors from m to m+2
        assert!((w.weight(0, 2, 4) - 1.0 / (p * p)).abs() < 1e-10);
        // weights non-decreasing in k
        let mut prev = 0.0;
        for k in 1..=6 {
            let wk = w.weight(0, 1, k);
            assert!(wk >= prev);
            prev = wk;
        }
    }

    #[test]
    fn no_censoring_gives_unit_weights() {
        // all patients fully observed: the censoring fit has no zero outcomes
        // and would separate; unit weights are the modeled path instead
        let w = Weights::Unit;
        assert_eq!(w.weight(0, 3, 9), 1.0);
    }

    #[test]
    fn positivity_floor_enforced() {
        let ds = censoring_dataset();
        // survival probability ~ expit(-1) ~ 0.269 < 0.5 floor
        let model = CensoringModel::fit(&ds, &[]).unwrap();
        let err = ipcw_weights(&model, &ds, 0.95).unwrap_err();
        assert!(matches!(err, Error::PositivityViolation { .. }));
    }
}
