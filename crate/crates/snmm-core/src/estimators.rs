//! Assembly and solution of the estimating equations for the full estimator
//! menu.
//!
//! Every estimator here solves an empirical moment condition of the form
//!
//! ```text
//! (1/n) Σ_i Σ_{m, k} q_m^k(history_i at m) · [centered H_ψ(k)]
//!                    · 1{untreated through m-1} · (A_m - p̂(m)) · W_{m,k} = 0
//! ```
//!
//! with `H_ψ(k)` affine in ψ, so each patient contributes an exact affine
//! pair `(A_i, b_i)` with `G_i(ψ) = b_i - A_i ψ`. The menu differs only in
//! the index functions `q`, the centering, and the outcome window:
//!
//! | menu | q                                   | centering  | window   |
//! |------|-------------------------------------|------------|----------|
//! | 1a/1b| fixed covariate indexes             | none       | one lag  |
//! | 2    | `Δ_m(m+12)`                         | none       | one lag  |
//! | 3    | `Δ_m(m+12)`                         | symbolic   | one lag  |
//! | 4    | `Δ_m(k)` (identity covariance)      | plug-in    | full     |
//! | 5    | `Γ⁺ Δ` (estimated covariance)       | plug-in    | full     |

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::blip::{BlipModel, BlipParams};
use crate::config::EstimationConfig;
use crate::data::{LongitudinalDataset, PatientRecord};
use crate::error::{Error, Result};
use crate::linalg;
use crate::nuisance::{
    self, CovarianceWorkingModel, HRegression, HRegressionSpec, NuisanceFit,
    RiskCondition, TwoPartFit, WindowSel,
};
use crate::propensity::{ipcw_weights, CensoringModel, PropensityModel, Weights};
use crate::terms::{Row, TermSet};

/// The estimator menu.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MenuId {
    /// Outcome-and-month index q, one-year column only.
    #[serde(rename = "1a")]
    NaiveA,
    /// Outcome-and-baseline index q.
    #[serde(rename = "1b")]
    NaiveB,
    /// Duration-centered q at the one-year column, no outcome centering.
    #[serde(rename = "2")]
    Preliminary,
    /// As 2 with the doubly robust outcome centering, kept affine in ψ.
    #[serde(rename = "3")]
    DrPreliminary,
    /// Full window, working identity covariance, plug-in centering.
    #[serde(rename = "4")]
    DrIdentity,
    /// Full window, estimated working covariance: the optimal choice.
    #[serde(rename = "5")]
    DrOptimal,
}

impl MenuId {
    pub const ALL: [MenuId; 6] = [
        MenuId::NaiveA,
        MenuId::NaiveB,
        MenuId::Preliminary,
        MenuId::DrPreliminary,
        MenuId::DrIdentity,
        MenuId::DrOptimal,
    ];

    pub fn label(self) -> &'static str {
        match self {
            MenuId::NaiveA => "1a",
            MenuId::NaiveB => "1b",
            MenuId::Preliminary => "2",
            MenuId::DrPreliminary => "3",
            MenuId::DrIdentity => "4",
            MenuId::DrOptimal => "5",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.label() == s)
    }

    /// Whether the estimating function subtracts the fitted conditional
    /// expectation of `H`.
    pub fn form(self) -> EquationForm {
        match self {
            MenuId::NaiveA | MenuId::NaiveB | MenuId::Preliminary => EquationForm::Basic,
            _ => EquationForm::Centered,
        }
    }

    pub fn window(self) -> WindowSel {
        match self {
            MenuId::DrIdentity | MenuId::DrOptimal => WindowSel::Full,
            _ => WindowSel::SingleLag,
        }
    }
}

/// Basic (`G`) or centered doubly robust (`G*`) estimating function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EquationForm {
    Basic,
    Centered,
}

// ---------------------------------------------------------------------------
// q functions
// ---------------------------------------------------------------------------

enum QEval {
    /// Covariate index terms evaluated at `m` (no intercept).
    Terms(TermSet),
    /// `q_m^k = Δ_m(k)` from fitted duration moments.
    Delta { durations: Arc<TwoPartFit> },
    /// Rows of `Γ⁺ D` where `D` stacks `Δ_m(k)` over the window.
    Optimal {
        durations: Arc<TwoPartFit>,
        /// Per decision month: window months and the pseudo-inverse of `Γ^m`.
        gamma_pinv: HashMap<i32, (Vec<i32>, DMatrix<f64>)>,
    },
}

/// A vector-valued index function `q_m^k` over the outcome window.
pub struct QFunction {
    label: String,
    dim: usize,
    window: WindowSel,
    blip: BlipModel,
    eval: QEval,
}

/// The q rows of one decision month: `rows` is `ks.len() x dim` row-major.
pub struct QMonth {
    pub ks: Vec<i32>,
    pub rows: Vec<f64>,
}

impl QFunction {
    /// The two fixed covariate-index choices used for comparison.
    pub fn naive(
        ds: &LongitudinalDataset,
        blip: &BlipModel,
        label: &str,
        index_terms: &[String],
    ) -> Result<QFunction> {
        let terms = TermSet::compile(index_terms, ds.schema(), false)?;
        Ok(QFunction {
            label: label.to_string(),
            dim: terms.len() - 1,
            window: WindowSel::SingleLag,
            blip: blip.clone(),
            eval: QEval::Terms(terms),
        })
    }

    /// `q_m^{m+lag} = Δ_m(m+lag)`, zero elsewhere: the working-identity
    /// single-column choice behind the preliminary estimator.
    pub fn preliminary(blip: &BlipModel, durations: Arc<TwoPartFit>) -> QFunction {
        QFunction {
            label: "delta-single".into(),
            dim: blip.dim(),
            window: WindowSel::SingleLag,
            blip: blip.clone(),
            eval: QEval::Delta { durations },
        }
    }

    /// `q_m^k = Δ_m(k)` across the full window (identity working covariance).
    pub fn identity_window(blip: &BlipModel, durations: Arc<TwoPartFit>) -> QFunction {
        QFunction {
            label: "delta-window".into(),
            dim: blip.dim(),
            window: WindowSel::Full,
            blip: blip.clone(),
            eval: QEval::Delta { durations },
        }
    }

    /// The optimal rows `q_m^{opt,k}`: stack `Δ_m(k)` into `D` (rows indexed
    /// by `k`) and solve `Γ^m Q = D` through the SVD pseudo-inverse, one
    /// window-sized system per decision month.
    pub fn optimal(
        ds: &LongitudinalDataset,
        blip: &BlipModel,
        durations: Arc<TwoPartFit>,
        gamma: &CovarianceWorkingModel,
    ) -> QFunction {
        let w = ds.window();
        let mut gamma_pinv = HashMap::new();
        for m in ds.decision_months() {
            let ks: Vec<i32> = ((m + w.lag_min)..=(m + w.lag_max).min(ds.max_month())).collect();
            let g = gamma.matrix_for(m, &ks);
            gamma_pinv.insert(m, (ks, linalg::pinv(&g)));
        }
        QFunction {
            label: "optimal".into(),
            dim: blip.dim(),
            window: WindowSel::Full,
            blip: blip.clone(),
            eval: QEval::Optimal {
                durations,
                gamma_pinv,
            },
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Length of the q vectors (the number of estimating equations).
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn window(&self) -> WindowSel {
        self.window
    }

    /// Evaluates the q rows of decision month `m` for one patient. Rows are
    /// functions of the covariate history at `m` only; they exist for every
    /// window month whether or not the patient is observed there.
    pub fn month_rows(&self, ds: &LongitudinalDataset, patient: &PatientRecord, m: i32) -> Result<QMonth> {
        let mut scratch = nuisance::EvalScratch::default();
        self.month_rows_with(ds, patient, m, &mut scratch)
    }

    /// As [`QFunction::month_rows`], reusing caller-owned buffers.
    pub fn month_rows_with(
        &self,
        ds: &LongitudinalDataset,
        patient: &PatientRecord,
        m: i32,
        scratch: &mut nuisance::EvalScratch,
    ) -> Result<QMonth> {
        let w = ds.window();
        let single = m + w.lag_max;
        match &self.eval {
            QEval::Terms(terms) => {
                let mut x = vec![0.0; terms.len()];
                terms.eval_into(Row { patient, m, k: None }, &mut x)?;
                Ok(QMonth {
                    ks: vec![single],
                    rows: x[1..].to_vec(),
                })
            }
            QEval::Delta { durations } => {
                let ks: Vec<i32> = match self.window {
                    WindowSel::SingleLag => vec![single],
                    WindowSel::Full => {
                        ((m + w.lag_min)..=(m + w.lag_max).min(ds.max_month())).collect()
                    }
                };
                let mut rows = vec![0.0; ks.len() * self.dim];
                for (r, &k) in ks.iter().enumerate() {
                    nuisance::delta_with(
                        &self.blip,
                        durations,
                        patient,
                        m,
                        k,
                        scratch,
                        &mut rows[r * self.dim..(r + 1) * self.dim],
                    )?;
                }
                Ok(QMonth { ks, rows })
            }
            QEval::Optimal {
                durations,
                gamma_pinv,
            } => {
                let (ks, pinv) = gamma_pinv
                    .get(&m)
                    .ok_or_else(|| Error::EmptyRiskSet(format!("no window at month {m}")))?;
                let nk = ks.len();
                let mut d = DMatrix::zeros(nk, self.dim);
                let mut row = vec![0.0; self.dim];
                for (r, &k) in ks.iter().enumerate() {
                    nuisance::delta_with(&self.blip, durations, patient, m, k, scratch, &mut row)?;
                    for c in 0..self.dim {
                        d[(r, c)] = row[c];
                    }
                }
                let q = pinv * d;
                let mut rows = vec![0.0; nk * self.dim];
                for r in 0..nk {
                    for c in 0..self.dim {
                        rows[r * self.dim + c] = q[(r, c)];
                    }
                }
                Ok(QMonth {
                    ks: ks.clone(),
                    rows,
                })
            }
        }
    }
}

// ---------------------------------------------------------------------------
// System assembly
// ---------------------------------------------------------------------------

/// The affine decomposition of the empirical estimating function:
/// `P_n G(ψ) = b - A ψ`, with the per-patient pairs retained for the
/// sandwich variance.
pub struct EstimatingEquationSystem {
    /// Mean of the per-patient slopes, `q_dim x p`.
    pub a: DMatrix<f64>,
    /// Mean of the per-patient offsets.
    pub b: DVector<f64>,
    pub per_patient: Vec<(DMatrix<f64>, DVector<f64>)>,
    pub q_dim: usize,
    pub p: usize,
}

impl EstimatingEquationSystem {
    /// `G_i(ψ)` for one patient.
    pub fn patient_g(&self, i: usize, psi: &BlipParams) -> DVector<f64> {
        let (a, b) = &self.per_patient[i];
        b - a * DVector::from_column_slice(psi.as_slice())
    }

    /// `P_n G(ψ)`.
    pub fn mean_g(&self, psi: &BlipParams) -> DVector<f64> {
        &self.b - &self.a * DVector::from_column_slice(psi.as_slice())
    }

    pub fn n_patients(&self) -> usize {
        self.per_patient.len()
    }
}

/// Assembles the estimating-equation system for a given q and form.
///
/// Terms are included for decision months where the patient is at risk
/// (untreated through `m - 1`, uncensored at `m`) and window months the
/// patient is observed at; anything else is skipped, with the censoring
/// weights compensating. `h_fit` is required for the centered form.
pub fn assemble_system(
    ds: &LongitudinalDataset,
    blip: &BlipModel,
    propensity: &PropensityModel,
    q: &QFunction,
    form: EquationForm,
    h_fit: Option<&HRegression>,
    weights: &Weights,
    visit_indicator: Option<usize>,
) -> Result<EstimatingEquationSystem> {
    let p = blip.dim();
    let q_dim = q.dim();
    if form == EquationForm::Centered && h_fit.is_none() {
        return Err(Error::Config(
            "centered estimating equations need a fitted H regression".into(),
        ));
    }

    let per_patient = crate::par::map_indexed(ds.n_patients(), |i| -> Result<(DMatrix<f64>, DVector<f64>)> {
        let patient = &ds.patients()[i];
        let mut a_i = DMatrix::zeros(q_dim, p);
        let mut b_i = DVector::zeros(q_dim);
        let mut design = vec![0.0; p];
        let mut dhat = vec![0.0; p];
        let mut xbuf = Vec::new();
        let mut scratch = nuisance::EvalScratch::default();
        for m in ds.decision_months() {
            if !patient.observed(m) || !patient.untreated_before(m) {
                continue;
            }
            if let Some(idx) = visit_indicator {
                if patient.row(m).expect("observed month").covariates[idx] <= 0.5 {
                    continue;
                }
            }
            let phat = propensity.predict_with(patient, m, &mut xbuf)?;
            let resid_a = f64::from(u8::from(patient.initiation() == Some(m))) - phat;
            let month_q = q.month_rows_with(ds, patient, m, &mut scratch)?;
            for (r, &k) in month_q.ks.iter().enumerate() {
                if !patient.observed(k) {
                    continue;
                }
                let y = patient.outcome(k).expect("observed month");
                blip.h_design_into(patient, k, &mut design);
                let (y_c, d_c): (f64, &[f64]) = match form {
                    EquationForm::Basic => (y, &design),
                    EquationForm::Centered => {
                        let h_fit = h_fit.expect("checked above");
                        let yhat = h_fit.predict_parts_with(patient, m, k, &mut xbuf, &mut dhat)?;
                        for (d, dh) in design.iter_mut().zip(&dhat) {
                            *d -= dh;
                        }
                        (y - yhat, &design)
                    }
                };
                let factor = resid_a * weights.weight(i, m, k);
                let qrow = &month_q.rows[r * q_dim..(r + 1) * q_dim];
                for (ri, &qv) in qrow.iter().enumerate() {
                    let s = qv * factor;
                    b_i[ri] += s * y_c;
                    for (ci, &dv) in d_c.iter().enumerate() {
                        a_i[(ri, ci)] += s * dv;
                    }
                }
            }
        }
        Ok((a_i, b_i))
    });

    let mut collected = Vec::with_capacity(per_patient.len());
    for item in per_patient {
        collected.push(item?);
    }
    let n = collected.len().max(1) as f64;
    let mut a = DMatrix::zeros(q_dim, p);
    let mut b = DVector::zeros(q_dim);
    for (a_i, b_i) in &collected {
        a += a_i;
        b += b_i;
    }
    a /= n;
    b /= n;
    Ok(EstimatingEquationSystem {
        a,
        b,
        per_patient: collected,
        q_dim,
        p,
    })
}

/// Solves `A ψ = b`. Square systems go through column-pivoted QR; systems
/// with more equations than parameters (a naive q wider than the blip) are
/// solved in least squares through the SVD. Returns the estimate and the
/// reciprocal condition number.
pub fn solve_psi(sys: &EstimatingEquationSystem) -> Result<(BlipParams, f64)> {
    if sys.q_dim < sys.p {
        return Err(Error::DimensionMismatch(format!(
            "{} estimating equations cannot identify {} parameters",
            sys.q_dim, sys.p
        )));
    }
    let (solution, rcond) = if sys.q_dim == sys.p {
        linalg::solve_square(&sys.a, &sys.b)?
    } else {
        let svd = sys.a.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let rcond = if smax > 0.0 { smin / smax } else { 0.0 };
        if rcond < 1e-12 || !rcond.is_finite() {
            return Err(Error::SingularSystem { rcond });
        }
        let sol = svd
            .solve(&sys.b, linalg::PINV_RTOL * smax)
            .map_err(|_| Error::SingularSystem { rcond })?;
        (sol, rcond)
    };
    let psi = BlipParams::new(solution.iter().copied().collect())
        .map_err(|_| Error::SingularSystem { rcond })?;
    // exactness of the solution, by construction of the affine system
    debug_assert!(
        sys.q_dim != sys.p
            || sys.mean_g(&psi).amax() <= 1e-8 * (1.0 + sys.b.amax()),
        "solved system does not zero the estimating equations"
    );
    Ok((psi, rcond))
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

/// Per-run diagnostics reported next to the estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    pub rcond: f64,
    pub n_patients: usize,
    /// Risk-set size at each decision month.
    pub risk_set_sizes: Vec<(i32, usize)>,
    pub warnings: Vec<String>,
}

/// A solved estimator with its variance estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationResult {
    pub menu: MenuId,
    pub psi_hat: Vec<f64>,
    /// Sandwich covariance of `ψ̂`.
    pub covariance: Vec<Vec<f64>>,
    pub standard_errors: Vec<f64>,
    pub diagnostics: Diagnostics,
}

/// Lazily shared fitting stages for one dataset and configuration, so a study
/// replicate can run several menu entries without repeating nuisance fits.
pub struct Pipeline<'a> {
    ds: &'a LongitudinalDataset,
    config: &'a EstimationConfig,
    blip: BlipModel,
    propensity: Option<Arc<PropensityModel>>,
    weights: Option<Arc<Weights>>,
    censoring: Option<Arc<CensoringModel>>,
    durations_single: Option<Arc<TwoPartFit>>,
    durations_full: Option<Arc<TwoPartFit>>,
    h_symbolic: Option<Arc<HRegression>>,
    h_plugin: Option<Arc<HRegression>>,
    gamma: Option<Arc<CovarianceWorkingModel>>,
    psi_tilde: Option<BlipParams>,
    visit_indicator: Option<usize>,
}

impl<'a> Pipeline<'a> {
    pub fn new(ds: &'a LongitudinalDataset, config: &'a EstimationConfig) -> Result<Self> {
        let visit_indicator = match &config.visit_indicator {
            Some(name) => Some(
                ds.schema()
                    .index_of(name)
                    .ok_or_else(|| Error::UnknownCovariate(name.clone()))?,
            ),
            None => None,
        };
        Ok(Pipeline {
            ds,
            config,
            blip: BlipModel::builtin(config.blip),
            propensity: None,
            weights: None,
            censoring: None,
            durations_single: None,
            durations_full: None,
            h_symbolic: None,
            h_plugin: None,
            gamma: None,
            psi_tilde: None,
            visit_indicator,
        })
    }

    pub fn blip(&self) -> &BlipModel {
        &self.blip
    }

    pub fn propensity(&mut self) -> Result<Arc<PropensityModel>> {
        if self.propensity.is_none() {
            let model = match &self.config.fixed_propensity {
                Some(coef) => PropensityModel::from_coefficients(
                    self.ds,
                    &self.config.propensity.features,
                    coef.clone(),
                ),
                None => PropensityModel::fit(self.ds, &self.config.propensity.features),
            }
            .map_err(|e| Error::stage("propensity", e))?;
            self.propensity = Some(Arc::new(model));
        }
        Ok(self.propensity.clone().expect("just set"))
    }

    pub fn weights(&mut self) -> Result<Arc<Weights>> {
        if self.weights.is_none() {
            let w = if self.config.censoring.enabled {
                let model = CensoringModel::fit(self.ds, &self.config.censoring.features)
                    .map_err(|e| Error::stage("censoring", e))?;
                let w = ipcw_weights(&model, self.ds, self.config.censoring.positivity_floor)
                    .map_err(|e| Error::stage("censoring-weights", e))?;
                self.censoring = Some(Arc::new(model));
                Weights::Ipcw(w)
            } else {
                Weights::Unit
            };
            self.weights = Some(Arc::new(w));
        }
        Ok(self.weights.clone().expect("just set"))
    }

    fn durations_single(&mut self) -> Result<Arc<TwoPartFit>> {
        if self.durations_single.is_none() {
            let fit = nuisance::fit_duration_two_part(
                self.ds,
                &self.blip,
                RiskCondition::UntreatedThrough,
                WindowSel::SingleLag,
                &self.config.nuisance.prelim_duration_features,
            )
            .map_err(|e| Error::stage("duration-moments", e))?;
            self.durations_single = Some(Arc::new(fit));
        }
        Ok(self.durations_single.clone().expect("just set"))
    }

    fn durations_full(&mut self) -> Result<Arc<TwoPartFit>> {
        if self.durations_full.is_none() {
            let fit = nuisance::fit_duration_two_part(
                self.ds,
                &self.blip,
                RiskCondition::UntreatedThrough,
                WindowSel::Full,
                &self.config.nuisance.duration_features,
            )
            .map_err(|e| Error::stage("duration-moments", e))?;
            self.durations_full = Some(Arc::new(fit));
        }
        Ok(self.durations_full.clone().expect("just set"))
    }

    fn h_symbolic(&mut self) -> Result<Arc<HRegression>> {
        if self.h_symbolic.is_none() {
            let weights = self.weights()?;
            let fit = nuisance::fit_h_regression(
                self.ds,
                &self.blip,
                HRegressionSpec::Symbolic,
                &self.config.nuisance.prelim_h_features,
                &weights,
                WindowSel::SingleLag,
            )
            .map_err(|e| Error::stage("h-regression", e))?;
            self.h_symbolic = Some(Arc::new(fit));
        }
        Ok(self.h_symbolic.clone().expect("just set"))
    }

    /// The preliminary doubly robust estimate feeding the full-window
    /// estimators.
    pub fn psi_tilde(&mut self) -> Result<BlipParams> {
        if self.psi_tilde.is_none() {
            let (result, _) = self.run_menu_entry(MenuId::DrPreliminary)?;
            self.psi_tilde = Some(BlipParams::new(result.psi_hat.clone())?);
        }
        Ok(self.psi_tilde.clone().expect("just set"))
    }

    fn h_plugin(&mut self) -> Result<Arc<HRegression>> {
        if self.h_plugin.is_none() {
            let psi_tilde = self.psi_tilde()?;
            let weights = self.weights()?;
            let fit = nuisance::fit_h_regression(
                self.ds,
                &self.blip,
                HRegressionSpec::PlugIn(psi_tilde),
                &self.config.nuisance.h_features,
                &weights,
                WindowSel::Full,
            )
            .map_err(|e| Error::stage("h-regression", e))?;
            self.h_plugin = Some(Arc::new(fit));
        }
        Ok(self.h_plugin.clone().expect("just set"))
    }

    fn gamma(&mut self) -> Result<Arc<CovarianceWorkingModel>> {
        if self.gamma.is_none() {
            let psi_tilde = self.psi_tilde()?;
            let h_fit = self.h_plugin()?;
            let gamma = nuisance::estimate_gamma(
                self.ds,
                &self.blip,
                &psi_tilde,
                &h_fit,
                self.config.nuisance.gamma_mode,
            )
            .map_err(|e| Error::stage("working-covariance", e))?;
            self.gamma = Some(Arc::new(gamma));
        }
        Ok(self.gamma.clone().expect("just set"))
    }

    /// Builds the q function and centering for one menu entry.
    fn menu_parts(&mut self, menu: MenuId) -> Result<(QFunction, Option<Arc<HRegression>>)> {
        Ok(match menu {
            MenuId::NaiveA => (
                QFunction::naive(self.ds, &self.blip, "naive-a", &self.config.naive_q_a)?,
                None,
            ),
            MenuId::NaiveB => (
                QFunction::naive(self.ds, &self.blip, "naive-b", &self.config.naive_q_b)?,
                None,
            ),
            MenuId::Preliminary => {
                let durations = self.durations_single()?;
                (QFunction::preliminary(&self.blip, durations), None)
            }
            MenuId::DrPreliminary => {
                let durations = self.durations_single()?;
                let h = self.h_symbolic()?;
                (QFunction::preliminary(&self.blip, durations), Some(h))
            }
            MenuId::DrIdentity => {
                let durations = self.durations_full()?;
                let h = self.h_plugin()?;
                (QFunction::identity_window(&self.blip, durations), Some(h))
            }
            MenuId::DrOptimal => {
                let durations = self.durations_full()?;
                let gamma = self.gamma()?;
                let h = self.h_plugin()?;
                (
                    QFunction::optimal(self.ds, &self.blip, durations, &gamma),
                    Some(h),
                )
            }
        })
    }

    fn nuisance_warnings(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        for durations in [&self.durations_single, &self.durations_full]
            .into_iter()
            .flatten()
        {
            warnings.extend(durations.warnings.iter().cloned());
        }
        if let Some(g) = &self.gamma {
            warnings.extend(g.warnings.iter().cloned());
        }
        warnings
    }

    /// Runs one menu entry end to end, returning the result and the system.
    pub fn run_menu_entry(
        &mut self,
        menu: MenuId,
    ) -> Result<(EstimationResult, EstimatingEquationSystem)> {
        let propensity = self.propensity()?;
        let weights = self.weights()?;
        let (q, h_fit) = self.menu_parts(menu)?;
        let sys = assemble_system(
            self.ds,
            &self.blip,
            &propensity,
            &q,
            menu.form(),
            h_fit.as_deref(),
            &weights,
            self.visit_indicator,
        )
        .map_err(|e| Error::stage("assembly", e))?;
        let (psi, rcond) = solve_psi(&sys).map_err(|e| Error::stage("solve", e))?;
        let covariance = crate::inference::sandwich(&sys, &psi);
        let p = psi.len();
        let standard_errors = (0..p).map(|j| covariance[(j, j)].max(0.0).sqrt()).collect();
        let covariance_rows = (0..p)
            .map(|i| (0..p).map(|j| covariance[(i, j)]).collect())
            .collect();
        let diagnostics = Diagnostics {
            rcond,
            n_patients: self.ds.n_patients(),
            risk_set_sizes: self
                .ds
                .decision_months()
                .map(|m| (m, self.ds.at_risk(m).len()))
                .collect(),
            warnings: self.nuisance_warnings(),
        };
        Ok((
            EstimationResult {
                menu,
                psi_hat: psi.as_slice().to_vec(),
                covariance: covariance_rows,
                standard_errors,
                diagnostics,
            },
            sys,
        ))
    }

    /// The fitted nuisance bundle, for inspection and tests.
    pub fn nuisance_fit(&self) -> NuisanceFit {
        NuisanceFit {
            h_symbolic: self.h_symbolic.as_deref().cloned(),
            h_plugin: self.h_plugin.as_deref().cloned(),
            durations_full: self.durations_full.as_deref().cloned(),
            durations_single: self.durations_single.as_deref().cloned(),
            gamma: self.gamma.as_deref().cloned(),
            warnings: self.nuisance_warnings(),
        }
    }
}

/// Runs one estimator end to end: propensity (and censoring) fits, any
/// nuisance fits the menu entry needs, q construction, assembly, solve.
pub fn run_estimator(
    ds: &LongitudinalDataset,
    menu: MenuId,
    config: &EstimationConfig,
) -> Result<EstimationResult> {
    let mut pipeline = Pipeline::new(ds, config)?;
    pipeline.run_menu_entry(menu).map(|(result, _)| result)
}

/// Runs several estimators sharing nuisance fits; each entry fails or
/// succeeds independently.
pub fn run_menu(
    ds: &LongitudinalDataset,
    menus: &[MenuId],
    config: &EstimationConfig,
) -> Result<Vec<Result<EstimationResult>>> {
    let mut pipeline = Pipeline::new(ds, config)?;
    Ok(menus
        .iter()
        .map(|&menu| pipeline.run_menu_entry(menu).map(|(result, _)| result))
        .collect())
}
