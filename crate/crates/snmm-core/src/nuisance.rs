//! Nuisance fits feeding the doubly robust and optimal estimators.
//!
//! Three families live here:
//!
//! * regressions of the mimicking outcome `H(k)` on covariate history at `m`,
//!   either term-by-term ("symbolic", keeping the result affine in ψ) or with
//!   a preliminary ψ̃ plugged in;
//! * two-part (hurdle) predictions of the treated-duration moments that make
//!   up `Δ_m(k)`: probability of any initiation in `(m, k]` times the
//!   conditional moment given initiation;
//! * the working covariance `Γ^m` of the centered `H` residuals across the
//!   outcome window, pooled across patients.

use std::collections::HashMap;
use std::ops::Range;

use nalgebra::DMatrix;

use crate::blip::{BlipModel, BlipParams};
use crate::data::{LongitudinalDataset, PatientRecord};
use crate::error::{Error, Result};
use crate::fit::{self, RowSource};
use crate::propensity::Weights;
use crate::terms::{Row, TermSet};

/// Untreated-history condition selecting a risk set at decision month `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RiskCondition {
    /// Treatment history through `m - 1` is zero (`T >= m`).
    UntreatedBefore,
    /// Treatment history through `m` is zero (`T >= m + 1`).
    UntreatedThrough,
}

impl RiskCondition {
    fn holds(self, patient: &PatientRecord, m: i32) -> bool {
        match self {
            RiskCondition::UntreatedBefore => patient.untreated_before(m),
            RiskCondition::UntreatedThrough => patient.untreated_before(m + 1),
        }
    }
}

/// Which outcome months pair with each decision month.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowSel {
    /// The dataset window, `m + lag_min ..= m + lag_max`.
    Full,
    /// Only `k = m + lag_max` (the one-year column used by the preliminary
    /// estimator).
    SingleLag,
}

fn window_months(
    ds: &LongitudinalDataset,
    sel: WindowSel,
    m: i32,
) -> std::ops::RangeInclusive<i32> {
    let w = ds.window();
    match sel {
        WindowSel::Full => (m + w.lag_min)..=(m + w.lag_max),
        WindowSel::SingleLag => (m + w.lag_max)..=(m + w.lag_max),
    }
}

// ---------------------------------------------------------------------------
// H regression
// ---------------------------------------------------------------------------

/// How the regression of `H(k)` on history is parameterized in ψ.
#[derive(Debug, Clone)]
pub enum HRegressionSpec {
    /// Regress `Y_k` and each design column separately, so the fitted
    /// conditional expectation stays affine in ψ.
    Symbolic,
    /// Regress `H_ψ̃(k)` at a fixed preliminary estimate.
    PlugIn(BlipParams),
}

#[derive(Debug, Clone)]
enum HCoefs {
    Symbolic {
        y: Vec<f64>,
        design: Vec<Vec<f64>>,
    },
    PlugIn {
        h: Vec<f64>,
    },
}

/// Fitted regression of the mimicking outcome on covariate history.
#[derive(Debug, Clone)]
pub struct HRegression {
    terms: TermSet,
    coefs: HCoefs,
    window: WindowSel,
    pub n_rows: f64,
}

struct HRegSource<'a> {
    ds: &'a LongitudinalDataset,
    blip: &'a BlipModel,
    terms: &'a TermSet,
    weights: &'a Weights,
    window: WindowSel,
    spec: &'a HRegressionSpec,
}

impl RowSource for HRegSource<'_> {
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
        match self.spec {
            HRegressionSpec::Symbolic => 1 + self.blip.dim(),
            HRegressionSpec::PlugIn(_) => 1,
        }
    }
    fn visit(&self, groups: Range<usize>, cb: &mut dyn FnMut(&[f64], &[f64], f64)) -> Result<()> {
        let p = self.blip.dim();
        let mut x = vec![0.0; self.terms.len()];
        let mut design = vec![0.0; p];
        let mut ys = vec![0.0; self.n_outcomes()];
        for (offset, patient) in self.ds.patients()[groups.clone()].iter().enumerate() {
            let patient_idx = groups.start + offset;
            for m in self.ds.decision_months() {
                if !patient.observed(m) || !patient.untreated_before(m) {
                    continue;
                }
                for k in window_months(self.ds, self.window, m) {
                    let Some(y) = patient.outcome(k) else { continue };
                    self.terms.eval_into(Row { patient, m, k: Some(k) }, &mut x)?;
                    self.blip.h_design_into(patient, k, &mut design);
                    match self.spec {
                        HRegressionSpec::Symbolic => {
                            ys[0] = y;
                            ys[1..].copy_from_slice(&design);
                        }
                        HRegressionSpec::PlugIn(psi) => {
                            let effect: f64 =
                                design.iter().zip(psi.as_slice()).map(|(d, v)| d * v).sum();
                            ys[0] = y - effect;
                        }
                    }
                    let w = self.weights.weight(patient_idx, m, k);
                    cb(&x, &ys, w);
                }
            }
        }
        Ok(())
    }
}

/// IPCW-weighted least-squares fit of `E[H(k) | history at m, untreated]`
/// over the risk set `(patient, m, k)` with `T >= m`, observed at `k`.
pub fn fit_h_regression(
    ds: &LongitudinalDataset,
    blip: &BlipModel,
    spec: HRegressionSpec,
    features: &[String],
    weights: &Weights,
    window: WindowSel,
) -> Result<HRegression> {
    let terms = TermSet::compile(features, ds.schema(), true)?;
    let src = HRegSource {
        ds,
        blip,
        terms: &terms,
        weights,
        window,
        spec: &spec,
    };
    let wls = fit::fit_wls(&src)?;
    let coefs = match spec {
        HRegressionSpec::Symbolic => HCoefs::Symbolic {
            y: wls.coefs[0].clone(),
            design: wls.coefs[1..].to_vec(),
        },
        HRegressionSpec::PlugIn(_) => HCoefs::PlugIn {
            h: wls.coefs[0].clone(),
        },
    };
    Ok(HRegression {
        terms,
        coefs,
        window,
        n_rows: wls.n_rows,
    })
}

impl HRegression {
    pub fn window(&self) -> WindowSel {
        self.window
    }

    /// Predicted `E[Y_k | history]` and `E[D(k) | history]` for the symbolic
    /// fit; the plug-in fit reports its `H` prediction with a zero design
    /// part, which is exactly how it enters the estimating equations.
    pub fn predict_parts(
        &self,
        patient: &PatientRecord,
        m: i32,
        k: i32,
        dhat: &mut [f64],
    ) -> Result<f64> {
        let mut buf = Vec::new();
        self.predict_parts_with(patient, m, k, &mut buf, dhat)
    }

    /// As [`HRegression::predict_parts`], reusing a caller-owned feature
    /// buffer.
    pub fn predict_parts_with(
        &self,
        patient: &PatientRecord,
        m: i32,
        k: i32,
        buf: &mut Vec<f64>,
        dhat: &mut [f64],
    ) -> Result<f64> {
        buf.resize(self.terms.len(), 0.0);
        self.terms.eval_into(Row { patient, m, k: Some(k) }, buf)?;
        match &self.coefs {
            HCoefs::Symbolic { y, design } => {
                for (slot, coefs) in dhat.iter_mut().zip(design) {
                    *slot = coefs.iter().zip(buf.iter()).map(|(c, v)| c * v).sum();
                }
                Ok(y.iter().zip(buf.iter()).map(|(c, v)| c * v).sum())
            }
            HCoefs::PlugIn { h } => {
                dhat.fill(0.0);
                Ok(h.iter().zip(buf.iter()).map(|(c, v)| c * v).sum())
            }
        }
    }

    /// Predicted `E[H_ψ(k) | history]`; affine in ψ for the symbolic fit and
    /// constant in ψ for the plug-in fit.
    pub fn predict_h(
        &self,
        patient: &PatientRecord,
        m: i32,
        k: i32,
        psi: &BlipParams,
    ) -> Result<f64> {
        let p = match &self.coefs {
            HCoefs::Symbolic { design, .. } => design.len(),
            HCoefs::PlugIn { .. } => 0,
        };
        let mut dhat = vec![0.0; p];
        let yhat = self.predict_parts(patient, m, k, &mut dhat)?;
        Ok(yhat - dhat.iter().zip(psi.as_slice()).map(|(d, v)| d * v).sum::<f64>())
    }
}

// ---------------------------------------------------------------------------
// Two-part duration moments
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum Hurdle {
    Logistic(fit::LogisticModel),
    /// No initiations in the risk set.
    AlwaysZero,
    /// Every patient in the risk set initiates within the window.
    AlwaysOne,
}

/// Two-part predictions of the duration moments `E[D_j(k) | history at m]`,
/// one moment per blip design column.
#[derive(Debug, Clone)]
pub struct TwoPartFit {
    hurdle_terms: TermSet,
    linear_terms: TermSet,
    /// Both parts use the same feature row (the common case), so it is
    /// evaluated once per prediction.
    shared_terms: bool,
    condition: RiskCondition,
    window: WindowSel,
    hurdle: Hurdle,
    /// Per-moment linear coefficients, fitted on initiators only.
    linear: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
    pub n_rows: f64,
    pub n_events: f64,
}

struct TwoPartSource<'a> {
    ds: &'a LongitudinalDataset,
    blip: &'a BlipModel,
    terms: &'a TermSet,
    condition: RiskCondition,
    window: WindowSel,
    /// `false`: all rows with the event indicator as outcome;
    /// `true`: initiator rows only, with the design columns as outcomes.
    linear_part: bool,
}

impl RowSource for TwoPartSource<'_> {
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
        if self.linear_part {
            self.blip.dim()
        } else {
            1
        }
    }
    fn visit(&self, groups: Range<usize>, cb: &mut dyn FnMut(&[f64], &[f64], f64)) -> Result<()> {
        let p = self.blip.dim();
        let mut x = vec![0.0; self.terms.len()];
        let mut design = vec![0.0; p];
        for patient in &self.ds.patients()[groups] {
            for m in self.ds.decision_months() {
                if !patient.observed(m) || !self.condition.holds(patient, m) {
                    continue;
                }
                for k in window_months(self.ds, self.window, m) {
                    // restrict to patients still in follow-up at k
                    if !patient.observed(k) {
                        continue;
                    }
                    let event = patient.initiation().is_some_and(|t| t <= k);
                    if self.linear_part && !event {
                        continue;
                    }
                    self.terms.eval_into(Row { patient, m, k: Some(k) }, &mut x)?;
                    if self.linear_part {
                        self.blip.h_design_into(patient, k, &mut design);
                        cb(&x, &design, 1.0);
                    } else {
                        cb(&x, &[f64::from(u8::from(event))], 1.0);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Fits the hurdle model for the duration moments: a pooled logistic model
/// for "any initiation by `k`", then per-moment regressions among initiators.
/// Degenerate risk sets fall back to neutral predictions with a warning
/// instead of failing.
pub fn fit_duration_two_part(
    ds: &LongitudinalDataset,
    blip: &BlipModel,
    condition: RiskCondition,
    window: WindowSel,
    features: &[String],
) -> Result<TwoPartFit> {
    let terms = TermSet::compile(features, ds.schema(), true)?;
    let mut warnings = Vec::new();

    // count rows and events first so degenerate cases short-circuit
    let count_src = TwoPartSource {
        ds,
        blip,
        terms: &terms,
        condition,
        window,
        linear_part: false,
    };
    let (n_rows, n_events) = count_rows(&count_src)?;
    if n_rows == 0.0 {
        return Err(Error::EmptyRiskSet(
            "duration model: no person-months in the risk set".into(),
        ));
    }
    if n_events == 0.0 {
        warnings.push("duration model: no initiations in the risk set; predictions are 0".into());
        let intercept = TermSet::intercept_only(ds.schema());
        return Ok(TwoPartFit {
            hurdle_terms: intercept.clone(),
            linear_terms: intercept,
            shared_terms: true,
            condition,
            window,
            hurdle: Hurdle::AlwaysZero,
            linear: vec![vec![0.0]; blip.dim()],
            warnings,
            n_rows,
            n_events,
        });
    }

    let (hurdle, hurdle_terms) = if n_events == n_rows {
        (Hurdle::AlwaysOne, TermSet::intercept_only(ds.schema()))
    } else {
        match fit::fit_logistic(&count_src) {
            Ok(model) => (Hurdle::Logistic(model), terms.clone()),
            Err(e @ (Error::Separation { .. } | Error::RankDeficient { .. })) => {
                warnings.push(format!(
                    "duration hurdle fell back to the pooled event fraction: {e}"
                ));
                let fallback_terms = TermSet::intercept_only(ds.schema());
                let src = TwoPartSource {
                    ds,
                    blip,
                    terms: &fallback_terms,
                    condition,
                    window,
                    linear_part: false,
                };
                (Hurdle::Logistic(fit::fit_logistic(&src)?), fallback_terms)
            }
            Err(e) => return Err(e),
        }
    };

    let linear_src = TwoPartSource {
        ds,
        blip,
        terms: &terms,
        condition,
        window,
        linear_part: true,
    };
    let (linear, linear_terms) = match fit::fit_wls(&linear_src) {
        Ok(wls) => (wls.coefs, terms),
        Err(e @ (Error::RankDeficient { .. } | Error::EmptyRiskSet(_))) => {
            warnings.push(format!(
                "duration regression fell back to initiator means: {e}"
            ));
            let fallback_terms = TermSet::intercept_only(ds.schema());
            let src = TwoPartSource {
                ds,
                blip,
                terms: &fallback_terms,
                condition,
                window,
                linear_part: true,
            };
            (fit::fit_wls(&src)?.coefs, fallback_terms)
        }
        Err(e) => return Err(e),
    };

    let shared_terms = hurdle_terms == linear_terms;
    Ok(TwoPartFit {
        hurdle_terms,
        linear_terms,
        shared_terms,
        condition,
        window,
        hurdle,
        linear,
        warnings,
        n_rows,
        n_events,
    })
}

fn count_rows(src: &TwoPartSource<'_>) -> Result<(f64, f64)> {
    let sums = crate::par::reduce_chunked(
        src.n_groups(),
        |range| -> Result<(f64, f64)> {
            let mut acc = (0.0, 0.0);
            src.visit(range, &mut |_x, ys, w| {
                acc.0 += w;
                acc.1 += w * ys[0];
            })?;
            Ok(acc)
        },
        |a, b| match (a, b) {
            (Ok(a), Ok(b)) => Ok((a.0 + b.0, a.1 + b.1)),
            (Err(e), _) | (_, Err(e)) => Err(e),
        },
    );
    sums.unwrap_or(Ok((0.0, 0.0)))
}

impl TwoPartFit {
    pub fn condition(&self) -> RiskCondition {
        self.condition
    }

    pub fn window(&self) -> WindowSel {
        self.window
    }

    /// Writes `E[D_j(k) | history at m, risk condition]` for every moment.
    pub fn predict_into(
        &self,
        patient: &PatientRecord,
        m: i32,
        k: i32,
        out: &mut [f64],
    ) -> Result<()> {
        let mut buf = Vec::new();
        self.predict_with(patient, m, k, &mut buf, out)
    }

    /// As [`TwoPartFit::predict_into`], reusing a caller-owned feature
    /// buffer.
    pub fn predict_with(
        &self,
        patient: &PatientRecord,
        m: i32,
        k: i32,
        buf: &mut Vec<f64>,
        out: &mut [f64],
    ) -> Result<()> {
        let row = Row { patient, m, k: Some(k) };
        let pr_event = match &self.hurdle {
            Hurdle::Logistic(model) => {
                buf.resize(self.hurdle_terms.len(), 0.0);
                self.hurdle_terms.eval_into(row, buf)?;
                model.predict(buf)
            }
            Hurdle::AlwaysZero => {
                out.fill(0.0);
                return Ok(());
            }
            Hurdle::AlwaysOne => 1.0,
        };
        let hurdle_was_logistic = matches!(self.hurdle, Hurdle::Logistic(_));
        if !(self.shared_terms && hurdle_was_logistic) {
            buf.resize(self.linear_terms.len(), 0.0);
            self.linear_terms.eval_into(row, buf)?;
        }
        for (slot, coefs) in out.iter_mut().zip(&self.linear) {
            let cond_mean: f64 = coefs.iter().zip(buf.iter()).map(|(c, v)| c * v).sum();
            *slot = pr_event * cond_mean;
        }
        Ok(())
    }

    /// Test-only constructor with fixed intercept predictions.
    #[cfg(test)]
    pub(crate) fn fixed_for_tests(
        schema: &crate::data::CovariateSchema,
        predictions: &[f64],
    ) -> Self {
        let intercept = TermSet::intercept_only(schema);
        TwoPartFit {
            hurdle_terms: intercept.clone(),
            linear_terms: intercept,
            shared_terms: true,
            condition: RiskCondition::UntreatedThrough,
            window: WindowSel::Full,
            hurdle: Hurdle::AlwaysOne,
            linear: predictions.iter().map(|&v| vec![v]).collect(),
            warnings: Vec::new(),
            n_rows: 0.0,
            n_events: 0.0,
        }
    }
}

/// The optimal-q building block `Δ_m(k)`: the design row an initiation at `m`
/// would produce, centered by its conditional expectation under no initiation
/// through `m`.
pub fn delta_into(
    blip: &BlipModel,
    durations: &TwoPartFit,
    patient: &PatientRecord,
    m: i32,
    k: i32,
    out: &mut [f64],
) -> Result<()> {
    let mut scratch = EvalScratch::default();
    delta_with(blip, durations, patient, m, k, &mut scratch, out)
}

/// As [`delta_into`], reusing caller-owned buffers.
pub fn delta_with(
    blip: &BlipModel,
    durations: &TwoPartFit,
    patient: &PatientRecord,
    m: i32,
    k: i32,
    scratch: &mut EvalScratch,
    out: &mut [f64],
) -> Result<()> {
    durations.predict_with(patient, m, k, &mut scratch.features, out)?;
    scratch.moments.resize(blip.dim(), 0.0);
    blip.features_into(m, k, patient, &mut scratch.moments);
    for (slot, d) in out.iter_mut().zip(&scratch.moments) {
        *slot = d - *slot;
    }
    Ok(())
}

/// Reusable buffers for the per-term prediction paths.
#[derive(Debug, Default)]
pub struct EvalScratch {
    features: Vec<f64>,
    moments: Vec<f64>,
}

/// Convenience wrapper returning `Δ_m(k)` as a vector.
pub fn delta_vector(
    blip: &BlipModel,
    durations: &TwoPartFit,
    patient: &PatientRecord,
    m: i32,
    k: i32,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; blip.dim()];
    delta_into(blip, durations, patient, m, k, &mut out)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Working covariance
// ---------------------------------------------------------------------------

/// How the working covariance of the `H` residuals is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    Identity,
    /// Pooled across patients within each decision month.
    Empirical,
    /// Pooled across decision months by lag pair, for small samples.
    PooledLag,
}

/// Working covariance matrices `Γ^m` over the outcome window, constant in the
/// covariate history.
#[derive(Debug, Clone)]
pub struct CovarianceWorkingModel {
    mode: GammaMode,
    /// For each decision month: the window months and the matrix.
    per_month: HashMap<i32, (Vec<i32>, DMatrix<f64>)>,
    pub warnings: Vec<String>,
}

impl CovarianceWorkingModel {
    pub fn identity() -> Self {
        CovarianceWorkingModel {
            mode: GammaMode::Identity,
            per_month: HashMap::new(),
            warnings: Vec::new(),
        }
    }

    /// A working covariance from externally supplied matrices, one per
    /// decision month with its window months.
    pub fn from_matrices(per_month: HashMap<i32, (Vec<i32>, DMatrix<f64>)>) -> Self {
        CovarianceWorkingModel {
            mode: GammaMode::Empirical,
            per_month,
            warnings: Vec::new(),
        }
    }

    pub fn mode(&self) -> GammaMode {
        self.mode
    }

    /// The matrix over `ks` for decision month `m`; the identity mode returns
    /// an identity of matching size.
    pub fn matrix_for(&self, m: i32, ks: &[i32]) -> DMatrix<f64> {
        match self.mode {
            GammaMode::Identity => DMatrix::identity(ks.len(), ks.len()),
            _ => {
                let (months, gamma) = self
                    .per_month
                    .get(&m)
                    .expect("gamma estimated for every decision month");
                debug_assert_eq!(months, ks);
                gamma.clone()
            }
        }
    }
}

/// Estimates `Γ^m_{k,s}` as the average over patients at risk at `m` of the
/// centered `H_ψ̃` residual cross-products, using the fitted `H` regression
/// for centering. Entries with fewer than two contributors fall back to zero
/// off the diagonal and to the pooled variance on it.
pub fn estimate_gamma(
    ds: &LongitudinalDataset,
    blip: &BlipModel,
    psi_tilde: &BlipParams,
    h_fit: &HRegression,
    mode: GammaMode,
) -> Result<CovarianceWorkingModel> {
    if mode == GammaMode::Identity {
        return Ok(CovarianceWorkingModel::identity());
    }
    let w = ds.window();
    let mut warnings = Vec::new();

    // per-patient residual vectors per decision month, accumulated into
    // per-month sums and counts
    struct MonthAcc {
        ks: Vec<i32>,
        sum: DMatrix<f64>,
        count: DMatrix<f64>,
    }
    let mut months: Vec<(i32, MonthAcc)> = Vec::new();
    for m in ds.decision_months() {
        let ks: Vec<i32> = ((m + w.lag_min)..=(m + w.lag_max).min(ds.max_month())).collect();
        let n = ks.len();
        months.push((
            m,
            MonthAcc {
                ks,
                sum: DMatrix::zeros(n, n),
                count: DMatrix::zeros(n, n),
            },
        ));
    }

    let mut resid = Vec::new();
    let mut design = vec![0.0; blip.dim()];
    let mut dhat = vec![0.0; blip.dim()];
    let mut xbuf = Vec::new();
    for patient in ds.patients() {
        for (m, acc) in months.iter_mut() {
            if !patient.observed(*m) || !patient.untreated_before(*m) {
                continue;
            }
            resid.clear();
            for &k in &acc.ks {
                let value = if patient.observed(k) {
                    blip.h_design_into(patient, k, &mut design);
                    let dot = |a: &[f64]| -> f64 {
                        a.iter().zip(psi_tilde.as_slice()).map(|(x, y)| x * y).sum()
                    };
                    let h = patient.outcome(k).expect("observed month") - dot(&design);
                    let yhat = h_fit.predict_parts_with(patient, *m, k, &mut xbuf, &mut dhat)?;
                    Some(h - (yhat - dot(&dhat)))
                } else {
                    None
                };
                resid.push(value);
            }
            for (i, ri) in resid.iter().enumerate() {
                let Some(ri) = ri else { continue };
                for (j, rj) in resid.iter().enumerate().take(i + 1) {
                    let Some(rj) = rj else { continue };
                    acc.sum[(i, j)] += ri * rj;
                    acc.count[(i, j)] += 1.0;
                }
            }
        }
    }

    // pooled variance for fallback diagonals
    let mut diag_sum = 0.0;
    let mut diag_count = 0.0;
    for (_, acc) in &months {
        for i in 0..acc.ks.len() {
            diag_sum += acc.sum[(i, i)];
            diag_count += acc.count[(i, i)];
        }
    }
    let pooled_var = if diag_count > 0.0 {
        diag_sum / diag_count
    } else {
        1.0
    };

    // pooled-by-lag table when requested
    let mut lag_sum: HashMap<(i32, i32), (f64, f64)> = HashMap::new();
    if mode == GammaMode::PooledLag {
        for (m, acc) in &months {
            for (i, &k) in acc.ks.iter().enumerate() {
                for (j, &s) in acc.ks.iter().enumerate().take(i + 1) {
                    let e = lag_sum.entry((k - m, s - m)).or_insert((0.0, 0.0));
                    e.0 += acc.sum[(i, j)];
                    e.1 += acc.count[(i, j)];
                }
            }
        }
    }

    let mut per_month = HashMap::new();
    let mut fallbacks = 0usize;
    for (m, acc) in months {
        let n = acc.ks.len();
        let mut gamma = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let (sum, count) = match mode {
                    GammaMode::PooledLag => {
                        lag_sum[&(acc.ks[i] - m, acc.ks[j] - m)]
                    }
                    _ => (acc.sum[(i, j)], acc.count[(i, j)]),
                };
                let value = if count >= 2.0 {
                    sum / count
                } else {
                    fallbacks += 1;
                    if i == j {
                        pooled_var
                    } else {
                        0.0
                    }
                };
                gamma[(i, j)] = value;
                gamma[(j, i)] = value;
            }
        }
        per_month.insert(m, (acc.ks, gamma));
    }
    if fallbacks > 0 {
        warnings.push(format!(
            "working covariance: {fallbacks} entries had fewer than 2 contributors and fell back to pooled values"
        ));
    }
    Ok(CovarianceWorkingModel {
        mode,
        per_month,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Homoscedasticity diagnostic
// ---------------------------------------------------------------------------

/// Result of regressing `H_ψ̃(k) H_ψ̃(s)` on history and `A_m`: a nonzero
/// `A_m` coefficient indicates the residual covariance depends on the
/// treatment decision, violating the optimality assumption.
#[derive(Debug, Clone, serde::Serialize)]
pub struct HomoscedasticityReport {
    pub a_coefficient: f64,
    /// Cluster-robust (by patient) standard error.
    pub standard_error: f64,
    pub t_statistic: f64,
    pub n_rows: usize,
}

/// Diagnostic check of the homoscedasticity assumption behind the optimal
/// weighting.
pub fn homoscedasticity_check(
    ds: &LongitudinalDataset,
    blip: &BlipModel,
    psi_tilde: &BlipParams,
    history_features: &[String],
) -> Result<HomoscedasticityReport> {
    let terms = TermSet::compile(history_features, ds.schema(), false)?;
    let f = terms.len() + 1; // appended A_m column
    let a_col = f - 1;
    let w = ds.window();

    let mut gram = DMatrix::zeros(f, f);
    let mut rhs = nalgebra::DVector::zeros(f);
    let mut rows = 0usize;
    let mut x = vec![0.0; f];
    // first pass: normal equations
    let mut visit = |per_patient: &mut dyn FnMut(usize, &[f64], f64)| -> Result<()> {
        for (idx, patient) in ds.patients().iter().enumerate() {
            for m in ds.decision_months() {
                if !patient.observed(m) || !patient.untreated_before(m) {
                    continue;
                }
                terms.eval_into(Row { patient, m, k: None }, &mut x[..f - 1])?;
                x[a_col] = f64::from(u8::from(patient.initiation() == Some(m)));
                let ks: Vec<i32> =
                    ((m + w.lag_min)..=(m + w.lag_max).min(patient.last_month())).collect();
                let mut hs = Vec::with_capacity(ks.len());
                for &k in &ks {
                    hs.push(blip.mimicking_outcome(psi_tilde, patient, k)?);
                }
                for (i, hi) in hs.iter().enumerate() {
                    for hj in hs.iter().take(i + 1) {
                        per_patient(idx, &x, hi * hj);
                    }
                }
            }
        }
        Ok(())
    };
    visit(&mut |_idx, x, y| {
        rows += 1;
        for i in 0..f {
            for j in 0..=i {
                gram[(i, j)] += x[i] * x[j];
            }
            rhs[i] += x[i] * y;
        }
    })?;
    for i in 0..f {
        for j in (i + 1)..f {
            gram[(i, j)] = gram[(j, i)];
        }
    }
    let beta = crate::linalg::solve_spd(&gram, &rhs).ok_or_else(|| Error::RankDeficient {
        features: terms.names(),
    })?;

    // second pass: cluster-robust meat
    let gram_inv = crate::linalg::pinv(&gram);
    let mut meat = DMatrix::zeros(f, f);
    let mut cluster = nalgebra::DVector::zeros(f);
    let mut current = usize::MAX;
    let flush = |cluster: &mut nalgebra::DVector<f64>, meat: &mut DMatrix<f64>| {
        *meat += &*cluster * cluster.transpose();
        cluster.fill(0.0);
    };
    visit(&mut |idx, x, y| {
        if idx != current {
            if current != usize::MAX {
                flush(&mut cluster, &mut meat);
            }
            current = idx;
        }
        let r = y - beta.iter().zip(x).map(|(b, v)| b * v).sum::<f64>();
        for i in 0..f {
            cluster[i] += x[i] * r;
        }
    })?;
    if current != usize::MAX {
        flush(&mut cluster, &mut meat);
    }
    let cov = &gram_inv * meat * gram_inv.transpose();
    let se = cov[(a_col, a_col)].max(0.0).sqrt();
    let coef = beta[a_col];
    Ok(HomoscedasticityReport {
        a_coefficient: coef,
        standard_error: se,
        t_statistic: if se > 0.0 { coef / se } else { f64::NAN },
        n_rows: rows,
    })
}

/// Bundle of the nuisance fits an estimator requests, with accumulated
/// fitting warnings.
#[derive(Debug, Clone, Default)]
pub struct NuisanceFit {
    pub h_symbolic: Option<HRegression>,
    pub h_plugin: Option<HRegression>,
    /// Full-window duration moments conditional on no initiation through `m`.
    pub durations_full: Option<TwoPartFit>,
    /// Single-lag duration moments for the preliminary estimator.
    pub durations_single: Option<TwoPartFit>,
    pub gamma: Option<CovarianceWorkingModel>,
    pub warnings: Vec<String>,
}
