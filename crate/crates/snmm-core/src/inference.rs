//! Sandwich variance and percentile-bootstrap confidence intervals.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blip::BlipParams;
use crate::config::EstimationConfig;
use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::estimators::{run_estimator, EstimatingEquationSystem, MenuId};
use crate::linalg;
use crate::par;
use crate::rng::{stream, StreamKind};

/// Per-patient values of the estimating function at an estimate.
pub fn per_patient_g(sys: &EstimatingEquationSystem, psi: &BlipParams) -> Vec<DVector<f64>> {
    (0..sys.n_patients()).map(|i| sys.patient_g(i, psi)).collect()
}

/// Sandwich covariance of `ψ̂` from the solved system: the affine slope is
/// the exact derivative of the estimating function, and the middle factor is
/// the empirical second moment of the per-patient contributions at `ψ̂`.
/// Nuisance estimation is deliberately left out of the bread.
pub fn sandwich(sys: &EstimatingEquationSystem, psi: &BlipParams) -> DMatrix<f64> {
    let n = sys.n_patients().max(1) as f64;
    let mut meat = DMatrix::zeros(sys.q_dim, sys.q_dim);
    for i in 0..sys.n_patients() {
        let g = sys.patient_g(i, psi);
        meat += &g * g.transpose();
    }
    meat /= n;
    // derivative of P_n G is -A; the sign cancels in the quadratic form.
    // pinv(A) reduces to the inverse for square systems and to the
    // least-squares bread for over-identified ones.
    let bread = linalg::pinv(&sys.a);
    let cov = &bread * meat * bread.transpose();
    cov / n
}

/// Component-wise percentile interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileInterval {
    pub lower: f64,
    pub upper: f64,
}

/// Percentile-bootstrap summary for one estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub replicates_requested: usize,
    pub replicates_failed: usize,
    pub level: f64,
    pub intervals: Vec<PercentileInterval>,
    /// The retained replicate estimates, one vector per bootstrap draw.
    pub draws: Vec<Vec<f64>>,
    pub seed: u64,
}

/// Nearest-rank (type-1) quantile of a sorted sample.
pub fn percentile_nearest_rank(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    let rank = (q * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

const FAILURE_LIMIT_PERCENT: u32 = 20;

/// Efron percentile bootstrap: resamples patients with replacement, reruns
/// the entire pipeline (all nuisance fits included) per replicate, and takes
/// component-wise empirical percentiles. Replicates with singular systems are
/// dropped and counted; more than 20% failures is an error.
pub fn bootstrap(
    ds: &LongitudinalDataset,
    menu: MenuId,
    config: &EstimationConfig,
    replicates: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapSummary> {
    if replicates == 0 {
        return Err(Error::Config("bootstrap needs at least one replicate".into()));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Config(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    let n = ds.n_patients();
    if n == 0 {
        return Err(Error::EmptyRiskSet("bootstrap of an empty dataset".into()));
    }

    let runs = par::map_indexed(replicates, |b| -> Result<Vec<f64>> {
        let mut rng = stream(seed, StreamKind::BootstrapResample, &[b as u64]);
        let resampled: Vec<_> = (0..n)
            .map(|_| ds.patients()[rng.random_range(0..n)].clone())
            .collect();
        let ds_b = LongitudinalDataset::resampled(resampled, ds)?;
        let result = run_estimator(&ds_b, menu, config)?;
        Ok(result.psi_hat)
    });

    let mut draws = Vec::with_capacity(replicates);
    let mut census: std::collections::BTreeMap<String, usize> = std::collections::BTreeMap::new();
    for run in runs {
        match run {
            Ok(psi) => draws.push(psi),
            Err(e) => {
                *census.entry(failure_kind(&e)).or_insert(0) += 1;
            }
        }
    }
    let failed = replicates - draws.len();
    if failed * 100 > replicates * FAILURE_LIMIT_PERCENT as usize {
        return Err(Error::BootstrapFailures {
            failed,
            total: replicates,
            limit_percent: FAILURE_LIMIT_PERCENT,
            census: census
                .iter()
                .map(|(k, v)| format!("{k}: {v}"))
                .collect::<Vec<_>>()
                .join(", "),
        });
    }
    if draws.is_empty() {
        return Err(Error::BootstrapFailures {
            failed,
            total: replicates,
            limit_percent: FAILURE_LIMIT_PERCENT,
            census: "no successful replicates".into(),
        });
    }

    let p = draws[0].len();
    let alpha = (1.0 - level) / 2.0;
    let mut intervals = Vec::with_capacity(p);
    for j in 0..p {
        let mut component: Vec<f64> = draws.iter().map(|d| d[j]).collect();
        component.sort_by(f64::total_cmp);
        intervals.push(PercentileInterval {
            lower: percentile_nearest_rank(&component, alpha),
            upper: percentile_nearest_rank(&component, 1.0 - alpha),
        });
    }
    Ok(BootstrapSummary {
        replicates_requested: replicates,
        replicates_failed: failed,
        level,
        intervals,
        draws,
        seed,
    })
}

fn failure_kind(e: &Error) -> String {
    match e {
        Error::Stage { stage, source } => format!("{stage}/{}", failure_kind(source)),
        Error::SingularSystem { .. } => "singular-system".into(),
        Error::Separation { feature, .. } => format!("separation[{feature}]"),
        Error::RankDeficient { .. } => "rank-deficient".into(),
        Error::EmptyRiskSet(_) => "empty-risk-set".into(),
        _ => "other".into(),
    }
}
