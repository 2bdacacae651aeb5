//! Cross-module integration tests: the assembled estimating equations are
//! checked against brute-force oracles that recompute everything from the
//! definitions, and the full pipeline is smoke-tested on simulated cohorts.

use std::collections::HashMap;

use nalgebra::DMatrix;
use snmm_core::config::EstimationConfig;
use snmm_core::data::{CovariateSchema, LongitudinalDataset, MonthRow, PatientRecord, WindowRule};
use snmm_core::estimators::{
    assemble_system, solve_psi, EquationForm, MenuId, Pipeline, QFunction,
};
use snmm_core::nuisance::{CovarianceWorkingModel, GammaMode};
use snmm_core::propensity::{PropensityModel, Weights};
use snmm_core::simulator::{simulate, SimulationConfig};
use snmm_core::{BlipModel, BlipParams};

fn hand_dataset() -> LongitudinalDataset {
    // four patients over months 0..=8, initiations at 1, 3, never, 2
    let spec: [(Option<i32>, f64, f64); 4] = [
        (Some(1), 300.0, 0.0),
        (Some(3), 420.0, 1.0),
        (None, 500.0, 0.0),
        (Some(2), 350.0, 1.0),
    ];
    let patients = spec
        .iter()
        .enumerate()
        .map(|(i, (t, y0, grp))| {
            let months = (0..=8)
                .map(|m| MonthRow {
                    month: m,
                    a: u8::from(t.is_some_and(|t| m >= t)),
                    y: y0 - 3.0 * f64::from(m) + 7.0 * f64::from((m * i as i32) % 3),
                    covariates: vec![*grp],
                })
                .collect();
            PatientRecord::from_rows(format!("p{i}"), months).unwrap()
        })
        .collect();
    LongitudinalDataset::new(
        patients,
        CovariateSchema::new(["injdrug"]),
        Some(4),
        WindowRule {
            lag_min: 1,
            lag_max: 4,
        },
    )
    .unwrap()
}

/// Brute-force evaluation of the basic estimating function from the
/// definitions: for each patient and decision month, sum
/// `q · H_ψ(k) · 1{untreated through m-1} · (A_m - p̂(m))` over the window,
/// computing `H` from the explicit two-parameter blip formula.
fn brute_mean_g(
    ds: &LongitudinalDataset,
    prop: &PropensityModel,
    q_of: &dyn Fn(&PatientRecord, i32) -> Vec<f64>,
    psi: &[f64; 2],
) -> Vec<f64> {
    let q_dim = q_of(&ds.patients()[0], ds.k_last()).len();
    let mut total = vec![0.0; q_dim];
    for patient in ds.patients() {
        for m in ds.decision_months() {
            if !patient.observed(m) || !patient.untreated_before(m) {
                continue;
            }
            let phat = prop.predict(patient, m).unwrap();
            let a_m = f64::from(u8::from(patient.initiation() == Some(m)));
            let k = m + ds.window().lag_max; // q is zero off the one-year column
            if !patient.observed(k) {
                continue;
            }
            let y = patient.outcome(k).unwrap();
            let h = match patient.initiation() {
                Some(t) if k > t => {
                    y - (psi[0] + psi[1] * f64::from(t)) * f64::from(k - t)
                }
                _ => y,
            };
            let qv = q_of(patient, m);
            for (slot, item) in total.iter_mut().zip(&qv) {
                *slot += item * h * (a_m - phat);
            }
        }
    }
    for v in &mut total {
        *v /= ds.n_patients() as f64;
    }
    total
}

fn fixed_propensity(ds: &LongitudinalDataset) -> PropensityModel {
    PropensityModel::from_coefficients(
        ds,
        &["injdrug".into(), "y".into(), "m".into()],
        vec![-1.2, -0.3, -0.002, -0.05],
    )
    .unwrap()
}

#[test]
fn assembled_system_matches_grid_oracle() {
    let ds = hand_dataset();
    let blip = BlipModel::two_param();
    let prop = fixed_propensity(&ds);
    let q = QFunction::naive(&ds, &blip, "square", &["y".into(), "m".into()]).unwrap();
    let sys = assemble_system(
        &ds,
        &blip,
        &prop,
        &q,
        EquationForm::Basic,
        None,
        &Weights::Unit,
        None,
    )
    .unwrap();

    let q_of = |patient: &PatientRecord, m: i32| {
        vec![patient.outcome(m).unwrap(), f64::from(m)]
    };

    // recover the affine map from grid evaluations of the brute-force G
    let g0 = brute_mean_g(&ds, &prop, &q_of, &[0.0, 0.0]);
    let g1 = brute_mean_g(&ds, &prop, &q_of, &[1.0, 0.0]);
    let g2 = brute_mean_g(&ds, &prop, &q_of, &[0.0, 1.0]);
    for r in 0..2 {
        assert!((sys.b[r] - g0[r]).abs() < 1e-10, "b mismatch at {r}");
        assert!((sys.a[(r, 0)] - (g0[r] - g1[r])).abs() < 1e-10);
        assert!((sys.a[(r, 1)] - (g0[r] - g2[r])).abs() < 1e-10);
    }

    // the solution zeroes the brute-force G as well
    let (psi, _rcond) = solve_psi(&sys).unwrap();
    let at_root = brute_mean_g(&ds, &prop, &q_of, &[psi[0], psi[1]]);
    let scale = 1.0 + sys.b.amax();
    assert!(at_root.iter().all(|v| v.abs() < 1e-8 * scale));

    // grid root computed from the oracle affine map agrees with solve_psi
    let a = DMatrix::from_row_slice(
        2,
        2,
        &[g0[0] - g1[0], g0[0] - g2[0], g0[1] - g1[1], g0[1] - g2[1]],
    );
    let b = nalgebra::DVector::from_column_slice(&g0);
    let oracle = a.lu().solve(&b).unwrap();
    assert!((psi[0] - oracle[0]).abs() < 1e-8);
    assert!((psi[1] - oracle[1]).abs() < 1e-8);
}

#[test]
fn affine_decomposition_reproduces_g_at_random_psi() {
    let ds = hand_dataset();
    let blip = BlipModel::two_param();
    let prop = fixed_propensity(&ds);
    let q = QFunction::naive(
        &ds,
        &blip,
        "naive-a",
        &["y".into(), "m".into(), "injdrug".into()],
    )
    .unwrap();
    let sys = assemble_system(
        &ds,
        &blip,
        &prop,
        &q,
        EquationForm::Basic,
        None,
        &Weights::Unit,
        None,
    )
    .unwrap();
    let q_of = |patient: &PatientRecord, m: i32| {
        let row = patient.row(m).unwrap();
        vec![row.y, f64::from(m), row.covariates[0]]
    };
    for psi in [
        [0.0, 0.0],
        [25.0, -0.7],
        [-4.0, 2.5],
        [100.0, 0.01],
        [3.0, -30.0],
    ] {
        let direct = brute_mean_g(&ds, &prop, &q_of, &psi);
        let params = BlipParams::new(psi.to_vec()).unwrap();
        let from_affine = sys.mean_g(&params);
        let scale = 1.0 + direct.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        for r in 0..3 {
            assert!(
                (direct[r] - from_affine[r]).abs() < 1e-10 * scale,
                "component {r}: {} vs {}",
                direct[r],
                from_affine[r]
            );
        }
    }
}

#[test]
fn degenerate_perfect_propensity_zeroes_the_system() {
    // a dataset where A_m always equals p̂(m) is impossible with a binary A,
    // but an untreated-only dataset with p̂ = 0 realizes A_m - p̂(m) = 0
    let patients = (0..3)
        .map(|i| {
            let months = (0..=6)
                .map(|m| MonthRow {
                    month: m,
                    a: 0,
                    y: 100.0 + f64::from(i),
                    covariates: vec![0.0],
                })
                .collect();
            PatientRecord::from_rows(format!("p{i}"), months).unwrap()
        })
        .collect();
    let ds = LongitudinalDataset::new(
        patients,
        CovariateSchema::new(["injdrug"]),
        Some(2),
        WindowRule {
            lag_min: 1,
            lag_max: 4,
        },
    )
    .unwrap();
    let blip = BlipModel::two_param();
    // intercept far enough out that p̂ underflows to exactly 0; every A_m = 0
    let prop = PropensityModel::from_coefficients(&ds, &[], vec![-800.0]).unwrap();
    let q = QFunction::naive(&ds, &blip, "square", &["y".into(), "m".into()]).unwrap();
    let sys = assemble_system(
        &ds,
        &blip,
        &prop,
        &q,
        EquationForm::Basic,
        None,
        &Weights::Unit,
        None,
    )
    .unwrap();
    assert!(sys.a.amax() == 0.0);
    assert!(sys.b.amax() == 0.0);
    assert!(matches!(
        solve_psi(&sys),
        Err(snmm_core::Error::SingularSystem { .. })
    ));
}

#[test]
fn untreated_patients_contribute_nothing_to_the_slope() {
    let ds = hand_dataset();
    let blip = BlipModel::two_param();
    let prop = fixed_propensity(&ds);
    let q = QFunction::naive(&ds, &blip, "square", &["y".into(), "m".into()]).unwrap();
    let sys = assemble_system(
        &ds,
        &blip,
        &prop,
        &q,
        EquationForm::Basic,
        None,
        &Weights::Unit,
        None,
    )
    .unwrap();
    // patient p2 never initiates: its H is Y at every psi, so A_i = 0
    assert_eq!(sys.per_patient[2].0.amax(), 0.0);
    assert!(sys.per_patient[2].1.amax() > 0.0);
}

#[test]
fn naive_q_values_match_term_lists() {
    let ds = {
        let months = (6..=30)
            .map(|m| MonthRow {
                month: m,
                a: 0,
                y: if m == 6 { 350.0 } else { 400.0 },
                covariates: vec![1.0],
            })
            .collect();
        let p = PatientRecord::from_rows("p0", months).unwrap();
        LongitudinalDataset::new(
            vec![p],
            CovariateSchema::new(["injdrug"]),
            Some(18),
            WindowRule::default(),
        )
        .unwrap()
    };
    let blip = BlipModel::two_param();
    let qa = QFunction::naive(
        &ds,
        &blip,
        "naive-a",
        &["y".into(), "m".into(), "injdrug".into()],
    )
    .unwrap();
    let rows = qa.month_rows(&ds, &ds.patients()[0], 8).unwrap();
    assert_eq!(rows.ks, vec![20]); // one-year column only
    assert_eq!(rows.rows, vec![400.0, 8.0, 1.0]);

    let qb = QFunction::naive(
        &ds,
        &blip,
        "naive-b",
        &["y".into(), "injdrug".into(), "y@6".into()],
    )
    .unwrap();
    let rows = qb.month_rows(&ds, &ds.patients()[0], 8).unwrap();
    assert_eq!(rows.rows, vec![400.0, 1.0, 350.0]);
}

#[test]
fn optimal_q_scalar_and_singular_gamma() {
    let ds = hand_dataset();
    let blip = BlipModel::two_param();

    // window months for m = 0 under lag 1..=4
    let ks: Vec<i32> = (1..=4).collect();
    let mut scaled = HashMap::new();
    let mut singular = HashMap::new();
    for m in ds.decision_months() {
        let ks_m: Vec<i32> = ((m + 1)..=(m + 4)).collect();
        scaled.insert(m, (ks_m.clone(), DMatrix::identity(4, 4) * 2.0));
        // rank-one covariance: all residuals perfectly correlated
        let ones = DMatrix::from_element(4, 4, 1.0);
        singular.insert(m, (ks_m, ones));
    }

    let durations = std::sync::Arc::new(
        snmm_core::nuisance::fit_duration_two_part(
            &ds,
            &blip,
            snmm_core::nuisance::RiskCondition::UntreatedThrough,
            snmm_core::nuisance::WindowSel::Full,
            &["y".to_string()],
        )
        .unwrap(),
    );

    // gamma = 2I halves the delta rows
    let q_delta = QFunction::identity_window(&blip, durations.clone());
    let gamma2 = CovarianceWorkingModel::from_matrices(scaled);
    let q_opt = QFunction::optimal(&ds, &blip, durations.clone(), &gamma2);
    let patient = &ds.patients()[2];
    let qm_delta = q_delta.month_rows(&ds, patient, 0).unwrap();
    let qm_opt = q_opt.month_rows(&ds, patient, 0).unwrap();
    assert_eq!(qm_opt.ks, ks);
    for (o, i) in qm_opt.rows.iter().zip(&qm_delta.rows) {
        assert!((o - i / 2.0).abs() < 1e-12, "{o} vs {i}");
    }

    // singular gamma: the minimal-norm solution leaves the least-squares
    // residual, which for Gamma = 1 1ᵀ is the centered column
    let gamma1 = CovarianceWorkingModel::from_matrices(singular);
    let q_sing = QFunction::optimal(&ds, &blip, durations.clone(), &gamma1);
    let qm = q_sing.month_rows(&ds, patient, 0).unwrap();
    // rebuild D and check || Gamma Q - D || equals the brute-force projection
    // residual of each column of D onto the all-ones direction
    let nf2 = 2;
    let mut d = DMatrix::zeros(4, nf2);
    let full = QFunction::identity_window(&blip, durations);
    let qm_full = full.month_rows(&ds, patient, 0).unwrap();
    for r in 0..4 {
        for c in 0..nf2 {
            d[(r, c)] = qm_full.rows[r * nf2 + c];
        }
    }
    let mut qmat = DMatrix::zeros(4, nf2);
    for r in 0..4 {
        for c in 0..nf2 {
            qmat[(r, c)] = qm.rows[r * nf2 + c];
        }
    }
    let gamma_mat = DMatrix::from_element(4, 4, 1.0);
    let achieved = (&gamma_mat * &qmat - &d).norm();
    // brute-force least squares: residual of projecting each column onto
    // span{(1,1,1,1)}
    let mut oracle_sq = 0.0;
    for c in 0..nf2 {
        let col: Vec<f64> = (0..4).map(|r| d[(r, c)]).collect();
        let mean = col.iter().sum::<f64>() / 4.0;
        oracle_sq += col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    }
    assert!(
        (achieved - oracle_sq.sqrt()).abs() < 1e-9 * (1.0 + oracle_sq.sqrt()),
        "achieved {achieved} vs oracle {}",
        oracle_sq.sqrt()
    );
}

#[test]
fn identity_gamma_and_optimal_collapse_to_the_same_estimate() {
    let sim = SimulationConfig {
        n: 400,
        seed: 31,
        ..SimulationConfig::default()
    };
    let cohort = simulate(&sim).unwrap();
    let mut config = EstimationConfig::default();
    config.nuisance.gamma_mode = GammaMode::Identity;
    let runs = snmm_core::run_menu(
        &cohort.observed,
        &[MenuId::DrIdentity, MenuId::DrOptimal],
        &config,
    )
    .unwrap();
    let a = runs[0].as_ref().unwrap().psi_hat.clone();
    let b = runs[1].as_ref().unwrap().psi_hat.clone();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-10, "{x} vs {y}");
    }
}

#[test]
fn end_to_end_recovery_on_simulated_cohort() {
    let sim = SimulationConfig {
        n: 4000,
        seed: 9,
        ..SimulationConfig::default()
    };
    let cohort = simulate(&sim).unwrap();
    let config = EstimationConfig::default();
    let menus = [
        MenuId::Preliminary,
        MenuId::DrPreliminary,
        MenuId::DrIdentity,
        MenuId::DrOptimal,
    ];
    let mut pipeline = Pipeline::new(&cohort.observed, &config).unwrap();
    for menu in menus {
        let (result, sys) = pipeline.run_menu_entry(menu).unwrap();
        let psi = BlipParams::new(result.psi_hat.clone()).unwrap();
        // estimating equations are solved exactly
        let residual = sys.mean_g(&psi).amax();
        assert!(
            residual < 1e-8 * (1.0 + sys.b.amax()),
            "{}: residual {residual}",
            menu.label()
        );
        // and the estimate lands near the truth at this sample size
        assert!(
            (result.psi_hat[0] - 25.0).abs() < 5.0,
            "{}: psi1 = {}",
            menu.label(),
            result.psi_hat[0]
        );
        assert!(
            (result.psi_hat[1] + 0.7).abs() < 0.5,
            "{}: psi2 = {}",
            menu.label(),
            result.psi_hat[1]
        );
        assert!(result.diagnostics.rcond > 1e-12);
    }
}

#[test]
fn pipeline_composition_equals_run_estimator() {
    let sim = SimulationConfig {
        n: 300,
        seed: 13,
        ..SimulationConfig::default()
    };
    let cohort = simulate(&sim).unwrap();
    let config = EstimationConfig::default();
    let direct = snmm_core::run_estimator(&cohort.observed, MenuId::NaiveA, &config).unwrap();

    // compose the stages by hand
    let blip = BlipModel::two_param();
    let prop = PropensityModel::fit(&cohort.observed, &config.propensity.features).unwrap();
    let q = QFunction::naive(
        &cohort.observed,
        &blip,
        "naive-a",
        &["y".into(), "m".into(), "injdrug".into()],
    )
    .unwrap();
    let sys = assemble_system(
        &cohort.observed,
        &blip,
        &prop,
        &q,
        EquationForm::Basic,
        None,
        &Weights::Unit,
        None,
    )
    .unwrap();
    let (psi, _) = solve_psi(&sys).unwrap();
    for (a, b) in direct.psi_hat.iter().zip(psi.as_slice()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn no_initiations_in_window_is_unidentified() {
    let sim = SimulationConfig {
        n: 50,
        seed: 3,
        // hazard intercept so low nobody initiates
        theta_true: [-40.0, 0.0, 0.0, 0.0],
        ..SimulationConfig::default()
    };
    let cohort = simulate(&sim).unwrap();
    let mut config = EstimationConfig::default();
    config.fixed_propensity = Some(vec![-40.0, 0.0, 0.0, 0.0]);
    let result = snmm_core::run_estimator(&cohort.observed, MenuId::Preliminary, &config);
    assert!(result.is_err());
}
