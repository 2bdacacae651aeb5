use std::time::Instant;
use snmm_core::estimators::MenuId;
use snmm_core::simulator::{simulate, SimulationConfig};
use snmm_core::config::EstimationConfig;

fn main() {
    let config = EstimationConfig::default();

    let t0 = Instant::now();
    let cohort_big = simulate(&SimulationConfig { n: 100_000, seed: 5, ..SimulationConfig::default() }).unwrap();
    println!("simulate n=100k: {:.2?}", t0.elapsed());
    drop(cohort_big);

    let cohort = simulate(&SimulationConfig { n: 1000, seed: 5, ..SimulationConfig::default() }).unwrap();
    let t0 = Instant::now();
    for _ in 0..5 {
        let r = snmm_core::run_estimator(&cohort.observed, MenuId::DrIdentity, &config).unwrap();
        assert!(r.psi_hat[0].is_finite());
    }
    println!("estimator 4 at n=1000 (per run): {:.2?}", t0.elapsed() / 5);

    let cohort2 = simulate(&SimulationConfig { n: 2000, seed: 6, ..SimulationConfig::default() }).unwrap();
    let t0 = Instant::now();
    let menus = [MenuId::NaiveA, MenuId::NaiveB, MenuId::Preliminary, MenuId::DrPreliminary, MenuId::DrIdentity, MenuId::DrOptimal];
    let rs = snmm_core::run_menu(&cohort2.observed, &menus, &config).unwrap();
    for r in &rs { assert!(r.as_ref().unwrap().psi_hat[0].is_finite()); }
    println!("full menu at n=2000: {:.2?}", t0.elapsed());
    for r in &rs {
        let r = r.as_ref().unwrap();
        println!("  {}: psi = {:?} se = {:?}", r.menu.label(), r.psi_hat, r.standard_errors);
    }

    let t0 = Instant::now();
    let cohort3 = simulate(&SimulationConfig { n: 50_000, seed: 7, ..SimulationConfig::default() }).unwrap();
    let r = snmm_core::run_estimator(&cohort3.observed, MenuId::DrOptimal, &config).unwrap();
    println!("estimator 5 at n=50000: {:.2?}  psi = {:?}", t0.elapsed(), r.psi_hat);
}
