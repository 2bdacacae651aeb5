use std::time::Instant;
use snmm_core::config::EstimationConfig;
use snmm_core::estimators::{MenuId, Pipeline};
use snmm_core::simulator::{simulate, SimulationConfig};

fn main() {
    let config = EstimationConfig::default();
    let cohort = simulate(&SimulationConfig { n: 1000, seed: 5, ..SimulationConfig::default() }).unwrap();
    snmm_core::par::with_workers(Some(1), || {
        // warm-up
        let _ = snmm_core::run_estimator(&cohort.observed, MenuId::DrIdentity, &config).unwrap();
        let t0 = Instant::now();
        let mut pipeline = Pipeline::new(&cohort.observed, &config).unwrap();
        let _ = pipeline.propensity().unwrap();
        println!("propensity: {:.1?}", t0.elapsed());
        let t1 = Instant::now();
        let (_r3, _s3) = pipeline.run_menu_entry(MenuId::DrPreliminary).unwrap();
        println!("estimator 3 (durations_single + h_symbolic + assemble): {:.1?}", t1.elapsed());
        let t2 = Instant::now();
        let (_r4, _s4) = pipeline.run_menu_entry(MenuId::DrIdentity).unwrap();
        println!("estimator 4 on top (durations_full + h_plugin + assemble): {:.1?}", t2.elapsed());
        let t3 = Instant::now();
        let (_r5, _s5) = pipeline.run_menu_entry(MenuId::DrOptimal).unwrap();
        println!("estimator 5 on top (gamma + assemble): {:.1?}", t3.elapsed());
        let t4 = Instant::now();
        for _ in 0..3 {
            let _ = snmm_core::run_estimator(&cohort.observed, MenuId::DrIdentity, &config).unwrap();
        }
        println!("estimator 4 full single-thread per run: {:.1?}", t4.elapsed() / 3);
    });
}
