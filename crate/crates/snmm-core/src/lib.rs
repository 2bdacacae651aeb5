//! Coarse structural nested mean models for longitudinal treatment-initiation
//! data.
//!
//! The crate simulates monthly cohorts in which treatment, once started, stays
//! on; fits the full menu of estimating-equation estimators for the linear
//! treatment-effect (blip) parameters, from naive index functions through the
//! doubly robust and optimally weighted choices; and provides sandwich and
//! percentile-bootstrap inference plus a Monte-Carlo study harness.
//!
//! Everything stochastic is driven by counter-based seeds, and all parallel
//! reductions run over fixed chunks, so results are byte-identical across
//! worker counts.

pub mod blip;
pub mod config;
pub mod data;
pub mod error;
pub mod estimators;
mod fit;
pub mod inference;
pub mod linalg;
pub mod nuisance;
pub mod par;
pub mod propensity;
pub mod rng;
pub mod simulator;
pub mod study;
pub mod terms;

pub use blip::{BlipModel, BlipParams, BuiltinBlip};
pub use config::EstimationConfig;
pub use data::{CovariateSchema, LongitudinalDataset, MonthRow, PatientRecord, WindowRule};
pub use error::{Error, Result};
pub use estimators::{run_estimator, run_menu, EstimationResult, MenuId};
pub use fit::{expit, LogisticModel, WlsFit};
pub use simulator::{simulate, SimulatedCohort, SimulationConfig};
pub use study::{run_study, StudyConfig, StudyReport};
