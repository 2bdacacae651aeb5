//! Estimation configuration: model feature lists and pipeline toggles.

use serde::{Deserialize, Serialize};

use crate::blip::BuiltinBlip;
use crate::data::WindowRule;
use crate::nuisance::GammaMode;

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| (*s).to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropensityConfig {
    pub features: Vec<String>,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        PropensityConfig {
            features: strings(&["injdrug", "y", "m"]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CensoringConfig {
    pub enabled: bool,
    pub features: Vec<String>,
    pub positivity_floor: f64,
}

impl Default for CensoringConfig {
    fn default() -> Self {
        CensoringConfig {
            enabled: false,
            features: strings(&["injdrug", "y", "m"]),
            positivity_floor: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NuisanceConfig {
    /// Features for the plug-in regression of `H` used by the full-window
    /// estimators.
    pub h_features: Vec<String>,
    /// Features for the term-by-term regression behind the doubly robust
    /// preliminary estimator.
    pub prelim_h_features: Vec<String>,
    /// Features for the full-window duration moments (these may use the
    /// outcome lag).
    pub duration_features: Vec<String>,
    /// Features for the one-year duration moments of the preliminary
    /// estimator (a single lag, so lag terms would be constant).
    pub prelim_duration_features: Vec<String>,
    pub gamma_mode: GammaMode,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        let prelim = strings(&[
            "y",
            "injdrug",
            "m",
            "m^2",
            "y^2",
            "y*m",
            "injdrug*y",
            "injdrug*m",
        ]);
        NuisanceConfig {
            h_features: strings(&["y", "(k-m)"]),
            prelim_h_features: prelim.clone(),
            duration_features: strings(&[
                "y",
                "m",
                "m^2",
                "(k-m-1)",
                "(k-m-1)^2",
                "injdrug*(k-m-1)",
                "y*(k-m-1)",
                "y^2*(k-m-1)",
                "y*m*(k-m-1)",
                "injdrug*y*(k-m-1)",
                "injdrug*m*(k-m-1)",
            ]),
            prelim_duration_features: prelim,
            gamma_mode: GammaMode::Empirical,
        }
    }
}

/// Everything an estimator run needs besides the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationConfig {
    pub blip: BuiltinBlip,
    pub window: WindowRule,
    pub propensity: PropensityConfig,
    /// Fixed initiation-model coefficients (intercept first, then one per
    /// propensity feature); skips fitting when set.
    pub fixed_propensity: Option<Vec<f64>>,
    pub censoring: CensoringConfig,
    pub nuisance: NuisanceConfig,
    /// Index terms for the two naive estimators.
    pub naive_q_a: Vec<String>,
    pub naive_q_b: Vec<String>,
    /// Optional 0/1 covariate gating person-months (e.g. a visit indicator);
    /// months where it is 0 contribute no estimating-equation terms.
    pub visit_indicator: Option<String>,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            blip: BuiltinBlip::TwoParam,
            window: WindowRule::default(),
            propensity: PropensityConfig::default(),
            fixed_propensity: None,
            censoring: CensoringConfig::default(),
            nuisance: NuisanceConfig::default(),
            naive_q_a: strings(&["y", "m", "injdrug"]),
            naive_q_b: strings(&["y", "injdrug", "y@6"]),
            visit_indicator: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let config = EstimationConfig::default();
        let text = serde_json::to_string(&config).unwrap();
        let back: EstimationConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let config: EstimationConfig =
            serde_json::from_str(r#"{"blip":"three_param","nuisance":{"gamma_mode":"identity"}}"#)
                .unwrap();
        assert_eq!(config.blip, BuiltinBlip::ThreeParam);
        assert_eq!(config.nuisance.gamma_mode, GammaMode::Identity);
        assert_eq!(config.propensity, PropensityConfig::default());
    }
}
