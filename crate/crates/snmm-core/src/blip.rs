//! Treatment-effect (blip) models and the mimicking outcome.
//!
//! A blip model gives the mean effect of initiating treatment at month `m` on
//! the outcome at month `k > m` as a linear function of a parameter vector:
//! the model contributes a feature row `D(m, k)` and the effect is `D · ψ`.
//! Blipping the effect off the observed outcome yields `H_ψ(k)`, which is
//! affine in `ψ`; everything downstream relies on that affinity.

use std::fmt;
use std::sync::Arc;

use crate::data::PatientRecord;
use crate::error::{Error, Result};

/// Fill-style feature function for custom blip models: writes the feature row
/// for initiation month `m`, outcome month `k`, and the patient's covariate
/// history through `m`. Only called when `k > m`.
pub type BlipFeatureFn = dyn Fn(i32, i32, &PatientRecord, &mut [f64]) + Send + Sync;

#[derive(Clone)]
enum Kind {
    /// `(ψ₁ + ψ₂ m)(k − m)`
    TwoParam,
    /// `(ψ₁ + ψ₂ m + ψ₃ m²)(k − m)`
    ThreeParam,
    Custom(Arc<BlipFeatureFn>),
}

/// Parameterization of the treatment effect, linear in `ψ`.
#[derive(Clone)]
pub struct BlipModel {
    dim: usize,
    kind: Kind,
}

impl fmt::Debug for BlipModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            Kind::TwoParam => "two_param",
            Kind::ThreeParam => "three_param",
            Kind::Custom(_) => "custom",
        };
        f.debug_struct("BlipModel")
            .field("dim", &self.dim)
            .field("kind", &kind)
            .finish()
    }
}

/// Identifier for the built-in blip models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinBlip {
    TwoParam,
    ThreeParam,
}

impl BlipModel {
    pub fn builtin(kind: BuiltinBlip) -> Self {
        match kind {
            BuiltinBlip::TwoParam => BlipModel {
                dim: 2,
                kind: Kind::TwoParam,
            },
            BuiltinBlip::ThreeParam => BlipModel {
                dim: 3,
                kind: Kind::ThreeParam,
            },
        }
    }

    pub fn two_param() -> Self {
        Self::builtin(BuiltinBlip::TwoParam)
    }

    pub fn three_param() -> Self {
        Self::builtin(BuiltinBlip::ThreeParam)
    }

    /// A custom linear-in-ψ model with `dim` parameters.
    pub fn custom(dim: usize, features: Arc<BlipFeatureFn>) -> Self {
        BlipModel {
            dim,
            kind: Kind::Custom(features),
        }
    }

    /// Parameter dimension `p`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Writes the feature row for initiation at `m` and outcome at `k`; zero
    /// whenever `k <= m`.
    pub fn features_into(&self, m: i32, k: i32, patient: &PatientRecord, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        if k <= m {
            out.fill(0.0);
            return;
        }
        let lag = f64::from(k - m);
        let month = f64::from(m);
        match &self.kind {
            Kind::TwoParam => {
                out[0] = lag;
                out[1] = month * lag;
            }
            Kind::ThreeParam => {
                out[0] = lag;
                out[1] = month * lag;
                out[2] = month * month * lag;
            }
            Kind::Custom(f) => f(m, k, patient, out),
        }
    }

    /// The modeled effect `γ` of initiating at `m` on the outcome at `k`.
    pub fn value(&self, params: &BlipParams, m: i32, k: i32, patient: &PatientRecord) -> Result<f64> {
        if params.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "blip model has {} parameters, got {}",
                self.dim,
                params.len()
            )));
        }
        let mut row = vec![0.0; self.dim];
        self.features_into(m, k, patient, &mut row);
        Ok(dot(&row, params.as_slice()))
    }

    /// Writes the row `D(k)` with `H_ψ(k) = Y_k − D(k)·ψ`: the feature row at
    /// the patient's initiation month, zero for untreated months (`k <= T`)
    /// and untreated patients.
    pub fn h_design_into(&self, patient: &PatientRecord, k: i32, out: &mut [f64]) {
        match patient.initiation() {
            Some(t) if k > t => self.features_into(t, k, patient, out),
            _ => out.fill(0.0),
        }
    }

    /// The mimicking outcome `H_ψ(k)`: the observed outcome with the modeled
    /// effect of the patient's actual initiation removed.
    pub fn mimicking_outcome(
        &self,
        params: &BlipParams,
        patient: &PatientRecord,
        k: i32,
    ) -> Result<f64> {
        if params.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "blip model has {} parameters, got {}",
                self.dim,
                params.len()
            )));
        }
        let y = patient.outcome(k).ok_or_else(|| Error::PatientInvalid {
            patient: patient.id().to_string(),
            message: format!("month {k} not observed"),
        })?;
        let mut row = vec![0.0; self.dim];
        self.h_design_into(patient, k, &mut row);
        Ok(y - dot(&row, params.as_slice()))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Treatment-effect parameter vector `ψ`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlipParams(Vec<f64>);

impl BlipParams {
    pub fn new(psi: Vec<f64>) -> Result<Self> {
        if psi.iter().any(|v| !v.is_finite()) {
            return Err(Error::DimensionMismatch(
                "blip parameters must be finite".into(),
            ));
        }
        Ok(BlipParams(psi))
    }

    pub fn zeros(dim: usize) -> Self {
        BlipParams(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::Index<usize> for BlipParams {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}
