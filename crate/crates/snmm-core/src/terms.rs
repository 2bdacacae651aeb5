//! Feature terms for the nuisance and propensity models.
//!
//! Model features are declared as strings and compiled against a dataset
//! schema. A term is a product of factors, each an atom with an optional
//! transform:
//!
//! * atoms: `y` (current outcome), `y@N` (outcome at fixed month `N`), `m`,
//!   `k`, `(k-m)`, `(k-m-1)`, or any covariate name from the schema;
//! * transforms: raw (`y`), square (`y^2`), square root (`sqrt(y)`);
//! * products: factors joined with `*`, e.g. `injdrug*(k-m-1)` or `y*m`.
//!
//! An intercept is always included as the first feature of a compiled set.

use crate::data::{CovariateSchema, PatientRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Source {
    /// Outcome value at the row month `m`.
    Outcome,
    /// Outcome value at a fixed month.
    OutcomeAt(i32),
    /// Covariate at the row month `m`, by schema index.
    Covariate(usize),
    Month,
    OutcomeMonth,
    Lag,
    LagMinusOne,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Transform {
    Raw,
    Square,
    Sqrt,
}

#[derive(Debug, Clone, PartialEq)]
struct Factor {
    source: Source,
    transform: Transform,
}

/// A compiled product term, with factors split by what they depend on: the
/// history part is constant in the outcome month `k`, so sources iterating
/// `k` within a decision month can evaluate it once.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    name: String,
    /// Factors depending on the patient history and `m` only.
    month_factors: Vec<Factor>,
    /// Factors depending on the outcome month `k`.
    lag_factors: Vec<Factor>,
}

/// Evaluation point for a feature row: a patient at decision month `m`,
/// optionally paired with an outcome month `k`.
#[derive(Debug, Clone, Copy)]
pub struct Row<'a> {
    pub patient: &'a PatientRecord,
    pub m: i32,
    pub k: Option<i32>,
}

/// A compiled feature set: intercept plus the declared terms.
#[derive(Debug, Clone, PartialEq)]
pub struct TermSet {
    terms: Vec<Term>,
    uses_k: bool,
}

impl TermSet {
    /// Parses and compiles term strings against a schema. `with_k` declares
    /// whether evaluation rows carry an outcome month; terms mentioning `k`
    /// are rejected when they do not.
    pub fn compile<S: AsRef<str>>(
        specs: &[S],
        schema: &CovariateSchema,
        with_k: bool,
    ) -> Result<Self> {
        let mut terms = Vec::with_capacity(specs.len());
        let mut uses_k = false;
        for spec in specs {
            let term = parse_term(spec.as_ref(), schema)?;
            let term_uses_k = term.factors.iter().any(|f| {
                matches!(
                    f.source,
                    Source::OutcomeMonth | Source::Lag | Source::LagMinusOne
                )
            });
            if term_uses_k && !with_k {
                return Err(Error::BadTerm {
                    term: term.name,
                    message: "term depends on the outcome month k, which this model does not have"
                        .into(),
                });
            }
            uses_k |= term_uses_k;
            terms.push(term);
        }
        Ok(TermSet { terms, uses_k })
    }

    pub fn intercept_only(_schema: &CovariateSchema) -> Self {
        TermSet {
            terms: Vec::new(),
            uses_k: false,
        }
    }

    /// Number of features including the leading intercept.
    pub fn len(&self) -> usize {
        self.terms.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false // the intercept is always present
    }

    pub fn uses_k(&self) -> bool {
        self.uses_k
    }

    /// Feature names, intercept first.
    pub fn names(&self) -> Vec<String> {
        std::iter::once("intercept".to_string())
            .chain(self.terms.iter().map(|t| t.name.clone()))
            .collect()
    }

    /// Evaluates the feature row into `out` (length `self.len()`).
    pub fn eval_into(&self, row: Row<'_>, out: &mut [f64]) -> Result<()> {
        debug_assert_eq!(out.len(), self.len());
        out[0] = 1.0;
        for (slot, term) in out[1..].iter_mut().zip(&self.terms) {
            let mut value = 1.0;
            for factor in &term.factors {
                let raw = source_value(factor.source, row, &term.name)?;
                value *= match factor.transform {
                    Transform::Raw => raw,
                    Transform::Square => raw * raw,
                    Transform::Sqrt => raw.sqrt(),
                };
            }
            *slot = value;
        }
        Ok(())
    }
}

fn source_value(source: Source, row: Row<'_>, term_name: &str) -> Result<f64> {
    let missing = |month: i32| Error::MissingFeature {
        feature: term_name.to_string(),
        month,
        patient: row.patient.id().to_string(),
    };
    Ok(match source {
        Source::Outcome => row.patient.outcome(row.m).ok_or_else(|| missing(row.m))?,
        Source::OutcomeAt(at) => row.patient.outcome(at).ok_or_else(|| missing(at))?,
        Source::Covariate(idx) => {
            row.patient
                .row(row.m)
                .ok_or_else(|| missing(row.m))?
                .covariates[idx]
        }
        Source::Month => f64::from(row.m),
        Source::OutcomeMonth => f64::from(row.k.expect("term compiled with k")),
        Source::Lag => f64::from(row.k.expect("term compiled with k") - row.m),
        Source::LagMinusOne => f64::from(row.k.expect("term compiled with k") - row.m - 1),
    })
}

fn parse_term(spec: &str, schema: &CovariateSchema) -> Result<Term> {
    let bad = |message: &str| Error::BadTerm {
        term: spec.to_string(),
        message: message.to_string(),
    };
    let trimmed = spec.trim();
    if trimmed.is_empty() {
        return Err(bad("empty term"));
    }
    let mut factors = Vec::new();
    for raw_factor in split_factors(trimmed) {
        let raw_factor = raw_factor.trim();
        if raw_factor.is_empty() {
            return Err(bad("empty factor"));
        }
        if raw_factor == "1" {
            continue;
        }
        let (atom_str, transform) = if let Some(inner) = raw_factor
            .strip_prefix("sqrt(")
            .and_then(|s| s.strip_suffix(')'))
        {
            (inner.trim(), Transform::Sqrt)
        } else if let Some(base) = raw_factor.strip_suffix("^2") {
            (base.trim(), Transform::Square)
        } else {
            (raw_factor, Transform::Raw)
        };
        let source = parse_atom(atom_str, schema).ok_or_else(|| {
            Error::BadTerm {
                term: spec.to_string(),
                message: format!(
                    "unknown atom `{atom_str}`; expected y, y@N, m, k, (k-m), (k-m-1), or a schema covariate"
                ),
            }
        })?;
        factors.push(Factor { source, transform });
    }
    if factors.is_empty() {
        return Err(bad("term has no non-constant factor; the intercept is implicit"));
    }
    Ok(Term {
        name: trimmed.to_string(),
        factors,
    })
}

/// Splits on `*` at parenthesis depth zero.
fn split_factors(s: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    for (i, c) in s.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            '*' if depth == 0 => {
                parts.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&s[start..]);
    parts
}

fn parse_atom(atom: &str, schema: &CovariateSchema) -> Option<Source> {
    match atom {
        "y" => Some(Source::Outcome),
        "m" => Some(Source::Month),
        "k" => Some(Source::OutcomeMonth),
        "(k-m)" | "k-m" => Some(Source::Lag),
        "(k-m-1)" | "k-m-1" => Some(Source::LagMinusOne),
        _ => {
            if let Some(month) = atom.strip_prefix("y@") {
                return month.parse::<i32>().ok().map(Source::OutcomeAt);
            }
            schema.index_of(atom).map(Source::Covariate)
        }
    }
}
