//! Longitudinal dataset representation, validation, and CSV interchange.
//!
//! A dataset holds one record per patient with consecutive monthly rows.
//! Treatment is once-on: the indicator is 0 before the initiation month `T`
//! and 1 from `T` on. Patients whose rows stop before the last month observed
//! anywhere in the dataset are considered censored at their first missing
//! month. Datasets are immutable after construction and safe to share across
//! threads.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use crate::error::{Error, Result};

/// Ordered list of covariate names shared by every patient in a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CovariateSchema {
    names: Vec<String>,
}

impl CovariateSchema {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Self {
        CovariateSchema {
            names: names.into_iter().map(Into::into).collect(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// One observed month for one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct MonthRow {
    pub month: i32,
    /// Treatment indicator for this month (0 or 1).
    pub a: u8,
    /// Outcome value (e.g. CD4 cells/mm³).
    pub y: f64,
    /// Covariate values aligned with the dataset schema.
    pub covariates: Vec<f64>,
}

/// All observed data for a single patient.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    id: String,
    start_month: i32,
    months: Vec<MonthRow>,
    /// First month with treatment, derived from the indicator column.
    /// `None` means treatment was never initiated while observed.
    treat_month: Option<i32>,
    /// First unobserved month, set by the dataset constructor for patients
    /// whose follow-up ends before the dataset maximum month.
    censor_month: Option<i32>,
}

impl PatientRecord {
    /// Builds a record from consecutive month rows, deriving the initiation
    /// month and checking the once-on treatment pattern.
    pub fn from_rows(id: impl Into<String>, months: Vec<MonthRow>) -> Result<Self> {
        let id = id.into();
        if months.is_empty() {
            return Err(Error::PatientInvalid {
                patient: id,
                message: "no observed months".into(),
            });
        }
        let start_month = months[0].month;
        let mut treat_month = None;
        for (i, row) in months.iter().enumerate() {
            if row.month != start_month + i as i32 {
                return Err(Error::PatientInvalid {
                    patient: id,
                    message: format!(
                        "months are not consecutive: expected {}, found {}",
                        start_month + i as i32,
                        row.month
                    ),
                });
            }
            if !row.y.is_finite() {
                return Err(Error::PatientInvalid {
                    patient: id,
                    message: format!("non-finite outcome at month {}", row.month),
                });
            }
            match (row.a, treat_month) {
                (0, None) => {}
                (1, None) => treat_month = Some(row.month),
                (1, Some(_)) => {}
                (0, Some(t)) => {
                    return Err(Error::PatientInvalid {
                        patient: id,
                        message: format!(
                            "treatment indicator drops back to 0 at month {} after initiation at {}",
                            row.month, t
                        ),
                    });
                }
                _ => {
                    return Err(Error::PatientInvalid {
                        patient: id,
                        message: format!("treatment indicator must be 0 or 1 at month {}", row.month),
                    });
                }
            }
        }
        Ok(PatientRecord {
            id,
            start_month,
            months,
            treat_month,
            censor_month: None,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn start_month(&self) -> i32 {
        self.start_month
    }

    pub fn months(&self) -> &[MonthRow] {
        &self.months
    }

    pub fn last_month(&self) -> i32 {
        self.start_month + self.months.len() as i32 - 1
    }

    /// Month treatment was initiated, if ever observed.
    pub fn initiation(&self) -> Option<i32> {
        self.treat_month
    }

    /// First censored month; `None` for patients followed to the end.
    pub fn censor_month(&self) -> Option<i32> {
        self.censor_month
    }

    pub fn observed(&self, m: i32) -> bool {
        m >= self.start_month && m <= self.last_month()
    }

    pub fn row(&self, m: i32) -> Option<&MonthRow> {
        if self.observed(m) {
            Some(&self.months[(m - self.start_month) as usize])
        } else {
            None
        }
    }

    pub fn outcome(&self, m: i32) -> Option<f64> {
        self.row(m).map(|r| r.y)
    }

    /// True when the patient is still untreated going into month `m`
    /// (treatment history through `m - 1` is all zero).
    pub fn untreated_before(&self, m: i32) -> bool {
        self.treat_month.map_or(true, |t| t >= m)
    }
}

/// Which (m, k) outcome pairs enter the estimating equations: all k with
/// `m + lag_min <= k <= m + lag_max`, intersected with each patient's
/// observed range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct WindowRule {
    pub lag_min: i32,
    pub lag_max: i32,
}

impl Default for WindowRule {
    fn default() -> Self {
        WindowRule {
            lag_min: 1,
            lag_max: 12,
        }
    }
}

impl WindowRule {
    pub fn validate(&self) -> Result<()> {
        if self.lag_min < 1 || self.lag_max < self.lag_min {
            return Err(Error::Config(format!(
                "window lags must satisfy 1 <= lag_min <= lag_max, got {}..{}",
                self.lag_min, self.lag_max
            )));
        }
        Ok(())
    }
}

/// A validated longitudinal dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    patients: Vec<PatientRecord>,
    schema: CovariateSchema,
    /// Last treatment-decision month `K`; never-treated patients carry the
    /// sentinel `K + 1`.
    k_last: i32,
    window: WindowRule,
    first_decision: i32,
    max_month: i32,
}

impl LongitudinalDataset {
    /// Validates and assembles a dataset, sorting patients by id.
    pub fn new(
        patients: Vec<PatientRecord>,
        schema: CovariateSchema,
        k_last: Option<i32>,
        window: WindowRule,
    ) -> Result<Self> {
        let mut patients = patients;
        patients.sort_by(|a, b| a.id.cmp(&b.id));
        Self::assemble(patients, schema, k_last, window)
    }

    /// Builds a bootstrap resample in draw order (duplicated ids are
    /// expected); the schema, last decision month, and window carry over from
    /// the parent dataset.
    pub fn resampled(patients: Vec<PatientRecord>, parent: &LongitudinalDataset) -> Result<Self> {
        Self::assemble(
            patients,
            parent.schema.clone(),
            Some(parent.k_last),
            parent.window,
        )
    }

    fn assemble(
        mut patients: Vec<PatientRecord>,
        schema: CovariateSchema,
        k_last: Option<i32>,
        window: WindowRule,
    ) -> Result<Self> {
        window.validate()?;
        if patients.is_empty() {
            return Ok(LongitudinalDataset {
                patients,
                schema,
                k_last: k_last.unwrap_or(0),
                window,
                first_decision: 0,
                max_month: 0,
            });
        }
        let mut max_month = i32::MIN;
        let mut max_start = i32::MIN;
        let mut first_decision = i32::MAX;
        for p in &patients {
            for row in &p.months {
                if row.covariates.len() != schema.len() {
                    return Err(Error::PatientInvalid {
                        patient: p.id.clone(),
                        message: format!(
                            "row at month {} has {} covariates, schema has {}",
                            row.month,
                            row.covariates.len(),
                            schema.len()
                        ),
                    });
                }
            }
            max_month = max_month.max(p.last_month());
            max_start = max_start.max(p.start_month);
            first_decision = first_decision.min(p.start_month);
        }
        let k_last = k_last.unwrap_or_else(|| (max_month - window.lag_max).max(max_start));
        if k_last < max_start {
            return Err(Error::DatasetInvalid(format!(
                "last decision month {k_last} precedes a patient start month {max_start}"
            )));
        }
        for p in &mut patients {
            p.censor_month = if p.last_month() < max_month {
                Some(p.last_month() + 1)
            } else {
                None
            };
        }
        Ok(LongitudinalDataset {
            patients,
            schema,
            k_last,
            window,
            first_decision,
            max_month,
        })
    }

    pub fn patients(&self) -> &[PatientRecord] {
        &self.patients
    }

    pub fn n_patients(&self) -> usize {
        self.patients.len()
    }

    pub fn schema(&self) -> &CovariateSchema {
        &self.schema
    }

    pub fn k_last(&self) -> i32 {
        self.k_last
    }

    pub fn window(&self) -> WindowRule {
        self.window
    }

    pub fn max_month(&self) -> i32 {
        self.max_month
    }

    /// Months at which treatment decisions are modeled.
    pub fn decision_months(&self) -> RangeInclusive<i32> {
        self.first_decision..=self.k_last
    }

    /// Initiation month with the never-treated sentinel `K + 1`.
    pub fn t_index(&self, patient: &PatientRecord) -> i32 {
        patient.initiation().unwrap_or(self.k_last + 1)
    }

    /// Outcome months paired with decision month `m` for `patient`:
    /// the window lags clipped to the patient's observed range.
    pub fn outcome_months(&self, patient: &PatientRecord, m: i32) -> RangeInclusive<i32> {
        let lo = m + self.window.lag_min;
        let hi = (m + self.window.lag_max).min(patient.last_month());
        lo..=hi
    }

    /// Ids of patients untreated going into `m` and still uncensored at `m`.
    pub fn at_risk(&self, m: i32) -> Vec<&str> {
        self.patients
            .iter()
            .filter(|p| p.untreated_before(m) && p.observed(m))
            .map(|p| p.id())
            .collect()
    }

    /// Reads a long-format CSV (`id,month,a,y,<covariates...>`).
    ///
    /// The last decision month defaults to the latest observed month minus
    /// the window's maximum lag (clamped to the latest start month).
    pub fn ingest_csv(path: impl AsRef<Path>, schema: &CovariateSchema) -> Result<Self> {
        Self::ingest_csv_with(path, schema, None, WindowRule::default())
    }

    pub fn ingest_csv_with(
        path: impl AsRef<Path>,
        schema: &CovariateSchema,
        k_last: Option<i32>,
        window: WindowRule,
    ) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(BufReader::new(file));

        let headers = reader.headers().map_err(csv_error)?.clone();
        let expected: Vec<&str> = ["id", "month", "a", "y"]
            .into_iter()
            .chain(schema.names().iter().map(|s| s.as_str()))
            .collect();
        let found: Vec<&str> = headers.iter().collect();
        if found != expected {
            return Err(Error::Parse {
                line: 1,
                message: format!(
                    "header mismatch: expected `{}`, found `{}`",
                    expected.join(","),
                    found.join(",")
                ),
            });
        }

        struct RawRow {
            month: i32,
            a: u8,
            y: f64,
            covs: Vec<f64>,
        }
        let mut by_patient: HashMap<String, Vec<RawRow>> = HashMap::new();
        let mut order: Vec<String> = Vec::new();
        for record in reader.records() {
            let record = record.map_err(csv_error)?;
            let line = record.position().map_or(0, |p| p.line());
            let parse_err = |message: String| Error::Parse { line, message };
            if record.len() != expected.len() {
                return Err(parse_err(format!(
                    "expected {} fields, found {}",
                    expected.len(),
                    record.len()
                )));
            }
            let id = record[0].to_string();
            let month: i32 = record[1]
                .parse()
                .map_err(|e| parse_err(format!("bad month `{}`: {e}", &record[1])))?;
            let a: u8 = record[2]
                .parse()
                .map_err(|e| parse_err(format!("bad treatment indicator `{}`: {e}", &record[2])))?;
            if a > 1 {
                return Err(parse_err(format!("treatment indicator must be 0 or 1, got {a}")));
            }
            let y: f64 = record[3]
                .parse()
                .map_err(|e| parse_err(format!("bad outcome `{}`: {e}", &record[3])))?;
            let mut covs = Vec::with_capacity(schema.len());
            for (j, name) in schema.names().iter().enumerate() {
                let raw = &record[4 + j];
                covs.push(
                    raw.parse::<f64>()
                        .map_err(|e| parse_err(format!("bad value `{raw}` for covariate {name}: {e}")))?,
                );
            }
            if !by_patient.contains_key(&id) {
                order.push(id.clone());
            }
            by_patient
                .entry(id)
                .or_default()
                .push(RawRow { month, a, y, covs });
        }

        let mut patients = Vec::with_capacity(order.len());
        for id in order {
            let mut rows = by_patient.remove(&id).expect("id recorded in order");
            rows.sort_by_key(|r| r.month);
            let months = rows
                .into_iter()
                .map(|r| MonthRow {
                    month: r.month,
                    a: r.a,
                    y: r.y,
                    covariates: r.covs,
                })
                .collect();
            patients.push(PatientRecord::from_rows(id, months)?);
        }
        Self::new(patients, schema.clone(), k_last, window)
    }

    /// Writes the dataset in the long CSV format; re-ingestion reproduces it
    /// exactly.
    pub fn emit_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path.as_ref())?;
        let mut out = BufWriter::new(file);
        write!(out, "id,month,a,y")?;
        for name in self.schema.names() {
            write!(out, ",{name}")?;
        }
        writeln!(out)?;
        for p in &self.patients {
            for row in &p.months {
                write!(out, "{},{},{},{}", p.id, row.month, row.a, row.y)?;
                for v in &row.covariates {
                    write!(out, ",{v}")?;
                }
                writeln!(out)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        line,
        message: e.to_string(),
    }
}
