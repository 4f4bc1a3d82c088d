//! Claims data model: static claim features, per-period payment records,
//! observation horizons and the portfolio that groups them.
//!
//! Development periods are 1-based and counted from the occurrence period, so
//! every claim of a cohort shares the same observed horizon at a given
//! evaluation date. A zero payment means "no transaction in that period"; the
//! payment indicator is derived on the fly and never stored.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Declared categorical feature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalFeature {
    pub name: String,
    pub cardinality: u32,
}

/// Column layout shared by every file in a portfolio.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub categorical: Vec<CategoricalFeature>,
    pub quantitative: Vec<String>,
    #[serde(default)]
    pub extra_dynamic: Vec<String>,
}

/// Static information known when the claim file is opened.
///
/// `categorical` and `quantitative` are aligned with the portfolio's
/// [`FeatureSchema`].
#[derive(Debug, Clone, PartialEq)]
pub struct StaticRecord {
    pub claim_id: String,
    pub occurrence_period: u32,
    pub reporting_delay: u32,
    pub categorical: Vec<u32>,
    pub quantitative: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicRecord {
    pub period: u32,
    pub payment: f64,
    pub extra: Vec<f64>,
}

impl DynamicRecord {
    pub fn new(period: u32, payment: f64) -> Self {
        Self {
            period,
            payment,
            extra: Vec::new(),
        }
    }

    pub fn indicator(&self) -> bool {
        self.payment != 0.0
    }
}

/// One claimant file: statics, observed records `1..=t_k` and, when the
/// truth is known, the hidden records `t_k+1..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClaimantFile {
    pub static_record: StaticRecord,
    pub records: Vec<DynamicRecord>,
    pub t_k: u32,
    pub full_records: Option<Vec<DynamicRecord>>,
}

impl ClaimantFile {
    pub fn claim_id(&self) -> &str {
        &self.static_record.claim_id
    }

    /// Observed payment for period `j` (`j <= t_k`).
    pub fn observed_payment(&self, j: u32) -> Option<f64> {
        if j == 0 || j > self.t_k {
            return None;
        }
        self.records.get(j as usize - 1).map(|r| r.payment)
    }

    /// Payment for any period, reading the hidden records past `t_k`.
    pub fn payment(&self, j: u32) -> Option<f64> {
        if j <= self.t_k {
            return self.observed_payment(j);
        }
        let future = self.full_records.as_ref()?;
        future.get((j - self.t_k - 1) as usize).map(|r| r.payment)
    }

    /// Cumulative observed payments through `min(j, t_k)`.
    pub fn paid_through(&self, j: u32) -> f64 {
        self.records
            .iter()
            .take(j.min(self.t_k) as usize)
            .map(|r| r.payment)
            .sum()
    }

    pub fn future_records(&self) -> Result<&[DynamicRecord]> {
        self.full_records
            .as_deref()
            .ok_or_else(|| Error::TruthUnavailable {
                claim_id: self.claim_id().to_string(),
            })
    }

    /// Total paid over the full development when the truth is present.
    pub fn ultimate_paid(&self, censor_at: Option<f64>) -> Result<f64> {
        let observed: f64 = self
            .records
            .iter()
            .map(|r| censor_opt(r.payment, censor_at))
            .sum();
        Ok(observed + observed_reserve(self, censor_at)?)
    }

    /// Drops everything after the first `t` periods, including the hidden
    /// truth. Used to rebuild the view available at an earlier date.
    pub fn truncated(&self, t: u32) -> ClaimantFile {
        let t = t.min(self.t_k);
        ClaimantFile {
            static_record: self.static_record.clone(),
            records: self.records[..t as usize].to_vec(),
            t_k: t,
            full_records: None,
        }
    }

    /// Same file without the hidden truth.
    pub fn observed_only(&self) -> ClaimantFile {
        ClaimantFile {
            full_records: None,
            ..self.clone()
        }
    }
}

fn censor_opt(y: f64, censor_at: Option<f64>) -> f64 {
    match censor_at {
        Some(u) => y.min(u),
        None => y,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Portfolio {
    pub files: Vec<ClaimantFile>,
    pub n: u32,
    /// Index of the evaluation period T* on the occurrence-period axis.
    pub evaluation_period: u32,
    pub evaluation_label: String,
    pub schema: FeatureSchema,
}

impl Portfolio {
    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    /// Observed horizon implied by the evaluation date for a given cohort.
    pub fn horizon_for(&self, occurrence_period: u32) -> u32 {
        horizon(self.evaluation_period, occurrence_period, self.n)
    }

    pub fn subset(&self, keep: impl Fn(&ClaimantFile) -> bool) -> Portfolio {
        Portfolio {
            files: self.files.iter().filter(|f| keep(f)).cloned().collect(),
            ..self.empty_like()
        }
    }

    pub fn empty_like(&self) -> Portfolio {
        Portfolio {
            files: Vec::new(),
            n: self.n,
            evaluation_period: self.evaluation_period,
            evaluation_label: self.evaluation_label.clone(),
            schema: self.schema.clone(),
        }
    }
}

/// `t_k = min(n, T* - occurrence + 1)`, or 0 when the claim occurs after T*.
pub fn horizon(evaluation_period: u32, occurrence_period: u32, n: u32) -> u32 {
    if occurrence_period > evaluation_period {
        0
    } else {
        (evaluation_period - occurrence_period + 1).min(n)
    }
}

/// Sum of the hidden future payments of a file, each optionally censored at
/// `censor_at`. Exactly 0 when `t_k = n`.
pub fn observed_reserve(file: &ClaimantFile, censor_at: Option<f64>) -> Result<f64> {
    let future = file.future_records()?;
    Ok(future
        .iter()
        .filter(|r| r.indicator())
        .map(|r| censor_opt(r.payment, censor_at))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViolationKind {
    EmptyPortfolio,
    EmptyHistory,
    HorizonBeyondUltimate,
    Gap,
    DuplicatePeriod,
    PeriodOutOfRange,
    RecordCountMismatch,
    NonFinitePayment,
    CategoryOutOfRange,
    NonFiniteQuantitative,
    SchemaMismatch,
    IncompleteTruth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub claim_id: String,
    pub field: &'static str,
    pub kind: ViolationKind,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} ({:?}) {}",
            self.claim_id, self.field, self.kind, self.detail
        )
    }
}

/// Checks every type invariant; violations are returned as data.
pub fn validate_portfolio(p: &Portfolio) -> Vec<Violation> {
    let mut out = Vec::new();
    if p.files.is_empty() {
        out.push(Violation {
            claim_id: String::new(),
            field: "files",
            kind: ViolationKind::EmptyPortfolio,
            detail: "portfolio has no files".into(),
        });
    }
    for file in &p.files {
        validate_file(file, p, &mut out);
    }
    out
}

fn validate_file(file: &ClaimantFile, p: &Portfolio, out: &mut Vec<Violation>) {
    let id = file.claim_id().to_string();
    let mut push = |field: &'static str, kind: ViolationKind, detail: String| {
        out.push(Violation {
            claim_id: id.clone(),
            field,
            kind,
            detail,
        })
    };
    let s = &file.static_record;
    if s.categorical.len() != p.schema.categorical.len()
        || s.quantitative.len() != p.schema.quantitative.len()
    {
        push(
            "static",
            ViolationKind::SchemaMismatch,
            "feature count differs from schema".into(),
        );
    } else {
        for (value, feat) in s.categorical.iter().zip(&p.schema.categorical) {
            if *value >= feat.cardinality {
                push(
                    "categorical",
                    ViolationKind::CategoryOutOfRange,
                    format!("{} = {} >= {}", feat.name, value, feat.cardinality),
                );
            }
        }
        for (value, name) in s.quantitative.iter().zip(&p.schema.quantitative) {
            if !value.is_finite() {
                push(
                    "quantitative",
                    ViolationKind::NonFiniteQuantitative,
                    format!("{name} = {value}"),
                );
            }
        }
    }

    if file.t_k == 0 {
        push(
            "t_k",
            ViolationKind::EmptyHistory,
            "no observed development period".into(),
        );
    }
    if file.t_k > p.n {
        push(
            "t_k",
            ViolationKind::HorizonBeyondUltimate,
            format!("t_k = {} > n = {}", file.t_k, p.n),
        );
    }

    let mut seen = HashSet::new();
    let all = file
        .records
        .iter()
        .chain(file.full_records.iter().flatten());
    for r in all {
        if !seen.insert(r.period) {
            push(
                "records",
                ViolationKind::DuplicatePeriod,
                format!("period {}", r.period),
            );
        }
        if r.period == 0 || r.period > p.n {
            push(
                "records",
                ViolationKind::PeriodOutOfRange,
                format!("period {}", r.period),
            );
        }
        if !r.payment.is_finite() {
            push(
                "payment",
                ViolationKind::NonFinitePayment,
                format!("period {}", r.period),
            );
        }
        if r.extra.len() != p.schema.extra_dynamic.len() {
            push(
                "extra_dynamic",
                ViolationKind::SchemaMismatch,
                format!("period {}", r.period),
            );
        }
    }

    // Observed records must be exactly 1..=t_k in order.
    let expected: Vec<u32> = (1..=file.t_k).collect();
    let got: Vec<u32> = file.records.iter().map(|r| r.period).collect();
    if got != expected {
        let sorted_unique: Vec<u32> = {
            let mut v = got.clone();
            v.sort_unstable();
            v.dedup();
            v
        };
        let has_gap = sorted_unique.windows(2).any(|w| w[1] > w[0] + 1)
            || sorted_unique.first().is_some_and(|&first| first > 1);
        if has_gap {
            push(
                "records",
                ViolationKind::Gap,
                format!("observed periods {got:?}"),
            );
        } else if got.len() != file.t_k as usize {
            push(
                "records",
                ViolationKind::RecordCountMismatch,
                format!("{} records for t_k = {}", got.len(), file.t_k),
            );
        }
    }

    if let Some(future) = &file.full_records {
        let expected: Vec<u32> = (file.t_k + 1..=p.n).collect();
        let got: Vec<u32> = future.iter().map(|r| r.period).collect();
        if got != expected {
            push(
                "full_records",
                ViolationKind::IncompleteTruth,
                format!("hidden periods {got:?}, expected {expected:?}"),
            );
        }
    }
}
