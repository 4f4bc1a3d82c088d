//! CSV/JSON layouts for portfolios, predictions and generator truth.
//!
//! A portfolio directory holds `static.csv`, `dynamic.csv` (periods up to
//! each file's horizon), `meta.json`, and optionally `truth.csv` with the
//! hidden periods after the horizon. Every CSV may start with `#` comment
//! lines, which readers skip.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{validate_portfolio, ClaimantFile, DynamicRecord, FeatureSchema, Portfolio, StaticRecord};
use crate::error::{Error, Result};
use crate::eval::{FilePrediction, Predictions};
use crate::synthgen::GroundTruth;

pub const STATIC_FILE: &str = "static.csv";
pub const DYNAMIC_FILE: &str = "dynamic.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioMeta {
    pub n: u32,
    pub evaluation_period: u32,
    pub evaluation_label: String,
    pub schema: FeatureSchema,
}

/// Creates `path` and writes the optional comment line.
pub fn create_with_header(path: &Path, header: Option<&str>) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut f = BufWriter::new(File::create(path)?);
    if let Some(h) = header {
        writeln!(f, "# {h}")?;
    }
    Ok(f)
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, path: &Path, name: &str) -> Result<T> {
    let line = rec.position().map_or(0, |p| p.line());
    rec.get(i)
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::Parse(format!("{}:{line}: bad {name} {:?}", path.display(), rec.get(i))))
}

fn write_records(
    w: &mut csv::Writer<BufWriter<File>>,
    id: &str,
    records: &[DynamicRecord],
) -> Result<()> {
    for r in records {
        let mut row = vec![id.to_string(), r.period.to_string(), r.payment.to_string()];
        row.extend(r.extra.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    Ok(())
}

pub fn write_portfolio(p: &Portfolio, dir: &Path, header: Option<&str>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = PortfolioMeta {
        n: p.n,
        evaluation_period: p.evaluation_period,
        evaluation_label: p.evaluation_label.clone(),
        schema: p.schema.clone(),
    };
    std::fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)? + "\n")?;

    let mut s = csv::Writer::from_writer(create_with_header(&dir.join(STATIC_FILE), header)?);
    let mut cols = vec!["claim_id".to_string(), "occurrence_period".into(), "reporting_delay".into(), "t_k".into()];
    cols.extend(p.schema.categorical.iter().map(|c| c.name.clone()));
    cols.extend(p.schema.quantitative.iter().cloned());
    s.write_record(&cols)?;
    let mut dyn_cols = vec!["claim_id".to_string(), "period".into(), "payment".into()];
    dyn_cols.extend(p.schema.extra_dynamic.iter().cloned());
    let mut d = csv::Writer::from_writer(create_with_header(&dir.join(DYNAMIC_FILE), header)?);
    d.write_record(&dyn_cols)?;
    let has_truth = p.files.iter().any(|f| f.full_records.is_some());
    let mut t = if has_truth {
        let mut w = csv::Writer::from_writer(create_with_header(&dir.join(TRUTH_FILE), header)?);
        w.write_record(&dyn_cols)?;
        Some(w)
    } else {
        let _ = std::fs::remove_file(dir.join(TRUTH_FILE));
        None
    };
    for f in &p.files {
        let r = &f.static_record;
        let mut row = vec![
            r.claim_id.clone(),
            r.occurrence_period.to_string(),
            r.reporting_delay.to_string(),
            f.t_k.to_string(),
        ];
        row.extend(r.categorical.iter().map(|v| v.to_string()));
        row.extend(r.quantitative.iter().map(|v| v.to_string()));
        s.write_record(&row)?;
        write_records(&mut d, &r.claim_id, &f.records)?;
        if let (Some(w), Some(full)) = (t.as_mut(), f.full_records.as_ref()) {
            write_records(w, &r.claim_id, full)?;
        }
    }
    s.flush()?;
    d.flush()?;
    if let Some(mut w) = t {
        w.flush()?;
    }
    Ok(())
}

fn read_dynamic(path: &Path, extras: usize) -> Result<HashMap<String, Vec<DynamicRecord>>> {
    let mut out: HashMap<String, Vec<DynamicRecord>> = HashMap::new();
    let mut rdr = reader(path)?;
    for rec in rdr.records() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or_default().to_string();
        let mut r = DynamicRecord::new(field(&rec, 1, path, "period")?, field(&rec, 2, path, "payment")?);
        for i in 0..extras {
            r.extra.push(field(&rec, 3 + i, path, "dynamic feature")?);
        }
        out.entry(id).or_default().push(r);
    }
    for v in out.values_mut() {
        v.sort_by_key(|r| r.period);
    }
    Ok(out)
}

/// Reads a portfolio directory. The hidden truth is loaded only when
/// `with_truth` is set and `truth.csv` exists.
pub fn read_portfolio(dir: &Path, with_truth: bool) -> Result<Portfolio> {
    let meta: PortfolioMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(META_FILE))?)?;
    let schema = meta.schema.clone();
    let static_path = dir.join(STATIC_FILE);
    let mut rdr = reader(&static_path)?;
    let mut dynamic = read_dynamic(&dir.join(DYNAMIC_FILE), schema.extra_dynamic.len())?;
    let truth_path = dir.join(TRUTH_FILE);
    let mut truth = if with_truth && truth_path.exists() {
        Some(read_dynamic(&truth_path, schema.extra_dynamic.len())?)
    } else {
        None
    };
    let nc = schema.categorical.len();
    let nq = schema.quantitative.len();
    let mut files = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 4 + nc + nq {
            return Err(Error::Parse(format!(
                "{}: expected {} columns, found {}",
                static_path.display(),
                4 + nc + nq,
                rec.len()
            )));
        }
        let claim_id = rec.get(0).unwrap_or_default().to_string();
        let t_k: u32 = field(&rec, 3, &static_path, "t_k")?;
        let categorical = (0..nc).map(|i| field(&rec, 4 + i, &static_path, "category")).collect::<Result<_>>()?;
        let quantitative = (0..nq).map(|i| field(&rec, 4 + nc + i, &static_path, "quantity")).collect::<Result<_>>()?;
        let records = dynamic.remove(&claim_id).unwrap_or_default();
        let full_records = truth.as_mut().map(|t| t.remove(&claim_id).unwrap_or_default());
        files.push(ClaimantFile {
            static_record: StaticRecord {
                occurrence_period: field(&rec, 1, &static_path, "occurrence_period")?,
                reporting_delay: field(&rec, 2, &static_path, "reporting_delay")?,
                claim_id,
                categorical,
                quantitative,
            },
            records,
            t_k,
            full_records,
        });
    }
    if let Some(orphan) = dynamic.keys().next() {
        return Err(Error::UnknownClaim(orphan.clone()));
    }
    let p = Portfolio {
        files,
        n: meta.n,
        evaluation_period: meta.evaluation_period,
        evaluation_label: meta.evaluation_label,
        schema,
    };
    let violations = validate_portfolio(&p);
    if !violations.is_empty() {
        let shown: Vec<String> = violations.iter().take(5).map(|v| v.to_string()).collect();
        return Err(Error::Parse(format!(
            "{} invariant violation(s): {}",
            violations.len(),
            shown.join("; ")
        )));
    }
    Ok(p)
}

/// Long format: one row per file and period `2..=n`.
pub fn write_predictions<W: Write>(preds: &Predictions, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["claim_id", "t_k", "period", "p_hat", "amount", "expected"])?;
    for f in &preds.files {
        for (i, ((p, a), e)) in f.p_hat.iter().zip(&f.amount).zip(&f.expected).enumerate() {
            w.write_record([
                f.claim_id.clone(),
                f.t_k.to_string(),
                (i + 2).to_string(),
                p.to_string(),
                a.to_string(),
                e.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Predictions> {
    let mut rdr = reader(path)?;
    let mut files: Vec<FilePrediction> = Vec::new();
    let mut n = 1;
    for rec in rdr.records() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or_default();
        let period: u32 = field(&rec, 2, path, "period")?;
        if files.last().is_none_or(|f| f.claim_id != id) {
            files.push(FilePrediction {
                claim_id: id.to_string(),
                t_k: field(&rec, 1, path, "t_k")?,
                p_hat: vec![],
                amount: vec![],
                expected: vec![],
            });
        }
        let f = files.last_mut().unwrap();
        if period as usize != f.p_hat.len() + 2 {
            return Err(Error::Parse(format!("{}: periods of {id} are not consecutive from 2", path.display())));
        }
        f.p_hat.push(field(&rec, 3, path, "p_hat")?);
        f.amount.push(field(&rec, 4, path, "amount")?);
        f.expected.push(field(&rec, 5, path, "expected")?);
        n = n.max(period);
    }
    if files.iter().any(|f| f.p_hat.len() as u32 != n - 1) {
        return Err(Error::Parse(format!("{}: files cover different horizons", path.display())));
    }
    Ok(Predictions { n, files })
}

/// Per-period payment probability and mean amount from the generator.
pub fn write_ground_truth<W: Write>(truth: &GroundTruth, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["claim_id", "period", "prob", "mean_amount", "expected"])?;
    for f in &truth.files {
        for (i, (p, m)) in f.prob.iter().zip(&f.mean_amount).enumerate() {
            w.write_record([
                f.claim_id.clone(),
                (i + 1).to_string(),
                p.to_string(),
                m.to_string(),
                f.expected(i as u32 + 1).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, GeneratorConfig};

    #[test]
    fn portfolio_round_trip() {
        let (p, _) = generate(&GeneratorConfig::desk(300.0, 4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_portfolio(&p, dir.path(), Some("config_hash=x seed=4")).unwrap();
        assert_eq!(read_portfolio(dir.path(), true).unwrap(), p);
        let observed = read_portfolio(dir.path(), false).unwrap();
        assert!(observed.files.iter().all(|f| f.full_records.is_none()));
        assert_eq!(observed.files.len(), p.files.len());
    }

    #[test]
    fn malformed_rows_are_reported() {
        let (p, _) = generate(&GeneratorConfig::desk(20.0, 4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_portfolio(&p, dir.path(), None).unwrap();
        let path = dir.path().join(DYNAMIC_FILE);
        let mut s = std::fs::read_to_string(&path).unwrap();
        s.push_str("ghost,1,5\n");
        std::fs::write(&path, s).unwrap();
        assert!(matches!(read_portfolio(dir.path(), false), Err(Error::UnknownClaim(id)) if id == "ghost"));
    }

    #[test]
    fn predictions_round_trip() {
        let preds = Predictions {
            n: 3,
            files: vec![
                FilePrediction {
                    claim_id: "a".into(),
                    t_k: 1,
                    p_hat: vec![0.1, 0.7],
                    amount: vec![1234.5678, 1e-7],
                    expected: vec![123.45678, 7e-8],
                },
                FilePrediction {
                    claim_id: "b".into(),
                    t_k: 3,
                    p_hat: vec![0.0, 1.0],
                    amount: vec![-3.0, 0.1 + 0.2],
                    expected: vec![0.0, 0.30000000000000004],
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let mut f = create_with_header(&path, Some("seed=1")).unwrap();
        write_predictions(&preds, &mut f).unwrap();
        drop(f);
        assert_eq!(read_predictions(&path).unwrap(), preds);
    }
}
