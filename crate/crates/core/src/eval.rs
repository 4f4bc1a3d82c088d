//! Aggregate ratios, backdated RR/RU, ROC/AUROC by development period and
//! tidy CSV exports for plotting.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::ClaimantFile;
use crate::error::{Error, Result};
use crate::net::SequencePrediction;
use crate::preprocess::{censor, ScalingParams};

/// Per-file predictions for periods `2..=n` (index `period - 2`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilePrediction {
    pub claim_id: String,
    pub t_k: u32,
    pub p_hat: Vec<f64>,
    /// `Ŷ`, the predicted amount given a payment.
    pub amount: Vec<f64>,
    /// Expected payment; `p̂·Ŷ` unless adjusted.
    pub expected: Vec<f64>,
}

impl FilePrediction {
    pub fn expected_at(&self, period: u32) -> f64 {
        self.expected[period as usize - 2]
    }

    /// Sum of expected payments over periods `from+1..=n`.
    pub fn expected_after(&self, from: u32) -> f64 {
        let start = (from as usize + 1).max(2) - 2;
        self.expected.iter().skip(start).sum()
    }

    pub fn reserve(&self) -> f64 {
        self.expected_after(self.t_k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub n: u32,
    pub files: Vec<FilePrediction>,
}

impl Predictions {
    pub fn from_sequence(seq: &SequencePrediction, scaling: &ScalingParams) -> Self {
        let files = (0..seq.len())
            .map(|k| {
                let periods = 2..=seq.n;
                let p_hat: Vec<f64> = periods.clone().map(|j| seq.p(k, j)).collect();
                let amount: Vec<f64> = periods.map(|j| seq.amount(k, j, scaling)).collect();
                FilePrediction {
                    claim_id: seq.claim_ids[k].clone(),
                    t_k: seq.t_k[k],
                    expected: p_hat.iter().zip(&amount).map(|(p, y)| p * y).collect(),
                    p_hat,
                    amount,
                }
            })
            .collect();
        Self { n: seq.n, files }
    }

    pub fn total_reserve(&self) -> f64 {
        self.files.iter().map(|f| f.reserve()).sum()
    }
}

fn index_files(files: &[ClaimantFile]) -> HashMap<&str, &ClaimantFile> {
    files.iter().map(|f| (f.claim_id(), f)).collect()
}

fn lookup<'a>(map: &HashMap<&str, &'a ClaimantFile>, id: &str) -> Result<&'a ClaimantFile> {
    map.get(id).copied().ok_or_else(|| Error::UnknownClaim(id.to_string()))
}

fn paid(file: &ClaimantFile, period: u32, censor_at: Option<f64>) -> Result<f64> {
    let y = file
        .payment(period)
        .ok_or_else(|| Error::TruthUnavailable {
            claim_id: file.claim_id().to_string(),
        })?;
    Ok(censor_at.map_or(y, |u| censor(y, u)))
}

/// Backdated ratios. `backdated` holds predictions made with horizons
/// `t_k**`; `files` holds the same claims observed through `t_k`. Claims
/// with `t_k** = 0` are skipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackdatedRatios {
    pub rr: f64,
    pub ru: f64,
    pub files: usize,
}

pub fn rr_ru(backdated: &Predictions, files: &[ClaimantFile]) -> Result<BackdatedRatios> {
    let map = index_files(files);
    let (mut pred_window, mut obs_window, mut paid_before, mut paid_total) = (0.0, 0.0, 0.0, 0.0);
    let mut count = 0;
    let mut window_cells = 0;
    for fp in &backdated.files {
        if fp.t_k == 0 {
            continue;
        }
        let file = lookup(&map, &fp.claim_id)?;
        count += 1;
        for j in 1..=file.t_k {
            let y = file.observed_payment(j).unwrap_or(0.0);
            paid_total += y;
            if j <= fp.t_k {
                paid_before += y;
            } else {
                pred_window += fp.expected_at(j);
                obs_window += y;
                window_cells += 1;
            }
        }
    }
    if count == 0 || window_cells == 0 {
        return Err(Error::UndefinedRatio(
            "the backdated window contains no development period".into(),
        ));
    }
    if obs_window == 0.0 || paid_total == 0.0 {
        return Err(Error::UndefinedRatio("observed payments in the window sum to zero".into()));
    }
    Ok(BackdatedRatios {
        rr: pred_window / obs_window,
        ru: (paid_before + pred_window) / paid_total,
        files: count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateRatios {
    pub predicted_reserve: f64,
    pub observed_reserve: f64,
    pub paid_to_date: f64,
    pub reserve_ratio: f64,
    pub ultimate_ratio: f64,
}

/// Reserve and ultimate ratios against the hidden truth. Predictions are
/// taken as given (already in the censored scale when the model was
/// trained on censored payments); observed payments are censored when
/// `censor_at` is set.
pub fn aggregate_ratios(
    preds: &Predictions,
    files: &[ClaimantFile],
    censor_at: Option<f64>,
) -> Result<AggregateRatios> {
    let map = index_files(files);
    let (mut predicted, mut observed, mut to_date) = (0.0, 0.0, 0.0);
    for fp in &preds.files {
        let file = lookup(&map, &fp.claim_id)?;
        predicted += fp.expected_after(file.t_k);
        for j in (file.t_k + 1)..=preds.n {
            observed += paid(file, j, censor_at)?;
        }
        for j in 1..=file.t_k {
            to_date += paid(file, j, censor_at)?;
        }
    }
    if observed == 0.0 {
        return Err(Error::UndefinedRatio("observed reserve is zero".into()));
    }
    Ok(AggregateRatios {
        predicted_reserve: predicted,
        observed_reserve: observed,
        paid_to_date: to_date,
        reserve_ratio: predicted / observed,
        ultimate_ratio: (to_date + predicted) / (to_date + observed),
    })
}

pub fn reserve_ratio(preds: &Predictions, files: &[ClaimantFile], censor_at: Option<f64>) -> Result<f64> {
    Ok(aggregate_ratios(preds, files, censor_at)?.reserve_ratio)
}

pub fn ultimate_ratio(preds: &Predictions, files: &[ClaimantFile], censor_at: Option<f64>) -> Result<f64> {
    Ok(aggregate_ratios(preds, files, censor_at)?.ultimate_ratio)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(false positive rate, true positive rate)`, from `(0,0)` to `(1,1)`.
    pub points: Vec<(f64, f64)>,
    pub auroc: f64,
}

/// ROC curve by threshold sweep and AUROC as the Mann–Whitney statistic
/// with ties counted one half.
pub fn roc_auroc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "roc_auroc",
            detail: format!("{} scores for {} labels", scores.len(), labels.len()),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedRatio("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the U statistic, accumulated exactly in integers.
    let mut twice_u: u128 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    let mut groups: Vec<(u64, u64)> = Vec::new();
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_u += 2 * pos as u128 * neg_below as u128 + pos as u128 * neg as u128;
        neg_below += neg;
        groups.push((pos, neg));
        i = j;
    }
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    for &(pos, neg) in groups.iter().rev() {
        tp += pos;
        fp += neg;
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    Ok(RocCurve {
        points,
        auroc: twice_u as f64 / 2.0 / (n_pos as f64 * n_neg as f64),
    })
}

/// Which cells feed per-period metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellSet {
    /// Periods `2..=t_k`.
    Observed,
    /// Periods `t_k+1..=n`, read from the hidden truth.
    Future,
    All,
}

impl CellSet {
    fn includes(self, period: u32, t_k: u32) -> bool {
        match self {
            CellSet::Observed => period <= t_k,
            CellSet::Future => period > t_k,
            CellSet::All => true,
        }
    }
}

/// `(p̂, Ŷ, I, Y)` for every cell of `period` in the chosen set.
fn period_cells(
    preds: &Predictions,
    files: &[ClaimantFile],
    period: u32,
    cells: CellSet,
) -> Result<Vec<(f64, f64, bool, f64)>> {
    let map = index_files(files);
    let mut out = Vec::new();
    if !(2..=preds.n).contains(&period) {
        return Ok(out);
    }
    for fp in &preds.files {
        let file = lookup(&map, &fp.claim_id)?;
        if !cells.includes(period, file.t_k) {
            continue;
        }
        let Some(y) = file.payment(period) else { continue };
        let i = period as usize - 2;
        out.push((fp.p_hat[i], fp.amount[i], y != 0.0, y));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodMetric {
    pub period: u32,
    pub count: usize,
    pub positives: usize,
    pub auroc: Option<f64>,
}

pub fn per_period_auroc(
    preds: &Predictions,
    files: &[ClaimantFile],
    periods: &[u32],
    cells: CellSet,
) -> Result<Vec<PeriodMetric>> {
    periods
        .iter()
        .map(|&period| {
            let c = period_cells(preds, files, period, cells)?;
            let scores: Vec<f64> = c.iter().map(|x| x.0).collect();
            let labels: Vec<bool> = c.iter().map(|x| x.2).collect();
            Ok(PeriodMetric {
                period,
                count: c.len(),
                positives: labels.iter().filter(|&&l| l).count(),
                auroc: roc_auroc(&scores, &labels).ok().map(|r| r.auroc),
            })
        })
        .collect()
}

pub const SIMULATED_PANELS: [u32; 4] = [2, 3, 5, 9];
pub const MONTHLY_PANELS: [u32; 6] = [2, 5, 10, 20, 30, 40];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub censor_at: Option<f64>,
    pub files: usize,
    pub rr: Option<f64>,
    pub ru: Option<f64>,
    pub aggregate: Option<AggregateRatios>,
    pub per_period: Vec<PeriodMetric>,
}

impl MetricReport {
    pub fn reserve_ratio(&self) -> Option<f64> {
        self.aggregate.map(|a| a.reserve_ratio)
    }

    pub fn ultimate_ratio(&self) -> Option<f64> {
        self.aggregate.map(|a| a.ultimate_ratio)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Builds a report over test files with hidden truth.
pub fn evaluate(
    label: &str,
    preds: &Predictions,
    files: &[ClaimantFile],
    censor_at: Option<f64>,
    periods: &[u32],
) -> Result<MetricReport> {
    Ok(MetricReport {
        label: label.to_string(),
        censor_at,
        files: preds.files.len(),
        rr: None,
        ru: None,
        aggregate: Some(aggregate_ratios(preds, files, censor_at)?),
        per_period: per_period_auroc(preds, files, periods, CellSet::Future)?,
    })
}

/// Five-number summary with linearly interpolated quartiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(BoxStats {
        min: v[0],
        q25: quantile_sorted(&v, 0.25),
        median: quantile_sorted(&v, 0.5),
        q75: quantile_sorted(&v, 0.75),
        max: v[v.len() - 1],
    })
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

fn csv_writer(path: &Path, header: Option<&str>) -> Result<csv::Writer<std::fs::File>> {
    let mut f = std::fs::File::create(path)?;
    if let Some(h) = header {
        writeln!(f, "{h}")?;
    }
    Ok(csv::Writer::from_writer(f))
}

fn num(v: f64) -> String {
    format!("{v:.10e}")
}

/// Writes the figure-data bundle into `dir`: p̂ boxplots by observed
/// indicator, ROC points, non-zero payment error bars, cell scatter and
/// per-file reserves. `header` is prepended verbatim as a comment line.
pub fn export_figures(
    report: &MetricReport,
    preds: &Predictions,
    files: &[ClaimantFile],
    dir: &Path,
    header: Option<&str>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let periods: Vec<u32> = report.per_period.iter().map(|p| p.period).collect();

    let mut w = csv_writer(&dir.join("boxplot_p_hat.csv"), header)?;
    w.write_record(["period", "indicator", "count", "min", "q25", "median", "q75", "max"])?;
    let mut roc = csv_writer(&dir.join("roc.csv"), header)?;
    roc.write_record(["period", "fpr", "tpr"])?;
    let mut bars = csv_writer(&dir.join("error_bars.csv"), header)?;
    bars.write_record(["period", "source", "count", "mean", "sd"])?;
    for &period in &periods {
        let cells = period_cells(preds, files, period, CellSet::Future)?;
        for indicator in [false, true] {
            let v: Vec<f64> = cells.iter().filter(|c| c.2 == indicator).map(|c| c.0).collect();
            if let Some(s) = box_stats(&v) {
                w.write_record([
                    period.to_string(),
                    (indicator as u8).to_string(),
                    v.len().to_string(),
                    num(s.min),
                    num(s.q25),
                    num(s.median),
                    num(s.q75),
                    num(s.max),
                ])?;
            }
        }
        let scores: Vec<f64> = cells.iter().map(|c| c.0).collect();
        let labels: Vec<bool> = cells.iter().map(|c| c.2).collect();
        if let Ok(curve) = roc_auroc(&scores, &labels) {
            for (x, y) in curve.points {
                roc.write_record([period.to_string(), num(x), num(y)])?;
            }
        }
        let paid: Vec<&(f64, f64, bool, f64)> = cells.iter().filter(|c| c.2).collect();
        if !paid.is_empty() {
            let observed: Vec<f64> = paid.iter().map(|c| c.3).collect();
            let predicted: Vec<f64> = paid.iter().map(|c| c.1).collect();
            for (source, v) in [("observed", observed), ("predicted", predicted)] {
                let (m, s) = mean_sd(&v);
                bars.write_record([period.to_string(), source.to_string(), v.len().to_string(), num(m), num(s)])?;
            }
        }
    }
    w.flush()?;
    roc.flush()?;
    bars.flush()?;

    let map = index_files(files);
    let mut scatter = csv_writer(&dir.join("scatter.csv"), header)?;
    scatter.write_record(["claim_id", "period", "predicted", "observed"])?;
    let mut reserves = csv_writer(&dir.join("reserves.csv"), header)?;
    reserves.write_record(["claim_id", "t_k", "predicted_reserve", "observed_reserve"])?;
    for fp in &preds.files {
        let file = lookup(&map, &fp.claim_id)?;
        let mut observed = 0.0;
        for j in (file.t_k + 1)..=preds.n {
            let y = paid(file, j, report.censor_at)?;
            observed += y;
            scatter.write_record([fp.claim_id.clone(), j.to_string(), num(fp.expected_at(j)), num(y)])?;
        }
        reserves.write_record([
            fp.claim_id.clone(),
            file.t_k.to_string(),
            num(fp.expected_after(file.t_k)),
            num(observed),
        ])?;
    }
    scatter.flush()?;
    reserves.flush()?;
    Ok(())
}
