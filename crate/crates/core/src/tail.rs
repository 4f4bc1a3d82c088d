//! Large-payment machinery: threshold diagnostics, generalized Pareto fit,
//! exceedance-probability GLM and the adjustment of network predictions.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::domain::ClaimantFile;
use crate::error::{Error, Result};
use crate::eval::{aggregate_ratios, Predictions};
use crate::synthgen::gpd_quantile;

const Z95: f64 = 1.959963984540054;
const SHAPE_ZERO: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpdParams {
    pub shape: f64,
    pub scale: f64,
    pub threshold: f64,
    pub exceedance_count: usize,
}

impl GpdParams {
    pub fn cdf(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return 0.0;
        }
        if self.shape.abs() < SHAPE_ZERO {
            1.0 - (-y / self.scale).exp()
        } else {
            let z = 1.0 + self.shape * y / self.scale;
            if z <= 0.0 {
                1.0
            } else {
                1.0 - z.powf(-1.0 / self.shape)
            }
        }
    }

    pub fn quantile(&self, p: f64) -> f64 {
        gpd_quantile(p, self.shape, self.scale)
    }
}

/// `λ/(1−σ)`, the mean excess over the threshold.
pub fn gpd_mean_excess(p: &GpdParams) -> Result<f64> {
    if p.shape >= 1.0 {
        return Err(Error::InfiniteMean { shape: p.shape });
    }
    Ok(p.scale / (1.0 - p.shape))
}

/// `u + λ/(1−σ)`, the expected size of a payment above the threshold.
pub fn expected_exceedance_cost(p: &GpdParams) -> Result<f64> {
    Ok(p.threshold + gpd_mean_excess(p)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanExcessPoint {
    pub threshold: f64,
    pub count: usize,
    pub mean_excess: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn mean_excess_curve(payments: &[f64], thresholds: &[f64]) -> Vec<MeanExcessPoint> {
    thresholds
        .iter()
        .filter_map(|&u| {
            let ex: Vec<f64> = payments.iter().filter(|&&y| y > u).map(|y| y - u).collect();
            if ex.len() < 2 {
                return None;
            }
            let n = ex.len() as f64;
            let mean = ex.iter().sum::<f64>() / n;
            let sd = (ex.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let half = Z95 * sd / n.sqrt();
            Some(MeanExcessPoint {
                threshold: u,
                count: ex.len(),
                mean_excess: mean,
                lower: mean - half,
                upper: mean + half,
            })
        })
        .collect()
}

/// Default threshold: the 0.995 empirical quantile of the non-zero
/// payments rounded to two significant digits.
pub fn default_threshold(payments: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = payments.iter().copied().filter(|&y| y > 0.0).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let q = crate::eval::quantile_sorted(&v, 0.995);
    let unit = 10f64.powf(q.log10().floor() - 1.0);
    Some((q / unit).round() * unit)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpdFitOptions {
    pub min_excesses: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for GpdFitOptions {
    fn default() -> Self {
        Self { min_excesses: 30, max_iterations: 5000, tolerance: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpdFit {
    pub params: GpdParams,
    pub log_likelihood: f64,
    pub iterations: usize,
    /// Normal-approximation 95% intervals from the observed information;
    /// absent when the Hessian is not positive definite.
    pub shape_ci: Option<(f64, f64)>,
    pub scale_ci: Option<(f64, f64)>,
}

/// GPD log-likelihood of excesses; `-inf` outside the support.
pub fn gpd_log_likelihood(excesses: &[f64], shape: f64, scale: f64) -> f64 {
    if !(scale > 0.0) {
        return f64::NEG_INFINITY;
    }
    let n = excesses.len() as f64;
    if shape.abs() < SHAPE_ZERO {
        return -n * scale.ln() - excesses.iter().sum::<f64>() / scale;
    }
    let mut acc = 0.0;
    for &y in excesses {
        let z = shape * y / scale;
        if z <= -1.0 {
            return f64::NEG_INFINITY;
        }
        acc += z.ln_1p();
    }
    -n * scale.ln() - (1.0 + 1.0 / shape) * acc
}

struct Simplex {
    points: Vec<[f64; 2]>,
    values: Vec<f64>,
}

/// Nelder–Mead in two dimensions.
fn nelder_mead(
    f: impl Fn([f64; 2]) -> f64,
    start: [f64; 2],
    step: [f64; 2],
    opts: &GpdFitOptions,
) -> Result<([f64; 2], f64, usize)> {
    let mut s = Simplex { points: vec![start, [start[0] + step[0], start[1]], [start[0], start[1] + step[1]]], values: vec![] };
    s.values = s.points.iter().map(|&p| f(p)).collect();
    let mut trace: Vec<f64> = Vec::new();
    for it in 0..opts.max_iterations {
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| s.values[a].total_cmp(&s.values[b]));
        let (b, m, w) = (order[0], order[1], order[2]);
        let fb = s.values[b];
        if it % 100 == 0 {
            trace.push(fb);
        }
        let spread = (s.values[w] - fb).abs();
        let size = s.points.iter().map(|p| (p[0] - s.points[b][0]).abs().max((p[1] - s.points[b][1]).abs())).fold(0.0, f64::max);
        if fb.is_finite() && spread <= opts.tolerance * (fb.abs() + 1.0) && size < 1e-9 {
            return Ok((s.points[b], fb, it));
        }
        let c = [(s.points[b][0] + s.points[m][0]) / 2.0, (s.points[b][1] + s.points[m][1]) / 2.0];
        let along = |t: f64| [c[0] + t * (s.points[w][0] - c[0]), c[1] + t * (s.points[w][1] - c[1])];
        let xr = along(-1.0);
        let fr = f(xr);
        if fr < fb {
            let xe = along(-2.0);
            let fe = f(xe);
            if fe < fr {
                s.points[w] = xe;
                s.values[w] = fe;
            } else {
                s.points[w] = xr;
                s.values[w] = fr;
            }
            continue;
        }
        if fr < s.values[m] {
            s.points[w] = xr;
            s.values[w] = fr;
            continue;
        }
        let (xc, fc) = if fr < s.values[w] {
            let x = along(-0.5);
            (x, f(x))
        } else {
            let x = along(0.5);
            (x, f(x))
        };
        if fc < s.values[w].min(fr) {
            s.points[w] = xc;
            s.values[w] = fc;
            continue;
        }
        for i in [m, w] {
            let p = [
                s.points[b][0] + 0.5 * (s.points[i][0] - s.points[b][0]),
                s.points[b][1] + 0.5 * (s.points[i][1] - s.points[b][1]),
            ];
            s.points[i] = p;
            s.values[i] = f(p);
        }
    }
    let best = s.values.iter().copied().fold(f64::INFINITY, f64::min);
    Err(Error::NoConvergence {
        iterations: opts.max_iterations,
        last_value: best,
        trace: trace.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(","),
    })
}

fn hessian_ci(excesses: &[f64], shape: f64, scale: f64) -> (Option<(f64, f64)>, Option<(f64, f64)>) {
    let nll = |a: f64, b: f64| -gpd_log_likelihood(excesses, a, b);
    let ha = 1e-4 * shape.abs().max(0.1);
    let hb = 1e-4 * scale;
    let f0 = nll(shape, scale);
    let faa = (nll(shape + ha, scale) - 2.0 * f0 + nll(shape - ha, scale)) / (ha * ha);
    let fbb = (nll(shape, scale + hb) - 2.0 * f0 + nll(shape, scale - hb)) / (hb * hb);
    let fab = (nll(shape + ha, scale + hb) - nll(shape + ha, scale - hb) - nll(shape - ha, scale + hb)
        + nll(shape - ha, scale - hb))
        / (4.0 * ha * hb);
    let det = faa * fbb - fab * fab;
    if !(faa > 0.0 && det > 0.0 && det.is_finite()) {
        return (None, None);
    }
    let se_a = (fbb / det).sqrt();
    let se_b = (faa / det).sqrt();
    (
        Some((shape - Z95 * se_a, shape + Z95 * se_a)),
        Some((scale - Z95 * se_b, scale + Z95 * se_b)),
    )
}

/// Maximum-likelihood GPD fit by a simplex search over `(σ, log λ)`
/// starting from `(0.1, mean excess)`.
pub fn fit_gpd(excesses: &[f64], threshold: f64, opts: &GpdFitOptions) -> Result<GpdFit> {
    if excesses.len() < opts.min_excesses.max(2) {
        return Err(Error::Empty(format!(
            "{} excesses over {threshold}, need at least {}",
            excesses.len(),
            opts.min_excesses.max(2)
        )));
    }
    if excesses.iter().any(|&y| !(y >= 0.0 && y.is_finite())) {
        return Err(Error::Degenerate("excesses must be finite and non-negative".into()));
    }
    let mean = excesses.iter().sum::<f64>() / excesses.len() as f64;
    if excesses.iter().all(|&y| y == excesses[0]) || !(mean > 0.0) {
        return Err(Error::Degenerate("constant excesses give a degenerate likelihood".into()));
    }
    let objective = |x: [f64; 2]| {
        let v = -gpd_log_likelihood(excesses, x[0], x[1].exp());
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let (x, _, first) = nelder_mead(objective, [0.1, mean.ln()], [0.1, 0.1], opts)?;
    // A restart from the optimum guards against a collapsed simplex.
    let (x, value, second) = nelder_mead(objective, x, [0.05, 0.05], opts)?;
    let mut shape = x[0];
    if shape.abs() < SHAPE_ZERO {
        shape = 0.0;
    }
    let scale = x[1].exp();
    let (shape_ci, scale_ci) = hessian_ci(excesses, shape, scale);
    Ok(GpdFit {
        params: GpdParams { shape, scale, threshold, exceedance_count: excesses.len() },
        log_likelihood: -value,
        iterations: first + second,
        shape_ci,
        scale_ci,
    })
}

pub fn excesses_over(payments: &[f64], threshold: f64) -> Vec<f64> {
    payments.iter().filter(|&&y| y > threshold).map(|y| y - threshold).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub threshold: f64,
    pub fit: Option<GpdFit>,
    pub error: Option<String>,
}

pub fn stability_scan(payments: &[f64], grid: &[f64], opts: &GpdFitOptions) -> Result<Vec<StabilityRow>> {
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidConfig("threshold grid must be increasing".into()));
    }
    Ok(grid
        .iter()
        .map(|&u| match fit_gpd(&excesses_over(payments, u), u, opts) {
            Ok(fit) => StabilityRow { threshold: u, fit: Some(fit), error: None },
            Err(e) => StabilityRow { threshold: u, fit: None, error: Some(e.to_string()) },
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityPoint {
    pub empirical: f64,
    pub model: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantilePoint {
    pub model: f64,
    pub empirical: f64,
    pub lower: f64,
    pub upper: f64,
}

impl QuantilePoint {
    pub fn inside(&self) -> bool {
        self.lower <= self.empirical && self.empirical <= self.upper
    }
}

/// P-P and Q-Q points with plotting positions `i/(n+1)`. The Q-Q band maps
/// the 2.5% and 97.5% quantiles of the uniform order statistics through the
/// fitted quantile function.
pub fn pp_qq_points(excesses: &[f64], p: &GpdParams) -> (Vec<ProbabilityPoint>, Vec<QuantilePoint>) {
    let mut y = excesses.to_vec();
    y.sort_by(f64::total_cmp);
    let n = y.len();
    let mut pp = Vec::with_capacity(n);
    let mut qq = Vec::with_capacity(n);
    for (idx, &yi) in y.iter().enumerate() {
        let i = (idx + 1) as f64;
        let pos = i / (n as f64 + 1.0);
        pp.push(ProbabilityPoint { empirical: pos, model: p.cdf(yi) });
        let order = Beta::new(i, n as f64 + 1.0 - i).expect("positive beta parameters");
        qq.push(QuantilePoint {
            model: p.quantile(pos),
            empirical: yi,
            lower: p.quantile(order.inverse_cdf(0.025)),
            upper: p.quantile(order.inverse_cdf(0.975)),
        });
    }
    (pp, qq)
}

/// Partition of development periods: period 1 alone (when `first_alone`),
/// then blocks of `width`, with every period from `merge_from` on pooled
/// into one final group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodGrouping {
    pub n: u32,
    pub first_alone: bool,
    pub width: u32,
    pub merge_from: Option<u32>,
}

impl PeriodGrouping {
    pub fn new(n: u32) -> Self {
        Self { n, first_alone: true, width: 3, merge_from: None }
    }

    pub fn single(n: u32) -> Self {
        Self { n, first_alone: false, width: n.max(1), merge_from: None }
    }

    fn raw(&self, j: u32) -> u32 {
        let start = if self.first_alone { 2 } else { 1 };
        if self.first_alone && j == 1 {
            return 0;
        }
        let base = u32::from(self.first_alone);
        match self.merge_from {
            Some(m) if j >= m && m > start => base + (m - start).div_ceil(self.width),
            _ => base + (j - start) / self.width,
        }
    }

    pub fn group_of(&self, period: u32) -> usize {
        self.raw(period.clamp(1, self.n)) as usize
    }

    pub fn group_count(&self) -> usize {
        self.raw(self.n) as usize + 1
    }

    pub fn label(&self, group: usize) -> String {
        let periods: Vec<u32> = (1..=self.n).filter(|&j| self.group_of(j) == group).collect();
        match (periods.first(), periods.last()) {
            (Some(a), Some(b)) if a == b => a.to_string(),
            (Some(a), Some(b)) => format!("{a}-{b}"),
            _ => format!("group {group}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.width == 0 {
            return Err(Error::InvalidConfig("period grouping needs n > 0 and width > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExceedanceCell {
    pub period: u32,
    pub zero_run: u32,
    pub exceeded: bool,
}

/// Number of consecutive zero-payment periods right before each period.
pub fn zero_runs(payments: &[f64]) -> Vec<u32> {
    let mut run = 0;
    payments
        .iter()
        .map(|&y| {
            let r = run;
            run = if y == 0.0 { run + 1 } else { 0 };
            r
        })
        .collect()
}

/// One cell per observed non-zero payment.
pub fn exceedance_cells(files: &[ClaimantFile], threshold: f64) -> Vec<ExceedanceCell> {
    let mut out = Vec::new();
    for f in files {
        let pays: Vec<f64> = f.records.iter().map(|r| r.payment).collect();
        for (i, run) in zero_runs(&pays).into_iter().enumerate() {
            if pays[i] != 0.0 {
                out.push(ExceedanceCell { period: i as u32 + 1, zero_run: run, exceeded: pays[i] > threshold });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExceedanceGlm {
    pub grouping: PeriodGrouping,
    pub zero_run_term: bool,
    /// Intercept (first group), one effect per further group, then the
    /// zero-run slope when present.
    pub coefficients: Vec<f64>,
    pub deviance: f64,
    pub iterations: usize,
}

impl ExceedanceGlm {
    fn design(grouping: &PeriodGrouping, zero_run_term: bool, period: u32, zero_run: u32) -> Vec<f64> {
        let g = grouping.group_count();
        let mut x = vec![0.0; g + usize::from(zero_run_term)];
        x[0] = 1.0;
        let k = grouping.group_of(period);
        if k > 0 {
            x[k] = 1.0;
        }
        if zero_run_term {
            x[g] = zero_run as f64;
        }
        x
    }

    pub fn linear_predictor(&self, period: u32, zero_run: u32) -> f64 {
        Self::design(&self.grouping, self.zero_run_term, period, zero_run)
            .iter()
            .zip(&self.coefficients)
            .map(|(x, b)| x * b)
            .sum()
    }

    pub fn prob(&self, period: u32, zero_run: u32) -> f64 {
        logistic(self.linear_predictor(period, zero_run))
    }
}

fn logistic(eta: f64) -> f64 {
    1.0 / (1.0 + (-eta).exp())
}

fn cholesky_solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let p = b.len();
    let mut l = vec![vec![0.0; p]; p];
    for i in 0..p {
        for j in 0..=i {
            let s: f64 = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut z = vec![0.0; p];
    for i in 0..p {
        z[i] = (b[i] - (0..i).map(|k| l[i][k] * z[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        x[i] = (z[i] - (i + 1..p).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    Some(x)
}

const GLM_MAX_ITER: usize = 100;
const GLM_COEF_LIMIT: f64 = 25.0;

/// Logistic regression by iteratively reweighted least squares on cells
/// aggregated by `(group, zero run)`. Stops when the relative deviance
/// change falls below 1e-8.
pub fn fit_exceedance_glm(
    cells: &[ExceedanceCell],
    grouping: PeriodGrouping,
    zero_run_term: bool,
) -> Result<ExceedanceGlm> {
    grouping.validate()?;
    if cells.is_empty() {
        return Err(Error::Empty("exceedance cells".into()));
    }
    let g = grouping.group_count();
    let mut by_group = vec![(0usize, 0usize); g];
    let mut agg: std::collections::BTreeMap<(usize, u32), (f64, f64, u32)> = Default::default();
    for c in cells {
        let k = grouping.group_of(c.period);
        by_group[k].0 += 1;
        by_group[k].1 += usize::from(c.exceeded);
        let run = if zero_run_term { c.zero_run } else { 0 };
        let e = agg.entry((k, run)).or_insert((0.0, 0.0, c.period));
        e.0 += 1.0;
        e.1 += f64::from(u8::from(c.exceeded));
    }
    for (k, &(total, hits)) in by_group.iter().enumerate() {
        if hits == 0 || hits == total {
            return Err(Error::Separation { group: grouping.label(k) });
        }
    }
    let rows: Vec<(Vec<f64>, f64, f64)> = agg
        .iter()
        .map(|(&(_, run), &(m, s, period))| (ExceedanceGlm::design(&grouping, zero_run_term, period, run), m, s))
        .collect();
    let p = g + usize::from(zero_run_term);
    let total: f64 = rows.iter().map(|r| r.1).sum();
    let hits: f64 = rows.iter().map(|r| r.2).sum();
    let mut beta = vec![0.0; p];
    beta[0] = (hits / (total - hits)).ln();
    let deviance = |beta: &[f64]| -> f64 {
        rows.iter()
            .map(|(x, m, s)| {
                let pi = logistic(x.iter().zip(beta).map(|(a, b)| a * b).sum());
                let mu = m * pi;
                let t1 = if *s > 0.0 { s * (s / mu).ln() } else { 0.0 };
                let t2 = if m - s > 0.0 { (m - s) * ((m - s) / (m - mu)).ln() } else { 0.0 };
                2.0 * (t1 + t2)
            })
            .sum()
    };
    let mut dev = deviance(&beta);
    for it in 1..=GLM_MAX_ITER {
        let mut xtwx = vec![vec![0.0; p]; p];
        let mut xtwz = vec![0.0; p];
        for (x, m, s) in &rows {
            let eta: f64 = x.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let pi = logistic(eta);
            let v = (pi * (1.0 - pi)).max(1e-300);
            let w = m * v;
            let z = eta + (s / m - pi) / v;
            for i in 0..p {
                xtwz[i] += x[i] * w * z;
                for j in 0..p {
                    xtwx[i][j] += x[i] * w * x[j];
                }
            }
        }
        let next = cholesky_solve(&xtwx, &xtwz)
            .ok_or_else(|| Error::Degenerate("singular information matrix in the exceedance GLM".into()))?;
        if let Some((k, _)) = next.iter().enumerate().find(|(_, b)| b.abs() > GLM_COEF_LIMIT || !b.is_finite()) {
            let group = if k < g { grouping.label(k) } else { "zero run".to_string() };
            return Err(Error::Separation { group });
        }
        beta = next;
        let new_dev = deviance(&beta);
        let done = (new_dev - dev).abs() / (new_dev.abs() + 0.1) < 1e-8;
        dev = new_dev;
        if done {
            return Ok(ExceedanceGlm { grouping, zero_run_term, coefficients: beta, deviance: dev, iterations: it });
        }
    }
    Err(Error::NoConvergence { iterations: GLM_MAX_ITER, last_value: dev, trace: format!("{beta:?}") })
}

pub mod zeta_serde {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => parse_zeta(&s).map_err(serde::de::Error::custom),
        }
    }
}

/// Serde adapter for lists of ζ values that may contain `inf`.
pub mod zeta_list {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        #[derive(Serialize)]
        struct Z(#[serde(with = "super::zeta_serde")] f64);
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for &z in v {
            seq.serialize_element(&Z(z))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
        #[derive(Deserialize)]
        struct Z(#[serde(with = "super::zeta_serde")] f64);
        Ok(Vec::<Z>::deserialize(d)?.into_iter().map(|z| z.0).collect())
    }
}

/// Parses a ζ value; `inf`, `infinity` and `∞` mean no adjustment.
pub fn parse_zeta(s: &str) -> Result<f64> {
    match s.trim().to_ascii_lowercase().as_str() {
        "inf" | "infinity" | "+inf" | "∞" => Ok(f64::INFINITY),
        t => t
            .parse::<f64>()
            .ok()
            .filter(|v| *v >= 0.0)
            .ok_or_else(|| Error::Parse(format!("invalid zeta {s:?}"))),
    }
}

pub const DEFAULT_ZETA: f64 = 2500.0;
pub const ZETA_GRID: [f64; 5] = [0.0, 2000.0, 2500.0, 3000.0, f64::INFINITY];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentConfig {
    pub threshold: f64,
    #[serde(with = "zeta_serde")]
    pub zeta: f64,
    pub zero_run_reference: f64,
    /// Relative half-width of the "no payment" band around the reference.
    #[serde(default = "default_band")]
    pub zero_run_band: f64,
}

fn default_band() -> f64 {
    0.5
}

impl AdjustmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) || !(self.zeta >= 0.0) || !(self.zero_run_band >= 0.0) {
            return Err(Error::InvalidConfig(format!("adjustment settings out of range: {self:?}")));
        }
        Ok(())
    }
}

/// Expected payment with the large-claim mixture applied when `Ŷ > ζ`.
pub fn adjust_prediction(
    p_hat: f64,
    amount: f64,
    exceed_prob: f64,
    cfg: &AdjustmentConfig,
    gpd: &GpdParams,
) -> Result<f64> {
    let cost = cfg.threshold + gpd_mean_excess(gpd)?;
    if amount <= cfg.zeta {
        return Ok(p_hat * amount);
    }
    Ok(p_hat * (exceed_prob * cost + (1.0 - exceed_prob) * amount))
}

/// Zero-run counts for future periods `t_k+1..`. A future period counts as
/// "no payment" when its expected payment lies within `band` (relative) of
/// the reference.
pub fn approximate_zero_run(observed: &[f64], future_expected: &[f64], reference: f64, band: f64) -> Vec<u32> {
    let mut run = zero_runs(observed).last().copied().unwrap_or(0);
    if let Some(&last) = observed.last() {
        run = if last == 0.0 { run + 1 } else { 0 };
    }
    future_expected
        .iter()
        .map(|&e| {
            let r = run;
            run = if (e - reference).abs() <= band * reference.abs() { run + 1 } else { 0 };
            r
        })
        .collect()
}

/// Mean expected payment over observed cells (periods `2..=t_k`) whose
/// actual payment is zero.
pub fn zero_run_reference(preds: &Predictions, files: &[ClaimantFile]) -> Result<f64> {
    let map: std::collections::HashMap<&str, &ClaimantFile> = files.iter().map(|f| (f.claim_id(), f)).collect();
    let (mut sum, mut count) = (0.0, 0usize);
    for fp in &preds.files {
        let f = map.get(fp.claim_id.as_str()).ok_or_else(|| Error::UnknownClaim(fp.claim_id.clone()))?;
        for j in 2..=f.t_k.min(preds.n) {
            if f.observed_payment(j) == Some(0.0) {
                sum += fp.expected_at(j);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Empty("no observed zero-payment cells".into()));
    }
    Ok(sum / count as f64)
}

/// Applies the adjustment to every future period of every file.
pub fn adjust_predictions(
    preds: &Predictions,
    files: &[ClaimantFile],
    glm: &ExceedanceGlm,
    gpd: &GpdParams,
    cfg: &AdjustmentConfig,
) -> Result<Predictions> {
    cfg.validate()?;
    gpd_mean_excess(gpd)?;
    let map: std::collections::HashMap<&str, &ClaimantFile> = files.iter().map(|f| (f.claim_id(), f)).collect();
    let mut out = preds.clone();
    for fp in &mut out.files {
        let f = map.get(fp.claim_id.as_str()).ok_or_else(|| Error::UnknownClaim(fp.claim_id.clone()))?;
        let observed: Vec<f64> = f.records.iter().map(|r| r.payment).collect();
        let first = fp.t_k.max(1) as usize + 1;
        if first > preds.n as usize {
            continue;
        }
        let future: Vec<f64> = fp.expected[first - 2..].to_vec();
        let runs = approximate_zero_run(&observed, &future, cfg.zero_run_reference, cfg.zero_run_band);
        for (offset, run) in runs.into_iter().enumerate() {
            let j = first + offset;
            let i = j - 2;
            let q = glm.prob(j as u32, run);
            fp.expected[i] = adjust_prediction(fp.p_hat[i], fp.amount[i], q, cfg, gpd)?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZetaRow {
    #[serde(with = "zeta_serde")]
    pub zeta: f64,
    pub reserve_ratio: f64,
    pub ultimate_ratio: f64,
}

/// Reserve and ultimate ratios (uncensored truth) for each ζ in `grid`.
pub fn zeta_sweep(
    preds: &Predictions,
    files: &[ClaimantFile],
    glm: &ExceedanceGlm,
    gpd: &GpdParams,
    cfg: &AdjustmentConfig,
    grid: &[f64],
) -> Result<Vec<ZetaRow>> {
    grid.iter()
        .map(|&zeta| {
            let adjusted = adjust_predictions(preds, files, glm, gpd, &AdjustmentConfig { zeta, ..*cfg })?;
            let r = aggregate_ratios(&adjusted, files, None)?;
            Ok(ZetaRow { zeta, reserve_ratio: r.reserve_ratio, ultimate_ratio: r.ultimate_ratio })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::tests::file;
    use crate::eval::FilePrediction;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gpd_sample(n: usize, shape: f64, scale: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| gpd_quantile(rng.random::<f64>(), shape, scale)).collect()
    }

    fn reference_gpd() -> GpdParams {
        GpdParams { shape: 0.957851, scale: 14044.0, threshold: 32000.0, exceedance_count: 0 }
    }

    #[test]
    fn reference_mean_excess() {
        let p = reference_gpd();
        assert!((gpd_mean_excess(&p).unwrap() - 333_199.0).abs() < 1.0);
        assert!((expected_exceedance_cost(&p).unwrap() - 365_199.0).abs() < 1.0);
        let e = GpdParams { shape: 0.0, scale: 7.5, ..p };
        assert_eq!(gpd_mean_excess(&e).unwrap(), 7.5);
        assert!(matches!(gpd_mean_excess(&GpdParams { shape: 1.0, ..p }), Err(Error::InfiniteMean { .. })));
    }

    #[test]
    fn mean_excess_examples() {
        let c = mean_excess_curve(&[1.0, 2.0, 3.0], &[1.5, 5.0]);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].mean_excess, 1.0);
        assert_eq!(c[0].count, 2);
    }

    #[test]
    fn exponential_mean_excess_is_flat() {
        let theta = 4.0;
        let y = gpd_sample(100_000, 0.0, theta, 3);
        // Four correlated points: widen each 95% interval to 99.9%.
        let widen = 3.290526731491926 / Z95;
        for p in mean_excess_curve(&y, &[0.0, 2.0, 4.0, 8.0]) {
            let half = (p.upper - p.mean_excess) * widen;
            assert!((p.mean_excess - theta).abs() <= half, "{p:?}");
        }
    }

    #[test]
    fn gpd_parameter_recovery() {
        let y = gpd_sample(50_000, 0.5, 10.0, 11);
        let fit = fit_gpd(&y, 0.0, &GpdFitOptions::default()).unwrap();
        assert!((fit.params.shape - 0.5).abs() < 0.05, "{fit:?}");
        assert!((fit.params.scale - 10.0).abs() < 0.5, "{fit:?}");
        let (lo, hi) = fit.shape_ci.unwrap();
        assert!(lo < fit.params.shape && fit.params.shape < hi);
    }

    #[test]
    fn exponential_limit() {
        let y = gpd_sample(20_000, 0.0, 3.0, 5);
        let fit = fit_gpd(&y, 0.0, &GpdFitOptions::default()).unwrap();
        assert!(fit.params.shape.abs() < 0.05, "{fit:?}");
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(fit_gpd(&[2.0; 40], 0.0, &GpdFitOptions::default()), Err(Error::Degenerate(_))));
        assert!(matches!(fit_gpd(&[1.0, 2.0], 0.0, &GpdFitOptions::default()), Err(Error::Empty(_))));
    }

    #[test]
    fn larger_samples_estimate_better() {
        let opts = GpdFitOptions::default();
        let (mut small, mut large) = (0.0, 0.0);
        for rep in 0..20 {
            let a = gpd_sample(400, 0.3, 5.0, 100 + rep);
            let mut both = a.clone();
            both.extend(gpd_sample(400, 0.3, 5.0, 1000 + rep));
            small += (fit_gpd(&a, 0.0, &opts).unwrap().params.shape - 0.3).abs();
            large += (fit_gpd(&both, 0.0, &opts).unwrap().params.shape - 0.3).abs();
        }
        assert!(large < small, "{large} vs {small}");
    }

    #[test]
    fn stability_scan_on_gpd_data() {
        let y = gpd_sample(40_000, 0.3, 5.0, 21);
        let grid = [0.0, 2.0, 5.0, 1e9];
        let rows = stability_scan(&y, &grid, &GpdFitOptions::default()).unwrap();
        assert!(rows[3].fit.is_none() && rows[3].error.is_some());
        for r in &rows[..3] {
            let f = r.fit.as_ref().unwrap();
            let (lo, hi) = f.shape_ci.unwrap();
            assert!(lo <= 0.3 && 0.3 <= hi, "{r:?}");
        }
        let single = stability_scan(&y, &grid[1..2], &GpdFitOptions::default()).unwrap();
        let direct = fit_gpd(&excesses_over(&y, 2.0), 2.0, &GpdFitOptions::default()).unwrap();
        assert_eq!(single[0].fit.as_ref().unwrap(), &direct);
        assert!(stability_scan(&y, &[2.0, 1.0], &GpdFitOptions::default()).is_err());
    }

    #[test]
    fn qq_band_covers_simulated_data() {
        let y = gpd_sample(500, 0.4, 2.0, 8);
        let fit = fit_gpd(&y, 0.0, &GpdFitOptions::default()).unwrap();
        let (pp, qq) = pp_qq_points(&y, &fit.params);
        assert_eq!(pp.len(), 500);
        let inside = qq.iter().filter(|q| q.inside()).count() as f64 / qq.len() as f64;
        assert!(inside >= 0.95, "{inside}");
    }

    #[test]
    fn pp_qq_small_cases() {
        let p = GpdParams { shape: 0.2, scale: 1.0, threshold: 0.0, exceedance_count: 1 };
        let (pp, qq) = pp_qq_points(&[0.7], &p);
        assert_eq!(pp[0].empirical, 0.5);
        assert_eq!(pp[0].model, p.cdf(0.7));
        assert_eq!(qq.len(), 1);
        let exact: Vec<f64> = (1..=9).map(|i| p.quantile(i as f64 / 10.0)).collect();
        let (_, qq) = pp_qq_points(&exact, &p);
        for q in qq {
            assert!((q.model - q.empirical).abs() < 1e-12);
        }
    }

    #[test]
    fn grouping_partitions_periods() {
        let g = PeriodGrouping::new(12);
        let groups: Vec<usize> = (1..=12).map(|j| g.group_of(j)).collect();
        assert_eq!(groups, vec![0, 1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4]);
        assert_eq!(g.group_count(), 5);
        assert_eq!(g.label(1), "2-4");
        let m = PeriodGrouping { n: 45, first_alone: true, width: 3, merge_from: Some(39) };
        assert_eq!(m.group_of(37), m.group_of(35));
        assert_eq!(m.label(m.group_of(38)), "38");
        assert_eq!(m.group_of(39), m.group_of(45));
        assert_ne!(m.group_of(38), m.group_of(39));
        assert_eq!(m.label(m.group_of(45)), "39-45");
        assert_eq!(m.group_count(), m.group_of(45) + 1);
        assert_eq!(PeriodGrouping::single(12).group_count(), 1);
    }

    #[test]
    fn intercept_only_matches_rate() {
        let cells: Vec<ExceedanceCell> = (0..200)
            .map(|i| ExceedanceCell { period: 1 + i % 12, zero_run: i % 4, exceeded: i % 8 == 0 })
            .collect();
        let glm = fit_exceedance_glm(&cells, PeriodGrouping::single(12), false).unwrap();
        assert!((glm.prob(5, 0) - 25.0 / 200.0).abs() < 1e-10);
    }

    fn logistic_cells(n: usize, beta: &[f64], grouping: PeriodGrouping, seed: u64) -> Vec<ExceedanceCell> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let glm = ExceedanceGlm { grouping, zero_run_term: true, coefficients: beta.to_vec(), deviance: 0.0, iterations: 0 };
        (0..n)
            .map(|_| {
                let period = rng.random_range(1..=grouping.n);
                let zero_run = rng.random_range(0..period);
                ExceedanceCell { period, zero_run, exceeded: rng.random::<f64>() < glm.prob(period, zero_run) }
            })
            .collect()
    }

    #[test]
    fn glm_recovers_coefficients() {
        let grouping = PeriodGrouping::new(12);
        let beta = [-1.0, 0.4, 0.8, 1.0, 1.2, -0.3];
        let cells = logistic_cells(100_000, &beta, grouping, 4);
        let glm = fit_exceedance_glm(&cells, grouping, true).unwrap();
        for (b, t) in glm.coefficients.iter().zip(&beta) {
            assert!((b - t).abs() < 0.05, "{:?}", glm.coefficients);
        }
        assert!(glm.coefficients[5] < 0.0);
        let mean: f64 = cells.iter().map(|c| glm.prob(c.period, c.zero_run)).sum::<f64>() / cells.len() as f64;
        let rate = cells.iter().filter(|c| c.exceeded).count() as f64 / cells.len() as f64;
        assert!((mean - rate).abs() < 1e-8);
    }

    #[test]
    fn glm_separation_names_group() {
        let mut cells = logistic_cells(2_000, &[-1.0, 0.0, 0.0, 0.0, 0.0, 0.0], PeriodGrouping::new(12), 9);
        for c in &mut cells {
            if (5..=7).contains(&c.period) {
                c.exceeded = false;
            }
        }
        match fit_exceedance_glm(&cells, PeriodGrouping::new(12), true) {
            Err(Error::Separation { group }) => assert_eq!(group, "5-7"),
            other => panic!("{other:?}"),
        }
    }

    fn cfg(zeta: f64) -> AdjustmentConfig {
        AdjustmentConfig { threshold: 32000.0, zeta, zero_run_reference: 100.0, zero_run_band: 0.5 }
    }

    #[test]
    fn adjustment_examples() {
        let g = reference_gpd();
        let v = adjust_prediction(1.0, 3000.0, 0.01, &cfg(2500.0), &g).unwrap();
        let cost = expected_exceedance_cost(&g).unwrap();
        assert!((v - (0.01 * cost + 0.99 * 3000.0)).abs() < 1e-9);
        assert!((v - 6621.99).abs() < 0.01);
        assert_eq!(adjust_prediction(0.4, 3000.0, 0.3, &cfg(f64::INFINITY), &g).unwrap(), 1200.0);
        assert_eq!(adjust_prediction(0.4, 3000.0, 0.0, &cfg(0.0), &g).unwrap(), 0.4 * 3000.0);
        let heavy = GpdParams { shape: 1.2, ..g };
        assert!(adjust_prediction(1.0, 1.0, 0.1, &cfg(0.0), &heavy).is_err());
    }

    proptest! {
        #[test]
        fn adjustment_nonincreasing_in_zeta(
            p in 0.0f64..=1.0, y in 0.0f64..32000.0, q in 0.0f64..=1.0,
            z1 in 0.0f64..40000.0, dz in 0.0f64..40000.0,
        ) {
            let g = reference_gpd();
            let a = adjust_prediction(p, y, q, &cfg(z1), &g).unwrap();
            let b = adjust_prediction(p, y, q, &cfg(z1 + dz), &g).unwrap();
            let c = adjust_prediction(p, y, q, &cfg(f64::INFINITY), &g).unwrap();
            prop_assert!(a >= b && b >= c);
        }

        #[test]
        fn adjusted_branch_raises_value(p in 0.01f64..=1.0, y in 1.0f64..32000.0, q in 0.001f64..0.999) {
            let g = reference_gpd();
            prop_assert!(adjust_prediction(p, y, q, &cfg(0.0), &g).unwrap() > p * y);
        }
    }

    #[test]
    fn zero_run_approximation() {
        assert_eq!(approximate_zero_run(&[5.0], &[100.0; 4], 100.0, 0.5), vec![0, 1, 2, 3]);
        assert_eq!(approximate_zero_run(&[5.0, 0.0], &[1e6; 3], 100.0, 0.5), vec![1, 0, 0]);
        // hand count: observed ends with two zeros; future near, far, near, near, far
        let runs = approximate_zero_run(&[3.0, 0.0, 0.0], &[120.0, 900.0, 60.0, 149.0, 151.0], 100.0, 0.5);
        assert_eq!(runs, vec![2, 3, 0, 1, 2]);
        assert_eq!(zero_runs(&[0.0, 0.0, 4.0, 0.0]), vec![0, 1, 2, 0]);
    }

    #[test]
    fn zeta_serialization_round_trips() {
        let c = cfg(f64::INFINITY);
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"inf\""));
        let back: AdjustmentConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        assert_eq!(parse_zeta("2500").unwrap(), 2500.0);
        assert!(parse_zeta("-1").is_err());
    }

    #[test]
    fn default_threshold_rounds() {
        let mut y: Vec<f64> = (1..=1000).map(|i| i as f64 * 31.6).collect();
        y.push(0.0);
        assert_eq!(default_threshold(&y), Some(31000.0));
    }

    #[test]
    fn adjust_predictions_touches_only_future() {
        let files = vec![file("a", 2, &[10.0, 0.0], Some(&[0.0, 0.0]))];
        let preds = Predictions {
            n: 4,
            files: vec![FilePrediction {
                claim_id: "a".into(),
                t_k: 2,
                p_hat: vec![0.5; 3],
                amount: vec![3000.0; 3],
                expected: vec![1500.0; 3],
            }],
        };
        let glm = ExceedanceGlm {
            grouping: PeriodGrouping::single(4),
            zero_run_term: false,
            coefficients: vec![0.0],
            deviance: 0.0,
            iterations: 0,
        };
        let out = adjust_predictions(&preds, &files, &glm, &reference_gpd(), &cfg(2500.0)).unwrap();
        let cost = expected_exceedance_cost(&reference_gpd()).unwrap();
        assert_eq!(out.files[0].expected[0], 1500.0);
        assert_eq!(out.files[0].expected[1], 0.5 * (0.5 * cost + 0.5 * 3000.0));
        let same = adjust_predictions(&preds, &files, &glm, &reference_gpd(), &cfg(f64::INFINITY)).unwrap();
        assert_eq!(same, preds);
        assert_eq!(zero_run_reference(&preds, &files).unwrap(), 1500.0);
    }
}
