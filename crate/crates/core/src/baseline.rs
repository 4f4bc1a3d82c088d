//! Chain-ladder on cumulative paid triangles.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::domain::ClaimantFile;
use crate::error::{Error, Result};

/// Cumulative paid by occurrence period (row) and development period
/// (column `j - 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triangle {
    pub n: u32,
    pub occurrence_periods: Vec<u32>,
    pub cumulative: Vec<Vec<f64>>,
    pub observed: Vec<Vec<bool>>,
}

impl Triangle {
    pub fn value(&self, row: usize, j: u32) -> Option<f64> {
        let c = j as usize - 1;
        self.observed[row][c].then(|| self.cumulative[row][c])
    }

    /// Latest observed development period of a row (0 when empty).
    pub fn latest(&self, row: usize) -> u32 {
        self.observed[row].iter().take_while(|&&o| o).count() as u32
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["occurrence_period".to_string()];
        header.extend((1..=self.n).map(|j| format!("dev_{j}")));
        w.write_record(&header)?;
        for (row, occ) in self.occurrence_periods.iter().enumerate() {
            let mut rec = vec![occ.to_string()];
            rec.extend((1..=self.n).map(|j| self.value(row, j).map_or(String::new(), |v| format!("{v}"))));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Builds the cumulative triangle. A cell is observed when every file of the
/// cohort has been observed through that period.
pub fn aggregate_to_triangle(files: &[ClaimantFile], n: u32, censor_at: Option<f64>) -> Triangle {
    let mut occs: Vec<u32> = files.iter().map(|f| f.static_record.occurrence_period).collect();
    occs.sort_unstable();
    occs.dedup();
    let width = n as usize;
    let mut cumulative = vec![vec![0.0; width]; occs.len()];
    let mut horizon = vec![n; occs.len()];
    for f in files {
        let row = occs.binary_search(&f.static_record.occurrence_period).unwrap();
        horizon[row] = horizon[row].min(f.t_k);
        let mut running = 0.0;
        for j in 1..=n {
            if let Some(y) = f.observed_payment(j) {
                running += censor_at.map_or(y, |u| y.min(u));
            }
            cumulative[row][j as usize - 1] += running;
        }
    }
    let observed = horizon
        .iter()
        .map(|&h| (1..=n).map(|j| j <= h).collect())
        .collect();
    Triangle { n, occurrence_periods: occs, cumulative, observed }
}

/// `factors[j-1]` develops period `j` to `j+1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevelopmentFactors {
    pub factors: Vec<f64>,
}

/// Volume-weighted factors over rows observing both periods.
pub fn fit_factors(t: &Triangle) -> Result<DevelopmentFactors> {
    let mut factors = Vec::with_capacity(t.n as usize - 1);
    for j in 1..t.n {
        let (mut num, mut den) = (0.0, 0.0);
        for row in 0..t.cumulative.len() {
            if let (Some(a), Some(b)) = (t.value(row, j), t.value(row, j + 1)) {
                num += b;
                den += a;
            }
        }
        if den <= 0.0 {
            return Err(Error::ZeroDenominator { period: j as usize });
        }
        factors.push(num / den);
    }
    Ok(DevelopmentFactors { factors })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortReserve {
    pub occurrence_period: u32,
    pub latest: f64,
    pub ultimate: f64,
    pub reserve: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainLadderReserve {
    pub cohorts: Vec<CohortReserve>,
    pub total: f64,
}

impl ChainLadderReserve {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["occurrence_period", "latest", "ultimate", "reserve"])?;
        for c in &self.cohorts {
            w.write_record([
                c.occurrence_period.to_string(),
                c.latest.to_string(),
                c.ultimate.to_string(),
                c.reserve.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn project_reserve(t: &Triangle, f: &DevelopmentFactors) -> ChainLadderReserve {
    let cohorts: Vec<CohortReserve> = (0..t.cumulative.len())
        .map(|row| {
            let last = t.latest(row);
            let latest = if last == 0 { 0.0 } else { t.cumulative[row][last as usize - 1] };
            let ultimate = f.factors[(last.max(1) as usize - 1)..].iter().fold(latest, |c, fj| c * fj);
            CohortReserve {
                occurrence_period: t.occurrence_periods[row],
                latest,
                ultimate,
                reserve: ultimate - latest,
            }
        })
        .collect();
    let total = cohorts.iter().map(|c| c.reserve).sum();
    ChainLadderReserve { cohorts, total }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::tests::file;
    use proptest::prelude::*;

    fn with_occ(mut f: ClaimantFile, occ: u32) -> ClaimantFile {
        f.static_record.occurrence_period = occ;
        f
    }

    fn example() -> Triangle {
        Triangle {
            n: 3,
            occurrence_periods: vec![0, 1, 2],
            cumulative: vec![vec![10.0, 15.0, 18.0], vec![12.0, 18.0, 0.0], vec![9.0, 0.0, 0.0]],
            observed: vec![vec![true; 3], vec![true, true, false], vec![true, false, false]],
        }
    }

    #[test]
    fn hand_triangle() {
        let t = example();
        let f = fit_factors(&t).unwrap();
        assert_eq!(f.factors, vec![33.0 / 22.0, 18.0 / 15.0]);
        let r = project_reserve(&t, &f);
        let reserves: Vec<f64> = r.cohorts.iter().map(|c| c.reserve).collect();
        assert_eq!(reserves[0], 0.0);
        assert!((reserves[1] - 3.6).abs() < 1e-12);
        assert!((reserves[2] - 7.2).abs() < 1e-12);
        assert!((r.total - 10.8).abs() < 1e-12);
    }

    #[test]
    fn triangle_from_files() {
        let files = vec![
            with_occ(file("a", 2, &[100.0, 50.0], None), 0),
            with_occ(file("b", 2, &[1.0, 0.0], None), 0),
            with_occ(file("c", 1, &[7.0], None), 1),
        ];
        let t = aggregate_to_triangle(&files, 2, None);
        assert_eq!(t.value(0, 1), Some(101.0));
        assert_eq!(t.value(0, 2), Some(151.0));
        assert_eq!(t.value(1, 1), Some(7.0));
        assert_eq!(t.value(1, 2), None);
        let c = aggregate_to_triangle(&files, 2, Some(60.0));
        assert_eq!(c.value(0, 2), Some(111.0));
        assert_eq!(fit_factors(&t).unwrap().factors, vec![151.0 / 101.0]);
    }

    #[test]
    fn zero_denominator_names_period() {
        let files = vec![with_occ(file("a", 2, &[0.0, 5.0], None), 0)];
        let t = aggregate_to_triangle(&files, 2, None);
        assert!(matches!(fit_factors(&t), Err(Error::ZeroDenominator { period: 1 })));
    }

    #[test]
    fn complete_triangle_has_no_reserve() {
        let mut t = example();
        t.cumulative[1][2] = 20.0;
        t.cumulative[2] = vec![9.0, 10.0, 11.0];
        t.observed = vec![vec![true; 3]; 3];
        let r = project_reserve(&t, &fit_factors(&t).unwrap());
        assert!(r.cohorts.iter().all(|c| c.reserve == 0.0));
    }

    #[test]
    fn exact_multiplicative_development_is_recovered() {
        let dev = [1.0, 1.8, 2.16, 2.376];
        let scale = [100.0, 140.0, 90.0, 200.0];
        let n = 4u32;
        let mut files = Vec::new();
        let mut truth = 0.0;
        for (i, s) in scale.iter().enumerate() {
            let t_k = n - i as u32;
            let inc: Vec<f64> = (0..4).map(|j| s * (dev[j] - if j == 0 { 0.0 } else { dev[j - 1] })).collect();
            truth += inc[t_k as usize..].iter().sum::<f64>();
            files.push(with_occ(file(&format!("f{i}"), t_k, &inc[..t_k as usize], None), i as u32));
        }
        let t = aggregate_to_triangle(&files, n, None);
        let r = project_reserve(&t, &fit_factors(&t).unwrap());
        assert!((r.total - truth).abs() < 1e-9 * truth);
    }

    proptest! {
        #[test]
        fn homogeneous_and_order_invariant(
            pays in proptest::collection::vec(proptest::collection::vec(1.0f64..1000.0, 3), 3..8),
            k in 0.1f64..50.0,
        ) {
            let build = |scale: f64, rev: bool| {
                let mut files: Vec<ClaimantFile> = pays.iter().enumerate().map(|(i, p)| {
                    let occ = (i % 3) as u32;
                    let t_k = 3 - occ;
                    let obs: Vec<f64> = p[..t_k as usize].iter().map(|v| v * scale).collect();
                    with_occ(file(&format!("f{i}"), t_k, &obs, None), occ)
                }).collect();
                if rev { files.reverse(); }
                let t = aggregate_to_triangle(&files, 3, None);
                project_reserve(&t, &fit_factors(&t).unwrap()).total
            };
            let base = build(1.0, false);
            prop_assert!((build(k, false) - k * base).abs() <= 1e-9 * (k * base).abs().max(1.0));
            prop_assert!((build(1.0, true) - base).abs() <= 1e-9 * base.abs().max(1.0));
        }
    }
}
