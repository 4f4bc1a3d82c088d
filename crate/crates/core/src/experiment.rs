//! End-to-end synthetic scenarios: generate, split, train, predict, and
//! compare the network against chain-ladder and the large-claim adjustment.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::baseline::{aggregate_to_triangle, fit_factors, project_reserve};
use crate::domain::{ClaimantFile, Portfolio};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricReport, Predictions, SIMULATED_PANELS};
use crate::preprocess::{default_stratum, stratified_split, Split};
use crate::synthgen::{generate, GeneratorConfig};
use crate::tail::{
    default_threshold, exceedance_cells, excesses_over, fit_exceedance_glm, fit_gpd, zero_run_reference,
    zeta_list, zeta_sweep, AdjustmentConfig, ExceedanceGlm, GpdFit, GpdFitOptions, PeriodGrouping, ZetaRow,
    ZETA_GRID,
};
use crate::train::{ModelSetup, TrainedModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TailSettings {
    /// Censoring and GPD threshold; the rounded 0.995 quantile of training
    /// payments when absent.
    pub threshold: Option<f64>,
    pub grouping_width: u32,
    pub merge_from: Option<u32>,
    pub zero_run_term: bool,
    pub zero_run_band: f64,
    #[serde(with = "zeta_list")]
    pub zeta_grid: Vec<f64>,
    pub gpd: GpdFitOptions,
}

impl Default for TailSettings {
    fn default() -> Self {
        Self {
            threshold: None,
            grouping_width: 3,
            merge_from: None,
            zero_run_term: true,
            zero_run_band: 0.5,
            zeta_grid: ZETA_GRID.to_vec(),
            gpd: GpdFitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub generator: GeneratorConfig,
    pub split: [f64; 3],
    pub split_seed: u64,
    pub setup: ModelSetup,
    pub alpha: f64,
    pub tail: Option<TailSettings>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "baseline".into(),
            generator: GeneratorConfig::desk(50_000.0, 2005),
            split: [0.6, 0.2, 0.2],
            split_seed: 17,
            setup: ModelSetup::default(),
            alpha: 0.2,
            tail: None,
        }
    }
}

impl ScenarioConfig {
    /// Scaled-down hyper-parameters: hidden 64, batch 512.
    pub fn desk(name: &str, generator: GeneratorConfig) -> Self {
        let mut setup = ModelSetup { hidden_size: 64, ..ModelSetup::default() };
        setup.optimizer.batch_size = 512;
        Self { name: name.into(), generator, setup, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainLadderSummary {
    pub factors: Vec<f64>,
    pub predicted_reserve: f64,
    pub observed_reserve: f64,
    pub reserve_ratio: f64,
    pub ultimate_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailSummary {
    pub threshold: f64,
    pub gpd: GpdFit,
    pub glm: ExceedanceGlm,
    pub zero_run_reference: f64,
    pub zeta: Vec<ZetaRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub alpha: f64,
    pub files: SplitSizes,
    pub training: TrainingSummary,
    pub lstm: MetricReport,
    pub chain_ladder: ChainLadderSummary,
    pub tail: Option<TailSummary>,
}

impl ScenarioReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Reserve and ultimate ratios by method, as a Markdown table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| Method | Reserve ratio | Ultimate ratio |");
        let _ = writeln!(s, "|---|---:|---:|");
        let cl = &self.chain_ladder;
        let _ = writeln!(s, "| Chain-ladder | {:.4} | {:.4} |", cl.reserve_ratio, cl.ultimate_ratio);
        match &self.tail {
            Some(t) => {
                for r in &t.zeta {
                    let z = if r.zeta.is_infinite() { "∞".to_string() } else { format!("{}", r.zeta) };
                    let _ = writeln!(s, "| LSTM ζ={z} | {:.4} | {:.4} |", r.reserve_ratio, r.ultimate_ratio);
                }
            }
            None => {
                if let Some(a) = self.lstm.aggregate {
                    let _ = writeln!(s, "| LSTM | {:.4} | {:.4} |", a.reserve_ratio, a.ultimate_ratio);
                }
            }
        }
        s
    }
}

/// Everything a scenario produced, for further export.
pub struct ScenarioOutcome {
    pub report: ScenarioReport,
    pub model: TrainedModel,
    pub predictions: Predictions,
    pub portfolio: Portfolio,
    pub test: Portfolio,
}

fn observed(files: &[ClaimantFile]) -> Vec<ClaimantFile> {
    files.iter().map(|f| f.observed_only()).collect()
}

fn chain_ladder(
    train: &[ClaimantFile],
    test: &[ClaimantFile],
    n: u32,
    censor_at: Option<f64>,
) -> Result<ChainLadderSummary> {
    let factors = fit_factors(&aggregate_to_triangle(train, n, censor_at))?;
    let reserve = project_reserve(&aggregate_to_triangle(test, n, censor_at), &factors);
    let (mut observed, mut paid) = (0.0, 0.0);
    for f in test {
        observed += f.future_records()?.iter().map(|r| r.payment).sum::<f64>();
        paid += f.records.iter().map(|r| r.payment).sum::<f64>();
    }
    if observed == 0.0 {
        return Err(Error::UndefinedRatio("observed test reserve is zero".into()));
    }
    Ok(ChainLadderSummary {
        factors: factors.factors,
        predicted_reserve: reserve.total,
        observed_reserve: observed,
        reserve_ratio: reserve.total / observed,
        ultimate_ratio: (paid + reserve.total) / (paid + observed),
    })
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioOutcome> {
    let (portfolio, _) = generate(&cfg.generator)?;
    let split = stratified_split(&portfolio, cfg.split, default_stratum, cfg.split_seed)?;
    let train = split.select(&portfolio, Split::Train);
    let val = split.select(&portfolio, Split::Validation);
    let test = split.select(&portfolio, Split::Test);
    let train_obs = observed(&train.files);
    let val_obs = observed(&val.files);
    let test_obs = observed(&test.files);

    let mut setup = cfg.setup.clone();
    let threshold = match &cfg.tail {
        Some(t) => {
            let payments: Vec<f64> = train_obs.iter().flat_map(|f| f.records.iter().map(|r| r.payment)).collect();
            let u = t
                .threshold
                .or_else(|| default_threshold(&payments))
                .ok_or_else(|| Error::Empty("no training payments for a threshold".into()))?;
            setup.encoding.censor_at = Some(u);
            Some(u)
        }
        None => None,
    };
    log::info!("scenario {}: training on {} files", cfg.name, train_obs.len());
    let model = setup.train(&portfolio.schema, portfolio.n, &train_obs, &val_obs, cfg.alpha)?;
    let predictions = model.predict(&test_obs)?;
    let lstm = evaluate("lstm", &predictions, &test.files, None, &SIMULATED_PANELS)?;
    let chain = chain_ladder(&train_obs, &test.files, portfolio.n, threshold)?;

    let tail = match (&cfg.tail, threshold) {
        (Some(t), Some(u)) => {
            let payments: Vec<f64> = train_obs.iter().flat_map(|f| f.records.iter().map(|r| r.payment)).collect();
            let gpd = fit_gpd(&excesses_over(&payments, u), u, &t.gpd)?;
            let grouping = PeriodGrouping { n: portfolio.n, first_alone: true, width: t.grouping_width, merge_from: t.merge_from };
            let glm = fit_exceedance_glm(&exceedance_cells(&train_obs, u), grouping, t.zero_run_term)?;
            let reference = zero_run_reference(&model.predict(&train_obs)?, &train_obs)?;
            let adj = AdjustmentConfig { threshold: u, zeta: f64::INFINITY, zero_run_reference: reference, zero_run_band: t.zero_run_band };
            let zeta = zeta_sweep(&predictions, &test.files, &glm, &gpd.params, &adj, &t.zeta_grid)?;
            Some(TailSummary { threshold: u, gpd, glm, zero_run_reference: reference, zeta })
        }
        _ => None,
    };

    let report = ScenarioReport {
        name: cfg.name.clone(),
        seed: cfg.generator.seed,
        alpha: cfg.alpha,
        files: SplitSizes { train: train.len(), validation: val.len(), test: test.len() },
        training: TrainingSummary {
            epochs_run: model.log.epochs.len(),
            best_epoch: model.log.best_epoch,
            best_val_loss: model.log.best_val_loss,
        },
        lstm,
        chain_ladder: chain,
        tail,
    };
    Ok(ScenarioOutcome { report, model, predictions, portfolio, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(name: &str, generator: GeneratorConfig) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::desk(name, generator);
        cfg.setup.context_size = 4;
        cfg.setup.hidden_size = 8;
        cfg.setup.optimizer.max_epochs = 2;
        cfg.setup.optimizer.batch_size = 64;
        cfg
    }

    #[test]
    fn small_scenario_runs_and_reports() {
        let cfg = tiny("small", GeneratorConfig::desk(600.0, 3));
        let out = run_scenario(&cfg).unwrap();
        let r = &out.report;
        assert_eq!(r.files.train + r.files.validation + r.files.test, out.portfolio.len());
        assert_eq!(r.training.epochs_run, 2);
        assert!(r.lstm.reserve_ratio().unwrap().is_finite());
        assert!(r.chain_ladder.reserve_ratio.is_finite());
        assert!(r.table().contains("| Chain-ladder |"));
        let again = run_scenario(&cfg).unwrap();
        assert_eq!(again.report.to_json().unwrap(), r.to_json().unwrap());
    }

    #[test]
    fn config_round_trips_with_infinite_zeta() {
        let mut cfg = ScenarioConfig::default();
        cfg.tail = Some(TailSettings::default());
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ScenarioConfig>(&s).unwrap(), cfg);
    }
}
