use serde::{Deserialize, Serialize};

use super::{fit, OptimizerConfig, TrainingLog};
use crate::domain::{ClaimantFile, FeatureSchema};
use crate::error::{Error, Result};
use crate::eval::{rr_ru, Predictions};
use crate::net::{Network, NetworkConfig, PredictMode};
use crate::preprocess::{encode, EncodingContext, EncodingOptions};

/// Encoding, architecture and optimizer settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSetup {
    pub encoding: EncodingOptions,
    pub context_size: usize,
    pub hidden_size: usize,
    pub init_seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for ModelSetup {
    fn default() -> Self {
        Self {
            encoding: EncodingOptions::default(),
            context_size: 32,
            hidden_size: 128,
            init_seed: 7,
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// Output of [`ModelSetup::train`].
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub network: Network,
    pub context: EncodingContext,
    pub log: TrainingLog,
}

impl TrainedModel {
    pub fn predict(&self, files: &[ClaimantFile]) -> Result<Predictions> {
        let batch = encode(files, &self.context);
        let seq = self.network.predict_sequence(&batch, &PredictMode::Inference)?;
        Ok(Predictions::from_sequence(&seq, &self.context.scaling))
    }
}

impl ModelSetup {
    /// Fits the encoding on `train`, builds a fresh network and trains it.
    pub fn train(
        &self,
        schema: &FeatureSchema,
        n: u32,
        train: &[ClaimantFile],
        val: &[ClaimantFile],
        alpha: f64,
    ) -> Result<TrainedModel> {
        let context = EncodingContext::fit(schema, train, n, self.encoding)?;
        let config = NetworkConfig::for_encoding(&context, self.context_size, self.hidden_size, self.init_seed);
        let network = Network::new(config)?;
        let (network, log) = fit(network, &encode(train, &context), &encode(val, &context), alpha, &self.optimizer)?;
        Ok(TrainedModel { network, context, log })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub rr: f64,
    pub ru: f64,
    /// `|RR − 1| + |RU − 1|`.
    pub criterion: f64,
}

impl AlphaRow {
    pub fn new(alpha: f64, rr: f64, ru: f64) -> Self {
        Self { alpha, rr, ru, criterion: (rr - 1.0).abs() + (ru - 1.0).abs() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSelection {
    pub alpha: f64,
    pub backdate_offset: u32,
    pub rows: Vec<AlphaRow>,
}

/// Row minimizing `|RR−1| + |RU−1|`, ties going to the smaller α.
pub fn choose_alpha(rows: &[AlphaRow]) -> Result<AlphaRow> {
    rows.iter()
        .filter(|r| r.criterion.is_finite())
        .min_by(|a, b| a.criterion.total_cmp(&b.criterion).then(a.alpha.total_cmp(&b.alpha)))
        .copied()
        .ok_or_else(|| Error::Empty("no candidate alpha produced finite ratios".into()))
}

fn backdate(files: &[ClaimantFile], offset: u32) -> Vec<ClaimantFile> {
    files
        .iter()
        .filter(|f| f.t_k > offset)
        .map(|f| f.truncated(f.t_k - offset))
        .collect()
}

/// Trains one network per candidate on data cut back by `backdate_offset`
/// periods and scores each on the validation claims still observed at the
/// earlier date.
pub fn select_alpha(
    candidates: &[f64],
    setup: &ModelSetup,
    schema: &FeatureSchema,
    n: u32,
    train: &[ClaimantFile],
    val: &[ClaimantFile],
    backdate_offset: u32,
) -> Result<AlphaSelection> {
    if backdate_offset == 0 {
        return Err(Error::InvalidConfig("backdate offset must be at least one period".into()));
    }
    if candidates.is_empty() {
        return Err(Error::Empty("candidate alphas".into()));
    }
    let train_back = backdate(train, backdate_offset);
    let val_back = backdate(val, backdate_offset);
    if train_back.is_empty() || val_back.is_empty() {
        return Err(Error::Empty("no claim is observed at the backdated date".into()));
    }
    let observed: Vec<ClaimantFile> = val.iter().map(|f| f.observed_only()).collect();
    let mut rows = Vec::with_capacity(candidates.len());
    for &alpha in candidates {
        let model = setup.train(schema, n, &train_back, &val_back, alpha)?;
        let preds = model.predict(&val_back)?;
        let r = rr_ru(&preds, &observed)?;
        log::info!("alpha {alpha}: RR {:.4} RU {:.4}", r.rr, r.ru);
        rows.push(AlphaRow::new(alpha, r.rr, r.ru));
    }
    let best = choose_alpha(&rows)?;
    Ok(AlphaSelection { alpha: best.alpha, backdate_offset, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rows_select_point_two() {
        let rows = [
            AlphaRow::new(0.2, 0.9556, 0.9950),
            AlphaRow::new(0.6, 0.9145, 0.9904),
            AlphaRow::new(0.8, 0.9413, 0.9934),
        ];
        assert_eq!(choose_alpha(&rows).unwrap().alpha, 0.2);
    }

    #[test]
    fn ties_go_to_smaller_alpha() {
        let rows = [AlphaRow::new(0.9, 1.1, 1.0), AlphaRow::new(0.3, 0.9, 1.0)];
        assert_eq!(choose_alpha(&rows).unwrap().alpha, 0.3);
        assert!(choose_alpha(&[AlphaRow::new(0.1, f64::NAN, 1.0)]).is_err());
    }

    #[test]
    fn zero_offset_is_rejected() {
        let err = select_alpha(&[1.0], &ModelSetup::default(), &FeatureSchema::default(), 4, &[], &[], 0);
        assert!(matches!(err, Err(Error::InvalidConfig(_))));
    }
}
