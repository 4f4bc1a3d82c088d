//! From claimant files to network-ready arrays: payment scaling, category
//! dictionaries, censoring, observation masks and the stratified split.

use std::collections::BTreeMap;
use std::hash::Hash;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ClaimantFile, FeatureSchema, Portfolio};
use crate::error::{Error, Result};

/// Center and scale applied to every payment, fitted on training data only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub mu: f64,
    pub sigma: f64,
}

/// Mean and population standard deviation (divisor `m`).
pub fn fit_scaling(train_payments: &[f64]) -> Result<ScalingParams> {
    if train_payments.len() < 2 {
        return Err(Error::Degenerate(
            "at least two payments are needed to fit the scaling".into(),
        ));
    }
    let m = train_payments.len() as f64;
    let mu = train_payments.iter().sum::<f64>() / m;
    let var = train_payments.iter().map(|y| (y - mu).powi(2)).sum::<f64>() / m;
    let sigma = var.sqrt();
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Degenerate("payments have zero variance".into()));
    }
    Ok(ScalingParams { mu, sigma })
}

impl ScalingParams {
    pub fn apply(&self, y: f64) -> f64 {
        (y - self.mu) / self.sigma
    }

    pub fn invert(&self, y_star: f64) -> f64 {
        self.mu + self.sigma * y_star
    }

    /// Scaled code of a zero payment.
    pub fn zero_code(&self) -> f64 {
        self.apply(0.0)
    }
}

pub fn censor(y: f64, u: f64) -> f64 {
    y.min(u)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn split_of(&self, claim_id: &str) -> Option<Split> {
        self.assignment.get(claim_id).copied()
    }

    pub fn count(&self, split: Split) -> usize {
        self.assignment.values().filter(|&&s| s == split).count()
    }

    /// Files of the portfolio assigned to `split`, in portfolio order.
    pub fn select(&self, portfolio: &Portfolio, split: Split) -> Portfolio {
        portfolio.subset(|f| self.split_of(f.claim_id()) == Some(split))
    }
}

/// Stratum used by default: occurrence period crossed with a bucket of the
/// observed horizon (`1`, `2..=4`, `5+`).
pub fn default_stratum(file: &ClaimantFile) -> (u32, u8) {
    let bucket = match file.t_k {
        0 | 1 => 0,
        2..=4 => 1,
        _ => 2,
    };
    (file.static_record.occurrence_period, bucket)
}

/// Largest-remainder allocation of `count` items to the three proportions;
/// ties go to the earlier split.
fn allocate(count: usize, proportions: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = proportions.iter().map(|p| p * count as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        *s = (e + 1e-9).floor() as usize;
    }
    let mut remaining = count - sizes.iter().sum::<usize>().min(count);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - sizes[a] as f64;
        let fb = exact[b] - sizes[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        sizes[i] += 1;
        remaining -= 1;
    }
    sizes
}

pub fn stratified_split<K, F>(
    portfolio: &Portfolio,
    proportions: [f64; 3],
    strata_fn: F,
    seed: u64,
) -> Result<SplitAssignment>
where
    K: Ord + Hash,
    F: Fn(&ClaimantFile) -> K,
{
    if portfolio.files.is_empty() {
        return Err(Error::Empty("cannot split an empty portfolio".into()));
    }
    if proportions.iter().any(|p| !(0.0..=1.0).contains(p))
        || (proportions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidConfig(
            "split proportions must be non-negative and sum to 1".into(),
        ));
    }
    let mut strata: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, f) in portfolio.files.iter().enumerate() {
        strata.entry(strata_fn(f)).or_default().push(i);
    }
    let mut out = SplitAssignment::default();
    for (ordinal, members) in strata.values_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(ordinal as u64);
        members.shuffle(&mut rng);
        let sizes = allocate(members.len(), proportions);
        let mut cursor = 0;
        for (split, size) in Split::ALL.iter().zip(sizes) {
            for &i in &members[cursor..cursor + size] {
                out.assignment
                    .insert(portfolio.files[i].claim_id().to_string(), *split);
            }
            cursor += size;
        }
    }
    Ok(out)
}

/// Dense index of every category seen in training; index 0 is reserved for
/// levels never seen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDictionary {
    pub name: String,
    pub levels: BTreeMap<u32, usize>,
}

impl FeatureDictionary {
    pub const UNKNOWN: usize = 0;

    pub fn index(&self, level: u32) -> usize {
        self.levels.get(&level).copied().unwrap_or(Self::UNKNOWN)
    }

    pub fn cardinality(&self) -> usize {
        self.levels.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryDictionary {
    pub features: Vec<FeatureDictionary>,
}

impl CategoryDictionary {
    pub fn fit(schema: &FeatureSchema, files: &[ClaimantFile]) -> Self {
        let features = schema
            .categorical
            .iter()
            .enumerate()
            .map(|(i, feat)| {
                let mut seen: Vec<u32> =
                    files.iter().map(|f| f.static_record.categorical[i]).collect();
                seen.sort_unstable();
                seen.dedup();
                FeatureDictionary {
                    name: feat.name.clone(),
                    levels: seen.into_iter().enumerate().map(|(k, v)| (v, k + 1)).collect(),
                }
            })
            .collect();
        Self { features }
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.features.iter().map(|f| f.cardinality()).collect()
    }
}

/// How a quantitative static input reaches the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum QuantTransform {
    Raw,
    /// `(x - min) / (max - min)` with training min/max.
    MinMax { min: f64, max: f64 },
}

impl QuantTransform {
    fn apply(&self, x: f64) -> f64 {
        match *self {
            QuantTransform::Raw => x,
            QuantTransform::MinMax { min, max } => {
                if max > min {
                    (x - min) / (max - min)
                } else {
                    0.0
                }
            }
        }
    }
}

pub const ENCODING_VERSION: u32 = 1;

/// Everything needed to reproduce the training-time encoding. Serialized as
/// a JSON sidecar next to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingContext {
    pub version: u32,
    pub n: u32,
    pub dictionary: CategoryDictionary,
    /// Transforms for occurrence period, reporting delay, then each declared
    /// quantitative feature.
    pub quantitative: Vec<QuantTransform>,
    pub scaling: ScalingParams,
    pub censor_at: Option<f64>,
    pub extra_dynamic: usize,
}

/// Options for fitting an [`EncodingContext`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodingOptions {
    pub censor_at: Option<f64>,
    /// Min-max scale the occurrence period and reporting delay instead of
    /// feeding them raw.
    pub scale_period_inputs: bool,
}

impl Default for EncodingOptions {
    fn default() -> Self {
        Self {
            censor_at: None,
            scale_period_inputs: false,
        }
    }
}

impl EncodingContext {
    pub fn fit(
        schema: &FeatureSchema,
        train: &[ClaimantFile],
        n: u32,
        options: EncodingOptions,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Empty("training set".into()));
        }
        let payments: Vec<f64> = train
            .iter()
            .flat_map(|f| f.records.iter())
            .filter(|r| r.indicator())
            .map(|r| match options.censor_at {
                Some(u) => censor(r.payment, u),
                None => r.payment,
            })
            .collect();
        let scaling = fit_scaling(&payments)?;

        let minmax = |values: &mut dyn Iterator<Item = f64>| {
            let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
            for v in values {
                min = min.min(v);
                max = max.max(v);
            }
            QuantTransform::MinMax { min, max }
        };
        let mut quantitative = Vec::new();
        if options.scale_period_inputs {
            quantitative.push(minmax(
                &mut train.iter().map(|f| f.static_record.occurrence_period as f64),
            ));
            quantitative.push(minmax(
                &mut train.iter().map(|f| f.static_record.reporting_delay as f64),
            ));
        } else {
            quantitative.push(QuantTransform::Raw);
            quantitative.push(QuantTransform::Raw);
        }
        for i in 0..schema.quantitative.len() {
            quantitative.push(minmax(
                &mut train.iter().map(|f| f.static_record.quantitative[i]),
            ));
        }
        Ok(Self {
            version: ENCODING_VERSION,
            n,
            dictionary: CategoryDictionary::fit(schema, train),
            quantitative,
            scaling,
            censor_at: options.censor_at,
            extra_dynamic: schema.extra_dynamic.len(),
        })
    }

    pub fn dynamic_dim(&self) -> usize {
        4 + self.extra_dynamic
    }

    pub fn quantitative_dim(&self) -> usize {
        self.quantitative.len()
    }

    fn prepared_payment(&self, y: f64) -> f64 {
        match self.censor_at {
            Some(u) => censor(y, u),
            None => y,
        }
    }
}

/// Network-ready arrays for a set of files. Steps are `j = 1..n-1` for the
/// inputs and `j = 2..n` for the targets; step index `s` maps to input
/// period `s + 1` and target period `s + 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch {
    pub size: usize,
    pub n: u32,
    pub claim_ids: Vec<String>,
    pub t_k: Vec<u32>,
    pub categorical_dim: usize,
    pub static_categorical: Vec<usize>,
    pub quantitative_dim: usize,
    pub static_quantitative: Vec<f64>,
    pub dynamic_dim: usize,
    /// `[b x (n-1) x dynamic_dim]`: `(j/n, r, I, Y*, extras...)`.
    pub dynamic_inputs: Vec<f64>,
    /// `[b x (n-1)]`, NaN where the target is not observed.
    pub indicator_targets: Vec<f64>,
    pub payment_targets: Vec<f64>,
    pub delta: Vec<f64>,
    pub delta_tilde: Vec<f64>,
}

impl EncodedBatch {
    pub fn steps(&self) -> usize {
        self.n as usize - 1
    }

    /// `r_{k,j}` for input period `j`.
    pub fn observed(&self, k: usize, j: u32) -> bool {
        j <= self.t_k[k]
    }

    fn dyn_index(&self, k: usize, step: usize) -> usize {
        (k * self.steps() + step) * self.dynamic_dim
    }

    pub fn dynamic_row(&self, k: usize, step: usize) -> &[f64] {
        let i = self.dyn_index(k, step);
        &self.dynamic_inputs[i..i + self.dynamic_dim]
    }

    pub fn indicator_target(&self, k: usize, period: u32) -> Option<f64> {
        let v = self.indicator_targets[k * self.steps() + period as usize - 2];
        (!v.is_nan()).then_some(v)
    }

    pub fn payment_target(&self, k: usize, period: u32) -> Option<f64> {
        let v = self.payment_targets[k * self.steps() + period as usize - 2];
        (!v.is_nan()).then_some(v)
    }

    /// Rows `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> EncodedBatch {
        fn gather<T: Copy>(src: &[T], width: usize, indices: &[usize]) -> Vec<T> {
            let mut out = Vec::with_capacity(indices.len() * width);
            for &i in indices {
                out.extend_from_slice(&src[i * width..(i + 1) * width]);
            }
            out
        }
        let steps = self.steps();
        EncodedBatch {
            size: indices.len(),
            n: self.n,
            claim_ids: indices.iter().map(|&i| self.claim_ids[i].clone()).collect(),
            t_k: indices.iter().map(|&i| self.t_k[i]).collect(),
            categorical_dim: self.categorical_dim,
            static_categorical: gather(&self.static_categorical, self.categorical_dim, indices),
            quantitative_dim: self.quantitative_dim,
            static_quantitative: gather(&self.static_quantitative, self.quantitative_dim, indices),
            dynamic_dim: self.dynamic_dim,
            dynamic_inputs: gather(&self.dynamic_inputs, steps * self.dynamic_dim, indices),
            indicator_targets: gather(&self.indicator_targets, steps, indices),
            payment_targets: gather(&self.payment_targets, steps, indices),
            delta: gather(&self.delta, steps, indices),
            delta_tilde: gather(&self.delta_tilde, steps, indices),
        }
    }

    /// Recovers `(I, Y)` for the observed periods `1..=t_k` of file `k`.
    pub fn decode(&self, k: usize, scaling: &ScalingParams) -> Vec<(bool, f64)> {
        let t = self.t_k[k];
        (1..=t)
            .map(|j| {
                let (ind, ystar) = if j < self.n {
                    let row = self.dynamic_row(k, j as usize - 1);
                    (row[2], row[3])
                } else {
                    (
                        self.indicator_target(k, j).unwrap(),
                        self.payment_target(k, j).unwrap(),
                    )
                };
                let paid = ind == 1.0;
                (paid, if paid { scaling.invert(ystar) } else { 0.0 })
            })
            .collect()
    }
}

/// Encodes files with a fitted context. Only periods `<= t_k` are read;
/// hidden records are never touched.
pub fn encode(files: &[ClaimantFile], ctx: &EncodingContext) -> EncodedBatch {
    let n = ctx.n;
    let steps = n as usize - 1;
    let b = files.len();
    let p = ctx.dictionary.features.len();
    let q = ctx.quantitative_dim();
    let dd = ctx.dynamic_dim();
    let mut batch = EncodedBatch {
        size: b,
        n,
        claim_ids: Vec::with_capacity(b),
        t_k: Vec::with_capacity(b),
        categorical_dim: p,
        static_categorical: Vec::with_capacity(b * p),
        quantitative_dim: q,
        static_quantitative: Vec::with_capacity(b * q),
        dynamic_dim: dd,
        dynamic_inputs: vec![0.0; b * steps * dd],
        indicator_targets: vec![f64::NAN; b * steps],
        payment_targets: vec![f64::NAN; b * steps],
        delta: vec![0.0; b * steps],
        delta_tilde: vec![0.0; b * steps],
    };
    for (k, file) in files.iter().enumerate() {
        let s = &file.static_record;
        batch.claim_ids.push(s.claim_id.clone());
        let t_k = file.t_k.min(n);
        batch.t_k.push(t_k);
        for (i, dict) in ctx.dictionary.features.iter().enumerate() {
            batch.static_categorical.push(dict.index(s.categorical[i]));
        }
        let raw = [s.occurrence_period as f64, s.reporting_delay as f64]
            .into_iter()
            .chain(s.quantitative.iter().copied());
        for (x, tr) in raw.zip(&ctx.quantitative) {
            batch.static_quantitative.push(tr.apply(x));
        }

        let mut last_extra: Vec<f64> = vec![0.0; ctx.extra_dynamic];
        for j in 1..=n {
            let observed = j <= t_k;
            let (ind, ystar) = if observed {
                let rec = &file.records[j as usize - 1];
                if rec.extra.len() == ctx.extra_dynamic {
                    last_extra.clone_from(&rec.extra);
                }
                let y = ctx.prepared_payment(rec.payment);
                let ind = if y != 0.0 { 1.0 } else { 0.0 };
                (ind, ctx.scaling.apply(y))
            } else {
                (0.0, 0.0)
            };
            if j < n {
                let base = (k * steps + j as usize - 1) * dd;
                let row = &mut batch.dynamic_inputs[base..base + dd];
                row[0] = j as f64 / n as f64;
                row[1] = if observed { 1.0 } else { 0.0 };
                if observed {
                    row[2] = ind;
                    row[3] = ystar;
                }
                row[4..].copy_from_slice(&last_extra);
            }
            if j >= 2 && observed {
                let t = k * steps + j as usize - 2;
                batch.indicator_targets[t] = ind;
                batch.payment_targets[t] = ystar;
                batch.delta[t] = 1.0;
                batch.delta_tilde[t] = ind;
            }
        }
    }
    batch
}
