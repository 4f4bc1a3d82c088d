//! The reserving network: categorical embeddings and quantitative statics
//! feed a context vector, an LSTM walks the development periods with the
//! context re-fed at every step, and two heads predict the payment
//! probability and the scaled amount of the next period.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamId, ParameterStore, Tape, Tensor, Var};
use crate::domain::ClaimantFile;
use crate::error::{Error, Result};
use crate::preprocess::{encode, EncodedBatch, EncodingContext, ScalingParams};

/// Logit range fed to the classification sigmoid; keeps `p̂` strictly
/// inside `(0, 1)` in floating point.
pub const LOGIT_LIMIT: f64 = 30.0;

/// Rows per tape when predicting.
const PREDICT_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub feature_names: Vec<String>,
    /// Rows of each embedding table, including the reserved unknown row.
    pub cardinalities: Vec<usize>,
    pub embedding_dims: Vec<usize>,
    pub quantitative_dim: usize,
    pub dynamic_dim: usize,
    pub context_size: usize,
    pub hidden_size: usize,
    pub n: u32,
    #[serde(default)]
    pub learned_initial_state: bool,
    pub init_seed: u64,
}

/// `min(16, ceil(sqrt(cardinality)))`, at least 2.
pub fn default_embedding_dim(cardinality: usize) -> usize {
    ((cardinality as f64).sqrt().ceil() as usize).clamp(2, 16)
}

impl NetworkConfig {
    pub fn for_encoding(
        ctx: &EncodingContext,
        context_size: usize,
        hidden_size: usize,
        init_seed: u64,
    ) -> Self {
        let cardinalities = ctx.dictionary.cardinalities();
        Self {
            feature_names: ctx.dictionary.features.iter().map(|f| f.name.clone()).collect(),
            embedding_dims: cardinalities.iter().map(|&c| default_embedding_dim(c)).collect(),
            cardinalities,
            quantitative_dim: ctx.quantitative_dim(),
            dynamic_dim: ctx.dynamic_dim(),
            context_size,
            hidden_size,
            n: ctx.n,
            learned_initial_state: false,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.embedding_dims.len() != self.cardinalities.len()
            || self.feature_names.len() != self.cardinalities.len()
        {
            return bad("one embedding dimension and name per categorical feature".into());
        }
        if self.embedding_dims.iter().any(|&d| d < 2) {
            return bad("embedding dimensions must exceed 1".into());
        }
        if self.context_size < 2 {
            return bad("context size must exceed 1".into());
        }
        if self.hidden_size == 0 || self.n < 2 || self.dynamic_dim < 4 {
            return bad("hidden size, n >= 2 and the dynamic layout must be set".into());
        }
        Ok(())
    }

    pub fn static_dim(&self) -> usize {
        self.embedding_dims.iter().sum::<usize>() + self.quantitative_dim
    }

    pub fn lstm_input_dim(&self) -> usize {
        self.context_size + self.dynamic_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkIds {
    pub embeddings: Vec<ParamId>,
    pub context_weight: ParamId,
    pub context_bias: ParamId,
    pub lstm_input_weight: ParamId,
    pub lstm_recurrent_weight: ParamId,
    pub lstm_bias: ParamId,
    pub regression_weight: ParamId,
    pub regression_bias: ParamId,
    pub classification_weight: ParamId,
    pub classification_bias: ParamId,
    pub initial_state: Option<(ParamId, ParamId)>,
    pub log_sigma1_sq: ParamId,
    pub log_sigma2_sq: ParamId,
}

/// Network weights and the two log-uncertainties of the balanced loss, all
/// in one store.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub store: ParameterStore,
    pub ids: NetworkIds,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor {
        rows,
        cols,
        data: (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect(),
    }
}

/// Gate blocks in the LSTM weight columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Candidate = 2,
    Output = 3,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParameterStore::new();
        let h = config.hidden_size;
        let c = config.context_size;

        let mut embeddings = Vec::new();
        for ((name, &card), &dim) in config
            .feature_names
            .iter()
            .zip(&config.cardinalities)
            .zip(&config.embedding_dims)
        {
            embeddings.push(store.add(format!("embedding.{name}"), glorot(&mut rng, card, dim))?);
        }
        let context_weight = store.add("context.weight", glorot(&mut rng, config.static_dim(), c))?;
        let context_bias = store.add("context.bias", Tensor::zeros(1, c))?;
        let lstm_input_weight =
            store.add("lstm.input_weight", glorot(&mut rng, config.lstm_input_dim(), 4 * h))?;
        let lstm_recurrent_weight = store.add("lstm.recurrent_weight", glorot(&mut rng, h, 4 * h))?;
        let mut bias = Tensor::zeros(1, 4 * h);
        let f0 = Gate::Forget as usize * h;
        bias.data[f0..f0 + h].iter_mut().for_each(|b| *b = 1.0);
        let lstm_bias = store.add("lstm.bias", bias)?;
        let regression_weight = store.add("head.regression.weight", glorot(&mut rng, h, 1))?;
        let regression_bias = store.add("head.regression.bias", Tensor::zeros(1, 1))?;
        let classification_weight =
            store.add("head.classification.weight", glorot(&mut rng, h, 1))?;
        let classification_bias = store.add("head.classification.bias", Tensor::zeros(1, 1))?;
        let initial_state = if config.learned_initial_state {
            Some((
                store.add("lstm.initial_hidden", Tensor::zeros(1, h))?,
                store.add("lstm.initial_cell", Tensor::zeros(1, h))?,
            ))
        } else {
            None
        };
        let log_sigma1_sq = store.add("loss.log_sigma1_sq", Tensor::scalar(0.0))?;
        let log_sigma2_sq = store.add("loss.log_sigma2_sq", Tensor::scalar(0.0))?;
        Ok(Self {
            config,
            store,
            ids: NetworkIds {
                embeddings,
                context_weight,
                context_bias,
                lstm_input_weight,
                lstm_recurrent_weight,
                lstm_bias,
                regression_weight,
                regression_bias,
                classification_weight,
                classification_bias,
                initial_state,
                log_sigma1_sq,
                log_sigma2_sq,
            },
        })
    }

    /// Rebuilds a network around an existing store (loaded from disk).
    pub fn from_store(config: NetworkConfig, store: ParameterStore) -> Result<Self> {
        let template = Network::new(config.clone())?;
        if template.store.len() != store.len() {
            return Err(Error::ModelFormat(format!(
                "expected {} tensors, found {}",
                template.store.len(),
                store.len()
            )));
        }
        for (a, b) in template.store.iter().zip(store.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::ModelFormat(format!(
                    "tensor {} ({}x{}) does not match {} ({}x{})",
                    b.name, b.value.rows, b.value.cols, a.name, a.value.rows, a.value.cols
                )));
            }
        }
        Ok(Self {
            config,
            store,
            ids: template.ids,
        })
    }

    pub fn log_sigma_sq(&self) -> (f64, f64) {
        (
            self.store.value(self.ids.log_sigma1_sq).item(),
            self.store.value(self.ids.log_sigma2_sq).item(),
        )
    }

    /// `C_{k,0}`: embeddings and quantitative statics through one linear
    /// layer. Returns a `[b x c]` node.
    pub fn encode_context(&self, tape: &mut Tape, batch: &EncodedBatch) -> Result<Var> {
        let b = batch.size;
        let mut parts = Vec::with_capacity(self.ids.embeddings.len() + 1);
        for (i, &id) in self.ids.embeddings.iter().enumerate() {
            let indices: Vec<usize> = (0..b)
                .map(|k| batch.static_categorical[k * batch.categorical_dim + i])
                .collect();
            let table = tape.param(&self.store, id);
            parts.push(tape.gather(table, &indices)?);
        }
        if batch.quantitative_dim > 0 {
            parts.push(tape.constant(Tensor::new(
                b,
                batch.quantitative_dim,
                batch.static_quantitative.clone(),
            )?));
        }
        let w = tape.param(&self.store, self.ids.context_weight);
        let bias = tape.param(&self.store, self.ids.context_bias);
        let x = if parts.is_empty() {
            tape.constant(Tensor::zeros(b, 0))
        } else {
            tape.concat(&parts)?
        };
        let z = tape.matmul(x, w)?;
        tape.add_row(z, bias)
    }

    /// One LSTM step on a full input `x_j`: gates from `x·W + h·U + b`,
    /// `cell = f ⊙ cell_prev + i ⊙ g`, `h = o ⊙ tanh(cell)`.
    pub fn lstm_step(&self, tape: &mut Tape, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
        let w = tape.param(&self.store, self.ids.lstm_input_weight);
        let bias = tape.param(&self.store, self.ids.lstm_bias);
        let gx = tape.matmul(x, w)?;
        let gx = tape.add_row(gx, bias)?;
        self.lstm_gates(tape, gx, h_prev, c_prev)
    }

    /// LSTM update from a precomputed input contribution `x·W + b`.
    fn lstm_gates(&self, tape: &mut Tape, gx: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
        let h = self.config.hidden_size;
        let u = tape.param(&self.store, self.ids.lstm_recurrent_weight);
        let gh = tape.matmul(h_prev, u)?;
        let gates = tape.add(gx, gh)?;
        let block = |tape: &mut Tape, g: Gate| tape.slice_cols(gates, g as usize * h, (g as usize + 1) * h);
        let zi = block(tape, Gate::Input)?;
        let zf = block(tape, Gate::Forget)?;
        let zg = block(tape, Gate::Candidate)?;
        let zo = block(tape, Gate::Output)?;
        let i = tape.sigmoid(zi);
        let f = tape.sigmoid(zf);
        let g = tape.tanh(zg);
        let o = tape.sigmoid(zo);
        let keep = tape.mul(f, c_prev)?;
        let write = tape.mul(i, g)?;
        let cell = tape.add(keep, write)?;
        let squashed = tape.tanh(cell);
        let hidden = tape.mul(o, squashed)?;
        Ok((hidden, cell))
    }

    /// `(p̂, Ŷ*)` for the next period, each `[b x 1]`.
    pub fn heads(&self, tape: &mut Tape, hidden: Var) -> Result<(Var, Var)> {
        let beta = tape.param(&self.store, self.ids.regression_weight);
        let a = tape.param(&self.store, self.ids.regression_bias);
        let beta_c = tape.param(&self.store, self.ids.classification_weight);
        let a_c = tape.param(&self.store, self.ids.classification_bias);
        let y = tape.matmul(hidden, beta)?;
        let y = tape.add_row(y, a)?;
        let z = tape.matmul(hidden, beta_c)?;
        let z = tape.add_row(z, a_c)?;
        let z = tape.clamp(z, -LOGIT_LIMIT, LOGIT_LIMIT);
        Ok((tape.sigmoid(z), y))
    }

    fn initial_state(&self, tape: &mut Tape, b: usize) -> Result<(Var, Var)> {
        let h = self.config.hidden_size;
        match self.ids.initial_state {
            Some((h0, c0)) => {
                let h0 = tape.param(&self.store, h0);
                let c0 = tape.param(&self.store, c0);
                Ok((tape.tile_rows(h0, b)?, tape.tile_rows(c0, b)?))
            }
            None => Ok((
                tape.constant(Tensor::zeros(b, h)),
                tape.constant(Tensor::zeros(b, h)),
            )),
        }
    }

    /// Full unrolled forward pass. `teacher` (if given, `[b x (n-1)]`)
    /// marks observed input cells to be replaced by the network's own
    /// predicted expectation; unobserved cells are always replaced.
    /// Returns `(p̂, Ŷ*)` as `[b x (n-1)]` nodes whose column `s` predicts
    /// period `s + 2`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &EncodedBatch,
        teacher: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        let b = batch.size;
        let steps = batch.steps();
        if batch.n != self.config.n || batch.dynamic_dim != self.config.dynamic_dim {
            return Err(Error::ShapeMismatch {
                op: "forward",
                detail: format!(
                    "batch has n={} and {} dynamic inputs, network expects n={} and {}",
                    batch.n, batch.dynamic_dim, self.config.n, self.config.dynamic_dim
                ),
            });
        }
        if let Some(t) = teacher {
            if t.len() != b * steps {
                return Err(Error::ShapeMismatch {
                    op: "forward",
                    detail: format!("teacher mask of {} for {b}x{steps}", t.len()),
                });
            }
        }
        let c = self.config.context_size;
        let dd = batch.dynamic_dim;
        let context = self.encode_context(tape, batch)?;
        let w = tape.param(&self.store, self.ids.lstm_input_weight);
        let w_context = tape.slice_rows(w, 0, c)?;
        let w_dynamic = tape.slice_rows(w, c, c + dd)?;
        let bias = tape.param(&self.store, self.ids.lstm_bias);
        let gc = tape.matmul(context, w_context)?;
        let gc = tape.add_row(gc, bias)?;

        let (mut hidden, mut cell) = self.initial_state(tape, b)?;
        let mut p_steps = Vec::with_capacity(steps);
        let mut y_steps = Vec::with_capacity(steps);
        let mut prev: Option<(Var, Var)> = None;
        for s in 0..steps {
            let period = s as u32 + 1;
            let mut head = Tensor::zeros(b, 2);
            let mut pair = Tensor::zeros(b, 2);
            let mut tail = Tensor::zeros(b, dd - 4);
            let mut keep = vec![true; b * 2];
            for k in 0..b {
                let row = batch.dynamic_row(k, s);
                let observed = batch.observed(k, period);
                let forced = s > 0 && observed && teacher.is_some_and(|t| t[k * steps + s]);
                let replaced = s > 0 && (!observed || forced);
                head.data[2 * k] = row[0];
                head.data[2 * k + 1] = if observed && !forced { 1.0 } else { 0.0 };
                pair.data[2 * k] = row[2];
                pair.data[2 * k + 1] = row[3];
                tail.data[k * (dd - 4)..(k + 1) * (dd - 4)].copy_from_slice(&row[4..]);
                keep[2 * k] = !replaced;
                keep[2 * k + 1] = !replaced;
            }
            let head = tape.constant(head);
            let observed_pair = tape.constant(pair);
            let pair = match prev {
                Some((p, y)) if keep.iter().any(|&m| !m) => {
                    let py = tape.mul(p, y)?;
                    let predicted = tape.concat(&[p, py])?;
                    tape.select(keep, observed_pair, predicted)?
                }
                _ => observed_pair,
            };
            let dynamic = if dd > 4 {
                let tail = tape.constant(tail);
                tape.concat(&[head, pair, tail])?
            } else {
                tape.concat(&[head, pair])?
            };
            let gd = tape.matmul(dynamic, w_dynamic)?;
            let gx = tape.add(gc, gd)?;
            let (h_new, c_new) = self.lstm_gates(tape, gx, hidden, cell)?;
            hidden = h_new;
            cell = c_new;
            let (p, y) = self.heads(tape, hidden)?;
            p_steps.push(p);
            y_steps.push(y);
            prev = Some((p, y));
        }
        Ok((tape.concat(&p_steps)?, tape.concat(&y_steps)?))
    }

    /// Predictions for every file of a batch, with unobserved periods fed
    /// back from the network's own expectations.
    pub fn predict_sequence(&self, batch: &EncodedBatch, mode: &PredictMode) -> Result<SequencePrediction> {
        let steps = batch.steps();
        let teacher = match mode {
            PredictMode::Inference => None,
            PredictMode::TeacherForced { prob, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                Some(teacher_forcing_mask(batch.size * steps, *prob, &mut rng))
            }
        };
        let mut out = SequencePrediction {
            n: batch.n,
            claim_ids: batch.claim_ids.clone(),
            t_k: batch.t_k.clone(),
            p_hat: Vec::with_capacity(batch.size * steps),
            y_star: Vec::with_capacity(batch.size * steps),
        };
        let mut start = 0;
        while start < batch.size {
            let end = (start + PREDICT_CHUNK).min(batch.size);
            let rows: Vec<usize> = (start..end).collect();
            let chunk = batch.select(&rows);
            let mask = teacher.as_ref().map(|t| &t[start * steps..end * steps]);
            let mut tape = Tape::for_store(&self.store);
            let (p, y) = self.forward(&mut tape, &chunk, mask)?;
            out.p_hat.extend_from_slice(&tape.value(p).data);
            out.y_star.extend_from_slice(&tape.value(y).data);
            start = end;
        }
        Ok(out)
    }

    /// `R̂_k = Σ_{j>t_k} p̂_j · Ŷ_j` for one file.
    pub fn predict_reserve(&self, file: &ClaimantFile, ctx: &EncodingContext) -> Result<f64> {
        let batch = encode(std::slice::from_ref(file), ctx);
        let pred = self.predict_sequence(&batch, &PredictMode::Inference)?;
        Ok(pred.reserve(0, &ctx.scaling))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PredictMode {
    Inference,
    TeacherForced { prob: f64, seed: u64 },
}

/// One Bernoulli(`prob`) draw per file-step, in row-major order.
pub fn teacher_forcing_mask(cells: usize, prob: f64, rng: &mut impl Rng) -> Vec<bool> {
    (0..cells).map(|_| rng.random::<f64>() < prob).collect()
}

/// Network outputs for target periods `2..=n`, row-major `[b x (n-1)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequencePrediction {
    pub n: u32,
    pub claim_ids: Vec<String>,
    pub t_k: Vec<u32>,
    pub p_hat: Vec<f64>,
    pub y_star: Vec<f64>,
}

impl SequencePrediction {
    pub fn len(&self) -> usize {
        self.claim_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.claim_ids.is_empty()
    }

    fn idx(&self, k: usize, period: u32) -> usize {
        debug_assert!((2..=self.n).contains(&period));
        k * (self.n as usize - 1) + period as usize - 2
    }

    pub fn p(&self, k: usize, period: u32) -> f64 {
        self.p_hat[self.idx(k, period)]
    }

    pub fn y_star(&self, k: usize, period: u32) -> f64 {
        self.y_star[self.idx(k, period)]
    }

    /// `Ŷ = μ_T + σ_T·Ŷ*`.
    pub fn amount(&self, k: usize, period: u32, scaling: &ScalingParams) -> f64 {
        scaling.invert(self.y_star(k, period))
    }

    /// Predicted expected payment `p̂·Ŷ`.
    pub fn expected(&self, k: usize, period: u32, scaling: &ScalingParams) -> f64 {
        self.p(k, period) * self.amount(k, period, scaling)
    }

    /// Sum of predicted expected payments over periods `from+1..=n`.
    pub fn expected_after(&self, k: usize, from: u32, scaling: &ScalingParams) -> f64 {
        ((from + 1).max(2)..=self.n)
            .map(|j| self.expected(k, j, scaling))
            .sum()
    }

    pub fn reserve(&self, k: usize, scaling: &ScalingParams) -> f64 {
        self.expected_after(k, self.t_k[k], scaling)
    }
}
