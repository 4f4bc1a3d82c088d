//! Mini-batch SGD on the balanced loss with teacher forcing,
//! reduce-on-plateau and early stopping.

mod alpha;
mod loss;

pub use alpha::{choose_alpha, select_alpha, AlphaRow, AlphaSelection, ModelSetup, TrainedModel};
pub use loss::{
    balanced_loss, chunk_loss, cross_entropy_loss, cross_entropy_loss_weighted, regression_loss,
    regression_loss_weighted, ChunkLoss, LossValue, Normalizers, RegressionLoss,
};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Gradients, ParameterStore, Tape};
use crate::error::{Error, Result};
use crate::net::{teacher_forcing_mask, Network};
use crate::preprocess::EncodedBatch;

/// `p(e) = p_max · (1 − exp(−e/τ))`, `e` counted from 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherForcingSchedule {
    pub p_max: f64,
    pub tau: f64,
}

impl Default for TeacherForcingSchedule {
    fn default() -> Self {
        Self { p_max: 0.75, tau: 10.0 }
    }
}

impl TeacherForcingSchedule {
    pub fn prob(&self, epoch: usize) -> f64 {
        if self.p_max == 0.0 {
            return 0.0;
        }
        self.p_max * (1.0 - (-(epoch as f64) / self.tau).exp())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub regression_loss: RegressionLoss,
    pub teacher_forcing: TeacherForcingSchedule,
    /// Compute the validation loss with teacher forcing at the epoch's
    /// probability instead of in inference mode.
    pub validation_teacher_forcing: bool,
    /// Files per tape when splitting a mini-batch across threads.
    pub chunk_size: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            plateau_patience: 10,
            plateau_factor: 0.5,
            early_stop_patience: 15,
            batch_size: 2048,
            max_epochs: 100,
            regression_loss: RegressionLoss::Squared,
            teacher_forcing: TeacherForcingSchedule::default(),
            validation_teacher_forcing: false,
            chunk_size: 128,
            seed: 2005,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.plateau_patience > 0
            && self.plateau_factor > 0.0
            && self.plateau_factor <= 1.0
            && self.early_stop_patience > 0
            && self.batch_size > 0
            && self.chunk_size > 0
            && (0.0..=1.0).contains(&self.teacher_forcing.p_max)
            && self.teacher_forcing.tau > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("optimizer settings out of range: {self:?}")))
        }
    }
}

/// `θ ← θ − lr·g` for every parameter with a gradient. Rejects the whole
/// step if any gradient entry is non-finite.
pub fn sgd_step(store: &mut ParameterStore, grads: &Gradients, lr: f64) -> Result<()> {
    for id in store.ids() {
        if let Some(g) = grads.get(id) {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    param: store.name(id).to_string(),
                });
            }
        }
    }
    for id in store.ids().collect::<Vec<_>>() {
        if let Some(g) = grads.get(id) {
            for (v, d) in store.value_mut(id).data.iter_mut().zip(&g.data) {
                *v -= lr * d;
            }
        }
    }
    Ok(())
}

/// Loss value and gradients of a mini-batch, computed chunk by chunk in
/// parallel and reduced in chunk order.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub loss: f64,
    pub ce: Option<f64>,
    pub rl: Option<f64>,
    pub gradients: Option<Gradients>,
    pub log_clamps: usize,
}

pub fn batch_loss(
    net: &Network,
    batch: &EncodedBatch,
    teacher: Option<&[bool]>,
    alpha: f64,
    kind: RegressionLoss,
    chunk_size: usize,
    with_gradients: bool,
) -> Result<BatchResult> {
    let norms = Normalizers::of(batch);
    let steps = batch.steps();
    let starts: Vec<usize> = (0..batch.size).step_by(chunk_size.max(1)).collect();
    let parts: Vec<Result<(f64, f64, f64, Option<Gradients>, usize)>> = starts
        .par_iter()
        .enumerate()
        .map(|(c, &start)| {
            let end = (start + chunk_size).min(batch.size);
            let rows: Vec<usize> = (start..end).collect();
            let chunk = batch.select(&rows);
            let mask = teacher.map(|t| &t[start * steps..end * steps]);
            let mut tape = Tape::for_store(&net.store);
            let l = chunk_loss(net, &mut tape, &chunk, mask, norms, alpha, kind, c == 0)?;
            let value = |v: Option<crate::diffcore::Var>| v.map_or(0.0, |v| tape.value(v).item());
            let grads = if with_gradients {
                Some(tape.backward(l.total)?)
            } else {
                None
            };
            Ok((tape.value(l.total).item(), value(l.ce), value(l.rl), grads, tape.log_clamps()))
        })
        .collect();
    let mut out = BatchResult {
        loss: 0.0,
        ce: (norms.delta > 0.0).then_some(0.0),
        rl: (norms.delta_tilde > 0.0).then_some(0.0),
        gradients: None,
        log_clamps: 0,
    };
    for part in parts {
        let (loss, ce, rl, grads, clamps) = part?;
        out.loss += loss;
        if let Some(c) = out.ce.as_mut() {
            *c += ce;
        }
        if let Some(r) = out.rl.as_mut() {
            *r += rl;
        }
        out.log_clamps += clamps;
        if let Some(g) = grads {
            match out.gradients.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => out.gradients = Some(g),
            }
        }
    }
    if batch.size == 0 {
        let (s1, s2) = net.log_sigma_sq();
        out.loss = s1 + s2;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub tf_prob: f64,
    pub event: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were returned; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub stopped_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
}

impl TrainingLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_loss", "val_loss", "lr", "tf_prob", "event"])?;
        for r in &self.epochs {
            w.write_record([
                r.epoch.to_string(),
                format!("{:.12e}", r.train_loss),
                format!("{:.12e}", r.val_loss),
                format!("{:.12e}", r.lr),
                format!("{:.6}", r.tf_prob),
                r.event.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains `net` on `train`, monitoring `val`, and returns the weights of
/// the best validation epoch.
pub fn fit(
    mut net: Network,
    train: &EncodedBatch,
    val: &EncodedBatch,
    alpha: f64,
    opt: &OptimizerConfig,
) -> Result<(Network, TrainingLog)> {
    opt.validate()?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidConfig(format!("alpha must be positive, got {alpha}")));
    }
    if opt.max_epochs > 0 && (train.size == 0 || val.size == 0) {
        return Err(Error::Empty("training and validation sets must be non-empty".into()));
    }
    let steps = train.steps();
    let mut log = TrainingLog::default();
    let mut lr = opt.learning_rate;
    let mut best: Option<(f64, ParameterStore, usize)> = None;
    let mut since_best = 0;
    let mut since_drop = 0;

    for epoch in 0..opt.max_epochs {
        let tf_prob = opt.teacher_forcing.prob(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..train.size).collect();
        order.shuffle(&mut rng);
        let teacher = teacher_forcing_mask(train.size * steps, tf_prob, &mut rng);

        let mut train_loss = 0.0;
        let mut batches = 0;
        for idx in order.chunks(opt.batch_size) {
            let mini = train.select(idx);
            let mut mask = Vec::with_capacity(idx.len() * steps);
            for &k in idx {
                mask.extend_from_slice(&teacher[k * steps..(k + 1) * steps]);
            }
            let result = batch_loss(
                &net,
                &mini,
                (tf_prob > 0.0).then_some(mask.as_slice()),
                alpha,
                opt.regression_loss,
                opt.chunk_size,
                true,
            )?;
            if result.log_clamps > 0 {
                log::debug!("epoch {epoch}: {} log arguments clamped", result.log_clamps);
            }
            let grads = result.gradients.expect("gradients requested");
            if let Err(e) = sgd_step(&mut net.store, &grads, lr) {
                log::error!("epoch {epoch}, batch {batches}: {e}");
                return Err(e);
            }
            train_loss += result.loss;
            batches += 1;
        }
        train_loss /= batches.max(1) as f64;

        let val_teacher = opt.validation_teacher_forcing.then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(opt.seed ^ 0x5eed);
            rng.set_stream(epoch as u64 + 1);
            teacher_forcing_mask(val.size * steps, tf_prob, &mut rng)
        });
        let val_loss = batch_loss(
            &net,
            val,
            val_teacher.as_deref(),
            alpha,
            opt.regression_loss,
            opt.chunk_size,
            false,
        )?
        .loss;
        if !val_loss.is_finite() {
            log::error!("epoch {epoch}: validation loss {val_loss}");
            return Err(Error::Diverged {
                epoch,
                loss: val_loss,
            });
        }

        let mut events = Vec::new();
        let improved = best.as_ref().is_none_or(|(b, _, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, net.store.clone(), epoch));
            since_best = 0;
            since_drop = 0;
            events.push("best");
        } else {
            since_best += 1;
            since_drop += 1;
        }
        let record_lr = lr;
        if since_drop >= opt.plateau_patience {
            lr *= opt.plateau_factor;
            since_drop = 0;
            events.push("lr_drop");
        }
        let stop = since_best >= opt.early_stop_patience;
        if stop {
            events.push("early_stop");
        }
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6} lr {record_lr} tf {tf_prob:.3}");
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: record_lr,
            tf_prob,
            event: events.join(";"),
        });
        log.stopped_epoch = Some(epoch);
        if stop {
            break;
        }
    }
    if let Some((loss, store, epoch)) = best {
        net.store = store;
        log.best_epoch = Some(epoch);
        log.best_val_loss = Some(loss);
    }
    Ok((net, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, GradCheckOptions, Tensor};
    use crate::domain::tests::file;
    use crate::net::NetworkConfig;
    use crate::preprocess::{encode, CategoryDictionary, EncodingContext, QuantTransform, ScalingParams, ENCODING_VERSION};

    fn ctx(n: u32) -> EncodingContext {
        EncodingContext {
            version: ENCODING_VERSION,
            n,
            dictionary: CategoryDictionary { features: vec![] },
            quantitative: vec![QuantTransform::Raw, QuantTransform::Raw],
            scaling: ScalingParams { mu: 100.0, sigma: 50.0 },
            censor_at: None,
            extra_dynamic: 0,
        }
    }

    fn net(n: u32, hidden: usize, seed: u64) -> Network {
        Network::new(NetworkConfig::for_encoding(&ctx(n), 3, hidden, seed)).unwrap()
    }

    #[test]
    fn tf_schedule() {
        let s = TeacherForcingSchedule::default();
        assert_eq!(s.prob(0), 0.0);
        assert!((s.prob(10) - 0.75 * (1.0 - (-1f64).exp())).abs() < 1e-15);
        assert!(s.prob(1000) <= 0.75);
    }

    #[test]
    fn sgd_examples() {
        let mut s = ParameterStore::new();
        let id = s.add("t", Tensor::scalar(1.0)).unwrap();
        let g = Gradients(vec![Some(Tensor::scalar(2.0))]);
        sgd_step(&mut s, &g, 0.0).unwrap();
        assert_eq!(s.value(id).item(), 1.0);
        sgd_step(&mut s, &g, 0.1).unwrap();
        assert!((s.value(id).item() - 0.8).abs() < 1e-15);
        let bad = Gradients(vec![Some(Tensor::scalar(f64::NAN))]);
        assert!(matches!(sgd_step(&mut s, &bad, 0.1), Err(Error::NonFiniteGradient { .. })));
    }

    fn sample_files() -> Vec<crate::domain::ClaimantFile> {
        vec![
            file("a", 4, &[120.0, 0.0, -40.0, 75.0], None),
            file("b", 2, &[300.0, 20.0], None),
            file("c", 3, &[0.0, 50.0, 0.0], None),
            file("d", 1, &[10.0], None),
        ]
    }

    #[test]
    fn balanced_loss_gradient_two_files() {
        let n = 4;
        let mut net = net(n, 3, 5);
        let s1 = net.ids.log_sigma1_sq;
        net.store.value_mut(s1).data[0] = 0.3;
        let s2 = net.ids.log_sigma2_sq;
        net.store.value_mut(s2).data[0] = -0.2;
        let batch = encode(&sample_files()[..2], &ctx(n));
        let norms = Normalizers::of(&batch);
        for kind in [RegressionLoss::Squared, RegressionLoss::Absolute] {
            let r = grad_check(&net.store, GradCheckOptions::default(), |s, t| {
                let probe = Network { store: s.clone(), ..net.clone() };
                Ok(chunk_loss(&probe, t, &batch, None, norms, 0.7, kind, true)?.total)
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "{kind:?}: {r:?}");
        }
    }

    #[test]
    fn tape_losses_match_value_losses() {
        let n = 4;
        let net = net(n, 4, 8);
        let batch = encode(&sample_files(), &ctx(n));
        let mut t = Tape::for_store(&net.store);
        let norms = Normalizers::of(&batch);
        let l = chunk_loss(&net, &mut t, &batch, None, norms, 0.4, RegressionLoss::Absolute, true).unwrap();
        let pred = net.predict_sequence(&batch, &crate::net::PredictMode::Inference).unwrap();
        let ce = cross_entropy_loss(&pred.p_hat, &batch.indicator_targets, &batch.delta);
        let rl = regression_loss(&pred.y_star, &batch.payment_targets, &batch.delta_tilde, RegressionLoss::Absolute);
        assert!((t.value(l.ce.unwrap()).item() - ce.value).abs() < 1e-12);
        assert!((t.value(l.rl.unwrap()).item() - rl.value).abs() < 1e-12);
        let expect = balanced_loss(rl.value, ce.value, 0.4, 0.0, 0.0);
        assert!((t.value(l.total).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn chunked_gradients_equal_full_batch() {
        let n = 4;
        let net = net(n, 4, 2);
        let batch = encode(&sample_files(), &ctx(n));
        let full = batch_loss(&net, &batch, None, 0.5, RegressionLoss::Squared, 100, true).unwrap();
        let split = batch_loss(&net, &batch, None, 0.5, RegressionLoss::Squared, 1, true).unwrap();
        assert!((full.loss - split.loss).abs() < 1e-12);
        let (a, b) = (full.gradients.unwrap(), split.gradients.unwrap());
        for (x, y) in a.0.iter().zip(&b.0) {
            for (u, v) in x.as_ref().unwrap().data.iter().zip(&y.as_ref().unwrap().data) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_cells_carry_no_gradient() {
        let n = 4;
        let net = net(n, 4, 2);
        let batch = encode(&sample_files(), &ctx(n));
        let mut poked = batch.clone();
        for i in 0..poked.delta.len() {
            if poked.delta[i] == 0.0 {
                poked.indicator_targets[i] = 1.0;
            }
            if poked.delta_tilde[i] == 0.0 {
                poked.payment_targets[i] = 1e6;
            }
        }
        let a = batch_loss(&net, &batch, None, 1.0, RegressionLoss::Squared, 64, true).unwrap();
        let b = batch_loss(&net, &poked, None, 1.0, RegressionLoss::Squared, 64, true).unwrap();
        assert_eq!(a.gradients, b.gradients);
    }

    #[test]
    fn duplicating_a_file_doubles_its_weight() {
        let n = 4;
        let net = net(n, 4, 2);
        let files = sample_files();
        let once = encode(&files, &ctx(n));
        let mut twice_files = files.clone();
        twice_files.push(files[1].clone());
        let twice = encode(&twice_files, &ctx(n));
        let pred = net.predict_sequence(&twice, &crate::net::PredictMode::Inference).unwrap();
        let steps = 3;
        // brute force: weight file b's cells by two
        let mut num = 0.0;
        let mut den = 0.0;
        for (k, w) in [(0, 1.0), (1, 2.0), (2, 1.0), (3, 1.0)] {
            for s in 0..steps {
                let c = k * steps + s;
                if once.delta[c] == 1.0 {
                    let (p, i) = (pred.p_hat[c], once.indicator_targets[c]);
                    num += w * if i == 1.0 { -p.ln() } else { -(1.0 - p).ln() };
                    den += w;
                }
            }
        }
        let ce = cross_entropy_loss(&pred.p_hat, &twice.indicator_targets, &twice.delta);
        assert!((ce.value - num / den).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let n = 4;
        let start = net(n, 4, 3);
        let batch = encode(&sample_files(), &ctx(n));
        let opt = OptimizerConfig { max_epochs: 0, ..Default::default() };
        let (out, log) = fit(start.clone(), &batch, &batch, 1.0, &opt).unwrap();
        assert_eq!(out.store, start.store);
        assert!(log.epochs.is_empty() && log.best_epoch.is_none());
    }

    #[test]
    fn fit_is_deterministic_and_restores_best() {
        let n = 4;
        let files = sample_files();
        let batch = encode(&files, &ctx(n));
        let opt = OptimizerConfig {
            max_epochs: 8,
            batch_size: 3,
            learning_rate: 0.05,
            plateau_patience: 2,
            early_stop_patience: 4,
            ..Default::default()
        };
        let (a, la) = fit(net(n, 4, 3), &batch, &batch, 1.0, &opt).unwrap();
        let (b, lb) = fit(net(n, 4, 3), &batch, &batch, 1.0, &opt).unwrap();
        assert_eq!(a.store, b.store);
        assert_eq!(la, lb);
        let best = la.best_epoch.unwrap();
        let min = la.epochs.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(la.epochs[best].val_loss, min);
        let again = batch_loss(&a, &batch, None, 1.0, RegressionLoss::Squared, 128, false).unwrap();
        assert!((again.loss - min).abs() < 1e-12);
        let mut csv = Vec::new();
        la.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("epoch,train_loss,val_loss,lr,tf_prob,event\n"));
    }

    #[test]
    fn two_half_batch_steps_match_one_full_step_at_equal_weighting() {
        // With sum-normalized losses, averaging the two halves' gradients
        // equals the full-batch gradient when both halves have equal mask
        // counts.
        let n = 3;
        let net = net(n, 3, 4);
        let files = vec![
            file("a", 3, &[10.0, 20.0, 30.0], None),
            file("b", 3, &[40.0, 50.0, 60.0], None),
        ];
        let batch = encode(&files, &ctx(n));
        let full = batch_loss(&net, &batch, None, 1.0, RegressionLoss::Squared, 64, true).unwrap();
        let mut avg: Option<Gradients> = None;
        for k in 0..2 {
            let half = batch.select(&[k]);
            let g = batch_loss(&net, &half, None, 1.0, RegressionLoss::Squared, 64, true)
                .unwrap()
                .gradients
                .unwrap();
            match avg.as_mut() {
                Some(a) => a.add_assign(&g),
                None => avg = Some(g),
            }
        }
        let avg = avg.unwrap();
        for (x, y) in full.gradients.unwrap().0.iter().zip(&avg.0) {
            for (u, v) in x.as_ref().unwrap().data.iter().zip(&y.as_ref().unwrap().data) {
                assert!((u - v / 2.0).abs() < 1e-12 * (1.0 + u.abs()) * 10.0);
            }
        }
    }
}
