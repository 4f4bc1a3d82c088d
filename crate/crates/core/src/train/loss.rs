//! Masked cross-entropy, masked regression loss and the
//! uncertainty-balanced combination, as plain values and on a tape.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var, LOG_FLOOR};
use crate::error::Result;
use crate::net::Network;
use crate::preprocess::EncodedBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionLoss {
    #[default]
    Squared,
    Absolute,
}

impl RegressionLoss {
    pub fn apply(self, target: f64, predicted: f64) -> f64 {
        match self {
            RegressionLoss::Squared => (target - predicted).powi(2),
            RegressionLoss::Absolute => (target - predicted).abs(),
        }
    }
}

/// A loss value; `empty` flags a mask with no active cell, in which case
/// `value` is 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub empty: bool,
}

fn clamped_ln(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

fn cell_ce(p: f64, i: f64) -> f64 {
    if i == 1.0 {
        -clamped_ln(p)
    } else {
        -clamped_ln(1.0 - p)
    }
}

/// Collapsed form: `Σ δ·ce / Σ δ`. Arrays are row-major `[b x (n-1)]`;
/// targets at masked cells are ignored (they may be NaN).
pub fn cross_entropy_loss(p_hat: &[f64], targets: &[f64], delta: &[f64]) -> LossValue {
    let total: f64 = delta.iter().sum();
    if total == 0.0 {
        return LossValue { value: 0.0, empty: true };
    }
    let s: f64 = p_hat
        .iter()
        .zip(targets)
        .zip(delta)
        .filter(|(_, &d)| d != 0.0)
        .map(|((&p, &i), &d)| d * cell_ce(p, i))
        .sum();
    LossValue {
        value: s / total,
        empty: false,
    }
}

/// Collapsed form: `Σ δ̃·f / Σ δ̃`.
pub fn regression_loss(
    y_hat: &[f64],
    targets: &[f64],
    delta_tilde: &[f64],
    kind: RegressionLoss,
) -> LossValue {
    let total: f64 = delta_tilde.iter().sum();
    if total == 0.0 {
        return LossValue { value: 0.0, empty: true };
    }
    let s: f64 = y_hat
        .iter()
        .zip(targets)
        .zip(delta_tilde)
        .filter(|(_, &d)| d != 0.0)
        .map(|((&yh, &y), &d)| d * kind.apply(y, yh))
        .sum();
    LossValue {
        value: s / total,
        empty: false,
    }
}

/// Period-weighted form: each period's mean loss weighted by its share of
/// active cells. `steps` is the number of columns.
fn period_weighted(
    steps: usize,
    weights: &[f64],
    cell: impl Fn(usize) -> f64,
) -> LossValue {
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return LossValue { value: 0.0, empty: true };
    }
    let rows = weights.len() / steps.max(1);
    let mut value = 0.0;
    for j in 0..steps {
        let count: f64 = (0..rows).map(|k| weights[k * steps + j]).sum();
        if count == 0.0 {
            continue;
        }
        let mean: f64 = (0..rows)
            .filter(|&k| weights[k * steps + j] != 0.0)
            .map(|k| weights[k * steps + j] / count * cell(k * steps + j))
            .sum();
        value += count / total * mean;
    }
    LossValue { value, empty: false }
}

pub fn cross_entropy_loss_weighted(
    steps: usize,
    p_hat: &[f64],
    targets: &[f64],
    delta: &[f64],
) -> LossValue {
    period_weighted(steps, delta, |i| cell_ce(p_hat[i], targets[i]))
}

pub fn regression_loss_weighted(
    steps: usize,
    y_hat: &[f64],
    targets: &[f64],
    delta_tilde: &[f64],
    kind: RegressionLoss,
) -> LossValue {
    period_weighted(steps, delta_tilde, |i| kind.apply(targets[i], y_hat[i]))
}

/// `L = RL/σ1² + α·CE/σ2² + log σ1² + log σ2²`, parameterized by the logs.
pub fn balanced_loss(rl: f64, ce: f64, alpha: f64, log_sigma1_sq: f64, log_sigma2_sq: f64) -> f64 {
    rl * (-log_sigma1_sq).exp() + alpha * ce * (-log_sigma2_sq).exp() + log_sigma1_sq + log_sigma2_sq
}

/// Mask normalizers of a (mini-)batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizers {
    pub delta: f64,
    pub delta_tilde: f64,
}

impl Normalizers {
    pub fn of(batch: &EncodedBatch) -> Self {
        Self {
            delta: batch.delta.iter().sum(),
            delta_tilde: batch.delta_tilde.iter().sum(),
        }
    }
}

/// Loss pieces recorded on a tape for one chunk of a mini-batch.
#[derive(Debug, Clone, Copy)]
pub struct ChunkLoss {
    pub total: Var,
    pub ce: Option<Var>,
    pub rl: Option<Var>,
}

/// Contribution of `chunk` to the balanced loss of the mini-batch whose
/// normalizers are `norms`. Summing the chunk contributions (with
/// `with_log_terms` set on exactly one chunk) gives the mini-batch loss.
#[allow(clippy::too_many_arguments)]
pub fn chunk_loss(
    net: &Network,
    tape: &mut Tape,
    chunk: &EncodedBatch,
    teacher: Option<&[bool]>,
    norms: Normalizers,
    alpha: f64,
    kind: RegressionLoss,
    with_log_terms: bool,
) -> Result<ChunkLoss> {
    let (p, y) = net.forward(tape, chunk, teacher)?;
    let b = chunk.size;
    let steps = chunk.steps();
    let shape = |data: Vec<f64>| Tensor::new(b, steps, data);

    let s1 = tape.param(&net.store, net.ids.log_sigma1_sq);
    let s2 = tape.param(&net.store, net.ids.log_sigma2_sq);
    let mut terms = Vec::new();

    let ce = if norms.delta > 0.0 {
        let pos: Vec<f64> = chunk
            .delta
            .iter()
            .zip(&chunk.indicator_targets)
            .map(|(&d, &i)| if d != 0.0 && i == 1.0 { d } else { 0.0 })
            .collect();
        let neg: Vec<f64> = chunk
            .delta
            .iter()
            .zip(&chunk.indicator_targets)
            .map(|(&d, &i)| if d != 0.0 && i != 1.0 { d } else { 0.0 })
            .collect();
        let pos = tape.constant(shape(pos)?);
        let neg = tape.constant(shape(neg)?);
        let log_p = tape.log(p);
        let q = tape.scale(p, -1.0);
        let q = tape.add_scalar(q, 1.0);
        let log_q = tape.log(q);
        let a = tape.mul(pos, log_p)?;
        let c = tape.mul(neg, log_q)?;
        let s = tape.add(a, c)?;
        let s = tape.sum(s);
        let ce = tape.scale(s, -1.0 / norms.delta);
        let w = tape.scale(s2, -1.0);
        let w = tape.exp(w);
        let term = tape.mul(ce, w)?;
        terms.push(tape.scale(term, alpha));
        Some(ce)
    } else {
        None
    };

    let rl = if norms.delta_tilde > 0.0 {
        let target: Vec<f64> = chunk
            .payment_targets
            .iter()
            .zip(&chunk.delta_tilde)
            .map(|(&t, &d)| if d != 0.0 { t } else { 0.0 })
            .collect();
        let target = tape.constant(shape(target)?);
        let mask = tape.constant(shape(chunk.delta_tilde.clone())?);
        let diff = tape.sub(y, target)?;
        let f = match kind {
            RegressionLoss::Squared => tape.square(diff),
            RegressionLoss::Absolute => tape.abs(diff),
        };
        let f = tape.mul(f, mask)?;
        let s = tape.sum(f);
        let rl = tape.scale(s, 1.0 / norms.delta_tilde);
        let w = tape.scale(s1, -1.0);
        let w = tape.exp(w);
        terms.push(tape.mul(rl, w)?);
        Some(rl)
    } else {
        None
    };

    if with_log_terms {
        terms.push(s1);
        terms.push(s2);
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    for &t in terms.iter().skip(1) {
        total = tape.add(total, t)?;
    }
    Ok(ChunkLoss { total, ce, rl })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_cell_ce_is_ln2() {
        let l = cross_entropy_loss(&[0.5], &[1.0], &[1.0]);
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-15);
        let l = cross_entropy_loss(&[0.5, 0.9], &[1.0, 0.0], &[1.0, 0.0]);
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn empty_masks_are_flagged() {
        let l = cross_entropy_loss(&[0.5], &[f64::NAN], &[0.0]);
        assert!(l.empty && l.value == 0.0);
        let l = regression_loss(&[0.5], &[f64::NAN], &[0.0], RegressionLoss::Absolute);
        assert!(l.empty && l.value == 0.0);
    }

    #[test]
    fn regression_examples() {
        assert_eq!(regression_loss(&[2.0, -1.0], &[2.0, -1.0], &[1.0, 1.0], RegressionLoss::Squared).value, 0.0);
        assert_eq!(regression_loss(&[2.0], &[2.0], &[1.0], RegressionLoss::Absolute).value, 0.0);
        assert_eq!(regression_loss(&[3.0], &[1.0], &[1.0], RegressionLoss::Squared).value, 4.0);
        assert_eq!(regression_loss(&[3.0], &[1.0], &[1.0], RegressionLoss::Absolute).value, 2.0);
    }

    #[test]
    fn balanced_examples() {
        assert_eq!(balanced_loss(0.7, 0.4, 1.0, 0.0, 0.0), 1.1);
        let v = balanced_loss(2.0, 1.0, 0.5, 2f64.ln(), 0.0);
        assert!((v - 2.193147).abs() < 1e-6);
    }

    #[test]
    fn balanced_stationary_at_rl_equals_sigma() {
        // d/ds1 [RL e^{-s1} + s1] = 0 at e^{s1} = RL.
        let rl: f64 = 3.7;
        let s = rl.ln();
        let eps = 1e-6;
        let d = (balanced_loss(rl, 1.0, 1.0, s + eps, 0.0) - balanced_loss(rl, 1.0, 1.0, s - eps, 0.0))
            / (2.0 * eps);
        assert!(d.abs() < 1e-8);
    }

    fn brute_ce(b: usize, steps: usize, p: &[f64], i: &[f64], d: &[f64]) -> (f64, f64) {
        let mut total = 0.0;
        for k in 0..b {
            for j in 0..steps {
                total += d[k * steps + j];
            }
        }
        let mut line1 = 0.0;
        let mut line2 = 0.0;
        for j in 0..steps {
            let mut nj = 0.0;
            for k in 0..b {
                nj += d[k * steps + j];
            }
            let mut inner = 0.0;
            for k in 0..b {
                let c = k * steps + j;
                if d[c] == 0.0 {
                    continue;
                }
                let v = if i[c] == 0.0 { -(1.0 - p[c]).ln() } else { -p[c].ln() };
                inner += d[c] / nj * v;
                line2 += d[c] * v;
            }
            if nj > 0.0 {
                line1 += nj / total * inner;
            }
        }
        (line1, line2 / total)
    }

    proptest! {
        #[test]
        fn ce_forms_agree(
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (b, steps) = (3, 4);
            let p: Vec<f64> = (0..12).map(|_| rng.random_range(0.01..0.99)).collect();
            let d: Vec<f64> = (0..12).map(|_| if rng.random::<f64>() < 0.7 { 1.0 } else { 0.0 }).collect();
            let i: Vec<f64> = d.iter().map(|&d| if d == 0.0 { f64::NAN } else if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
            let (l1, l2) = brute_ce(b, steps, &p, &i, &d);
            let a = cross_entropy_loss(&p, &i, &d);
            let w = cross_entropy_loss_weighted(steps, &p, &i, &d);
            if d.iter().sum::<f64>() > 0.0 {
                prop_assert!((a.value - l2).abs() < 1e-12);
                prop_assert!((w.value - l1).abs() < 1e-12);
                prop_assert!((a.value - w.value).abs() < 1e-12);
            } else {
                prop_assert!(a.empty && w.empty);
            }
        }

        #[test]
        fn rl_forms_agree(seed in 0u64..1000, absolute in any::<bool>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let kind = if absolute { RegressionLoss::Absolute } else { RegressionLoss::Squared };
            let (b, steps) = (4, 5);
            let yh: Vec<f64> = (0..20).map(|_| rng.random_range(-3.0..3.0)).collect();
            let dt: Vec<f64> = (0..20).map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 }).collect();
            let y: Vec<f64> = dt.iter().map(|&d| if d == 0.0 { f64::NAN } else { rng.random_range(-3.0..3.0) }).collect();
            let total: f64 = dt.iter().sum();
            let mut line1 = 0.0;
            let mut line2 = 0.0;
            for j in 0..steps {
                let nj: f64 = (0..b).map(|k| dt[k * steps + j]).sum();
                let mut inner = 0.0;
                for k in 0..b {
                    let c = k * steps + j;
                    if dt[c] != 0.0 {
                        let f = kind.apply(y[c], yh[c]);
                        inner += f / nj;
                        line2 += f;
                    }
                }
                if nj > 0.0 { line1 += nj / total * inner; }
            }
            let a = regression_loss(&yh, &y, &dt, kind);
            let w = regression_loss_weighted(steps, &yh, &y, &dt, kind);
            if total > 0.0 {
                prop_assert!((a.value - line2 / total).abs() < 1e-12);
                prop_assert!((w.value - line1).abs() < 1e-12);
            }
        }
    }
}
