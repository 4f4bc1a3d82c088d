use super::params::ParameterStore;
use super::tape::{Tape, Var};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub per_param: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Denominator floor so that two vanishing gradients compare as equal.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            floor: 1e-8,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences `(f(θ+ε) − f(θ−ε)) / 2ε`, coordinate by coordinate.
pub fn grad_check<F>(store: &ParameterStore, options: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParameterStore, &mut Tape) -> Result<Var>,
{
    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut tape = Tape::for_store(s);
        let out = f(s, &mut tape)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::for_store(store);
    let out = f(store, &mut tape)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        per_param: Vec::new(),
    };
    let mut probe = store.clone();
    for id in store.ids() {
        let size = store.value(id).len();
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            max_rel_error: 0.0,
            coordinates: size,
        };
        for i in 0..size {
            let original = store.value(id).data[i];
            probe.value_mut(id).data[i] = original + options.eps;
            let plus = eval(&probe)?;
            probe.value_mut(id).data[i] = original - options.eps;
            let minus = eval(&probe)?;
            probe.value_mut(id).data[i] = original;

            let numeric = (plus - minus) / (2.0 * options.eps);
            let analytic = grads.get(id).map_or(0.0, |g| g.data[i]);
            let err = relative_error(analytic, numeric, options.floor);
            check.max_rel_error = check.max_rel_error.max(err);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((check.name.clone(), i));
                report.analytic_at_worst = analytic;
                report.numeric_at_worst = numeric;
            }
        }
        report.per_param.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    #[test]
    fn square_at_three() {
        let mut s = ParameterStore::new();
        let x = s.add("x", Tensor::scalar(3.0)).unwrap();
        let r = grad_check(&s, GradCheckOptions::default(), |s, t| {
            let v = t.param(s, x);
            Ok(t.square(v))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut s = ParameterStore::new();
        let x = s.add("x", Tensor::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let mut t = Tape::for_store(&s);
        let _ = t.param(&s, x);
        let c = t.constant(Tensor::scalar(7.0));
        let g = t.backward(c).unwrap();
        assert!(g.get(x).is_none());
        let r = grad_check(&s, GradCheckOptions::default(), |_, t| Ok(t.constant(Tensor::scalar(7.0))))
            .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn matmul_against_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = ParameterStore::new();
        let a = s.add("a", random(&mut rng, 3, 4, 1.0)).unwrap();
        let b = s.add("b", random(&mut rng, 4, 2, 1.0)).unwrap();
        let w = random(&mut rng, 3, 2, 1.0);
        let r = grad_check(&s, GradCheckOptions::default(), |s, t| {
            let (a, b) = (t.param(s, a), t.param(s, b));
            let c = t.matmul(a, b)?;
            let w = t.constant(w.clone());
            let m = t.mul(c, w)?;
            Ok(t.sum(m))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    type Unary = fn(&mut Tape, Var) -> Var;

    #[test]
    fn every_primitive_at_ten_random_points() {
        let unary: [(&str, Unary, f64); 8] = [
            ("sigmoid", |t, v| t.sigmoid(v), 1e-6),
            ("tanh", |t, v| t.tanh(v), 1e-6),
            ("abs", |t, v| t.abs(v), 1e-6),
            ("square", |t, v| t.square(v), 1e-6),
            ("exp", |t, v| t.exp(v), 1e-6),
            ("scale", |t, v| t.scale(v, -1.7), 1e-6),
            ("add_scalar", |t, v| t.add_scalar(v, 0.3), 1e-6),
            ("clamp", |t, v| t.clamp(v, -5.0, 5.0), 1e-6),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for point in 0..10 {
            let mut s = ParameterStore::new();
            let x = s.add("x", random(&mut rng, 2, 3, 2.0)).unwrap();
            let y = s.add("y", random(&mut rng, 2, 3, 2.0)).unwrap();
            let pos = s.add("pos", {
                let mut t = random(&mut rng, 2, 3, 1.0);
                t.data.iter_mut().for_each(|v| *v = v.abs() + 0.1);
                t
            })
            .unwrap();
            let row = s.add("row", random(&mut rng, 1, 3, 1.0)).unwrap();
            let w = random(&mut rng, 2, 3, 1.0);
            let weighted = |t: &mut Tape, v: Var| -> Result<Var> {
                let w = t.constant(w.clone());
                let m = t.mul(v, w)?;
                Ok(t.sum(m))
            };
            for (name, op, tol) in unary {
                let r = grad_check(&s, GradCheckOptions::default(), |s, t| {
                    let v = t.param(s, x);
                    let o = op(t, v);
                    weighted(t, o)
                })
                .unwrap();
                assert!(r.max_rel_error < tol, "{name} at point {point}: {r:?}");
            }
            type Binary = fn(&mut Tape, Var, Var) -> Result<Var>;
            let binary: [(&str, Binary); 6] = [
                ("add", |t, a, b| t.add(a, b)),
                ("sub", |t, a, b| t.sub(a, b)),
                ("mul", |t, a, b| t.mul(a, b)),
                ("select", |t, a, b| t.select(vec![true, false, true, false, false, true], a, b)),
                ("concat", |t, a, b| {
                    let c = t.concat(&[a, b])?;
                    t.slice_cols(c, 2, 5)
                }),
                ("slice_rows", |t, a, b| {
                    let top = t.slice_rows(a, 0, 1)?;
                    let bottom = t.slice_rows(b, 1, 2)?;
                    let c = t.mul(top, bottom)?;
                    t.tile_rows(c, 2)
                }),
            ];
            for (name, op) in binary {
                let r = grad_check(&s, GradCheckOptions::default(), |s, t| {
                    let (a, b) = (t.param(s, x), t.param(s, y));
                    let o = op(t, a, b)?;
                    weighted(t, o)
                })
                .unwrap();
                assert!(r.max_rel_error < 1e-6, "{name} at point {point}: {r:?}");
            }
            let r = grad_check(&s, GradCheckOptions::default(), |s, t| {
                let v = t.param(s, pos);
                let o = t.log(v);
                weighted(t, o)
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-6, "log at point {point}: {r:?}");
            let r = grad_check(&s, GradCheckOptions::default(), |s, t| {
                let (a, r) = (t.param(s, x), t.param(s, row));
                let o = t.add_row(a, r)?;
                let tiled = t.tile_rows(r, 2)?;
                let o = t.mul(o, tiled)?;
                weighted(t, o)
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-6, "add_row/tile_rows at point {point}: {r:?}");
            let r = grad_check(&s, GradCheckOptions::default(), |s, t| {
                let table = t.param(s, x);
                let g = t.gather(table, &[1, 0, 1])?;
                let sq = t.square(g);
                Ok(t.sum(sq))
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-6, "gather at point {point}: {r:?}");
        }
    }

    #[test]
    fn branch_order_does_not_change_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParameterStore::new();
        let x = s.add("x", random(&mut rng, 3, 3, 1.0)).unwrap();
        let branches: [fn(&mut Tape, Var) -> Var; 3] =
            [|t, v| t.sigmoid(v), |t, v| t.square(v), |t, v| t.tanh(v)];
        let run = |order: [usize; 3]| {
            let mut t = Tape::for_store(&s);
            let v = t.param(&s, x);
            let mut outs = [None; 3];
            for &i in &order {
                let b = branches[i](&mut t, v);
                outs[i] = Some(t.sum(b));
            }
            let ab = t.add(outs[0].unwrap(), outs[1].unwrap()).unwrap();
            let total = t.add(ab, outs[2].unwrap()).unwrap();
            t.backward(total).unwrap().get(x).unwrap().clone()
        };
        let g1 = run([0, 1, 2]);
        let g2 = run([2, 0, 1]);
        for (a, b) in g1.data.iter().zip(&g2.data) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}
