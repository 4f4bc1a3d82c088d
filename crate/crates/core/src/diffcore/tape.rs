use super::params::{Gradients, ParamId, ParameterStore};
use super::tensor::{gemm_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Lower clamp applied inside [`Tape::log`].
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Where(Vec<bool>, usize, usize),
    Concat(Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Abs(usize),
    Square(usize),
    Log(usize),
    Exp(usize),
    Clamp(usize, f64, f64),
    Scale(usize, f64),
    AddScalar(usize),
    Sum(usize),
    Gather(usize, Vec<usize>),
    TileRows(usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a computation and replays it backwards. Single-threaded; build
/// one tape per chunk of work.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: Vec<Option<usize>>,
    param_count: usize,
    log_clamps: usize,
}

fn mismatch(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::ShapeMismatch {
        op,
        detail: format!("{}x{} vs {}x{}", a.0, a.1, b.0, b.1),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape whose parameter leaves are aligned with `store`.
    pub fn for_store(store: &ParameterStore) -> Self {
        Self {
            param_nodes: vec![None; store.len()],
            param_count: store.len(),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of `log` arguments that fell below [`LOG_FLOOR`].
    pub fn log_clamps(&self) -> usize {
        self.log_clamps
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf bound to a stored parameter; repeated calls share one node.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if self.param_nodes.len() < store.len() {
            self.param_nodes.resize(store.len(), None);
            self.param_count = store.len();
        }
        if let Some(i) = self.param_nodes[id.0] {
            return Var(i);
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.param_nodes[id.0] = Some(v.0);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(mismatch("matmul", sa, sb));
        }
        let mut out = Tensor::zeros(sa.0, sb.1);
        gemm_acc(
            sa.0,
            sa.1,
            sb.1,
            &self.nodes[a.0].value.data,
            false,
            &self.nodes[b.0].value.data,
            false,
            &mut out.data,
        );
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(out, Op::MatMul(a.0, b.0), ng))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        node: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(Tensor::new(sa.0, sa.1, data)?, node, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// `a + row` with `row: 1 x cols` broadcast down the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(mismatch("add_row", sa, sr));
        }
        let r = &self.nodes[row.0].value.data;
        let mut out = self.nodes[a.0].value.clone();
        for chunk in out.data.chunks_mut(sa.1.max(1)) {
            for (x, y) in chunk.iter_mut().zip(r) {
                *x += y;
            }
        }
        let ng = self.ng(a.0) || self.ng(row.0);
        Ok(self.push(out, Op::AddRow(a.0, row.0), ng))
    }

    /// Elementwise select: `mask ? a : b`.
    pub fn select(&mut self, mask: Vec<bool>, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb || mask.len() != sa.0 * sa.1 {
            return Err(mismatch("select", sa, sb));
        }
        let data = mask
            .iter()
            .zip(self.nodes[a.0].value.data.iter().zip(&self.nodes[b.0].value.data))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(Tensor::new(sa.0, sa.1, data)?, Op::Where(mask, a.0, b.0), ng))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|v| self.shape(*v).0)
            .ok_or_else(|| Error::Empty("concat of nothing".into()))?;
        let mut cols = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.0 != rows {
                return Err(mismatch("concat", (rows, cols), s));
            }
            cols += s.1;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + t.cols].copy_from_slice(t.row(r));
            }
            offset += t.cols;
        }
        let ng = parts.iter().any(|p| self.ng(p.0));
        Ok(self.push(out, Op::Concat(parts.iter().map(|p| p.0).collect()), ng))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a);
        if start > end || end > s.1 {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("{start}..{end} of {} columns", s.1),
            });
        }
        let w = end - start;
        let src = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(s.0, w);
        for r in 0..s.0 {
            out.data[r * w..(r + 1) * w].copy_from_slice(&src.row(r)[start..end]);
        }
        let ng = self.ng(a.0);
        Ok(self.push(out, Op::SliceCols(a.0, start), ng))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a);
        if start > end || end > s.0 {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                detail: format!("{start}..{end} of {} rows", s.0),
            });
        }
        let src = &self.nodes[a.0].value;
        let out = Tensor::new(end - start, s.1, src.data[start * s.1..end * s.1].to_vec())?;
        let ng = self.ng(a.0);
        Ok(self.push(out, Op::SliceRows(a.0, start), ng))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = &self.nodes[a.0].value;
        let out = Tensor {
            rows: src.rows,
            cols: src.cols,
            data: src.data.iter().map(|&x| f(x)).collect(),
        };
        let ng = self.ng(a.0);
        self.push(out, op, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a.0))
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a.0))
    }

    /// `ln(max(x, LOG_FLOOR))`; clamped entries pass no gradient.
    pub fn log(&mut self, a: Var) -> Var {
        self.log_clamps += self.nodes[a.0]
            .value
            .data
            .iter()
            .filter(|&&x| !(x > LOG_FLOOR))
            .count();
        self.map(a, |x| x.max(LOG_FLOOR).ln(), Op::Log(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a.0))
    }

    /// Clips values to `[lo, hi]`; gradient flows only strictly inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp(a.0, lo, hi))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |x| k * x, Op::Scale(a.0, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |x| x + k, Op::AddScalar(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        let ng = self.ng(a.0);
        self.push(Tensor::scalar(s), Op::Sum(a.0), ng)
    }

    /// Rows `indices` of `table`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        let mut out = Tensor::zeros(indices.len(), t.cols);
        for (r, &i) in indices.iter().enumerate() {
            if i >= t.rows {
                return Err(Error::ShapeMismatch {
                    op: "gather",
                    detail: format!("index {i} outside a table of {} rows", t.rows),
                });
            }
            out.data[r * t.cols..(r + 1) * t.cols].copy_from_slice(t.row(i));
        }
        let ng = self.ng(table.0);
        Ok(self.push(out, Op::Gather(table.0, indices.to_vec()), ng))
    }

    /// Repeats a `1 x c` row `rows` times.
    pub fn tile_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.0 != 1 {
            return Err(mismatch("tile_rows", s, (1, s.1)));
        }
        let src = &self.nodes[a.0].value.data;
        let mut data = Vec::with_capacity(rows * s.1);
        for _ in 0..rows {
            data.extend_from_slice(src);
        }
        let ng = self.ng(a.0);
        Ok(self.push(Tensor::new(rows, s.1, data)?, Op::TileRows(a.0), ng))
    }

    /// Reverse pass from a scalar output. Returns gradients aligned with
    /// the parameter store the tape was built against.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let s = self.shape(out);
        if s != (1, 1) {
            return Err(mismatch("backward", s, (1, 1)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);
        let mut params: Vec<Option<Tensor>> = vec![None; self.param_count];

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let v = &node.value;
                    params[id.0] = Some(Tensor {
                        rows: v.rows,
                        cols: v.cols,
                        data: g,
                    });
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.nodes[*a].value.shape();
                    let n = self.nodes[*b].value.cols;
                    if self.ng(*a) {
                        let ga = self.slot(&mut grads, *a);
                        gemm_acc(m, n, k, &g, false, &self.nodes[*b].value.data, true, ga);
                    }
                    if self.ng(*b) {
                        let gb = self.slot(&mut grads, *b);
                        gemm_acc(k, m, n, &self.nodes[*a].value.data, true, &g, false, gb);
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, |d| axpy(d, &g, 1.0));
                    self.acc(&mut grads, *b, |d| axpy(d, &g, 1.0));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, |d| axpy(d, &g, 1.0));
                    self.acc(&mut grads, *b, |d| axpy(d, &g, -1.0));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value.data, &self.nodes[*b].value.data);
                    self.acc(&mut grads, *a, |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(vb) {
                            *d += g * y;
                        }
                    });
                    self.acc(&mut grads, *b, |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(va) {
                            *d += g * x;
                        }
                    });
                }
                Op::AddRow(a, row) => {
                    self.acc(&mut grads, *a, |d| axpy(d, &g, 1.0));
                    let cols = node.value.cols.max(1);
                    self.acc(&mut grads, *row, |d| {
                        for chunk in g.chunks(cols) {
                            axpy(d, chunk, 1.0);
                        }
                    });
                }
                Op::Where(mask, a, b) => {
                    self.acc(&mut grads, *a, |d| {
                        for ((d, g), &m) in d.iter_mut().zip(&g).zip(mask) {
                            if m {
                                *d += g;
                            }
                        }
                    });
                    self.acc(&mut grads, *b, |d| {
                        for ((d, g), &m) in d.iter_mut().zip(&g).zip(mask) {
                            if !m {
                                *d += g;
                            }
                        }
                    });
                }
                Op::Concat(parts) => {
                    let (rows, cols) = node.value.shape();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.cols;
                        self.acc(&mut grads, p, |d| {
                            for r in 0..rows {
                                axpy(
                                    &mut d[r * w..(r + 1) * w],
                                    &g[r * cols + offset..r * cols + offset + w],
                                    1.0,
                                );
                            }
                        });
                        offset += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (rows, w) = node.value.shape();
                    let cols = self.nodes[*a].value.cols;
                    self.acc(&mut grads, *a, |d| {
                        for r in 0..rows {
                            axpy(
                                &mut d[r * cols + start..r * cols + start + w],
                                &g[r * w..(r + 1) * w],
                                1.0,
                            );
                        }
                    });
                }
                Op::SliceRows(a, start) => {
                    let cols = node.value.cols;
                    let offset = start * cols;
                    self.acc(&mut grads, *a, |d| axpy(&mut d[offset..offset + g.len()], &g, 1.0));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value.data;
                    self.acc(&mut grads, *a, |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                            *d += g * y * (1.0 - y);
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = &node.value.data;
                    self.acc(&mut grads, *a, |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                            *d += g * (1.0 - y * y);
                        }
                    });
                }
                Op::Abs(a) => {
                    let x = &self.nodes[*a].value.data;
                    self.acc(&mut grads, *a, |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(x) {
                            if *x > 0.0 {
                                *d += g;
                            } else if *x < 0.0 {
                                *d -= g;
                            }
                        }
                    });
                }
                Op::Square(a) => {
                    let x = &self.nodes[*a].value.data;
                    self.acc(&mut grads, *a, |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(x) {
                            *d += 2.0 * g * x;
                        }
                    });
                }
                Op::Log(a) => {
                    let x = &self.nodes[*a].value.data;
                    self.acc(&mut grads, *a, |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(x) {
                            if *x > LOG_FLOOR {
                                *d += g / x;
                            }
                        }
                    });
                }
                Op::Exp(a) => {
                    let y = &node.value.data;
                    self.acc(&mut grads, *a, |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                            *d += g * y;
                        }
                    });
                }
                Op::Clamp(a, lo, hi) => {
                    let x = &self.nodes[*a].value.data;
                    self.acc(&mut grads, *a, |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(x) {
                            if x > lo && x < hi {
                                *d += g;
                            }
                        }
                    });
                }
                Op::Scale(a, k) => self.acc(&mut grads, *a, |d| axpy(d, &g, *k)),
                Op::AddScalar(a) => self.acc(&mut grads, *a, |d| axpy(d, &g, 1.0)),
                Op::Sum(a) => {
                    let g0 = g[0];
                    self.acc(&mut grads, *a, |d| d.iter_mut().for_each(|d| *d += g0));
                }
                Op::Gather(table, indices) => {
                    let cols = node.value.cols;
                    self.acc(&mut grads, *table, |d| {
                        for (r, &i) in indices.iter().enumerate() {
                            axpy(&mut d[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols], 1.0);
                        }
                    });
                }
                Op::TileRows(a) => {
                    let cols = node.value.cols.max(1);
                    self.acc(&mut grads, *a, |d| {
                        for chunk in g.chunks(cols) {
                            axpy(d, chunk, 1.0);
                        }
                    });
                }
            }
        }
        Ok(Gradients(params))
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], i: usize) -> &'a mut [f64] {
        grads[i].get_or_insert_with(|| vec![0.0; self.nodes[i].value.len()])
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], i: usize, f: impl FnOnce(&mut [f64])) {
        if self.ng(i) {
            f(self.slot(grads, i));
        }
    }
}

fn axpy(d: &mut [f64], g: &[f64], k: f64) {
    for (d, g) in d.iter_mut().zip(g) {
        *d += k * g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor)]) -> (ParameterStore, Vec<ParamId>) {
        let mut s = ParameterStore::new();
        let ids = values
            .iter()
            .map(|(n, t)| s.add(*n, t.clone()).unwrap())
            .collect();
        (s, ids)
    }

    #[test]
    fn sigmoid_value_and_slope_at_zero() {
        let (s, ids) = store_with(&[("x", Tensor::scalar(0.0))]);
        let mut t = Tape::for_store(&s);
        let x = t.param(&s, ids[0]);
        let y = t.sigmoid(x);
        assert_eq!(t.value(y).item(), 0.5);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(ids[0]).unwrap().item(), 0.25);
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(2, 3));
        assert!(t.matmul(a, b).is_err());
        let c = t.constant(Tensor::zeros(3, 2));
        assert!(t.add(a, c).is_err());
        assert!(t.slice_cols(a, 2, 4).is_err());
        assert!(t.gather(a, &[2]).is_err());
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn log_clamps_are_counted() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(1, 3, vec![0.0, 1e-13, 0.5]).unwrap());
        let l = t.log(a);
        assert_eq!(t.log_clamps(), 2);
        assert_eq!(t.value(l).data[0], LOG_FLOOR.ln());
    }

    #[test]
    fn abs_subgradient_zero_at_origin() {
        let (s, ids) = store_with(&[("x", Tensor::new(1, 3, vec![-2.0, 0.0, 3.0]).unwrap())]);
        let mut t = Tape::for_store(&s);
        let x = t.param(&s, ids[0]);
        let a = t.abs(x);
        let y = t.sum(a);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(ids[0]).unwrap().data, vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn select_routes_gradients() {
        let (s, ids) = store_with(&[
            ("a", Tensor::new(1, 2, vec![1.0, 2.0]).unwrap()),
            ("b", Tensor::new(1, 2, vec![3.0, 4.0]).unwrap()),
        ]);
        let mut t = Tape::for_store(&s);
        let a = t.param(&s, ids[0]);
        let b = t.param(&s, ids[1]);
        let w = t.select(vec![true, false], a, b).unwrap();
        assert_eq!(t.value(w).data, vec![1.0, 4.0]);
        let y = t.sum(w);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(ids[0]).unwrap().data, vec![1.0, 0.0]);
        assert_eq!(g.get(ids[1]).unwrap().data, vec![0.0, 1.0]);
    }

    #[test]
    fn untouched_parameters_have_no_gradient() {
        let (s, ids) = store_with(&[("a", Tensor::scalar(1.0)), ("b", Tensor::scalar(1.0))]);
        let mut t = Tape::for_store(&s);
        let a = t.param(&s, ids[0]);
        let y = t.square(a);
        let g = t.backward(y).unwrap();
        assert!(g.get(ids[1]).is_none());
        assert_eq!(g.get(ids[0]).unwrap().item(), 2.0);
    }
}
