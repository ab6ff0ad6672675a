//! Minimal reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! Enough to train the adapters through a frozen toy backbone: matrix
//! products, row softmax, SiLU, column concat/slicing and the losses. Every
//! operation records its inputs; [`Tape::backward`] walks the record in
//! reverse and accumulates gradients for every node.

use std::cell::RefCell;
use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array2, Axis};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Adds a `1×n` row to every row.
    AddRow(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    Silu(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    /// Mean of squared differences, `1×1`.
    Mse(Var, Var),
    /// `Σ wᵢ·aᵢ` over `1×1` scalars.
    LinComb(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not
    /// influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &Array2<f64>) -> Array2<f64> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(like.raw_dim()))
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

pub(crate) fn softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Array2<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value[[0, 0]]
    }

    pub fn leaf(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    fn binary_shape_check(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::invalid(format!("{what}: shape {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            if va.ncols() != vb.nrows() {
                return Err(Error::invalid(format!(
                    "matmul: {:?} x {:?}",
                    va.dim(),
                    vb.dim()
                )));
            }
            va.dot(vb)
        };
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            if va.ncols() != vb.ncols() {
                return Err(Error::invalid(format!(
                    "matmul_nt: {:?} x {:?}ᵀ",
                    va.dim(),
                    vb.dim()
                )));
            }
            va.dot(&vb.t())
        };
        Ok(self.push(value, Op::MatMulNt(a, b)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check(a, b, "add")?;
        let value = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value + &nodes[b.0].value
        };
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check(a, b, "sub")?;
        let value = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value - &nodes[b.0].value
        };
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check(a, b, "mul")?;
        let value = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value * &nodes[b.0].value
        };
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vr) = (&nodes[a.0].value, &nodes[row.0].value);
            if vr.nrows() != 1 || vr.ncols() != va.ncols() {
                return Err(Error::invalid(format!(
                    "add_row: {:?} + {:?}",
                    va.dim(),
                    vr.dim()
                )));
            }
            va + vr
        };
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|v| v * k);
        self.push(value, Op::Scale(a, k))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let value = softmax_rows(&self.nodes.borrow()[a.0].value);
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn silu(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(silu);
        self.push(value, Op::Silu(a))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.0].value.view()).collect();
            concatenate(Axis(1), &views).map_err(|e| Error::invalid(format!("concat_cols: {e}")))?
        };
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.0].value;
            if start >= end || end > va.ncols() {
                return Err(Error::invalid(format!(
                    "slice_cols {start}..{end} of {} columns",
                    va.ncols()
                )));
            }
            va.slice(s![.., start..end]).to_owned()
        };
        Ok(self.push(value, Op::SliceCols(a, start, end)))
    }

    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check(a, b, "mse")?;
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let n = va.len() as f64;
            let sum: f64 = va
                .iter()
                .zip(vb.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            Array2::from_elem((1, 1), sum / n)
        };
        Ok(self.push(value, Op::Mse(a, b)))
    }

    pub fn lin_comb(&self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            if self.shape(v) != (1, 1) {
                return Err(Error::invalid("lin_comb expects 1x1 scalars"));
            }
            total += w * self.scalar(v);
        }
        Ok(self.push(
            Array2::from_elem((1, 1), total),
            Op::LinComb(terms.to_vec()),
        ))
    }

    /// Back-propagates from the `1×1` node `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[output.0].value.dim() != (1, 1) {
            return Err(Error::invalid("backward needs a scalar output"));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; nodes.len()];
        grads[output.0] = Some(Array2::ones((1, 1)));

        fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    accumulate(&mut grads, *a, g.dot(&vb.t()));
                    accumulate(&mut grads, *b, va.t().dot(&g));
                }
                Op::MatMulNt(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    accumulate(&mut grads, *a, g.dot(vb));
                    accumulate(&mut grads, *b, g.t().dot(va));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    accumulate(&mut grads, *a, &g * vb);
                    accumulate(&mut grads, *b, &g * va);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g.mapv(|v| v * k)),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let gy = &g * y;
                    let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads, *a, &gy - &(y * &dot));
                }
                Op::Silu(a) => {
                    let va = &nodes[a.0].value;
                    let d = va.mapv(silu_grad);
                    accumulate(&mut grads, *a, &g * &d);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = nodes[p.0].value.ncols();
                        accumulate(&mut grads, *p, g.slice(s![.., col..col + w]).to_owned());
                        col += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut full = Array2::zeros(nodes[a.0].value.raw_dim());
                    full.slice_mut(s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads, *a, full);
                }
                Op::Mse(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let k = 2.0 * g[[0, 0]] / va.len() as f64;
                    let d = (va - vb).mapv(|v| v * k);
                    accumulate(&mut grads, *b, -&d);
                    accumulate(&mut grads, *a, d);
                }
                Op::LinComb(terms) => {
                    for &(v, w) in terms {
                        accumulate(&mut grads, v, g.mapv(|x| x * w));
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Named parameter tensors, ordered by name.
pub type ParamStore = BTreeMap<String, Array2<f64>>;

/// Leaves for a set of named parameters on one tape.
#[derive(Debug, Default, Clone)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn bind(tape: &Tape, store: &ParamStore) -> Self {
        let vars = store
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    pub fn extend(&mut self, other: ParamVars) {
        self.vars.extend(other.vars);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) -> bool {
        a.iter()
            .zip(b.iter())
            .all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
    }

    fn chain(
        a: &Array2<f64>,
        b: &Array2<f64>,
        target: &Array2<f64>,
    ) -> (f64, Array2<f64>, Array2<f64>) {
        let tape = Tape::new();
        let va = tape.leaf(a.clone());
        let vb = tape.leaf(b.clone());
        let bias = tape.leaf(array![[0.1, -0.2]]);
        let t = tape.leaf(target.clone());
        let ab = tape.matmul(va, vb).unwrap();
        let ab = tape.add_row(ab, bias).unwrap();
        let sm = tape.softmax_rows(ab);
        let act = tape.silu(ab);
        let both = tape.concat_cols(&[sm, act]).unwrap();
        let left = tape.slice_cols(both, 1, 3).unwrap();
        let prod = tape.mul(left, sm).unwrap();
        let nt = tape.matmul_nt(prod, act).unwrap();
        let nt = tape.scale(nt, 0.7);
        let l1 = tape.mse(nt, t).unwrap();
        let diff = tape.sub(sm, act).unwrap();
        let sum = tape.add(diff, sm).unwrap();
        let zero = tape.leaf(Array2::zeros((2, 2)));
        let l2 = tape.mse(sum, zero).unwrap();
        let loss = tape.lin_comb(&[(l1, 0.4), (l2, 0.6)]).unwrap();
        let g = tape.backward(loss).unwrap();
        (
            tape.scalar(loss),
            g.get(va).unwrap().clone(),
            g.get(vb).unwrap().clone(),
        )
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let a = array![[0.3, -1.2, 0.5], [0.9, 0.1, -0.4]];
        let b = array![[0.2, 0.7], [-0.5, 0.3], [1.1, -0.8]];
        let target = array![[0.1, 0.2], [0.3, -0.1]];
        let (_, ga, gb) = chain(&a, &b, &target);
        let na = numeric_grad(&a, |x| chain(x, &b, &target).0);
        let nb = numeric_grad(&b, |x| chain(&a, x, &target).0);
        assert!(close(&ga, &na, 1e-6), "{ga:?} vs {na:?}");
        assert!(close(&gb, &nb, 1e-6), "{gb:?} vs {nb:?}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let m = array![[1000.0, 1001.0, 999.0], [-3.0, 0.0, 2.0]];
        let s = softmax_rows(&m);
        for row in s.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let tape = Tape::new();
        let a = tape.leaf(Array2::zeros((2, 3)));
        let b = tape.leaf(Array2::zeros((2, 2)));
        assert!(tape.matmul(a, b).is_err());
        assert!(tape.add(a, b).is_err());
        assert!(tape.backward(a).is_err());
    }
}
