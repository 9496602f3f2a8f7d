use std::rc::Rc;

use super::param::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, softmax_rows, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Marks a gathered output position as zero.
pub const ZERO: usize = usize::MAX;

/// Elementwise functions with known derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Exp,
    Ln,
    Relu,
    Softplus,
    Scale(f64),
    /// `1 / sqrt(x + eps)`.
    InvSqrt(f64),
    /// `(eˣ − 1) / x`, continuous at zero.
    Phi1,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Relu => x.max(0.0),
            Unary::Softplus => {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
            Unary::Scale(s) => s * x,
            Unary::InvSqrt(eps) => 1.0 / (x + eps).sqrt(),
            Unary::Phi1 => phi1(x),
        }
    }

    /// Derivative at input `x` with output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Softplus => 1.0 / (1.0 + (-x).exp()),
            Unary::Scale(s) => s,
            Unary::InvSqrt(_) => -0.5 * y * y * y,
            Unary::Phi1 => {
                if x.abs() < 1e-3 {
                    0.5 + x / 3.0 + x * x / 8.0 + x * x * x / 30.0
                } else {
                    (x * x.exp() - x.exp_m1()) / (x * x)
                }
            }
        }
    }
}

/// `(eˣ − 1)/x` with the analytic limit 1 substituted below `1e-8`.
pub fn phi1(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0
    } else {
        x.exp_m1() / x
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Unary(Var, Unary),
    SoftmaxRows(Var),
    Sum(Var),
    Gather { src: Var, index: Rc<[usize]> },
    Concat { parts: Vec<Var>, axis: Axis },
    DepthwiseConv {
        kernels: Var,
        input: Var,
        seq_len: usize,
        dilation: usize,
    },
    SelectiveScan {
        abar: Var,
        bbar: Var,
        c: Var,
        u: Var,
        seq_len: usize,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    param: Option<usize>,
    needs_grad: bool,
}

/// Records primitive operations in topological order for reverse-mode
/// differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// One tape variable per entry of a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn get(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    pub fn by_name(&self, store: &ParamStore, name: &str) -> Result<Var> {
        Ok(self.vars[store.index_of(name)?])
    }
}

/// Adjoints for every node reached by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that is not differentiated.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// A free differentiable leaf not tied to any stored parameter.
    pub fn leaf(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Registers every parameter of `store` as a leaf; buffers are bound as
    /// constants.
    pub fn bind(&mut self, store: &ParamStore) -> Bindings {
        let vars = store
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let v = self.push(p.value.clone(), Op::Leaf, p.trainable());
                self.nodes[v.0].param = Some(i);
                v
            })
            .collect();
        Bindings { vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: va.shape(),
                right: vb.shape(),
            });
        }
        let mut out = Matrix::zeros(va.rows(), vb.cols());
        matmul_into(va, vb, &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let out = self.value(a).map(|x| f.apply(x));
        let ng = self.needs(a);
        self.push(out, Op::Unary(a, f), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Unary::Scale(s))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let ng = self.needs(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::filled(1, 1, self.value(a).sum());
        let ng = self.needs(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Output entry `k` (row-major in a `rows × cols` result) copies source
    /// entry `index[k]`, or is zero when `index[k] == ZERO`.
    pub fn gather(&mut self, src: Var, rows: usize, cols: usize, index: Rc<[usize]>) -> Result<Var> {
        if index.len() != rows * cols {
            return Err(Error::Autodiff(format!(
                "gather index has {} entries for a {rows}x{cols} output",
                index.len()
            )));
        }
        let source = self.value(src).data();
        if let Some(&bad) = index.iter().find(|&&i| i != ZERO && i >= source.len()) {
            return Err(Error::Autodiff(format!(
                "gather index {bad} out of range for {} source entries",
                source.len()
            )));
        }
        let data = index
            .iter()
            .map(|&i| if i == ZERO { 0.0 } else { source[i] })
            .collect();
        let out = Matrix::from_vec(rows, cols, data)?;
        let ng = self.needs(src);
        Ok(self.push(out, Op::Gather { src, index }, ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).shape();
        let index: Rc<[usize]> = (0..c)
            .flat_map(|i| (0..r).map(move |j| j * c + i))
            .collect();
        self.gather(a, c, r, index)
    }

    /// Rows `start..start + count`.
    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let c = self.value(a).cols();
        let index: Rc<[usize]> = (start * c..(start + count) * c).collect();
        self.gather(a, count, c, index)
    }

    /// Columns `start..start + count`.
    pub fn slice_cols(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let (r, c) = self.value(a).shape();
        if start + count > c {
            return Err(Error::Autodiff(format!(
                "column slice {start}..{} exceeds {c} columns",
                start + count
            )));
        }
        let index: Rc<[usize]> = (0..r)
            .flat_map(|i| (start..start + count).map(move |j| i * c + j))
            .collect();
        self.gather(a, r, count, index)
    }

    /// Reinterprets the row-major data under a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let index: Rc<[usize]> = (0..rows * cols).collect();
        self.gather(a, rows, cols, index)
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let values: Vec<Matrix> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let out = match axis {
            Axis::Cols => Matrix::hstack(&values)?,
            Axis::Rows => Matrix::vstack(&values)?,
        };
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Causal depthwise convolution over stacked sequences.
    ///
    /// `input` is `(S·seq_len) × D`, `kernels` is `H × K` with `D = H·P`;
    /// column `c` uses kernel row `c / P`:
    /// `y[s,t,c] = Σ_k w[h,k] · u[s, t − k·dilation, c]`.
    pub fn depthwise_conv(&mut self, kernels: Var, input: Var, seq_len: usize, dilation: usize) -> Result<Var> {
        let w = self.value(kernels);
        let u = self.value(input);
        let (heads, ksize) = w.shape();
        let (rows, width) = u.shape();
        if seq_len == 0 || rows % seq_len != 0 || heads == 0 || width % heads != 0 || dilation == 0 {
            return Err(Error::Autodiff(format!(
                "depthwise conv: {rows}x{width} input, {heads}x{ksize} kernels, seq_len {seq_len}, dilation {dilation}"
            )));
        }
        let p = width / heads;
        let mut out = Matrix::zeros(rows, width);
        for s in 0..rows / seq_len {
            let base = s * seq_len;
            for t in 0..seq_len {
                for k in 0..ksize {
                    let Some(src) = t.checked_sub(k * dilation) else {
                        break;
                    };
                    let urow = u.row(base + src);
                    let orow = out.row_mut(base + t);
                    for c in 0..width {
                        orow[c] += w[(c / p, k)] * urow[c];
                    }
                }
            }
        }
        let ng = self.needs(kernels) || self.needs(input);
        Ok(self.push(
            out,
            Op::DepthwiseConv {
                kernels,
                input,
                seq_len,
                dilation,
            },
            ng,
        ))
    }

    /// Diagonal selective scan over stacked sequences.
    ///
    /// `abar`, `bbar` are `R × (D·N)` (column `d·N + n`), `c` is `R × N`,
    /// `u` is `R × D`; for each sequence the state starts at zero,
    /// `y_t[d] = Σ_n c_t[n] (h_{t−1}[d,n] + bbar_t[d,n] u_t[d])` and then
    /// `h_t = abar_t ⊙ h_{t−1} + bbar_t · u_t`. Reading the state before the
    /// step-`t` transition gives `m_ij = c_iᵀ (Π_{k=j+1}^{i−1} Ā_k) b̄_j`.
    pub fn selective_scan(&mut self, abar: Var, bbar: Var, c: Var, u: Var, seq_len: usize) -> Result<Var> {
        let (va, vb, vc, vu) = (self.value(abar), self.value(bbar), self.value(c), self.value(u));
        let (rows, width) = vu.shape();
        let state = vc.cols();
        if va.shape() != (rows, width * state)
            || vb.shape() != va.shape()
            || vc.rows() != rows
            || seq_len == 0
            || rows % seq_len != 0
        {
            return Err(Error::Autodiff(format!(
                "selective scan: abar {:?}, bbar {:?}, c {:?}, u {:?}, seq_len {seq_len}",
                va.shape(),
                vb.shape(),
                vc.shape(),
                vu.shape()
            )));
        }
        let mut out = Matrix::zeros(rows, width);
        for s in 0..rows / seq_len {
            let base = s * seq_len;
            for d in 0..width {
                for n in 0..state {
                    let col = d * state + n;
                    let mut h = 0.0;
                    for t in base..base + seq_len {
                        let inject = vb[(t, col)] * vu[(t, d)];
                        out[(t, d)] += vc[(t, n)] * (h + inject);
                        h = va[(t, col)] * h + inject;
                    }
                }
            }
        }
        let ng = [abar, bbar, c, u].iter().any(|&v| self.needs(v));
        Ok(self.push(
            out,
            Op::SelectiveScan {
                abar,
                bbar,
                c,
                u,
                seq_len,
            },
            ng,
        ))
    }

    /// Reverse sweep from a 1×1 `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Autodiff(format!(
                "loss must be 1x1, got {:?}",
                lv.shape()
            )));
        }
        if !self.needs(loss) {
            return Err(Error::Autodiff(
                "loss is detached from every differentiable leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::ones(1, 1));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds each bound parameter's adjoint into
    /// its `grad` field.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            let (Some(p), Some(g)) = (node.param, grads.grads[idx].as_ref()) else {
                continue;
            };
            let param = &mut store.params_mut()[p];
            if param.trainable() {
                param.grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Matrix>], v: Var) -> &'g mut Matrix {
        grads[v.0].get_or_insert_with(|| {
            let (r, c) = self.nodes[v.0].value.shape();
            Matrix::zeros(r, c)
        })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        macro_rules! acc {
            ($v:expr) => {
                self.slot(grads, $v)
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    matmul_nt_into(g, self.value(*b), acc!(*a));
                }
                if needs(*b) {
                    matmul_tn_into(self.value(*a), g, acc!(*b));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        acc!(v).add_assign(g).expect("shapes fixed at record time");
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let gb = self.value(*b);
                    let ga = acc!(*a);
                    for ((o, &x), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(gb.data()) {
                        *o += x * y;
                    }
                }
                if needs(*b) {
                    let va = self.value(*a);
                    let gb = acc!(*b);
                    for ((o, &x), &y) in gb.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *o += x * y;
                    }
                }
            }
            Op::Unary(a, f) => {
                if needs(*a) {
                    let x = self.value(*a);
                    let y = &node.value;
                    let ga = acc!(*a);
                    for (((o, &gi), &xi), &yi) in ga
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(x.data())
                        .zip(y.data())
                    {
                        *o += gi * f.derivative(xi, yi);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if needs(*a) {
                    let y = &node.value;
                    let ga = acc!(*a);
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((o, &yi), &gi) in ga.row_mut(i).iter_mut().zip(yr).zip(gr) {
                            *o += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let s = g[(0, 0)];
                    for o in acc!(*a).data_mut() {
                        *o += s;
                    }
                }
            }
            Op::Gather { src, index } => {
                if needs(*src) {
                    let gs = acc!(*src).data_mut();
                    for (&i, &gi) in index.iter().zip(g.data()) {
                        if i != ZERO {
                            gs[i] += gi;
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.value(p).shape();
                    if needs(p) {
                        let gp = acc!(p);
                        match axis {
                            Axis::Cols => {
                                for i in 0..pr {
                                    for (o, &x) in gp.row_mut(i).iter_mut().zip(&g.row(i)[offset..offset + pc]) {
                                        *o += x;
                                    }
                                }
                            }
                            Axis::Rows => {
                                for i in 0..pr {
                                    for (o, &x) in gp.row_mut(i).iter_mut().zip(g.row(offset + i)) {
                                        *o += x;
                                    }
                                }
                            }
                        }
                    }
                    offset += match axis {
                        Axis::Cols => pc,
                        Axis::Rows => pr,
                    };
                }
            }
            Op::DepthwiseConv {
                kernels,
                input,
                seq_len,
                dilation,
            } => {
                let w = self.value(*kernels);
                let u = self.value(*input);
                let (heads, ksize) = w.shape();
                let (rows, width) = u.shape();
                let p = width / heads;
                let mut gw = Matrix::zeros(heads, ksize);
                let mut gu = Matrix::zeros(rows, width);
                for s in 0..rows / seq_len {
                    let base = s * seq_len;
                    for t in 0..*seq_len {
                        for k in 0..ksize {
                            let Some(src) = t.checked_sub(k * dilation) else {
                                break;
                            };
                            let grow = g.row(base + t);
                            for c in 0..width {
                                gw[(c / p, k)] += grow[c] * u[(base + src, c)];
                                gu[(base + src, c)] += grow[c] * w[(c / p, k)];
                            }
                        }
                    }
                }
                if needs(*kernels) {
                    acc!(*kernels).add_assign(&gw).expect("kernel shape");
                }
                if needs(*input) {
                    acc!(*input).add_assign(&gu).expect("input shape");
                }
            }
            Op::SelectiveScan {
                abar,
                bbar,
                c,
                u,
                seq_len,
            } => {
                let (va, vb, vc, vu) = (self.value(*abar), self.value(*bbar), self.value(*c), self.value(*u));
                let (rows, width) = vu.shape();
                let state = vc.cols();
                let mut ga = Matrix::zeros(rows, width * state);
                let mut gb = Matrix::zeros(rows, width * state);
                let mut gc = Matrix::zeros(rows, state);
                let mut gu = Matrix::zeros(rows, width);
                let mut h = vec![0.0; *seq_len];
                for s in 0..rows / seq_len {
                    let base = s * seq_len;
                    for d in 0..width {
                        for n in 0..state {
                            let col = d * state + n;
                            let mut prev = 0.0;
                            for (i, hi) in h.iter_mut().enumerate() {
                                let t = base + i;
                                prev = va[(t, col)] * prev + vb[(t, col)] * vu[(t, d)];
                                *hi = prev;
                            }
                            // carry = ∂loss/∂h_t (h_t feeds y_{t+1} and h_{t+1}).
                            let mut carry = 0.0;
                            for i in (0..*seq_len).rev() {
                                let t = base + i;
                                let gy = g[(t, d)];
                                let hprev = if i == 0 { 0.0 } else { h[i - 1] };
                                let inject = vb[(t, col)] * vu[(t, d)];
                                gc[(t, n)] += gy * (hprev + inject);
                                let gp = gy * vc[(t, n)];
                                let g_inject = gp + carry;
                                ga[(t, col)] += carry * hprev;
                                gb[(t, col)] += g_inject * vu[(t, d)];
                                gu[(t, d)] += g_inject * vb[(t, col)];
                                carry = gp + carry * va[(t, col)];
                            }
                        }
                    }
                }
                for (v, gm) in [(*abar, ga), (*bbar, gb), (*c, gc), (*u, gu)] {
                    if needs(v) {
                        acc!(v).add_assign(&gm).expect("scan operand shape");
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Checks the tape gradient of `build(x)` summed against a fixed random
    /// weighting, for a single leaf `x`.
    fn check_unary_leaf(x0: Matrix, build: impl Fn(&mut Tape, Var) -> Var, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe = {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone());
            let y = build(&mut t, x);
            let s = t.value(y).shape();
            rand_matrix(s.0, s.1, &mut rng)
        };
        let eval = |x: &Matrix| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let y = build(&mut t, xv);
            t.value(y).hadamard(&probe).unwrap().sum()
        };
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let y = build(&mut t, x);
        let p = t.constant(probe.clone());
        let w = t.mul(y, p).unwrap();
        let loss = t.sum(w);
        let grads = t.backward(loss).unwrap();
        let analytic = grads.get(x).unwrap().clone();
        let numeric = finite_diff_grad(eval, &x0, 1e-6);
        let err = analytic.max_abs_diff(&numeric) / (numeric.max_abs() + 1e-12);
        assert!(err < tol, "relative error {err}");
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let theta = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let x = t.leaf(theta.clone());
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &theta.scale(2.0));
    }

    #[test]
    fn linear_sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_fn(3, 2, |i, j| (i + j) as f64));
        let loss = t.sum(x);
        assert_eq!(t.backward(loss).unwrap().get(x).unwrap(), &Matrix::ones(3, 2));
    }

    #[test]
    fn non_scalar_and_detached_losses_are_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::ones(2, 2));
        assert!(t.backward(x).is_err());
        let c = t.constant(Matrix::ones(1, 1));
        assert!(t.backward(c).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let a = t.leaf(rand_matrix(3, 4, &mut rng));
        let b = t.leaf(rand_matrix(4, 2, &mut rng));
        let ab = t.matmul(a, b).unwrap();
        let s = t.softmax_rows(ab);
        let z = t.constant(Matrix::zeros(3, 2));
        let w = t.mul(s, z).unwrap();
        let loss = t.sum(w);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().max_abs(), 0.0);
        assert_eq!(g.get(b).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = rand_matrix(4, 4, &mut rng);
        let grad_of = |which: u8| {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone());
            let f = {
                let e = t.exp(x);
                t.sum(e)
            };
            let g = {
                let s = t.softmax_rows(x);
                let sq = t.mul(s, x).unwrap();
                t.sum(sq)
            };
            let loss = match which {
                0 => f,
                1 => g,
                _ => t.add(f, g).unwrap(),
            };
            t.backward(loss).unwrap().get(x).unwrap().clone()
        };
        let lhs = grad_of(2);
        let rhs = grad_of(0).add(&grad_of(1)).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn primitive_backward_rules_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = rand_matrix(4, 6, &mut rng);
        let w = rand_matrix(6, 3, &mut rng);
        check_unary_leaf(x0.clone(), |t, x| {
            let c = t.constant(w.clone());
            t.matmul(x, c).unwrap()
        }, 1e-7);
        check_unary_leaf(x0.clone(), |t, x| t.softmax_rows(x), 1e-7);
        for f in [Unary::Exp, Unary::Softplus, Unary::Scale(-1.7), Unary::Phi1] {
            check_unary_leaf(x0.clone(), |t, x| t.unary(x, f), 1e-7);
        }
        let pos = x0.map(|v| v.abs() + 0.5);
        check_unary_leaf(pos.clone(), |t, x| t.unary(x, Unary::Ln), 1e-7);
        check_unary_leaf(pos, |t, x| t.unary(x, Unary::InvSqrt(1e-5)), 1e-7);
        check_unary_leaf(x0.clone(), |t, x| t.transpose(x).unwrap(), 1e-8);
        check_unary_leaf(x0.clone(), |t, x| {
            let a = t.slice_cols(x, 1, 3).unwrap();
            let b = t.slice_rows(x, 2, 2).unwrap();
            let bt = t.transpose(b).unwrap();
            let c = t.concat(&[a, x], Axis::Cols).unwrap();
            let head = t.slice_rows(bt, 0, 3).unwrap();
            let d = t.concat(&[bt, head], Axis::Rows).unwrap();
            let cd = t.matmul(c, d).unwrap();
            t.mul(cd, cd).unwrap()
        }, 1e-7);
    }

    #[test]
    fn phi1_derivative_is_smooth_through_zero() {
        let tiny = Matrix::row_vector(&[-2e-3, -1e-4, 0.0, 3e-9, 1e-4, 2e-3]);
        check_unary_leaf(tiny, |t, x| t.unary(x, Unary::Phi1), 1e-6);
    }

    #[test]
    fn depthwise_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u0 = rand_matrix(12, 4, &mut rng);
        let k0 = rand_matrix(2, 3, &mut rng);
        check_unary_leaf(u0.clone(), |t, u| {
            let k = t.constant(k0.clone());
            t.depthwise_conv(k, u, 6, 2).unwrap()
        }, 1e-7);
        check_unary_leaf(k0, |t, k| {
            let u = t.constant(u0.clone());
            t.depthwise_conv(k, u, 6, 2).unwrap()
        }, 1e-7);
    }

    #[test]
    fn selective_scan_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (rows, d, n, l) = (10, 3, 2, 5);
        let a0 = Matrix::from_fn(rows, d * n, |_, _| rng.random_range(0.2..0.95));
        let b0 = rand_matrix(rows, d * n, &mut rng);
        let c0 = rand_matrix(rows, n, &mut rng);
        let u0 = rand_matrix(rows, d, &mut rng);
        let operands = [a0.clone(), b0.clone(), c0.clone(), u0.clone()];
        for which in 0..4 {
            let ops = operands.clone();
            check_unary_leaf(operands[which].clone(), move |t, x| {
                let vars: Vec<Var> = (0..4)
                    .map(|i| if i == which { x } else { t.constant(ops[i].clone()) })
                    .collect();
                t.selective_scan(vars[0], vars[1], vars[2], vars[3], l).unwrap()
            }, 1e-7);
        }
    }

    #[test]
    fn gather_rejects_bad_indices() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::ones(2, 2));
        assert!(t.gather(x, 1, 2, Rc::from(vec![0, 4])).is_err());
        assert!(t.gather(x, 1, 2, Rc::from(vec![0])).is_err());
        let z = t.gather(x, 1, 2, Rc::from(vec![ZERO, 3])).unwrap();
        assert_eq!(t.value(z).data(), &[0.0, 1.0]);
    }

    #[test]
    fn forward_values_are_reproducible() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut t = Tape::new();
            let a = t.leaf(rand_matrix(5, 5, &mut rng));
            let s = t.softmax_rows(a);
            let e = t.matmul(s, a).unwrap();
            t.value(e).clone()
        };
        assert_eq!(build().data(), build().data());
    }
}
