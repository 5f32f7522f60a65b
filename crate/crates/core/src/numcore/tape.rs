//! Dynamically recorded reverse-mode differentiation over small vectors.
//!
//! A [`Graph`] borrows one flat parameter vector. Every operation appends a
//! node holding its value; [`Graph::backward`] walks the nodes in reverse and
//! accumulates adjoints, depositing parameter adjoints into a dense gradient
//! the same length as the parameter vector.
//!
//! ```
//! use latentrl::numcore::{grad, Graph};
//!
//! // loss(p) = p0^2 + p1^2
//! let (value, g) = grad(&[1.0, -2.0], |g: &mut Graph| {
//!     let p = g.param(0, 2);
//!     let sq = g.mul(p, p);
//!     Ok(g.sum(sq))
//! })
//! .unwrap();
//! assert_eq!(value, 5.0);
//! assert_eq!(g, vec![2.0, -4.0]);
//! ```

use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param {
        offset: usize,
    },
    /// `W x + b`, `W` row-major `rows × cols` at `w`, `b` at `b`.
    Affine {
        x: Var,
        w: usize,
        b: usize,
        cols: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    /// Multiply a vector by a scalar node.
    ScaleBy(Var, Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Dot(Var, Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Pick(Var, usize),
    LogSoftmax(Var),
    Clamp(Var, f64, f64),
    Min(Var, Var),
    MeanOf(Vec<Var>),
    Broadcast(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Param { .. } => "param",
            Op::Affine { .. } => "affine",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::ScaleBy(..) => "scale_by",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sum(_) => "sum",
            Op::Dot(..) => "dot",
            Op::Concat(_) => "concat",
            Op::Slice(..) => "slice",
            Op::Pick(..) => "pick",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Clamp(..) => "clamp",
            Op::Min(..) => "min",
            Op::MeanOf(_) => "mean_of",
            Op::Broadcast(_) => "broadcast",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Computation tape bound to a parameter vector.
#[derive(Debug)]
pub struct Graph<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p [f64] {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a length-one node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.len(), 1, "scalar() on a vector node");
        val[0]
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Const)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.push(vec![value], Op::Const)
    }

    /// Parameter slice `params[offset..offset + len]` as a node.
    pub fn param(&mut self, offset: usize, len: usize) -> Var {
        let value = self.params[offset..offset + len].to_vec();
        self.push(value, Op::Param { offset })
    }

    /// `W x + b` where `W` (`rows × cols`, row-major) starts at `w` and `b`
    /// (length `rows`) at `b` in the parameter vector.
    pub fn affine(&mut self, x: Var, w: usize, b: usize, rows: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let cols = xv.len();
        let weights = &self.params[w..w + rows * cols];
        let bias = &self.params[b..b + rows];
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &weights[r * cols..(r + 1) * cols];
            let mut acc = bias[r];
            for (wi, xi) in row.iter().zip(xv) {
                acc += wi * xi;
            }
            out.push(acc);
        }
        self.push(out, Op::Affine { x, w, b, cols })
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.len(), bv.len(), "shape mismatch in elementwise op");
        av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect()
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.nodes[a.0].value.iter().map(|x| f(*x)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x + c);
        self.push(v, Op::Shift(a))
    }

    /// Vector `a` times scalar node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let v = self.map(a, |x| x * sv);
        self.push(v, Op::ScaleBy(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(vec![s], Op::Sum(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.len(), bv.len(), "shape mismatch in dot");
        let s = av.iter().zip(bv).map(|(x, y)| x * y).sum();
        self.push(vec![s], Op::Dot(a, b))
    }

    /// Squared Euclidean norm.
    pub fn sq_norm(&mut self, a: Var) -> Var {
        self.dot(a, a)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut v = Vec::new();
        for p in parts {
            v.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(v, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.nodes[a.0].value[start..start + len].to_vec();
        self.push(v, Op::Slice(a, start))
    }

    /// Element `i` of `a` as a scalar node.
    pub fn pick(&mut self, a: Var, i: usize) -> Var {
        let v = self.nodes[a.0].value[i];
        self.push(vec![v], Op::Pick(a, i))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = log_softmax(&self.nodes[a.0].value);
        self.push(v, Op::LogSoftmax(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.map(a, |x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Elementwise minimum. Ties route the adjoint to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| if x <= y { x } else { y });
        self.push(v, Op::Min(a, b))
    }

    /// Elementwise mean of equally sized vectors.
    pub fn mean_of(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "mean_of needs at least one input");
        let n = self.nodes[parts[0].0].value.len();
        let mut v = vec![0.0; n];
        for p in parts {
            for (acc, x) in v.iter_mut().zip(&self.nodes[p.0].value) {
                *acc += x;
            }
        }
        let inv = 1.0 / parts.len() as f64;
        for x in &mut v {
            *x *= inv;
        }
        self.push(v, Op::MeanOf(parts.to_vec()))
    }

    /// Repeat a scalar node `n` times.
    pub fn broadcast(&mut self, s: Var, n: usize) -> Var {
        let v = vec![self.scalar(s); n];
        self.push(v, Op::Broadcast(s))
    }

    /// Sum of scalar nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        match terms {
            [] => self.constant_scalar(0.0),
            [first, rest @ ..] => rest.iter().fold(*first, |acc, t| self.add(acc, *t)),
        }
    }

    /// First node whose value is not finite.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| n.value.iter().any(|x| !x.is_finite()))
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Reverse sweep from scalar `root`; returns d root / d params.
    pub fn backward(&self, root: Var) -> Vec<f64> {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward from non-scalar");
        let mut param_grad = vec![0.0; self.params.len()];
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); root.0 + 1];
        adj[root.0] = vec![1.0];

        fn acc(adj: &mut [Vec<f64>], target: Var, len: usize) -> &mut Vec<f64> {
            let slot = &mut adj[target.0];
            if slot.is_empty() {
                slot.resize(len, 0.0);
            }
            slot
        }

        for i in (0..=root.0).rev() {
            if adj[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut adj[i]);
            let node = &self.nodes[i];
            match &node.op {
                Op::Const => {}
                Op::Param { offset } => {
                    for (k, gk) in g.iter().enumerate() {
                        param_grad[offset + k] += gk;
                    }
                }
                Op::Affine { x, w, b, cols } => {
                    let xv = &self.nodes[x.0].value;
                    let weights = &self.params[*w..*w + g.len() * cols];
                    for (r, gr) in g.iter().enumerate() {
                        param_grad[b + r] += gr;
                        if *gr == 0.0 {
                            continue;
                        }
                        let wrow = &mut param_grad[w + r * cols..w + (r + 1) * cols];
                        for (pw, xi) in wrow.iter_mut().zip(xv) {
                            *pw += gr * xi;
                        }
                    }
                    let gx = acc(&mut adj, *x, *cols);
                    for (r, gr) in g.iter().enumerate() {
                        if *gr == 0.0 {
                            continue;
                        }
                        let row = &weights[r * cols..(r + 1) * cols];
                        for (gxi, wi) in gx.iter_mut().zip(row) {
                            *gxi += gr * wi;
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (t, sign) in [(*a, 1.0), (*b, 1.0)] {
                        let ga = acc(&mut adj, t, g.len());
                        for (x, y) in ga.iter_mut().zip(&g) {
                            *x += sign * y;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    for (t, sign) in [(*a, 1.0), (*b, -1.0)] {
                        let ga = acc(&mut adj, t, g.len());
                        for (x, y) in ga.iter_mut().zip(&g) {
                            *x += sign * y;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    {
                        let ga = acc(&mut adj, *a, g.len());
                        for ((x, y), bi) in ga.iter_mut().zip(&g).zip(bv) {
                            *x += y * bi;
                        }
                    }
                    let gb = acc(&mut adj, *b, g.len());
                    for ((x, y), ai) in gb.iter_mut().zip(&g).zip(av) {
                        *x += y * ai;
                    }
                }
                Op::Scale(a, c) => {
                    let ga = acc(&mut adj, *a, g.len());
                    for (x, y) in ga.iter_mut().zip(&g) {
                        *x += c * y;
                    }
                }
                Op::Shift(a) => {
                    let ga = acc(&mut adj, *a, g.len());
                    for (x, y) in ga.iter_mut().zip(&g) {
                        *x += y;
                    }
                }
                Op::ScaleBy(a, s) => {
                    let sv = self.nodes[s.0].value[0];
                    let av = &self.nodes[a.0].value;
                    let ds: f64 = g.iter().zip(av).map(|(y, x)| y * x).sum();
                    {
                        let ga = acc(&mut adj, *a, g.len());
                        for (x, y) in ga.iter_mut().zip(&g) {
                            *x += sv * y;
                        }
                    }
                    acc(&mut adj, *s, 1)[0] += ds;
                }
                Op::Tanh(a) => {
                    let ga = acc(&mut adj, *a, g.len());
                    for ((x, y), out) in ga.iter_mut().zip(&g).zip(&node.value) {
                        *x += y * (1.0 - out * out);
                    }
                }
                Op::Exp(a) => {
                    let ga = acc(&mut adj, *a, g.len());
                    for ((x, y), out) in ga.iter_mut().zip(&g).zip(&node.value) {
                        *x += y * out;
                    }
                }
                Op::Log(a) => {
                    let av = &self.nodes[a.0].value;
                    let ga = acc(&mut adj, *a, g.len());
                    for ((x, y), inp) in ga.iter_mut().zip(&g).zip(av) {
                        *x += y / inp;
                    }
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.len();
                    let ga = acc(&mut adj, *a, n);
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
                Op::Dot(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    {
                        let ga = acc(&mut adj, *a, av.len());
                        for (x, bi) in ga.iter_mut().zip(bv) {
                            *x += g[0] * bi;
                        }
                    }
                    let gb = acc(&mut adj, *b, bv.len());
                    for (x, ai) in gb.iter_mut().zip(av) {
                        *x += g[0] * ai;
                    }
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        let gp = acc(&mut adj, *p, n);
                        for (x, y) in gp.iter_mut().zip(&g[start..start + n]) {
                            *x += y;
                        }
                        start += n;
                    }
                }
                Op::Slice(a, start) => {
                    let n = self.nodes[a.0].value.len();
                    let ga = acc(&mut adj, *a, n);
                    for (x, y) in ga[*start..*start + g.len()].iter_mut().zip(&g) {
                        *x += y;
                    }
                }
                Op::Pick(a, idx) => {
                    let n = self.nodes[a.0].value.len();
                    acc(&mut adj, *a, n)[*idx] += g[0];
                }
                Op::LogSoftmax(a) => {
                    // d/dx_j = g_j - softmax_j * sum(g)
                    let total: f64 = g.iter().sum();
                    let ga = acc(&mut adj, *a, g.len());
                    for ((x, y), out) in ga.iter_mut().zip(&g).zip(&node.value) {
                        *x += y - out.exp() * total;
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let av = &self.nodes[a.0].value;
                    let ga = acc(&mut adj, *a, g.len());
                    for ((x, y), inp) in ga.iter_mut().zip(&g).zip(av) {
                        if *inp >= *lo && *inp <= *hi {
                            *x += y;
                        }
                    }
                }
                Op::Min(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let take_a: Vec<bool> = av.iter().zip(bv).map(|(x, y)| x <= y).collect();
                    {
                        let ga = acc(&mut adj, *a, g.len());
                        for ((x, y), t) in ga.iter_mut().zip(&g).zip(&take_a) {
                            if *t {
                                *x += y;
                            }
                        }
                    }
                    let gb = acc(&mut adj, *b, g.len());
                    for ((x, y), t) in gb.iter_mut().zip(&g).zip(&take_a) {
                        if !*t {
                            *x += y;
                        }
                    }
                }
                Op::MeanOf(parts) => {
                    let inv = 1.0 / parts.len() as f64;
                    for p in parts {
                        let gp = acc(&mut adj, *p, g.len());
                        for (x, y) in gp.iter_mut().zip(&g) {
                            *x += inv * y;
                        }
                    }
                }
                Op::Broadcast(s) => {
                    let total: f64 = g.iter().sum();
                    acc(&mut adj, *s, 1)[0] += total;
                }
            }
        }
        param_grad
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

/// Value and exact gradient of a scalar loss recorded on a fresh graph.
///
/// Fails with [`Error::NonFinite`] naming the first offending node if any
/// intermediate value is NaN or infinite.
pub fn grad<F>(params: &[f64], loss: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let root = loss(&mut g)?;
    if let Some((node, op)) = g.first_non_finite() {
        return Err(Error::NonFinite { node, op });
    }
    let value = g.scalar(root);
    let gradient = g.backward(root);
    Ok((value, gradient))
}

/// Loss value only.
pub fn evaluate<F>(params: &[f64], loss: F) -> Result<f64>
where
    F: FnOnce(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let root = loss(&mut g)?;
    Ok(g.scalar(root))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_loss_has_zero_gradient() {
        let (v, gr) = grad(&[0.3, 0.4], |g| Ok(g.constant_scalar(7.0))).unwrap();
        assert_eq!(v, 7.0);
        assert_eq!(gr, vec![0.0, 0.0]);
    }

    #[test]
    fn affine_matches_hand_product() {
        // W = [[1, 2], [3, 4]], b = [0.5, -0.5]
        let params = [1.0, 2.0, 3.0, 4.0, 0.5, -0.5];
        let mut g = Graph::new(&params);
        let x = g.constant(vec![1.0, -1.0]);
        let y = g.affine(x, 0, 4, 2);
        assert_eq!(g.value(y), &[-0.5, -1.5]);
    }

    #[test]
    fn non_finite_node_is_reported() {
        let err = grad(&[0.0], |g| {
            let p = g.param(0, 1);
            let l = g.ln(p);
            Ok(g.sum(l))
        })
        .unwrap_err();
        match err {
            Error::NonFinite { op, .. } => assert_eq!(op, "log"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn log_softmax_gradient_sums_to_zero_under_uniform_upstream() {
        let params = [0.2, -1.0, 3.0];
        let (_, gr) = grad(&params, |g| {
            let p = g.param(0, 3);
            let ls = g.log_softmax(p);
            Ok(g.sum(ls))
        })
        .unwrap();
        // d/dx sum_j log_softmax_j = 1 - 3 softmax
        let s: Vec<f64> = log_softmax(&params).iter().map(|x| x.exp()).collect();
        for (gi, si) in gr.iter().zip(&s) {
            assert!((gi - (1.0 - 3.0 * si)).abs() < 1e-12);
        }
    }
}
