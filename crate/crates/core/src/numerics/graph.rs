//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its variables. Values are
//! computed eagerly; [`Graph::backward`] walks the tape once in reverse.

use std::rc::Rc;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Which keys each query row may attend to, for scores laid out as
/// `[batch, heads, queries, keys]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMask {
    pub batch: usize,
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    /// `[batch, keys]`; `None` allows every key.
    pub key_valid: Option<Vec<bool>>,
    /// Query `t` sees keys `0..=t` only.
    pub causal: bool,
}

impl AttnMask {
    /// Writes the allowed keys of one score row into `out`.
    fn fill_row(&self, row: usize, out: &mut [bool]) {
        let q = row % self.queries;
        let b = row / (self.queries * self.heads);
        match &self.key_valid {
            Some(valid) => out.copy_from_slice(&valid[b * self.keys..(b + 1) * self.keys]),
            None => out.fill(true),
        }
        if self.causal {
            out[q + 1..].fill(false);
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Tanh(Var),
    Gelu(Var, Vec<T>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        ignore: u32,
        probs: Vec<T>,
        count: usize,
    },
    SumAll(Var),
    Reshape(Var),
    SwapAxes12(Var),
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        chunk_a: usize,
        chunk_b: usize,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-variable gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    differentiated: bool,
    nonfinite: Option<&'static str>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Graph::new()
    }
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::shape(format!("{op}: {detail}"))
}

fn add_into<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

fn gelu<T: Real>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044_715);
    let half = T::of(0.5);
    let u = c * (x + k * x * x * x);
    // tanh through exp, which is markedly cheaper than the libm tanh
    let t = T::one() - T::of(2.0) / ((u + u).exp() + T::one());
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x);
    (y, dy)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Graph<T> {
        Graph {
            nodes: Vec::new(),
            differentiated: false,
            nonfinite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Name of the first operation that produced a NaN or infinity.
    pub fn nonfinite(&self) -> Option<&'static str> {
        self.nonfinite
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        if self.nonfinite.is_none() && !value.all_finite() {
            self.nonfinite = Some(name);
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf_rc(&mut self, value: Rc<Tensor<T>>, needs_grad: bool) -> Var {
        if self.nonfinite.is_none() && !value.all_finite() {
            self.nonfinite = Some("leaf");
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Rc<Tensor<T>>) -> Var {
        self.leaf_rc(value, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf_rc(Rc::new(value), false)
    }

    pub fn constant_rc(&mut self, value: Rc<Tensor<T>>) -> Var {
        self.leaf_rc(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn val(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    /// `x·w` for `x` of shape `[.., k]` and `w` of shape `[k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.val(x), self.val(w));
        let (xs, ws) = (xv.shape(), wv.shape());
        let (&[k2, n], Some(&k)) = (ws, xs.last()) else {
            return Err(shape_err("matmul", format!("{xs:?} x {ws:?}")));
        };
        if k != k2 || xs.len() < 2 {
            return Err(shape_err("matmul", format!("{xs:?} x {ws:?}")));
        }
        let m = xv.len() / k;
        let mut shape = xs.to_vec();
        *shape.last_mut().expect("rank >= 2") = n;
        let mut out = Tensor::zeros(&shape);
        T::gemm(m, k, n, T::one(), xv.data(), (k, 1), wv.data(), (n, 1), T::zero(), out.data_mut(), (n, 1));
        Ok(self.push("matmul", out, Op::MatMul(x, w), &[x, w]))
    }

    /// Batched product over all leading axes: `[.., m, k]·[.., k, n]`, or
    /// `[.., m, k]·[.., n, k]ᵀ` with `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let r = sa.len();
        if r < 3 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(shape_err("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(shape_err("bmm", format!("{sa:?} x {sb:?} (trans_b {trans_b})")));
        }
        let groups: usize = sa[..r - 2].iter().product();
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let mut out = Tensor::zeros(&shape);
        let b_strides = if trans_b { (1, k) } else { (n, 1) };
        for g in 0..groups {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &av.data()[g * m * k..(g + 1) * m * k],
                (k, 1),
                &bv.data()[g * k * n..(g + 1) * k * n],
                b_strides,
                T::zero(),
                &mut out.data_mut()[g * m * n..(g + 1) * m * n],
                (n, 1),
            );
        }
        Ok(self.push("bmm", out, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push("add", out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push("sub", out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push("mul", out, Op::Mul(a, b), &[a, b]))
    }

    fn row_op(&mut self, name: &'static str, x: Var, row: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (xv, rv) = (self.val(x), self.val(row));
        let n = xv.last_dim();
        if rv.rank() != 1 || rv.len() != n || xv.rank() == 0 {
            return Err(shape_err(name, format!("{:?} with row {:?}", xv.shape(), rv.shape())));
        }
        let mut data = Vec::with_capacity(xv.len());
        for chunk in xv.data().chunks_exact(n) {
            data.extend(chunk.iter().zip(rv.data()).map(|(&v, &r)| f(v, r)));
        }
        Tensor::new(xv.shape(), data)
    }

    /// `x + row` broadcast over all leading axes of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_op("add_row", x, row, |a, b| a + b)?;
        Ok(self.push("add_row", out, Op::AddRow(x, row), &[x, row]))
    }

    /// `x ⊙ row` broadcast over all leading axes of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_op("mul_row", x, row, |a, b| a * b)?;
        Ok(self.push("mul_row", out, Op::MulRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.val(x).map(|v| v * c);
        self.push("scale", out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.val(x).map(|v| v + c);
        self.push("add_scalar", out, Op::AddScalar(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.val(x).map(T::exp);
        self.push("exp", out, Op::Exp(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.val(x).map(T::tanh);
        self.push("tanh", out, Op::Tanh(x), &[x])
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.val(x);
        let (values, slopes): (Vec<T>, Vec<T>) = xv.data().iter().map(|&v| gelu(v)).unzip();
        let out = Tensor::new(xv.shape(), values).expect("same shape");
        self.push("gelu", out, Op::Gelu(x, slopes), &[x])
    }

    /// Softmax over the last axis. Masked entries get probability exactly 0;
    /// a row with every entry masked is all zeros.
    pub fn softmax(&mut self, x: Var, mask: Option<Rc<AttnMask>>) -> Result<Var> {
        let xv = self.val(x);
        let n = xv.last_dim();
        let rows = xv.len() / n.max(1);
        if let Some(m) = &mask {
            let valid_len = m.key_valid.as_ref().map_or(m.batch * m.keys, Vec::len);
            if m.keys != n || m.batch * m.heads * m.queries != rows || valid_len != m.batch * m.keys {
                return Err(shape_err("softmax", format!("mask {}x{}x{}x{} on {:?}", m.batch, m.heads, m.queries, m.keys, xv.shape())));
            }
        }
        let mut out = Tensor::zeros(xv.shape());
        let mut allowed = vec![true; n];
        for r in 0..rows {
            let src = xv.row(r);
            let dst = &mut out.data_mut()[r * n..(r + 1) * n];
            if let Some(m) = &mask {
                m.fill_row(r, &mut allowed);
            }
            let allowed = |j: usize| allowed[j];
            let mut max = T::neg_infinity();
            for (j, &v) in src.iter().enumerate() {
                if allowed(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let mut sum = T::zero();
            for (j, (&v, d)) in src.iter().zip(dst.iter_mut()).enumerate() {
                if allowed(j) {
                    *d = (v - max).exp();
                    sum += *d;
                }
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        Ok(self.push("softmax", out, Op::Softmax(x), &[x]))
    }

    /// Normalizes each row of the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.val(x), self.val(gain), self.val(bias));
        let n = xv.last_dim();
        if gv.shape() != [n] || bv.shape() != [n] {
            return Err(shape_err("layer_norm", format!("{:?} with gain {:?}, bias {:?}", xv.shape(), gv.shape(), bv.shape())));
        }
        let rows = xv.len() / n;
        let nt = T::of(n as f64);
        let mut out = Tensor::zeros(xv.shape());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let src = xv.row(r);
            let mean = src.iter().copied().sum::<T>() / nt;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let s = T::one() / (var + T::of(eps)).sqrt();
            rstd[r] = s;
            for j in 0..n {
                let h = (src[j] - mean) * s;
                xhat[r * n + j] = h;
                out.data_mut()[r * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        Ok(self.push("layer_norm", out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// Rows of `table` (`[vocab, d]`) for each id; output shape is `shape`
    /// followed by `d`.
    pub fn embedding(&mut self, table: Var, ids: &[u32], shape: &[usize]) -> Result<Var> {
        let tv = self.val(table);
        let (&[vocab, d], count) = (tv.shape(), shape.iter().product::<usize>()) else {
            return Err(shape_err("embedding", format!("table {:?}", tv.shape())));
        };
        if count != ids.len() {
            return Err(shape_err("embedding", format!("{} ids for shape {shape:?}", ids.len())));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::domain(format!("token id {id} outside vocabulary of {vocab}")));
            }
            data.extend_from_slice(tv.row(id as usize));
        }
        let mut out_shape = shape.to_vec();
        out_shape.push(d);
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push("embedding", out, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Mean negative log-likelihood of `targets` under `logits`
    /// (`[.., vocab]`), skipping positions whose target is `ignore`. Zero
    /// when every position is ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], ignore: u32) -> Result<Var> {
        let lv = self.val(logits);
        let v = lv.last_dim();
        let rows = lv.len() / v;
        if rows != targets.len() {
            return Err(shape_err("cross_entropy", format!("{rows} rows, {} targets", targets.len())));
        }
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            if t as usize >= v {
                return Err(Error::domain(format!("target {t} outside vocabulary of {v}")));
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - max).exp();
                sum += *p;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p /= sum;
            }
            total += sum.ln() + max - row[t as usize];
            count += 1;
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::of(count as f64)
        };
        Ok(self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            &[logits],
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.val(x).data().iter().copied().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = (*self.val(x)).clone().reshaped(shape)?;
        Ok(self.push("reshape", out, Op::Reshape(x), &[x]))
    }

    /// `[a, b, c, d] → [a, c, b, d]`.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x);
        let &[a, b, c, d] = xv.shape() else {
            return Err(shape_err("swap_axes12", format!("{:?}", xv.shape())));
        };
        let out = Tensor::new(&[a, c, b, d], swap12(xv.data(), a, b, c, d))?;
        Ok(self.push("swap_axes12", out, Op::SwapAxes12(x), &[x]))
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(shape_err("concat", format!("{sa:?} and {sb:?} on axis {axis}")));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (chunk_a, chunk_b) = (sa[axis] * inner, sb[axis] * inner);
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            data.extend_from_slice(&av.data()[o * chunk_a..(o + 1) * chunk_a]);
            data.extend_from_slice(&bv.data()[o * chunk_b..(o + 1) * chunk_b]);
        }
        let mut shape = sa.to_vec();
        shape[axis] += sb[axis];
        let out = Tensor::new(&shape, data)?;
        Ok(self.push("concat", out, Op::Concat { a, b, outer, chunk_a, chunk_b }, &[a, b]))
    }

    /// Gradients of the scalar `loss` with respect to every [`Graph::param`]
    /// leaf. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.differentiated {
            return Err(Error::domain("backward called twice on the same graph"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::domain(format!("backward from non-scalar of shape {:?}", self.shape(loss))));
        }
        self.differentiated = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match &self.nodes[i].op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut send = |v: Var, t: Tensor<T>| {
            if self.wants(v) {
                add_into(&mut grads[v.0], t);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (k, n) = (wv.shape()[0], wv.shape()[1]);
                let m = xv.len() / k;
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    T::gemm(m, n, k, T::one(), g.data(), (n, 1), wv.data(), (1, n), T::zero(), dx.data_mut(), (k, 1));
                    send(*x, dx);
                }
                if self.wants(*w) {
                    let mut dw = Tensor::zeros(wv.shape());
                    T::gemm(k, m, n, T::one(), xv.data(), (1, k), g.data(), (n, 1), T::zero(), dw.data_mut(), (n, 1));
                    send(*w, dw);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let r = av.rank();
                let (m, k) = (av.shape()[r - 2], av.shape()[r - 1]);
                let n = out.shape()[r - 1];
                let groups = av.len() / (m * k);
                if self.wants(*a) {
                    let mut da = Tensor::zeros(av.shape());
                    // da = g·bᵀ, where b is [k, n] or (trans_b) [n, k]
                    let b_strides = if *trans_b { (k, 1) } else { (1, n) };
                    for gi in 0..groups {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g.data()[gi * m * n..(gi + 1) * m * n],
                            (n, 1),
                            &bv.data()[gi * k * n..(gi + 1) * k * n],
                            b_strides,
                            T::zero(),
                            &mut da.data_mut()[gi * m * k..(gi + 1) * m * k],
                            (k, 1),
                        );
                    }
                    send(*a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(bv.shape());
                    for gi in 0..groups {
                        let ga = &g.data()[gi * m * n..(gi + 1) * m * n];
                        let aa = &av.data()[gi * m * k..(gi + 1) * m * k];
                        let dst = &mut db.data_mut()[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            // db [n, k] = gᵀ·a
                            T::gemm(n, m, k, T::one(), ga, (1, n), aa, (k, 1), T::zero(), dst, (k, 1));
                        } else {
                            // db [k, n] = aᵀ·g
                            T::gemm(k, m, n, T::one(), aa, (1, k), ga, (n, 1), T::zero(), dst, (n, 1));
                        }
                    }
                    send(*b, db);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    send(*a, Tensor::new(g.shape(), d).expect("same shape"));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    send(*b, Tensor::new(g.shape(), d).expect("same shape"));
                }
            }
            Op::AddRow(x, row) => {
                send(*x, g.clone());
                if self.wants(*row) {
                    send(*row, column_sums(g));
                }
            }
            Op::MulRow(x, row) => {
                let (xv, rv) = (self.value(*x), self.value(*row));
                let n = g.last_dim();
                if self.wants(*x) {
                    let mut d = Vec::with_capacity(g.len());
                    for chunk in g.data().chunks_exact(n) {
                        d.extend(chunk.iter().zip(rv.data()).map(|(&v, &r)| v * r));
                    }
                    send(*x, Tensor::new(g.shape(), d).expect("same shape"));
                }
                if self.wants(*row) {
                    let mut dr = Tensor::zeros(&[n]);
                    for (gc, xc) in g.data().chunks_exact(n).zip(xv.data().chunks_exact(n)) {
                        for ((d, &v), &xi) in dr.data_mut().iter_mut().zip(gc).zip(xc) {
                            *d += v * xi;
                        }
                    }
                    send(*row, dr);
                }
            }
            Op::Scale(x, c) => send(*x, g.map(|v| v * *c)),
            Op::AddScalar(x) => send(*x, g.clone()),
            Op::Exp(x) => {
                let d = g.data().iter().zip(out.data()).map(|(&a, &y)| a * y).collect();
                send(*x, Tensor::new(g.shape(), d).expect("same shape"));
            }
            Op::Tanh(x) => {
                let d = g.data().iter().zip(out.data()).map(|(&a, &y)| a * (T::one() - y * y)).collect();
                send(*x, Tensor::new(g.shape(), d).expect("same shape"));
            }
            Op::Gelu(x, slopes) => {
                let d = g.data().iter().zip(slopes).map(|(&a, &s)| a * s).collect();
                send(*x, Tensor::new(g.shape(), d).expect("same shape"));
            }
            Op::Softmax(x) => {
                let n = out.last_dim();
                let mut dx = Tensor::zeros(out.shape());
                for r in 0..out.len() / n {
                    let p = out.row(r);
                    let gr = g.row(r);
                    let dot: T = p.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dx.data_mut()[r * n + j] = p[j] * (gr[j] - dot);
                    }
                }
                send(*x, dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.value(*gain);
                let n = gv.len();
                if self.wants(*x) {
                    let nt = T::of(n as f64);
                    let mut dx = Tensor::zeros(g.shape());
                    let gain = gv.data();
                    for (r, dst) in dx.data_mut().chunks_exact_mut(n).enumerate() {
                        let gr = g.row(r);
                        let h = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..n {
                            let d = gr[j] * gain[j];
                            mean_d += d;
                            mean_dh += d * h[j];
                        }
                        mean_d /= nt;
                        mean_dh /= nt;
                        for j in 0..n {
                            dst[j] = rstd[r] * (gr[j] * gain[j] - mean_d - h[j] * mean_dh);
                        }
                    }
                    send(*x, dx);
                }
                if self.wants(*gain) {
                    let mut dg = Tensor::zeros(&[n]);
                    for (gc, hc) in g.data().chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for ((d, &v), &h) in dg.data_mut().iter_mut().zip(gc).zip(hc) {
                            *d += v * h;
                        }
                    }
                    send(*gain, dg);
                }
                if self.wants(*bias) {
                    send(*bias, column_sums(g));
                }
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.last_dim();
                let mut dt = Tensor::zeros(tv.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt.data_mut()[id as usize * d..(id as usize + 1) * d];
                    for (a, &b) in dst.iter_mut().zip(g.row(r)) {
                        *a += b;
                    }
                }
                send(*table, dt);
            }
            Op::CrossEntropy { logits, targets, ignore, probs, count } => {
                let lv = self.value(*logits);
                let v = lv.last_dim();
                let mut dl = Tensor::zeros(lv.shape());
                if *count > 0 {
                    let s = g.item() / T::of(*count as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        for j in 0..v {
                            dl.data_mut()[r * v + j] = probs[r * v + j] * s;
                        }
                        dl.data_mut()[r * v + t as usize] -= s;
                    }
                }
                send(*logits, dl);
            }
            Op::SumAll(x) => {
                let shape = self.shape(*x).to_vec();
                send(*x, Tensor::full(&shape, g.item()));
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                send(*x, g.clone().reshaped(&shape).expect("same size"));
            }
            Op::SwapAxes12(x) => {
                let &[a, c, b, d] = g.shape() else { unreachable!("rank checked on record") };
                let data = swap12(g.data(), a, c, b, d);
                send(*x, Tensor::new(&[a, b, c, d], data).expect("same size"));
            }
            Op::Concat { a, b, outer, chunk_a, chunk_b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let mut da = Vec::with_capacity(outer * chunk_a);
                let mut db = Vec::with_capacity(outer * chunk_b);
                let step = chunk_a + chunk_b;
                for o in 0..*outer {
                    let base = o * step;
                    da.extend_from_slice(&g.data()[base..base + chunk_a]);
                    db.extend_from_slice(&g.data()[base + chunk_a..base + step]);
                }
                send(*a, Tensor::new(&sa, da).expect("same size"));
                send(*b, Tensor::new(&sb, db).expect("same size"));
            }
        }
    }
}

fn column_sums<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let n = g.last_dim();
    let mut out = Tensor::zeros(&[n]);
    for chunk in g.data().chunks_exact(n) {
        for (d, &v) in out.data_mut().iter_mut().zip(chunk) {
            *d += v;
        }
    }
    out
}

fn swap12<T: Copy>(src: &[T], a: usize, b: usize, c: usize, d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for i in 0..a {
        for k in 0..c {
            for j in 0..b {
                let start = ((i * b + j) * c + k) * d;
                out.extend_from_slice(&src[start..start + d]);
            }
        }
    }
    out
}
