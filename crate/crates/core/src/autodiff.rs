//! Minimal reverse-mode automatic differentiation over row-major matrices.
//!
//! Every value on the tape is a 2-D array. Batched sequences are laid out
//! with one row per (item, position) pair, item-major, so that dense layers
//! are plain matrix products and the sequence structure only matters for
//! convolution windows, attention and pooling.

use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::Rng;

use crate::contrastive::{info_nce_with_grad, DirectionalGrad};
use crate::nn::{gelu, gelu_derivative};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 1-D convolution over a batch of equal-length sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub len_in: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub len_out: usize,
}

/// Shape of a batched multi-head attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub len: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, Copy)]
pub enum Temperature<T> {
    Fixed(T),
    /// Node holding log(tau) as a 1x1 value.
    Learned(Var),
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<T>,
        rstd: Array1<T>,
    },
    Im2Col {
        x: Var,
        geom: ConvGeometry,
    },
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: Vec<Array2<T>>,
    },
    L2Normalize {
        x: Var,
        norms: Array1<T>,
    },
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    RowSlice {
        x: Var,
        start: usize,
    },
    InfoNce {
        query: Var,
        key: Var,
        log_tau: Option<Var>,
        grad: DirectionalGrad<T>,
    },
}

struct Node<T: Scalar> {
    value: Array2<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation so that it can be differentiated.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar output with respect to every node that required them.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a 1 x n row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        assert_eq!(self.value(a).ncols(), self.value(row).ncols());
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a) * factor;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Inverted dropout with keep-probability `1 - p`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let (r, c) = self.value(a).dim();
        let mask = Array2::from_shape_fn((r, c), |_| {
            if rng.gen::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        });
        let m = self.constant(mask);
        self.mul(a, m)
    }

    /// Row-wise layer normalisation with affine `gamma`/`beta` (both 1 x n).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let xv = self.value(x);
        let n = T::from_usize_lossy(xv.ncols());
        let mut xhat = Array2::zeros(xv.dim());
        let mut rstd = Array1::zeros(xv.nrows());
        for (i, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            xhat.row_mut(i)
                .iter_mut()
                .zip(row.iter())
                .for_each(|(o, &v)| *o = (v - mean) * r);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Unfolds convolution windows so that a 1-D convolution becomes a matrix product.
    ///
    /// Output row `b * len_out + t` holds `kernel` consecutive input rows of item `b`
    /// starting at `t * stride - padding`, zero outside the sequence.
    pub fn im2col(&mut self, x: Var, geom: ConvGeometry) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.dim(), (geom.batch * geom.len_in, geom.channels));
        let c = geom.channels;
        let mut out = Array2::zeros((geom.batch * geom.len_out, geom.kernel * c));
        for b in 0..geom.batch {
            for t in 0..geom.len_out {
                let mut dst = out.row_mut(b * geom.len_out + t);
                for j in 0..geom.kernel {
                    let pos = (t * geom.stride + j) as isize - geom.padding as isize;
                    if pos < 0 || pos as usize >= geom.len_in {
                        continue;
                    }
                    let src = xv.row(b * geom.len_in + pos as usize);
                    dst.slice_mut(s![j * c..(j + 1) * c]).assign(&src);
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Im2Col { x, geom }, rg)
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather(&mut self, table: Var, rows: Vec<usize>) -> Var {
        let tv = self.value(table);
        let mut out = Array2::zeros((rows.len(), tv.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&tv.row(r));
        }
        let rg = self.rg(table);
        self.push(out, Op::Gather { table, rows }, rg)
    }

    /// Scaled dot-product multi-head attention.
    ///
    /// `key_mask[b * len + t]` is false for padded positions, which then receive
    /// zero attention weight. Every item must have at least one unmasked key.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        key_mask: &[bool],
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let hidden = qv.ncols();
        assert_eq!(hidden % shape.heads, 0);
        assert_eq!(qv.nrows(), shape.batch * shape.len);
        assert_eq!(key_mask.len(), shape.batch * shape.len);
        let dh = hidden / shape.heads;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let mut out = Array2::zeros(qv.dim());
        let mut probs = Vec::with_capacity(shape.batch * shape.heads);
        for b in 0..shape.batch {
            let rows = b * shape.len..(b + 1) * shape.len;
            let mask = &key_mask[rows.clone()];
            for h in 0..shape.heads {
                let cols = h * dh..(h + 1) * dh;
                let qb = qv.slice(s![rows.clone(), cols.clone()]);
                let kb = kv.slice(s![rows.clone(), cols.clone()]);
                let vb = vv.slice(s![rows.clone(), cols.clone()]);
                let mut p = qb.dot(&kb.t()) * scale;
                for mut row in p.outer_iter_mut() {
                    let mut max = T::neg_infinity();
                    for (j, &x) in row.iter().enumerate() {
                        if mask[j] && x > max {
                            max = x;
                        }
                    }
                    let mut sum = T::zero();
                    for (j, x) in row.iter_mut().enumerate() {
                        *x = if mask[j] { (*x - max).exp() } else { T::zero() };
                        sum += *x;
                    }
                    row.mapv_inplace(|x| x / sum);
                }
                out.slice_mut(s![rows.clone(), cols]).assign(&p.dot(&vb));
                probs.push(p);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            rg,
        )
    }

    /// Divides every row by its Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let floor = T::lit(1e-12);
        let norms: Array1<T> = xv
            .outer_iter()
            .map(|r| r.dot(&r).sqrt().max(floor))
            .collect();
        let mut value = xv.to_owned();
        for (mut row, &n) in value.outer_iter_mut().zip(norms.iter()) {
            row.mapv_inplace(|v| v / n);
        }
        let rg = self.rg(x);
        self.push(value, Op::L2Normalize { x, norms }, rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols: row counts differ");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::ConcatCols(a, b), rg)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_rows: column counts differ");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::ConcatRows(a, b), rg)
    }

    pub fn row_slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(x);
        self.push(value, Op::RowSlice { x, start }, rg)
    }

    /// Directional InfoNCE between row-aligned query and key batches (1x1 output).
    pub fn info_nce(&mut self, query: Var, key: Var, temperature: Temperature<T>) -> Var {
        let (tau, log_tau) = match temperature {
            Temperature::Fixed(t) => (t, None),
            Temperature::Learned(v) => (self.scalar(v).exp(), Some(v)),
        };
        let (q, k) = (self.value(query), self.value(key));
        assert_eq!(q.dim(), k.dim(), "info_nce: query and key shapes differ");
        // a diverged model yields NaN here; the training loop reports it with the step index
        let grad = info_nce_with_grad(q.view(), k.view(), tau).unwrap_or_else(|_| DirectionalGrad {
            loss: T::nan(),
            d_query: Array2::from_elem(q.dim(), T::nan()),
            d_key: Array2::from_elem(k.dim(), T::nan()),
            d_log_tau: T::nan(),
        });
        let value = Array2::from_elem((1, 1), grad.loss);
        let rg = self.rg(query) || self.rg(key) || log_tau.map(|v| self.rg(v)).unwrap_or(false);
        self.push(
            value,
            Op::InfoNce {
                query,
                key,
                log_tau,
                grad,
            },
            rg,
        )
    }

    /// Reverse pass from a 1x1 output node.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        assert_eq!(self.value(output).dim(), (1, 1), "backward expects a scalar output");
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::from_elem((1, 1), T::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let da = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        let db = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *row, dr);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g * *f),
                Op::Gelu(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= gelu_derivative(x));
                    accumulate(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    if self.rg(*gamma) {
                        let dg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *gamma, dg);
                    }
                    if self.rg(*beta) {
                        let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *beta, db);
                    }
                    if self.rg(*x) {
                        let dxhat = &g * self.value(*gamma);
                        let n = T::from_usize_lossy(xhat.ncols());
                        let mut dx = Array2::zeros(xhat.dim());
                        for i in 0..xhat.nrows() {
                            let dr = dxhat.row(i);
                            let xr = xhat.row(i);
                            let mean_d = dr.sum() / n;
                            let mean_dx = dr.dot(&xr) / n;
                            let r = rstd[i];
                            dx.row_mut(i)
                                .iter_mut()
                                .zip(dr.iter().zip(xr.iter()))
                                .for_each(|(o, (&d, &xh))| *o = r * (d - mean_d - xh * mean_dx));
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Im2Col { x, geom } => {
                    let c = geom.channels;
                    let mut dx = Array2::zeros((geom.batch * geom.len_in, c));
                    for b in 0..geom.batch {
                        for t in 0..geom.len_out {
                            let src = g.row(b * geom.len_out + t);
                            for j in 0..geom.kernel {
                                let pos = (t * geom.stride + j) as isize - geom.padding as isize;
                                if pos < 0 || pos as usize >= geom.len_in {
                                    continue;
                                }
                                let mut dst = dx.row_mut(b * geom.len_in + pos as usize);
                                dst += &src.slice(s![j * c..(j + 1) * c]);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gather { table, rows } => {
                    let mut dt = Array2::zeros(self.value(*table).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = dt.row_mut(r);
                        dst += &g.row(i);
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    shape,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let hidden = qv.ncols();
                    let dh = hidden / shape.heads;
                    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
                    let mut dq = Array2::zeros(qv.dim());
                    let mut dk = Array2::zeros(kv.dim());
                    let mut dv = Array2::zeros(vv.dim());
                    for b in 0..shape.batch {
                        let rows = b * shape.len..(b + 1) * shape.len;
                        for h in 0..shape.heads {
                            let cols = h * dh..(h + 1) * dh;
                            let p = &probs[b * shape.heads + h];
                            let go = g.slice(s![rows.clone(), cols.clone()]);
                            let qb = qv.slice(s![rows.clone(), cols.clone()]);
                            let kb = kv.slice(s![rows.clone(), cols.clone()]);
                            let vb = vv.slice(s![rows.clone(), cols.clone()]);
                            dv.slice_mut(s![rows.clone(), cols.clone()])
                                .assign(&p.t().dot(&go));
                            let dp = go.dot(&vb.t());
                            let mut ds = &dp * p;
                            for (mut row, prow) in ds.outer_iter_mut().zip(p.outer_iter()) {
                                let s: T = row.sum();
                                row.iter_mut()
                                    .zip(prow.iter())
                                    .for_each(|(d, &pp)| *d -= pp * s);
                            }
                            ds.mapv_inplace(|x| x * scale);
                            dq.slice_mut(s![rows.clone(), cols.clone()])
                                .assign(&ds.dot(&kb));
                            dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qb));
                        }
                    }
                    if self.rg(*q) {
                        accumulate(&mut grads, *q, dq);
                    }
                    if self.rg(*k) {
                        accumulate(&mut grads, *k, dk);
                    }
                    if self.rg(*v) {
                        accumulate(&mut grads, *v, dv);
                    }
                }
                Op::L2Normalize { x, norms } => {
                    let y = &node.value;
                    let mut dx = g;
                    for ((mut drow, yrow), &n) in
                        dx.outer_iter_mut().zip(y.outer_iter()).zip(norms.iter())
                    {
                        let proj = drow.dot(&yrow);
                        drow.iter_mut()
                            .zip(yrow.iter())
                            .for_each(|(d, &yy)| *d = (*d - yy * proj) / n);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(a, b) => {
                    let na = self.value(*a).ncols();
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.slice(s![.., ..na]).to_owned());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.slice(s![.., na..]).to_owned());
                    }
                }
                Op::ConcatRows(a, b) => {
                    let na = self.value(*a).nrows();
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.slice(s![..na, ..]).to_owned());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.slice(s![na.., ..]).to_owned());
                    }
                }
                Op::RowSlice { x, start } => {
                    let mut dx = Array2::zeros(self.value(*x).dim());
                    dx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::InfoNce {
                    query,
                    key,
                    log_tau,
                    grad,
                } => {
                    let up = g[[0, 0]];
                    if self.rg(*query) {
                        accumulate(&mut grads, *query, &grad.d_query * up);
                    }
                    if self.rg(*key) {
                        accumulate(&mut grads, *key, &grad.d_key * up);
                    }
                    if let Some(lt) = log_tau {
                        if self.rg(*lt) {
                            accumulate(&mut grads, *lt, Array2::from_elem((1, 1), grad.d_log_tau * up));
                        }
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}

/// Convenience for building constant masks from row validity flags.
pub fn row_mask<T: Scalar>(valid: &[bool], cols: usize) -> Array2<T> {
    Array2::from_shape_fn((valid.len(), cols), |(r, _)| {
        if valid[r] {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Mean-pooling matrix averaging the valid rows of every item (`batch x batch*len`).
pub fn mean_pool_matrix<T: Scalar>(valid: &[bool], batch: usize, len: usize) -> Array2<T> {
    let mut m = Array2::zeros((batch, batch * len));
    for b in 0..batch {
        let count = valid[b * len..(b + 1) * len].iter().filter(|&&v| v).count();
        let w = T::one() / T::from_usize_lossy(count.max(1));
        for t in 0..len {
            if valid[b * len + t] {
                m[[b, b * len + t]] = w;
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Builds a scalar function of one input through `f`, then compares the tape
    /// gradient against central differences.
    fn check_grad(input: Array2<f64>, f: impl Fn(&mut Tape<f64>, Var) -> Var) {
        let mut tape = Tape::new();
        let x = tape.param(input.clone());
        let out = f(&mut tape, x);
        let grads = tape.backward(out);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Array2::zeros(input.dim()));
        let h = 1e-5;
        for idx in 0..input.len() {
            let (r, c) = (idx / input.ncols(), idx % input.ncols());
            let eval = |delta: f64| {
                let mut p = input.clone();
                p[[r, c]] += delta;
                let mut t = Tape::new();
                let xv = t.param(p);
                let o = f(&mut t, xv);
                t.scalar(o)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[[r, c]];
            let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-6));
            assert!(
                err < 1e-5 || (a - numeric).abs() < 1e-8,
                "grad mismatch at ({r},{c}): analytic {a}, numeric {numeric}"
            );
        }
    }

    /// Reduces any matrix to a scalar via a fixed random projection.
    fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
        let (r, c) = tape.value(y).dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = tape.constant(rand_mat(&mut rng, r, c));
        let prod = tape.mul(y, w);
        let ones_r = tape.constant(Array2::ones((1, r)));
        let ones_c = tape.constant(Array2::ones((c, 1)));
        let s = tape.matmul(ones_r, prod);
        tape.matmul(s, ones_c)
    }

    #[test]
    fn layer_norm_and_gelu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gamma = rand_mat(&mut rng, 1, 6);
        let beta = rand_mat(&mut rng, 1, 6);
        check_grad(rand_mat(&mut rng, 4, 6), move |t, x| {
            let g = t.param(gamma.clone());
            let b = t.param(beta.clone());
            let y = t.layer_norm(x, g, b, 1e-5);
            let y = t.gelu(y);
            project(t, y, 9)
        });
    }

    #[test]
    fn im2col_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let geom = ConvGeometry {
            batch: 2,
            len_in: 7,
            channels: 3,
            kernel: 3,
            stride: 2,
            padding: 1,
            len_out: 4,
        };
        let w = rand_mat(&mut rng, 9, 2);
        check_grad(rand_mat(&mut rng, 14, 3), move |t, x| {
            let cols = t.im2col(x, geom);
            let wv = t.constant(w.clone());
            let y = t.matmul(cols, wv);
            project(t, y, 3)
        });
    }

    #[test]
    fn attention_gradient_with_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = AttentionShape {
            batch: 2,
            len: 4,
            heads: 2,
        };
        let mask = vec![true, true, true, false, true, true, false, false];
        let k = rand_mat(&mut rng, 8, 6);
        let v = rand_mat(&mut rng, 8, 6);
        check_grad(rand_mat(&mut rng, 8, 6), move |t, q| {
            let kv = t.param(k.clone());
            let vv = t.param(v.clone());
            let y = t.attention(q, kv, vv, shape, &mask);
            project(t, y, 4)
        });
        // key/value side
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = rand_mat(&mut rng, 8, 6);
        let mask = vec![true, true, true, false, true, true, false, false];
        check_grad(rand_mat(&mut rng, 8, 6), move |t, kv| {
            let qv = t.constant(q.clone());
            let y = t.attention(qv, kv, kv, shape, &mask);
            project(t, y, 5)
        });
    }

    #[test]
    fn normalize_concat_slice_gather_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let other = rand_mat(&mut rng, 3, 2);
        check_grad(rand_mat(&mut rng, 3, 4), move |t, x| {
            let o = t.constant(other.clone());
            let c = t.concat_cols(x, o);
            let n = t.l2_normalize(c);
            let r = t.concat_rows(n, n);
            let sl = t.row_slice(r, 2, 3);
            let g = t.gather(sl, vec![0, 2, 2, 1]);
            project(t, g, 6)
        });
    }

    #[test]
    fn info_nce_node_with_learned_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let key = rand_mat(&mut rng, 5, 3);
        check_grad(rand_mat(&mut rng, 5, 3), move |t, q| {
            let k = t.param(key.clone());
            let l1 = t.info_nce(q, k, Temperature::Fixed(0.5));
            let l2 = t.info_nce(k, q, Temperature::Fixed(0.5));
            t.add(l1, l2)
        });
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = rand_mat(&mut rng, 5, 3);
        let k = rand_mat(&mut rng, 5, 3);
        check_grad(Array2::from_elem((1, 1), -0.7), move |t, lt| {
            let qv = t.constant(q.clone());
            let kv = t.constant(k.clone());
            t.info_nce(qv, kv, Temperature::Learned(lt))
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::<f64>::new();
        let c = t.constant(Array2::ones((2, 2)));
        let p = t.param(Array2::ones((2, 1)));
        let y = t.matmul(c, p);
        let ones = t.constant(Array2::ones((1, 2)));
        let s = t.matmul(ones, y);
        let grads = t.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap(), &Array2::from_elem((2, 1), 2.0));
    }

    #[test]
    fn mean_pool_matrix_ignores_invalid_rows() {
        let m: Array2<f64> = mean_pool_matrix(&[true, true, false, true, false, false], 2, 3);
        assert_eq!(m.row(0).to_vec(), vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(m.row(1).to_vec(), vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }
}
