//! Records a forward pass and replays it backwards.
//!
//! The tape is deliberately narrow: it knows exactly the operations the
//! quality streams use. Each recorded node keeps its output value; whatever
//! else the backward pass needs (argmax indices, normalized activations,
//! dropout masks) is stored with the op.

use crate::error::{NnError, Result};
use crate::ops::{self, ConvGeometry, NormCache};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{lit, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    NormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache<T>,
    },
    NormInfer {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    MatMulT {
        a: Var,
        w: Var,
    },
    AddRow {
        x: Var,
        row: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Reshape(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    L1Loss {
        pred: Var,
        target: Tensor<T>,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Single-use record of a forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_count: usize,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_count: 0,
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Input that should receive a gradient (used by gradient checks).
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.param_count = self.param_count.max(store.len());
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (out, geom) =
            ops::conv2d_forward(self.value(x), self.value(kernel), self.value(bias), stride, pad)?;
        let ng = self.needs(x) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            },
            ng,
        ))
    }

    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = ops::maxpool2d_forward(self.value(x), 2, 2)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, ng))
    }

    /// Training-mode batch norm. Returns the output and the cache holding the
    /// batch statistics so the caller can update running estimates.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, &NormCache<T>)> {
        let (out, cache) =
            ops::batchnorm_train_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            out,
            Op::NormTrain {
                x,
                gamma,
                beta,
                cache,
            },
            ng,
        );
        match &self.nodes[v.0].op {
            Op::NormTrain { cache, .. } => Ok((v, cache)),
            _ => unreachable!(),
        }
    }

    pub fn batchnorm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var> {
        let (out, inv_std) = ops::batchnorm_infer_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            mean,
            var,
            eps,
        )?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::NormInfer {
                x,
                gamma,
                beta,
                mean: mean.data().to_vec(),
                inv_std,
            },
            ng,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid(self.value(x));
        let ng = self.needs(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = ops::tanh(self.value(x));
        let ng = self.needs(x);
        self.push(out, Op::Tanh(x), ng)
    }

    /// `a [N x I] * w^T` with `w: O x I`.
    pub fn matmul_t(&mut self, a: Var, w: Var) -> Result<Var> {
        let out = ops::matmul_t(self.value(a), self.value(w))?;
        let ng = self.needs(a) || self.needs(w);
        Ok(self.push(out, Op::MatMulT { a, w }, ng))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = ops::add_row(self.value(x), self.value(row))?;
        let ng = self.needs(x) || self.needs(row);
        Ok(self.push(out, Op::AddRow { x, row }, ng))
    }

    /// Affine layer on an `N x I` batch.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul_t(x, weight)?;
        self.add_row(y, bias)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, factor), ng)
    }

    /// Columns `start..start + len` of an `N x M` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        if src.rank() != 2 || start + len > src.dim(1) || len == 0 {
            return Err(NnError::shape(format!(
                "cannot take columns {start}..{} of {:?}",
                start + len,
                src.shape()
            )));
        }
        let (n, m) = (src.dim(0), src.dim(1));
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&src.data()[r * m + start..r * m + start + len]);
        }
        let out = Tensor::new([n, len], out)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceCols { x, start }, ng))
    }

    /// Picks rows of an `N x M` matrix, in the given order.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if src.rank() != 2 || rows.is_empty() || rows.iter().any(|&r| r >= src.dim(0)) {
            return Err(NnError::shape(format!(
                "cannot gather rows {rows:?} from {:?}",
                src.shape()
            )));
        }
        let m = src.dim(1);
        let mut out = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            out.extend_from_slice(&src.data()[r * m..(r + 1) * m]);
        }
        let out = Tensor::new([rows.len(), m], out)?;
        let ng = self.needs(x);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Inverted dropout with a precomputed keep mask (values 0 or 1).
    pub fn dropout(&mut self, x: Var, keep: &[bool], rate: f64) -> Result<Var> {
        let src = self.value(x);
        if keep.len() != src.len() {
            return Err(NnError::shape("dropout mask length mismatch"));
        }
        let scale = lit::<T>(1.0 / (1.0 - rate));
        let mask: Vec<T> = keep
            .iter()
            .map(|&k| if k { scale } else { T::zero() })
            .collect();
        let out = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        )?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Dropout { x, mask }, ng))
    }

    /// Mean absolute error against a constant target; a scalar node.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        p.expect_same_shape(target)?;
        let n = lit::<T>(p.len() as f64);
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b).abs())
            .sum::<T>()
            / n;
        let ng = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::L1Loss {
                pred,
                target: target.clone(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(out, Op::Sum(x), ng)
    }

    /// Reverse pass from a scalar root. Returns parameter gradients; the
    /// tape cannot be replayed again afterwards.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>> {
        Ok(self.backward_with_inputs(root)?.0)
    }

    /// Like [`backward`](Self::backward) but also returns gradients for
    /// inputs created with [`input_with_grad`](Self::input_with_grad).
    pub fn backward_with_inputs(&mut self, root: Var) -> Result<(Gradients<T>, Vec<(Var, Tensor<T>)>)> {
        if self.consumed {
            return Err(NnError::TapeConsumed);
        }
        if self.value(root).len() != 1 {
            return Err(NnError::shape(format!(
                "backward needs a scalar root, got {:?}",
                self.value(root).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape().to_vec(), T::one()));
        let mut params = Gradients::empty(self.param_count);
        let mut inputs = Vec::new();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let node = &self.nodes[idx];
            let send = |v: Var, d: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&d).expect("gradient shape"),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Input => inputs.push((Var(idx), g)),
                Op::Param(id) => params.accumulate(*id, g),
                Op::Conv2d {
                    x,
                    kernel,
                    bias,
                    geom,
                } => {
                    let want_x = self.needs(*x);
                    let (dx, dk, db) = ops::conv2d_backward(
                        self.value(*x),
                        self.value(*kernel),
                        &g,
                        geom,
                        want_x,
                    );
                    if let Some(dx) = dx {
                        send(*x, dx, &mut grads);
                    }
                    send(*kernel, dk, &mut grads);
                    send(*bias, db, &mut grads);
                }
                Op::MaxPool { x, argmax } => {
                    let dx = ops::maxpool2d_backward(self.value(*x).shape(), argmax, &g);
                    send(*x, dx, &mut grads);
                }
                Op::NormTrain {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (dx, dg, db) = ops::batchnorm_train_backward(
                        self.value(*x).shape(),
                        self.value(*gamma),
                        cache,
                        &g,
                    );
                    send(*x, dx, &mut grads);
                    send(*gamma, dg, &mut grads);
                    send(*beta, db, &mut grads);
                }
                Op::NormInfer {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let xs = self.value(*x);
                    let shape = xs.shape();
                    let (n, c) = (shape[0], shape[1]);
                    let s: usize = shape[2..].iter().product();
                    let gm = self.value(*gamma).data();
                    let mut dx = vec![T::zero(); xs.len()];
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for b in 0..n {
                        for ch in 0..c {
                            for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                                let dy = g.data()[i];
                                dx[i] = dy * gm[ch] * inv_std[ch];
                                dg[ch] = dg[ch] + dy * (xs.data()[i] - mean[ch]) * inv_std[ch];
                                db[ch] = db[ch] + dy;
                            }
                        }
                    }
                    send(*x, Tensor::new(shape.to_vec(), dx)?, &mut grads);
                    send(*gamma, Tensor::new([c], dg)?, &mut grads);
                    send(*beta, Tensor::new([c], db)?, &mut grads);
                }
                Op::Relu(x) => {
                    let dx = self
                        .value(*x)
                        .zip_map(&g, |v, d| if v > T::zero() { d } else { T::zero() })?;
                    send(*x, dx, &mut grads);
                }
                Op::Sigmoid(x) => {
                    let dx = node.value.zip_map(&g, |s, d| d * s * (T::one() - s))?;
                    send(*x, dx, &mut grads);
                }
                Op::Tanh(x) => {
                    let dx = node.value.zip_map(&g, |t, d| d * (T::one() - t * t))?;
                    send(*x, dx, &mut grads);
                }
                Op::MatMulT { a, w } => {
                    let (da, dw) =
                        ops::matmul_t_backward(self.value(*a), self.value(*w), &g, self.needs(*a));
                    if let Some(da) = da {
                        send(*a, da, &mut grads);
                    }
                    send(*w, dw, &mut grads);
                }
                Op::AddRow { x, row } => {
                    let o = g.dim(1);
                    let mut dr = vec![T::zero(); o];
                    for chunk in g.data().chunks(o) {
                        for (acc, &v) in dr.iter_mut().zip(chunk) {
                            *acc = *acc + v;
                        }
                    }
                    send(*row, Tensor::new([o], dr)?, &mut grads);
                    send(*x, g, &mut grads);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |d, v| d * v)?;
                    let db = g.zip_map(self.value(*a), |d, v| d * v)?;
                    send(*a, da, &mut grads);
                    send(*b, db, &mut grads);
                }
                Op::Scale(x, f) => {
                    let f = *f;
                    send(*x, g.map(|d| d * f), &mut grads);
                }
                Op::SliceCols { x, start } => {
                    let src = self.value(*x);
                    let (n, m) = (src.dim(0), src.dim(1));
                    let len = g.dim(1);
                    let mut dx = vec![T::zero(); n * m];
                    for r in 0..n {
                        dx[r * m + start..r * m + start + len]
                            .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                    }
                    send(*x, Tensor::new([n, m], dx)?, &mut grads);
                }
                Op::GatherRows { x, rows } => {
                    let src = self.value(*x);
                    let m = src.dim(1);
                    let mut dx = Tensor::zeros(src.shape().to_vec());
                    let d = dx.data_mut();
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..m {
                            d[r * m + j] = d[r * m + j] + g.data()[k * m + j];
                        }
                    }
                    send(*x, dx, &mut grads);
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    send(*x, g.reshape(shape)?, &mut grads);
                }
                Op::Dropout { x, mask } => {
                    let dx = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(mask).map(|(&d, &m)| d * m).collect(),
                    )?;
                    send(*x, dx, &mut grads);
                }
                Op::L1Loss { pred, target } => {
                    let p = self.value(*pred);
                    let scale = g.data()[0] / lit::<T>(p.len() as f64);
                    let dx = p.zip_map(target, |a, b| {
                        let d = a - b;
                        if d > T::zero() {
                            scale
                        } else if d < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })?;
                    send(*pred, dx, &mut grads);
                }
                Op::Sum(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    send(*x, Tensor::full(shape, g.data()[0]), &mut grads);
                }
            }
        }
        inputs.reverse();
        Ok((params, inputs))
    }
}
