//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node in
//! creation order, which is already a topological order. [`Graph::backward`]
//! walks the nodes in exact reverse and accumulates adjoints. A graph is
//! single-use: it is rebuilt for every forward pass and can be differentiated
//! once.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{contract, dim_check, Error, Result};
use crate::kernels::{self, ConvGeom, Pad2d};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Everything a backward rule can read.
pub struct GradCtx<'a, S> {
    pub inputs: Vec<&'a Tensor<S>>,
    pub output: &'a Tensor<S>,
    pub grad: &'a [S],
}

/// Maps the output adjoint to one adjoint per input (`None` when that input
/// receives no gradient).
pub type GradFn<S> = Box<dyn Fn(&GradCtx<'_, S>) -> Vec<Option<Vec<S>>>>;

struct Node<S> {
    value: Tensor<S>,
    inputs: Vec<usize>,
    grad_fn: Option<GradFn<S>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<S> {
    nodes: RefCell<Vec<Node<S>>>,
    differentiated: Cell<bool>,
}

/// Handle to a node of a [`Graph`].
pub struct Var<'g, S> {
    graph: &'g Graph<S>,
    id: usize,
}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<S> Clone for Var<'_, S> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<S> Copy for Var<'_, S> {}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to `v`; zeros when no path reaches it.
    pub fn get(&self, v: Var<'_, S>) -> Tensor<S> {
        let shape = &self.shapes[v.id];
        match &self.grads[v.id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var<'_, S>) -> Tensor<S> {
        let shape = &self.shapes[v.id];
        match self.grads[v.id].take() {
            Some(g) => Tensor::new(shape, g).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            differentiated: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push_leaf(value, false)
    }

    /// A leaf whose gradient is collected by [`Graph::backward`].
    pub fn param(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push_leaf(value, true)
    }

    fn push_leaf(&self, value: Tensor<S>, requires_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            inputs: Vec::new(),
            grad_fn: None,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Records an operation. The backward rule is dropped when no input
    /// requires a gradient.
    pub fn record(&self, value: Tensor<S>, inputs: &[Var<'_, S>], grad_fn: GradFn<S>) -> Var<'_, S> {
        debug_assert!(value.is_finite(), "non-finite value recorded");
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|v| nodes[v.id].requires_grad);
        nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.id).collect(),
            grad_fn: requires_grad.then_some(grad_fn),
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Reverse sweep from a scalar `loss`. A graph can be differentiated once.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        contract!(
            !self.differentiated.get(),
            "graph was already differentiated; double backward is not supported"
        );
        self.differentiated.set(true);
        let nodes = self.nodes.borrow();
        contract!(
            nodes[loss.id].value.numel() == 1,
            "backward needs a scalar loss, got shape {:?}",
            nodes[loss.id].value.shape()
        );
        let mut grads: Vec<Option<Vec<S>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![S::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(grad_fn) = &node.grad_fn else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let ctx = GradCtx {
                inputs: node.inputs.iter().map(|&i| &nodes[i].value).collect(),
                output: &node.value,
                grad: &g,
            };
            let input_grads = grad_fn(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&inp, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !nodes[inp].requires_grad {
                    continue;
                }
                match &mut grads[inp] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

impl<'g, S: Scalar> Var<'g, S> {
    pub fn graph(&self) -> &'g Graph<S> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<S> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<S>) -> R) -> R {
        f(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn numel(&self) -> usize {
        self.with_value(|t| t.numel())
    }

    pub fn item(&self) -> S {
        self.with_value(|t| t.data()[0])
    }

    fn unary(self, f: impl Fn(S) -> S, df: impl Fn(S, S) -> S + 'static) -> Var<'g, S> {
        let out = self.with_value(|x| x.map(&f));
        self.graph.record(
            out,
            &[self],
            Box::new(move |ctx| {
                let x = ctx.inputs[0].data();
                let y = ctx.output.data();
                let g = x
                    .iter()
                    .zip(y)
                    .zip(ctx.grad)
                    .map(|((&xv, &yv), &gv)| gv * df(xv, yv))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn exp(self) -> Var<'g, S> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn neg(self) -> Var<'g, S> {
        self.unary(|x| -x, |_, _| -S::one())
    }

    pub fn scale(self, c: S) -> Var<'g, S> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn abs(self) -> Var<'g, S> {
        self.unary(|x| x.abs(), |x, _| x.signum())
    }

    pub fn square(self) -> Var<'g, S> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn sigmoid(self) -> Var<'g, S> {
        self.unary(kernels::sigmoid, |_, y| y * (S::one() - y))
    }

    pub fn silu(self) -> Var<'g, S> {
        self.unary(kernels::silu, |x, _| kernels::silu_grad(x))
    }

    /// `log(1 + exp(x))`, returning `x` itself above the overflow threshold.
    pub fn softplus(self) -> Var<'g, S> {
        self.unary(kernels::softplus, |x, _| {
            if x > S::c(kernels::SOFTPLUS_THRESHOLD) {
                S::one()
            } else {
                kernels::sigmoid(x)
            }
        })
    }

    fn binary(
        self,
        other: Var<'g, S>,
        f: impl Fn(S, S) -> S,
        da: impl Fn(S, S) -> S + 'static,
        db: impl Fn(S, S) -> S + 'static,
    ) -> Result<Var<'g, S>> {
        let out = {
            let nodes = self.graph.nodes.borrow();
            nodes[self.id].value.zip_map(&nodes[other.id].value, f)?
        };
        Ok(self.graph.record(
            out,
            &[self, other],
            Box::new(move |ctx| {
                let a = ctx.inputs[0].data();
                let b = ctx.inputs[1].data();
                let ga = a.iter().zip(b).zip(ctx.grad).map(|((&x, &y), &g)| g * da(x, y)).collect();
                let gb = a.iter().zip(b).zip(ctx.grad).map(|((&x, &y), &g)| g * db(x, y)).collect();
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn add(self, other: Var<'g, S>) -> Result<Var<'g, S>> {
        self.binary(other, |a, b| a + b, |_, _| S::one(), |_, _| S::one())
    }

    pub fn sub(self, other: Var<'g, S>) -> Result<Var<'g, S>> {
        self.binary(other, |a, b| a - b, |_, _| S::one(), |_, _| -S::one())
    }

    pub fn mul(self, other: Var<'g, S>) -> Result<Var<'g, S>> {
        self.binary(other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    /// Adds a `[C]` vector to every row of a `[.., C]` tensor.
    pub fn add_bias(self, bias: Var<'g, S>) -> Result<Var<'g, S>> {
        let out = {
            let nodes = self.graph.nodes.borrow();
            let (x, b) = (&nodes[self.id].value, &nodes[bias.id].value);
            let c = *x.shape().last().unwrap_or(&0);
            dim_check!(
                b.numel() == c,
                "bias of {} values for rows of width {} (shape {:?})",
                b.numel(),
                c,
                x.shape()
            );
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(c) {
                row.iter_mut().zip(b.data()).for_each(|(v, &bv)| *v = *v + bv);
            }
            out
        };
        Ok(self.graph.record(
            out,
            &[self, bias],
            Box::new(|ctx| {
                let c = ctx.inputs[1].numel();
                let mut gb = vec![S::zero(); c];
                for row in ctx.grad.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(a, &g)| *a = *a + g);
                }
                vec![Some(ctx.grad.to_vec()), Some(gb)]
            }),
        ))
    }

    /// Scales row `r` of a `[R, C]` tensor by `s[r]` (`s` holds `R` values).
    pub fn mul_rows(self, s: Var<'g, S>) -> Result<Var<'g, S>> {
        let out = {
            let nodes = self.graph.nodes.borrow();
            let (x, sv) = (&nodes[self.id].value, &nodes[s.id].value);
            dim_check!(
                x.ndim() == 2 && sv.numel() == x.shape()[0],
                "row scaling of {:?} by {} values",
                x.shape(),
                sv.numel()
            );
            let c = x.shape()[1];
            let mut out = x.clone();
            for (row, &k) in out.data_mut().chunks_mut(c).zip(sv.data()) {
                row.iter_mut().for_each(|v| *v = *v * k);
            }
            out
        };
        Ok(self.graph.record(
            out,
            &[self, s],
            Box::new(|ctx| {
                let (x, sv) = (ctx.inputs[0], ctx.inputs[1]);
                let c = x.shape()[1];
                let mut gx = vec![S::zero(); x.numel()];
                let mut gs = vec![S::zero(); sv.numel()];
                for r in 0..sv.numel() {
                    let k = sv.data()[r];
                    for j in 0..c {
                        let g = ctx.grad[r * c + j];
                        gx[r * c + j] = g * k;
                        gs[r] = gs[r] + g * x.data()[r * c + j];
                    }
                }
                vec![Some(gx), Some(gs)]
            }),
        ))
    }

    pub fn sum(self) -> Var<'g, S> {
        let out = Tensor::scalar(self.with_value(|x| x.sum()));
        self.graph.record(
            out,
            &[self],
            Box::new(|ctx| vec![Some(vec![ctx.grad[0]; ctx.inputs[0].numel()])]),
        )
    }

    pub fn mean(self) -> Var<'g, S> {
        let n = S::c(self.numel() as f64);
        self.sum().scale(S::one() / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, S>> {
        let out = self.with_value(|x| x.reshape(shape))?;
        Ok(self
            .graph
            .record(out, &[self], Box::new(|ctx| vec![Some(ctx.grad.to_vec())])))
    }

    /// Transpose of a rank-2 tensor.
    pub fn t(self) -> Result<Var<'g, S>> {
        let out = self.with_value(|x| x.t())?;
        Ok(self.graph.record(
            out,
            &[self],
            Box::new(|ctx| {
                let s = ctx.output.shape();
                let g = Tensor::new(s, ctx.grad.to_vec()).and_then(|g| g.t());
                vec![Some(g.expect("transpose adjoint").into_data())]
            }),
        ))
    }

    /// `[M×K] · [K×N]`.
    pub fn matmul(self, other: Var<'g, S>) -> Result<Var<'g, S>> {
        let (out, m, k, n) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            dim_check!(
                a.ndim() == 2 && b.ndim() == 2 && a.shape()[1] == b.shape()[0],
                "matmul of {:?} by {:?}",
                a.shape(),
                b.shape()
            );
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let out = Tensor::new(&[m, n], kernels::matmul(a.data(), b.data(), m, k, n))?;
            (out, m, k, n)
        };
        Ok(self.graph.record(
            out,
            &[self, other],
            Box::new(move |ctx| {
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                vec![
                    Some(kernels::matmul_bt(ctx.grad, b, m, k, n)),
                    Some(kernels::matmul_at(a, ctx.grad, m, k, n)),
                ]
            }),
        ))
    }

    /// Cross-correlation of `[C_in×H×W]` with `[C_out×C_in×kh×kw]` and
    /// explicit padding; the output extent must be exact.
    pub fn conv2d_padded(
        self,
        weight: Var<'g, S>,
        bias: Option<Var<'g, S>>,
        stride: usize,
        pad: Pad2d,
    ) -> Result<Var<'g, S>> {
        let (out, geom) = {
            let nodes = self.graph.nodes.borrow();
            let (x, w) = (&nodes[self.id].value, &nodes[weight.id].value);
            let geom = conv_geom(x.shape(), w.shape(), stride, pad)?;
            let b = match bias {
                Some(b) => {
                    let bt = &nodes[b.id].value;
                    dim_check!(
                        bt.numel() == geom.c_out,
                        "conv bias of {} values for {} output channels",
                        bt.numel(),
                        geom.c_out
                    );
                    Some(bt.data())
                }
                None => None,
            };
            let data = kernels::conv2d_forward(x.data(), w.data(), b, &geom);
            (Tensor::new(&[geom.c_out, geom.ho, geom.wo], data)?, geom)
        };
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.graph.record(
            out,
            &inputs,
            Box::new(move |ctx| {
                let (dx, dw, db) =
                    kernels::conv2d_backward(ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad, &geom);
                let mut g = vec![Some(dx), Some(dw)];
                if has_bias {
                    g.push(Some(db));
                }
                g
            }),
        ))
    }

    /// Standard 2D convolution layer (cross-correlation, square odd kernel,
    /// symmetric zero padding).
    pub fn conv2d(
        self,
        weight: Var<'g, S>,
        bias: Option<Var<'g, S>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'g, S>> {
        let ws = weight.shape();
        dim_check!(
            ws.len() == 4 && ws[2] == ws[3] && ws[2] % 2 == 1,
            "conv2d needs a square odd kernel, got weight shape {:?}",
            ws
        );
        self.conv2d_padded(weight, bias, stride, Pad2d::uniform(padding))
    }

    /// Temporal convolution of `[T×C_in]` tokens with a `[C_out×C_in×k]`
    /// kernel, `k` odd, length preserved.
    pub fn conv1d(self, weight: Var<'g, S>, bias: Option<Var<'g, S>>) -> Result<Var<'g, S>> {
        let (out, t, c_in, c_out, k) = {
            let nodes = self.graph.nodes.borrow();
            let (x, w) = (&nodes[self.id].value, &nodes[weight.id].value);
            dim_check!(
                x.ndim() == 2 && w.ndim() == 3 && w.shape()[1] == x.shape()[1] && w.shape()[2] % 2 == 1,
                "conv1d of tokens {:?} with kernel {:?}",
                x.shape(),
                w.shape()
            );
            let (t, c_in) = (x.shape()[0], x.shape()[1]);
            let (c_out, k) = (w.shape()[0], w.shape()[2]);
            let b = bias.map(|b| nodes[b.id].value.data());
            if let Some(b) = b {
                dim_check!(b.len() == c_out, "conv1d bias of {} for {} channels", b.len(), c_out);
            }
            let data = kernels::conv1d_forward(x.data(), w.data(), b, t, c_in, c_out, k);
            (Tensor::new(&[t, c_out], data)?, t, c_in, c_out, k)
        };
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.graph.record(
            out,
            &inputs,
            Box::new(move |ctx| {
                let (dx, dw, db) = kernels::conv1d_backward(
                    ctx.inputs[0].data(),
                    ctx.inputs[1].data(),
                    ctx.grad,
                    t,
                    c_in,
                    c_out,
                    k,
                );
                let mut g = vec![Some(dx), Some(dw)];
                if has_bias {
                    g.push(Some(db));
                }
                g
            }),
        ))
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layernorm(self, gamma: Var<'g, S>, beta: Var<'g, S>, eps: S) -> Result<Var<'g, S>> {
        contract!(eps > S::zero(), "layernorm eps must be positive, got {}", eps);
        let (out, xhat, inv_std) = {
            let nodes = self.graph.nodes.borrow();
            let (x, g, b) = (
                &nodes[self.id].value,
                &nodes[gamma.id].value,
                &nodes[beta.id].value,
            );
            let c = *x.shape().last().unwrap_or(&0);
            dim_check!(
                g.numel() == c && b.numel() == c,
                "layernorm affine of {}/{} values for width {}",
                g.numel(),
                b.numel(),
                c
            );
            let rows = x.numel() / c;
            let mut xhat = vec![S::zero(); x.numel()];
            let mut inv_std = vec![S::zero(); rows];
            let mut out = vec![S::zero(); x.numel()];
            let cf = S::c(c as f64);
            for r in 0..rows {
                let row = &x.data()[r * c..(r + 1) * c];
                let mean = row.iter().copied().sum::<S>() / cf;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / cf;
                let is = S::one() / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..c {
                    let h = (row[j] - mean) * is;
                    xhat[r * c + j] = h;
                    out[r * c + j] = h * g.data()[j] + b.data()[j];
                }
            }
            (Tensor::new(x.shape(), out)?, xhat, inv_std)
        };
        Ok(self.graph.record(
            out,
            &[self, gamma, beta],
            Box::new(move |ctx| {
                let gamma = ctx.inputs[1].data();
                let c = gamma.len();
                let cf = S::c(c as f64);
                let mut dx = vec![S::zero(); xhat.len()];
                let mut dg = vec![S::zero(); c];
                let mut db = vec![S::zero(); c];
                let mut dxhat = vec![S::zero(); c];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &ctx.grad[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let mut mean_d = S::zero();
                    let mut mean_dh = S::zero();
                    for j in 0..c {
                        dg[j] = dg[j] + gr[j] * hr[j];
                        db[j] = db[j] + gr[j];
                        dxhat[j] = gr[j] * gamma[j];
                        mean_d = mean_d + dxhat[j];
                        mean_dh = mean_dh + dxhat[j] * hr[j];
                    }
                    mean_d = mean_d / cf;
                    mean_dh = mean_dh / cf;
                    for j in 0..c {
                        dx[r * c + j] = is * (dxhat[j] - mean_d - hr[j] * mean_dh);
                    }
                }
                vec![Some(dx), Some(dg), Some(db)]
            }),
        ))
    }

    /// Mean binary cross-entropy between `sigmoid(self)` and a fixed target.
    pub fn bce_with_logits(self, target: &Tensor<S>) -> Result<Var<'g, S>> {
        let target = target.clone();
        let loss = self.with_value(|z| -> Result<S> {
            dim_check!(
                z.shape() == target.shape(),
                "bce logits {:?} vs target {:?}",
                z.shape(),
                target.shape()
            );
            let total: S = z
                .data()
                .iter()
                .zip(target.data())
                .map(|(&zv, &t)| zv.max(S::zero()) - zv * t + (-zv.abs()).exp().ln_1p())
                .sum();
            Ok(total / S::c(z.numel() as f64))
        })?;
        Ok(self.graph.record(
            Tensor::scalar(loss),
            &[self],
            Box::new(move |ctx| {
                let z = ctx.inputs[0].data();
                let n = S::c(z.len() as f64);
                let g = z
                    .iter()
                    .zip(target.data())
                    .map(|(&zv, &t)| ctx.grad[0] * (kernels::sigmoid(zv) - t) / n)
                    .collect();
                vec![Some(g)]
            }),
        ))
    }

    /// Element gather from the flattened tensor; result has shape `[idx.len()]`.
    pub fn gather(self, idx: Rc<[usize]>) -> Result<Var<'g, S>> {
        let out = self.with_value(|x| -> Result<Tensor<S>> {
            dim_check!(
                idx.iter().all(|&i| i < x.numel()),
                "gather index out of range for {} values",
                x.numel()
            );
            Tensor::new(&[idx.len()], idx.iter().map(|&i| x.data()[i]).collect())
        })?;
        Ok(self.graph.record(
            out,
            &[self],
            Box::new(move |ctx| {
                let mut g = vec![S::zero(); ctx.inputs[0].numel()];
                for (&i, &gv) in idx.iter().zip(ctx.grad) {
                    g[i] = g[i] + gv;
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Rows `idx` of a rank-2 tensor, in order (repeats allowed).
    pub fn gather_rows(self, idx: Rc<[usize]>) -> Result<Var<'g, S>> {
        let (out, c) = self.with_value(|x| -> Result<(Tensor<S>, usize)> {
            dim_check!(x.ndim() == 2, "gather_rows needs rank 2, got {:?}", x.shape());
            let (r, c) = (x.shape()[0], x.shape()[1]);
            dim_check!(idx.iter().all(|&i| i < r), "row index out of range for {} rows", r);
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx.iter() {
                data.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
            }
            Ok((Tensor::new(&[idx.len(), c], data)?, c))
        })?;
        Ok(self.graph.record(
            out,
            &[self],
            Box::new(move |ctx| {
                let mut g = vec![S::zero(); ctx.inputs[0].numel()];
                for (k, &i) in idx.iter().enumerate() {
                    let src = &ctx.grad[k * c..(k + 1) * c];
                    g[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, &b)| *a = *a + b);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Each output row is a weighted sum of input rows.
    pub fn mix_rows(self, map: Rc<RowMix<S>>) -> Result<Var<'g, S>> {
        let (out, c) = self.with_value(|x| -> Result<(Tensor<S>, usize)> {
            dim_check!(x.ndim() == 2, "mix_rows needs rank 2, got {:?}", x.shape());
            let (r, c) = (x.shape()[0], x.shape()[1]);
            dim_check!(
                map.rows.iter().flatten().all(|&(i, _)| i < r),
                "row mix references rows beyond {}",
                r
            );
            let mut data = vec![S::zero(); map.rows.len() * c];
            for (o, terms) in map.rows.iter().enumerate() {
                let orow = &mut data[o * c..(o + 1) * c];
                for &(i, w) in terms {
                    let irow = &x.data()[i * c..(i + 1) * c];
                    orow.iter_mut().zip(irow).for_each(|(a, &b)| *a = *a + w * b);
                }
            }
            Ok((Tensor::new(&[map.rows.len(), c], data)?, c))
        })?;
        Ok(self.graph.record(
            out,
            &[self],
            Box::new(move |ctx| {
                let mut g = vec![S::zero(); ctx.inputs[0].numel()];
                for (o, terms) in map.rows.iter().enumerate() {
                    let grow = &ctx.grad[o * c..(o + 1) * c];
                    for &(i, w) in terms {
                        g[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(a, &b)| *a = *a + w * b);
                    }
                }
                vec![Some(g)]
            }),
        ))
    }
}

/// Sparse row-mixing matrix: output row `o` is `Σ w · input[i]` over `rows[o]`.
#[derive(Clone, Debug)]
pub struct RowMix<S> {
    pub rows: Vec<Vec<(usize, S)>>,
}

/// Stacks rank-2 tensors of equal width along the row axis.
pub fn concat_rows<'g, S: Scalar>(parts: &[Var<'g, S>]) -> Result<Var<'g, S>> {
    contract!(!parts.is_empty(), "concat_rows of nothing");
    let graph = parts[0].graph;
    let (out, lens) = {
        let nodes = graph.nodes.borrow();
        let c = nodes[parts[0].id].value.shape().get(1).copied().unwrap_or(0);
        let mut data = Vec::new();
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let t = &nodes[p.id].value;
            dim_check!(
                t.ndim() == 2 && t.shape()[1] == c,
                "concat_rows of {:?} into width {}",
                t.shape(),
                c
            );
            data.extend_from_slice(t.data());
            lens.push(t.numel());
        }
        let rows = data.len() / c.max(1);
        (Tensor::new(&[rows, c], data)?, lens)
    };
    Ok(graph.record(
        out,
        parts,
        Box::new(move |ctx| {
            let mut off = 0;
            lens.iter()
                .map(|&n| {
                    let g = ctx.grad[off..off + n].to_vec();
                    off += n;
                    Some(g)
                })
                .collect()
        }),
    ))
}

pub(crate) fn conv_geom(x: &[usize], w: &[usize], stride: usize, pad: Pad2d) -> Result<ConvGeom> {
    dim_check!(
        x.len() == 3 && w.len() == 4 && w[1] == x[0],
        "conv input {:?} with weight {:?}",
        x,
        w
    );
    let (c_in, h, wd) = (x[0], x[1], x[2]);
    let (c_out, kh, kw) = (w[0], w[2], w[3]);
    let ho = ConvGeom::out_len(h, pad.top, pad.bottom, kh, stride);
    let wo = ConvGeom::out_len(wd, pad.left, pad.right, kw, stride);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok(ConvGeom {
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        }),
        _ => Err(Error::Dimension(format!(
            "conv output size is not integral: input {:?}, kernel {}x{}, stride {}, padding {:?}",
            x, kh, kw, stride, pad
        ))),
    }
}

/// Largest relative error between the tape gradient of a scalar function and
/// central differences:
/// `max_i |analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, 1e-8)`.
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, step: S) -> Result<S>
where
    S: Scalar,
    F: for<'g> Fn(&'g Graph<S>, Var<'g, S>) -> Result<Var<'g, S>>,
{
    contract!(
        step > S::zero() && step.is_finite(),
        "finite difference step must be positive, got {}",
        step
    );
    let graph = Graph::new();
    let xv = graph.param(x.clone());
    let out = f(&graph, xv)?;
    contract!(
        out.numel() == 1,
        "grad_check needs a scalar-valued function, got shape {:?}",
        out.shape()
    );
    let analytic = graph.backward(out)?.get(xv);

    let eval = |t: Tensor<S>| -> Result<S> {
        let g = Graph::new();
        let v = g.constant(t);
        Ok(f(&g, v)?.item())
    };
    let floor = S::c(1e-8);
    let two = S::c(2.0);
    let mut worst = S::zero();
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] = plus.data()[i] + step;
        let mut minus = x.clone();
        minus.data_mut()[i] = minus.data()[i] - step;
        let numeric = (eval(plus)? - eval(minus)?) / (two * step);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(floor);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let g = Graph::new();
        let i = g.constant(Tensor::eye(2));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(i.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let a = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let b = g.constant(t(&[2, 1], &[0.0, 5.0]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = a.matmul(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.starts_with("dimension"), "{msg}");
    }

    #[test]
    fn matmul_grad_of_sum_is_ones_times_bt() {
        let mut r = rng();
        let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
        let b = Tensor::<f64>::randn(&[4, 2], 1.0, &mut r);
        let g = Graph::new();
        let av = g.param(a);
        let bv = g.constant(b.clone());
        let loss = av.matmul(bv).unwrap().sum();
        let ga = g.backward(loss).unwrap().get(av);
        // ones(3x2) * b^T: every row equals the row sums of b.
        for i in 0..3 {
            for k in 0..4 {
                let expect = b.at(&[k, 0]) + b.at(&[k, 1]);
                assert!((ga.at(&[i, k]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_box_sum_and_impulse() {
        let g = Graph::new();
        let x = g.constant(Tensor::<f64>::ones(&[1, 3, 3]));
        let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = x.conv2d(w, None, 1, 1).unwrap().value();
        assert_eq!(y.at(&[0, 1, 1]), 9.0);
        assert_eq!(y.at(&[0, 0, 0]), 4.0);

        let mut imp = Tensor::<f64>::zeros(&[1, 5, 5]);
        imp.set(&[0, 2, 2], 1.0);
        let k = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 + 1.0);
        let y = g
            .constant(imp)
            .conv2d(g.constant(k.clone()), None, 1, 1)
            .unwrap()
            .value();
        // Cross-correlation places the kernel flipped around the impulse.
        for ky in 0..3 {
            for kx in 0..3 {
                assert_eq!(y.at(&[0, 1 + ky, 1 + kx]), k.at(&[0, 0, 2 - ky, 2 - kx]));
            }
        }
    }

    #[test]
    fn conv2d_rejects_fractional_output() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(x.conv2d(w, None, 2, 1), Err(Error::Dimension(_))));
        let w2 = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(x.conv2d(w2, None, 1, 0).is_err());
    }

    #[test]
    fn layernorm_edge_cases() {
        let g = Graph::new();
        let ones = g.constant(Tensor::<f64>::ones(&[3]));
        let zeros = g.constant(Tensor::<f64>::zeros(&[3]));
        let y = g
            .constant(t(&[1, 3], &[5.0, 5.0, 5.0]))
            .layernorm(ones, zeros, 1e-5)
            .unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.0, 0.0]);

        let ones2 = g.constant(Tensor::<f64>::ones(&[2]));
        let zeros2 = g.constant(Tensor::<f64>::zeros(&[2]));
        let y = g
            .constant(t(&[1, 2], &[1.0, -1.0]))
            .layernorm(ones2, zeros2, 1e-300)
            .unwrap();
        assert!((y.value().data()[0] - 1.0).abs() < 1e-12);
        assert!((y.value().data()[1] + 1.0).abs() < 1e-12);
        assert!(g
            .constant(t(&[1, 2], &[1.0, 2.0]))
            .layernorm(ones2, zeros2, 0.0)
            .is_err());
    }

    #[test]
    fn layernorm_statistics() {
        let mut r = rng();
        let g = Graph::new();
        let x = g.constant(Tensor::<f64>::randn(&[1, 16], 3.0, &mut r));
        let y = x
            .layernorm(g.constant(Tensor::ones(&[16])), g.constant(Tensor::zeros(&[16])), 1e-6)
            .unwrap()
            .value();
        let mean = y.sum() / 16.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn activations_closed_forms() {
        let g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 100.0, -800.0]));
        let s = x.silu().value();
        assert_eq!(s.data()[0], 0.0);
        assert_eq!(s.data()[2], 0.0);
        let sp = x.softplus().value();
        assert!((sp.data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((sp.data()[1] - 100.0).abs() < 1e-12);
        assert!(sp.is_finite());
    }

    #[test]
    fn backward_twice_is_an_error() {
        let g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let l = x.square().sum();
        assert!(g.backward(l).is_ok());
        assert!(matches!(g.backward(l), Err(Error::Contract(_))));
    }

    #[test]
    fn disconnected_params_get_zero_grads() {
        let g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let unused = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let grads = g.backward(x.sum()).unwrap();
        assert_eq!(grads.get(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn grad_check_quadratic_and_constant() {
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        let err = grad_check(|_, v| Ok(v.square().sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
        let err = grad_check(
            |g, _| Ok(g.constant(Tensor::scalar(4.0))),
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_rejects_non_scalar() {
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        let r = grad_check(|_, v| Ok(v.silu()), &x, 1e-5);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn determinism_bit_identical() {
        let run = || {
            let mut r = rng();
            let g = Graph::new();
            let x = g.param(Tensor::<f64>::randn(&[4, 6], 1.0, &mut r));
            let w = g.param(Tensor::randn(&[6, 3], 1.0, &mut r));
            let l = x.matmul(w).unwrap().silu().sum();
            let gr = g.backward(l).unwrap();
            (l.item(), gr.get(x), gr.get(w))
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }
}
