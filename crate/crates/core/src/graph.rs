//! Reverse-mode differentiation over a recorded computation graph.
//!
//! Every primitive computes its forward value eagerly and appends a node
//! holding the value and its parent references. Nodes are only ever
//! appended, so the node order is a topological order and
//! [`Graph::backward`] walks it in reverse.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Float;
use crate::tensor::{self, Axis, ConvGeom, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    /// ELU with alpha = 1.
    Elu,
    Relu,
    /// Exact GELU, `x * Phi(x)`.
    Gelu,
    Sigmoid,
    Ln,
    Abs,
    Exp,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    Unary {
        x: Var,
        kind: Unary,
    },
    Matmul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    Mean {
        x: Var,
        count: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Upsample2(Var),
    PixelShuffle {
        x: Var,
        r: usize,
    },
    PixelUnshuffle {
        x: Var,
        r: usize,
    },
    Fold {
        x: Var,
        axis: Axis,
        s: usize,
    },
    Unfold {
        x: Var,
        axis: Axis,
        s: usize,
    },
    Standardize {
        x: Var,
        eps: f64,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'s, T: Float> {
    nodes: Vec<Node<T>>,
    store: Option<&'s ParamStore<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Float> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s, T: Float> Graph<'s, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            store: None,
            params: HashMap::new(),
        }
    }

    pub fn with_params(store: &'s ParamStore<T>) -> Self {
        Graph {
            store: Some(store),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| Error::UnknownParam(format!("#{} (graph has no store)", id.index())))?;
        let p = store.get(id);
        let (value, trainable) = (p.value.clone(), p.trainable);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::broadcast::broadcast_binary(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::broadcast::broadcast_binary(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(y, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::broadcast::broadcast_binary(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, c) = (T::of(scale), T::of(shift));
        let y = self.value(x).map(|v| s * v + c);
        self.push(y, Op::Affine { x, scale }, &[x])
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let xv = self.value(x);
        if kind == Unary::Ln {
            if let Some(bad) = xv.data().iter().find(|v| **v <= T::zero()) {
                return Err(Error::Domain {
                    op: "ln",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        let y = match kind {
            Unary::Elu => xv.map(|v| if v > T::zero() { v } else { v.exp_m1() }),
            Unary::Relu => xv.map(|v| if v > T::zero() { v } else { T::zero() }),
            Unary::Gelu => xv.map(|v| v * phi_cdf(v)),
            Unary::Sigmoid => xv.map(sigmoid),
            Unary::Ln => xv.map(|v| v.ln()),
            Unary::Abs => xv.map(|v| v.abs()),
            Unary::Exp => xv.map(|v| v.exp()),
        };
        Ok(self.push(y, Op::Unary { x, kind }, &[x]))
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Elu)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Ln)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Matmul(a, b), &[a, b]))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let y = tensor::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(y, Op::Conv2d { x, w, b, geom }, &parents))
    }

    /// 1D convolution of `x [N, C, L]` with `w [Cout, C, k]`, zero padded
    /// by `padding` on both ends.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (&[n, c, l], &[co, ci, k]) = (&xs[..], &ws[..]) else {
            return Err(Error::shape("conv1d", "x [N, C, L] and w [Cout, C, k]", &xs));
        };
        let x4 = self.reshape(x, &[n, c, 1, l])?;
        let w4 = self.reshape(w, &[co, ci, 1, k])?;
        let geom = ConvGeom {
            stride: (1, 1),
            padding: (0, padding),
            groups: 1,
        };
        let y = self.conv2d(x4, w4, b, geom)?;
        let lo = self.shape(y)[3];
        self.reshape(y, &[n, co, lo])
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let y = tensor::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(y, Op::ConvT2d { x, w, b, geom }, &parents))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, s: usize) -> Result<Var> {
        let (y, argmax) = tensor::max_pool2d(self.value(x), k, s)?;
        Ok(self.push(y, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.affine(s, 1.0 / n as f64, 0.0)
    }

    /// Mean over `axes`, keeping them as extent 1.
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        let mut count = 1;
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::shape("mean_axes", format!("axis {a} in range"), &shape));
            }
            count *= shape[a];
            shape[a] = 1;
        }
        let inv = T::of(1.0 / count as f64);
        let y = tensor::reduce_to_shape(self.value(x), &shape)?.map(|v| v * inv);
        Ok(self.push(y, Op::Mean { x, count }, &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = tensor::softmax(self.value(x), axis)?;
        Ok(self.push(y, Op::Softmax { x, axis }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let y = tensor::permute(self.value(x), perm)?;
        Ok(self.push(y, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let mut perm: Vec<usize> = (0..self.value(x).rank()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(Error::shape(
                "transpose",
                format!("axes {a}, {b} in range"),
                self.shape(x),
            ));
        }
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let y = tensor::concat(&vals, axis)?;
        Ok(self.push(y, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let y = tensor::slice_axis(self.value(x), axis, start, len)?;
        Ok(self.push(y, Op::Slice { x, axis, start }, &[x]))
    }

    /// Splits `axis` into consecutive pieces of the given lengths.
    pub fn split(&mut self, x: Var, axis: usize, lens: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(lens.len());
        for &len in lens {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        if self.shape(x).get(axis) != Some(&start) {
            return Err(Error::shape(
                "split",
                format!("axis {axis} of extent {start}"),
                self.shape(x),
            ));
        }
        Ok(out)
    }

    pub fn bilinear_up2(&mut self, x: Var) -> Result<Var> {
        let y = tensor::bilinear_up2(self.value(x))?;
        Ok(self.push(y, Op::Upsample2(x), &[x]))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let y = tensor::pixel_shuffle(self.value(x), r)?;
        Ok(self.push(y, Op::PixelShuffle { x, r }, &[x]))
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let y = tensor::pixel_unshuffle(self.value(x), r)?;
        Ok(self.push(y, Op::PixelUnshuffle { x, r }, &[x]))
    }

    pub fn axial_fold(&mut self, x: Var, axis: Axis, s: usize) -> Result<Var> {
        let y = tensor::axial_fold(self.value(x), axis, s)?;
        Ok(self.push(y, Op::Fold { x, axis, s }, &[x]))
    }

    pub fn axial_unfold(&mut self, x: Var, axis: Axis, s: usize) -> Result<Var> {
        let y = tensor::axial_unfold(self.value(x), axis, s)?;
        Ok(self.push(y, Op::Unfold { x, axis, s }, &[x]))
    }

    /// Per-sample `(x - mean) / (sigma + eps)`.
    pub fn standardize(&mut self, x: Var, eps: f64) -> Var {
        let y = tensor::standardize(self.value(x), eps);
        self.push(y, Op::Standardize { x, eps }, &[x])
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// depends on a trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, tensor::reduce_to_shape(g, val(*a).shape())?);
                acc(*b, tensor::reduce_to_shape(g, val(*b).shape())?);
            }
            Op::Sub(a, b) => {
                acc(*a, tensor::reduce_to_shape(g, val(*a).shape())?);
                acc(*b, tensor::reduce_to_shape(&g.map(|v| -v), val(*b).shape())?);
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let ga = tensor::broadcast::broadcast_binary(g, val(*b), |x, y| x * y)?;
                    acc(*a, tensor::reduce_to_shape(&ga, val(*a).shape())?);
                }
                if needs(*b) {
                    let gb = tensor::broadcast::broadcast_binary(g, val(*a), |x, y| x * y)?;
                    acc(*b, tensor::reduce_to_shape(&gb, val(*b).shape())?);
                }
            }
            Op::Affine { x, scale } => {
                let s = T::of(*scale);
                acc(*x, g.map(|v| v * s));
            }
            Op::Unary { x, kind } => {
                let (xv, yv) = (val(*x), &node.value);
                let local: Box<dyn Fn(T, T) -> T> = match kind {
                    Unary::Elu => Box::new(|x, y| if x > T::zero() { T::one() } else { y + T::one() }),
                    Unary::Relu => Box::new(|x, _| if x > T::zero() { T::one() } else { T::zero() }),
                    Unary::Gelu => Box::new(|x, _| phi_cdf(x) + x * phi_pdf(x)),
                    Unary::Sigmoid => Box::new(|_, y| y * (T::one() - y)),
                    Unary::Ln => Box::new(|x, _| x.recip()),
                    Unary::Abs => Box::new(|x, _| {
                        if x > T::zero() {
                            T::one()
                        } else if x < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        }
                    }),
                    Unary::Exp => Box::new(|_, y| y),
                };
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data().iter().zip(yv.data()))
                    .map(|(&gv, (&xv, &yv))| gv * local(xv, yv))
                    .collect();
                acc(*x, Tensor::from_parts(xv.shape().to_vec(), data));
            }
            Op::Matmul(a, b) => {
                let (da, db) = tensor::matmul_backward(val(*a), val(*b), g)?;
                acc(*a, da);
                acc(*b, db);
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = tensor::conv2d_backward(val(*x), val(*w), g, *geom, needs(*x))?;
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::ConvT2d { x, w, b, geom } => {
                let (dx, dw, db) = tensor::conv_transpose2d_backward(val(*x), val(*w), g, *geom, needs(*x))?;
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::MaxPool { x, argmax } => {
                acc(*x, tensor::max_pool2d_backward(val(*x).shape(), argmax, g));
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                acc(*x, Tensor::full(val(*x).shape(), gv));
            }
            Op::Mean { x, count } => {
                let inv = T::of(1.0 / *count as f64);
                let zeros = Tensor::zeros(val(*x).shape());
                acc(*x, tensor::broadcast::broadcast_binary(&zeros, g, |_, v| v * inv)?);
            }
            Op::Softmax { x, axis } => {
                acc(*x, tensor::softmax_backward(&node.value, g, *axis)?);
            }
            Op::Reshape(x) => acc(*x, g.reshape(val(*x).shape())?),
            Op::Permute { x, perm } => {
                acc(*x, tensor::permute(g, &tensor::layout::inverse_perm(perm))?);
            }
            Op::Concat { xs, axis } => {
                let mut start = 0;
                for &v in xs {
                    let len = val(v).shape()[*axis];
                    acc(v, tensor::slice_axis(g, *axis, start, len)?);
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                acc(*x, tensor::layout::unslice_axis(g, val(*x).shape(), *axis, *start));
            }
            Op::Upsample2(x) => acc(*x, tensor::bilinear_up2_backward(val(*x).shape(), g)?),
            Op::PixelShuffle { x, r } => acc(*x, tensor::pixel_unshuffle(g, *r)?),
            Op::PixelUnshuffle { x, r } => acc(*x, tensor::pixel_shuffle(g, *r)?),
            Op::Fold { x, axis, s } => acc(*x, tensor::axial_unfold(g, *axis, *s)?),
            Op::Unfold { x, axis, s } => acc(*x, tensor::axial_fold(g, *axis, *s)?),
            Op::Standardize { x, eps } => acc(*x, tensor::standardize_backward(val(*x), g, *eps)),
        }
        Ok(())
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of a node, `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&v| self.wrt(v))
    }

    /// Gradient of every trainable parameter in `store`, zero when the
    /// parameter was not reached.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<(ParamId, Tensor<T>)> {
        store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| {
                let g = self
                    .param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
                (id, g)
            })
            .collect()
    }
}

fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn phi_cdf<T: Float>(v: T) -> T {
    T::of(0.5) * (T::one() + (v * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn phi_pdf<T: Float>(v: T) -> T {
    T::of(0.398_942_280_401_432_7) * (-(v * v) * T::of(0.5)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_example() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let b = g.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn linear_gradient_is_input() {
        let mut g = Graph::<f64>::new();
        let x = Tensor::from_vec(vec![0.5, -1.5, 2.0]);
        let w = g.variable(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let xv = g.constant(x.clone());
        let p = g.mul(w, xv).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).unwrap(), &x);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let mut g = Graph::<f64>::new();
        let w = g.variable(Tensor::zeros(&[3]));
        let s = g.sigmoid(w).unwrap();
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(w).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let w = g.variable(Tensor::zeros(&[3]));
        assert!(matches!(g.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_param_gets_zero() {
        let mut store = ParamStore::<f64>::new(1);
        let used = store.add("used", &[2], crate::param::Init::One).unwrap();
        let unused = store.add("unused", &[3], crate::param::Init::One).unwrap();
        let mut g = Graph::with_params(&store);
        let u = g.param(used).unwrap();
        let loss = g.sum(u);
        let grads = g.backward(loss).unwrap().for_store(&store);
        assert_eq!(grads[0].1.data(), &[1.0, 1.0]);
        assert_eq!(grads[1].0, unused);
        assert!(grads[1].1.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ln_rejects_non_positive() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(g.ln(x).is_err());
    }
}
