//! Reverse-mode tape over the kernel set.
//!
//! A [`Graph`] records every operation of a forward pass; [`Graph::backward`]
//! replays it in reverse and returns exact gradients for every named
//! parameter leaf. Constants never receive gradients, which is how target and
//! teacher features get their stop-gradient behavior.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::kernels as k;
use crate::nn::params::GradSet;
use crate::nn::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

enum Op<T> {
    Input,
    Param,
    Const,
    Conv2d {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    Relu {
        x: VarId,
    },
    MaxPool2d {
        x: VarId,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        x: VarId,
    },
    Linear {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
    },
    MapToRows {
        x: VarId,
    },
    GatherRows {
        x: VarId,
        indices: Vec<usize>,
    },
    CosineRows {
        a: VarId,
        b: VarId,
        norm_a: Vec<T>,
        norm_b: Vec<T>,
    },
    MeanAll {
        x: VarId,
    },
    Affine {
        x: VarId,
        mul: f64,
    },
    WeightedSum {
        xs: Vec<VarId>,
        ws: Vec<f64>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, VarId>,
    bn_updates: Vec<(String, Tensor<T>)>,
    grads: Vec<Option<Tensor<T>>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            bn_updates: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, v: VarId) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: VarId) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, value: Tensor<T>) -> VarId {
        self.push(value, Op::Input, true)
    }

    /// Named trainable leaf. Re-registering a name returns the existing leaf,
    /// so both view forwards of a step share one gradient accumulator.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> VarId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(value, Op::Param, true);
        self.params.insert(name.to_string(), id);
        id
    }

    /// Stop-gradient leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> VarId {
        self.push(value, Op::Const, false)
    }

    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
        pad: usize,
    ) -> Result<VarId> {
        let y = k::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|v| self.value(v)),
            stride,
            pad,
        )?;
        let needs =
            self.needs(x) || self.needs(w) || b.map(|v| self.needs(v)).unwrap_or(false);
        Ok(self.push(y, Op::Conv2d { x, w, b, stride, pad }, needs))
    }

    /// Batch normalization. In training mode the batch statistics are used
    /// and an updated running pair is queued under `stat_name`; in eval mode
    /// the provided running statistics normalize the input as constants.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
        momentum: f64,
        training: bool,
        stat_name: &str,
    ) -> Result<VarId> {
        let fwd = k::batch_norm_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
            momentum,
            training,
        )?;
        if let Some((mean, var)) = fwd.new_running {
            self.bn_updates
                .push((format!("{stat_name}.running_mean"), mean));
            self.bn_updates
                .push((format!("{stat_name}.running_var"), var));
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            fwd.y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                training,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let y = k::relu_forward(self.value(x));
        let needs = self.needs(x);
        self.push(y, Op::Relu { x }, needs)
    }

    pub fn max_pool2d(&mut self, x: VarId, kernel: usize, stride: usize) -> Result<VarId> {
        let (y, argmax) = k::max_pool2d_forward(self.value(x), kernel, stride)?;
        let needs = self.needs(x);
        Ok(self.push(y, Op::MaxPool2d { x, argmax }, needs))
    }

    pub fn global_avg_pool(&mut self, x: VarId) -> Result<VarId> {
        let y = k::global_avg_pool_forward(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(y, Op::GlobalAvgPool { x }, needs))
    }

    pub fn linear(&mut self, x: VarId, w: VarId, b: Option<VarId>) -> Result<VarId> {
        let y = k::linear_forward(self.value(x), self.value(w), b.map(|v| self.value(v)))?;
        let needs =
            self.needs(x) || self.needs(w) || b.map(|v| self.needs(v)).unwrap_or(false);
        Ok(self.push(y, Op::Linear { x, w, b }, needs))
    }

    pub fn map_to_rows(&mut self, x: VarId) -> Result<VarId> {
        let y = k::map_to_rows(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(y, Op::MapToRows { x }, needs))
    }

    pub fn gather_rows(&mut self, x: VarId, indices: Vec<usize>) -> Result<VarId> {
        let y = k::gather_rows(self.value(x), &indices)?;
        let needs = self.needs(x);
        Ok(self.push(y, Op::GatherRows { x, indices }, needs))
    }

    pub fn cosine_rows(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let fwd = k::cosine_rows_forward(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            fwd.cos,
            Op::CosineRows {
                a,
                b,
                norm_a: fwd.norm_a,
                norm_b: fwd.norm_b,
            },
            needs,
        ))
    }

    /// Mean over every element, producing a rank-0 scalar.
    pub fn mean_all(&mut self, x: VarId) -> VarId {
        let v = self.value(x);
        let inv = T::from_f64(1.0 / v.len() as f64);
        let mean = v.data().iter().fold(T::zero(), |acc, &e| acc + e) * inv;
        let needs = self.needs(x);
        self.push(Tensor::scalar(mean), Op::MeanAll { x }, needs)
    }

    /// Elementwise `mul * x + add`.
    pub fn affine(&mut self, x: VarId, mul: f64, add: f64) -> VarId {
        let m = T::from_f64(mul);
        let a = T::from_f64(add);
        let y = self.value(x).map(|v| m * v + a);
        let needs = self.needs(x);
        self.push(y, Op::Affine { x, mul }, needs)
    }

    /// Elementwise weighted sum of same-shaped vars.
    pub fn weighted_sum(&mut self, terms: &[(VarId, f64)]) -> Result<VarId> {
        if terms.is_empty() {
            return Err(Error::Usage("weighted_sum of no terms".into()));
        }
        let shape = self.value(terms[0].0).shape().to_vec();
        let mut data = vec![T::zero(); self.value(terms[0].0).len()];
        for &(v, w) in terms {
            if self.value(v).shape() != shape.as_slice() {
                return Err(Error::dim("weighted_sum", "operand shapes differ"));
            }
            let wt = T::from_f64(w);
            for (acc, &e) in data.iter_mut().zip(self.value(v).data()) {
                *acc += wt * e;
            }
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        let (xs, ws) = terms.iter().copied().unzip();
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::WeightedSum { xs, ws },
            needs,
        ))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.weighted_sum(&[(a, 1.0), (b, 1.0)])
    }

    /// Running-statistic updates queued by training-mode batch norm, in
    /// application order.
    pub fn take_bn_updates(&mut self) -> Vec<(String, Tensor<T>)> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Reverse sweep seeded with d(out)/d(out) = 1; `out` must be a scalar.
    pub fn backward(&mut self, out: VarId) -> Result<GradSet<T>> {
        if self.value(out).len() != 1 {
            return Err(Error::Usage(
                "backward requires a scalar output; use backward_with_upstream".into(),
            ));
        }
        let seed = Tensor::from_parts(self.value(out).shape().to_vec(), vec![T::one()]);
        self.backward_with_upstream(out, seed)
    }

    /// Gradients of `<upstream, out>` with respect to every parameter leaf
    /// and input. A graph can only be swept once.
    pub fn backward_with_upstream(
        &mut self,
        out: VarId,
        upstream: Tensor<T>,
    ) -> Result<GradSet<T>> {
        if self.consumed {
            return Err(Error::Usage("tape already consumed by backward".into()));
        }
        if upstream.shape() != self.value(out).shape() {
            return Err(Error::dim(
                "backward",
                format!(
                    "upstream shape {:?} != output shape {:?}",
                    upstream.shape(),
                    self.value(out).shape()
                ),
            ));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[out.0] = Some(upstream);

        for id in (0..=out.0).rev() {
            if !self.nodes[id].needs_grad {
                self.grads[id] = None;
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            match &self.nodes[id].op {
                Op::Input | Op::Param => {
                    // leaves keep their gradient for collection below
                    self.grads[id] = Some(g);
                }
                Op::Const => {}
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                    let grads = k::conv2d_backward(
                        self.value(x),
                        self.value(w),
                        b.is_some(),
                        stride,
                        pad,
                        &g,
                    )?;
                    self.accumulate(x, grads.dx);
                    self.accumulate(w, grads.dw);
                    if let (Some(bv), Some(db)) = (b, grads.db) {
                        self.accumulate(bv, db);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    training,
                } => {
                    let (x, gamma, beta, training) = (*x, *gamma, *beta, *training);
                    let grads = {
                        let gamma_t = &self.nodes[gamma.0].value;
                        k::batch_norm_backward(xhat, inv_std, gamma_t, training, &g)?
                    };
                    self.accumulate(x, grads.dx);
                    self.accumulate(gamma, grads.dgamma);
                    self.accumulate(beta, grads.dbeta);
                }
                Op::Relu { x } => {
                    let x = *x;
                    let dx = k::relu_backward(self.value(x), &g);
                    self.accumulate(x, dx);
                }
                Op::MaxPool2d { x, argmax } => {
                    let x = *x;
                    let dx = {
                        let shape = self.value(x).shape().to_vec();
                        k::max_pool2d_backward(&shape, argmax, &g)
                    };
                    self.accumulate(x, dx);
                }
                Op::GlobalAvgPool { x } => {
                    let x = *x;
                    let dx = k::global_avg_pool_backward(self.value(x).shape(), &g);
                    self.accumulate(x, dx);
                }
                Op::Linear { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let grads = k::linear_backward(self.value(x), self.value(w), b.is_some(), &g)?;
                    self.accumulate(x, grads.dx);
                    self.accumulate(w, grads.dw);
                    if let (Some(bv), Some(db)) = (b, grads.db) {
                        self.accumulate(bv, db);
                    }
                }
                Op::MapToRows { x } => {
                    let x = *x;
                    let dx = k::map_to_rows_backward(self.value(x).shape(), &g);
                    self.accumulate(x, dx);
                }
                Op::GatherRows { x, indices } => {
                    let x = *x;
                    let dx = k::scatter_add_rows(self.value(x).shape(), indices, &g);
                    self.accumulate(x, dx);
                }
                Op::CosineRows {
                    a,
                    b,
                    norm_a,
                    norm_b,
                } => {
                    let (a, b) = (*a, *b);
                    let cos = &self.nodes[id].value;
                    let mut da = None;
                    let mut db = None;
                    if self.needs(a) {
                        da = Some(k::cosine_rows_backward_side(
                            self.value(a),
                            self.value(b),
                            norm_a,
                            norm_b,
                            cos,
                            &g,
                        ));
                    }
                    if self.needs(b) {
                        db = Some(k::cosine_rows_backward_side(
                            self.value(b),
                            self.value(a),
                            norm_b,
                            norm_a,
                            cos,
                            &g,
                        ));
                    }
                    if let Some(da) = da {
                        self.accumulate(a, da);
                    }
                    if let Some(db) = db {
                        self.accumulate(b, db);
                    }
                }
                Op::MeanAll { x } => {
                    let x = *x;
                    let shape = self.value(x).shape().to_vec();
                    let len = self.value(x).len();
                    let gv = g.scalar_value() * T::from_f64(1.0 / len as f64);
                    self.accumulate(x, Tensor::filled(&shape, gv));
                }
                Op::Affine { x, mul } => {
                    let x = *x;
                    let m = T::from_f64(*mul);
                    self.accumulate(x, g.map(|v| m * v));
                }
                Op::WeightedSum { xs, ws } => {
                    let terms: Vec<(VarId, f64)> =
                        xs.iter().copied().zip(ws.iter().copied()).collect();
                    for (v, w) in terms {
                        let wt = T::from_f64(w);
                        self.accumulate(v, g.map(|e| wt * e));
                    }
                }
            }
        }

        let mut out_grads = GradSet::new();
        for (name, &id) in &self.params {
            let g = match self.grads[id.0].take() {
                Some(g) => g,
                None => Tensor::zeros(self.nodes[id.0].value.shape()),
            };
            out_grads.insert(name.clone(), g);
        }
        Ok(out_grads)
    }

    fn accumulate(&mut self, v: VarId, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Gradient stored on an input leaf after a backward sweep.
    pub fn input_grad(&self, v: VarId) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn linear_weight_grad_matches_hand_formula() {
        // loss = sum(y) for y = W x: dL/dW[i][j] = x[j] for every i.
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 3], vec![2.0, -1.0, 0.5]).unwrap());
        let w = g.param("w", Tensor::zeros(&[2, 3]));
        let y = g.linear(x, w, None).unwrap();
        let sum = g_mean_times_len(&mut g, y);
        let loss = g.affine(sum, 1.0, 0.0);
        let grads = g.backward(loss).unwrap();
        let dw = grads.get("w").unwrap();
        for i in 0..2 {
            assert_relative_eq!(dw.data()[i * 3], 2.0);
            assert_relative_eq!(dw.data()[i * 3 + 1], -1.0);
            assert_relative_eq!(dw.data()[i * 3 + 2], 0.5);
        }
    }

    // sum(x) expressed through mean_all
    fn g_mean_times_len(g: &mut Graph<f64>, x: VarId) -> VarId {
        let len = g.value(x).len() as f64;
        let m = g.mean_all(x);
        g.affine(m, len, 0.0)
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = g.param("w", Tensor::filled(&[2, 2], 0.5));
        let y = g.linear(x, w, None).unwrap();
        let grads = g
            .backward_with_upstream(y, Tensor::zeros(&[2, 2]))
            .unwrap();
        assert!(grads.get("w").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn consumed_tape_errors_on_second_backward() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param("x", Tensor::scalar(3.0));
        let y = g.affine(x, 2.0, 0.0);
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_stop_gradients() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.param("a", Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let b = g.constant(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
        let c = g.cosine_rows(a, b).unwrap();
        let loss = g.mean_all(c);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.len(), 1);
        assert!(grads.contains("a"));
    }

    #[test]
    fn param_leaf_is_shared_and_accumulates() {
        // y = w*2 + w*3 => dy/dw = 5
        let mut g: Graph<f64> = Graph::new();
        let w1 = g.param("w", Tensor::scalar(1.0));
        let w2 = g.param("w", Tensor::scalar(1.0));
        assert_eq!(w1, w2);
        let y = g.weighted_sum(&[(w1, 2.0), (w2, 3.0)]).unwrap();
        let grads = g.backward(y).unwrap();
        assert_relative_eq!(grads.get("w").unwrap().scalar_value(), 5.0);
    }

    #[test]
    fn input_gradient_is_retrievable() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let w = g.param("w", Tensor::filled(&[1, 2], 1.0));
        let y = g.linear(x, w, None).unwrap();
        let loss = g.mean_all(y);
        g.backward(loss).unwrap();
        let gx = g.input_grad(x).unwrap();
        assert_eq!(gx.data(), &[1.0, 1.0]);
    }
}
