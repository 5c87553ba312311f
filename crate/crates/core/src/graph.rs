//! Reverse-mode autodiff over a flat tape of nodes.
//!
//! A [`Graph`] is rebuilt for every forward pass: each operation validates
//! its operands, computes its value eagerly, and records what it needs for
//! the backward sweep. [`Graph::backward`] walks the tape once in reverse
//! insertion order, which visits every node after all of its consumers, so a
//! single pass accumulates complete gradients. Contributions to a node are
//! added in decreasing consumer order and each kernel accumulates in fixed
//! index order, making gradients bit-reproducible run to run regardless of
//! thread count.

use crate::error::{Error, Result};
use crate::ops::{self, CombineMode, PointwiseFn};
use crate::tensor::Tensor;

/// Handle to a node in one specific [`Graph`]. Ids are only meaningful for
/// the graph that created them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// An operation with a hand-written backward pass, for losses whose gradient
/// is cheaper or clearer derived analytically than composed from primitives.
pub trait CustomOp: std::fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradient with respect to each input, in the order the ids were passed
    /// to [`Graph::custom`]. Each returned buffer must match its input's
    /// element count; `grad_out` has one entry per output element.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>>;
}

enum OpRecord {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    Pointwise {
        input: NodeId,
        f: PointwiseFn,
    },
    ChannelSoftmax {
        input: NodeId,
    },
    MaxPool2 {
        input: NodeId,
    },
    BilinearUp2 {
        input: NodeId,
    },
    SumPool {
        input: NodeId,
        factor: usize,
    },
    Combine {
        a: NodeId,
        b: NodeId,
        mode: CombineMode,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    SumChannels {
        input: NodeId,
    },
    SumAll {
        input: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f64,
    },
    Custom {
        inputs: Vec<NodeId>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: OpRecord,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: OpRecord) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers an input tensor (image, target, or parameter). Leaves are
    /// where gradients come to rest.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, OpRecord::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated at `id` by the last [`Graph::backward`] call;
    /// `None` if the node does not influence the differentiated scalar.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Copy of the node's value with its gradient attached (zeros if the
    /// node received none).
    pub fn value_with_grad(&self, id: NodeId) -> Tensor {
        let node = &self.nodes[id.0];
        let mut t = node.value.clone();
        let g = node
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        t.set_grad(g);
        t
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let value = ops::conv2d_forward(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            stride,
            padding,
        )?;
        Ok(self.push(
            value,
            OpRecord::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn pointwise(&mut self, input: NodeId, f: PointwiseFn) -> NodeId {
        let value = ops::pointwise_forward(self.value(input), f);
        self.push(value, OpRecord::Pointwise { input, f })
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        self.pointwise(input, PointwiseFn::Relu)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        self.pointwise(input, PointwiseFn::Sigmoid)
    }

    pub fn channel_softmax(&mut self, input: NodeId) -> Result<NodeId> {
        let value = ops::channel_softmax_forward(self.value(input))?;
        Ok(self.push(value, OpRecord::ChannelSoftmax { input }))
    }

    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let value = ops::maxpool2_forward(self.value(input))?;
        Ok(self.push(value, OpRecord::MaxPool2 { input }))
    }

    pub fn bilinear_up2(&mut self, input: NodeId) -> Result<NodeId> {
        let value = ops::bilinear_up2_forward(self.value(input))?;
        Ok(self.push(value, OpRecord::BilinearUp2 { input }))
    }

    pub fn sumpool(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        let value = ops::sumpool_forward(self.value(input), factor)?;
        Ok(self.push(value, OpRecord::SumPool { input, factor }))
    }

    fn combine(&mut self, a: NodeId, b: NodeId, mode: CombineMode) -> Result<NodeId> {
        let value = ops::combine_forward(self.value(a), self.value(b), mode)?;
        Ok(self.push(value, OpRecord::Combine { a, b, mode }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.combine(a, b, CombineMode::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.combine(a, b, CombineMode::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.combine(a, b, CombineMode::Mul)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::concat_channels_forward(self.value(a), self.value(b))?;
        Ok(self.push(value, OpRecord::ConcatChannels { a, b }))
    }

    pub fn sum_channels(&mut self, input: NodeId) -> Result<NodeId> {
        let value = ops::sum_channels_forward(self.value(input))?;
        Ok(self.push(value, OpRecord::SumChannels { input }))
    }

    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let value = ops::sum_all_forward(self.value(input));
        self.push(value, OpRecord::SumAll { input })
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::invalid("scale", format!("factor {} is not finite", factor)));
        }
        let value = ops::scale_forward(self.value(input), factor);
        Ok(self.push(value, OpRecord::Scale { input, factor }))
    }

    /// Inserts a node whose value the caller computed and whose gradient the
    /// given [`CustomOp`] provides. All inputs must already be in the graph.
    pub fn custom(&mut self, inputs: &[NodeId], value: Tensor, op: Box<dyn CustomOp>) -> NodeId {
        self.push(
            value,
            OpRecord::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Reverse sweep from a scalar node. Clears all previous gradients, then
    /// fills in `grad` for every node that influences `root`.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!(
                    "root must be scalar, got shape {:?}",
                    self.nodes[root.0].value.shape()
                ),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            {
                let (parents, rest) = self.nodes.split_at_mut(id);
                let node = &rest[0];
                match &node.op {
                    OpRecord::Leaf => {}
                    OpRecord::Conv2d {
                        input,
                        kernel,
                        bias,
                        stride,
                        padding,
                    } => {
                        let g_t = Tensor::from_vec(node.value.shape().to_vec(), g.clone())?;
                        let (gi, gk, gb) = ops::conv2d_backward(
                            &parents[input.0].value,
                            &parents[kernel.0].value,
                            *stride,
                            *padding,
                            &g_t,
                        )?;
                        accumulate(&mut parents[input.0], gi.into_data());
                        accumulate(&mut parents[kernel.0], gk.into_data());
                        accumulate(&mut parents[bias.0], gb.into_data());
                    }
                    OpRecord::Pointwise { input, f } => {
                        let gi =
                            ops::pointwise_backward(&parents[input.0].value, &node.value, *f, &g);
                        accumulate(&mut parents[input.0], gi);
                    }
                    OpRecord::ChannelSoftmax { input } => {
                        let gi = ops::channel_softmax_backward(&node.value, &g);
                        accumulate(&mut parents[input.0], gi);
                    }
                    OpRecord::MaxPool2 { input } => {
                        let g_t = Tensor::from_vec(node.value.shape().to_vec(), g.clone())?;
                        let gi = ops::maxpool2_backward(&parents[input.0].value, &g_t);
                        accumulate(&mut parents[input.0], gi);
                    }
                    OpRecord::BilinearUp2 { input } => {
                        let g_t = Tensor::from_vec(node.value.shape().to_vec(), g.clone())?;
                        let gi = ops::bilinear_up2_backward(&parents[input.0].value, &g_t);
                        accumulate(&mut parents[input.0], gi);
                    }
                    OpRecord::SumPool { input, factor } => {
                        let g_t = Tensor::from_vec(node.value.shape().to_vec(), g.clone())?;
                        let gi = ops::sumpool_backward(&parents[input.0].value, *factor, &g_t);
                        accumulate(&mut parents[input.0], gi);
                    }
                    OpRecord::Combine { a, b, mode } => {
                        let (ga, gb) = ops::combine_backward(
                            &parents[a.0].value,
                            &parents[b.0].value,
                            *mode,
                            &g,
                        );
                        accumulate(&mut parents[a.0], ga);
                        accumulate(&mut parents[b.0], gb);
                    }
                    OpRecord::ConcatChannels { a, b } => {
                        let (ga, gb) = ops::concat_channels_backward(
                            &parents[a.0].value,
                            &parents[b.0].value,
                            &g,
                        );
                        accumulate(&mut parents[a.0], ga);
                        accumulate(&mut parents[b.0], gb);
                    }
                    OpRecord::SumChannels { input } => {
                        let gi = ops::sum_channels_backward(&parents[input.0].value, &g);
                        accumulate(&mut parents[input.0], gi);
                    }
                    OpRecord::SumAll { input } => {
                        let gi = ops::sum_all_backward(&parents[input.0].value, &g);
                        accumulate(&mut parents[input.0], gi);
                    }
                    OpRecord::Scale { input, factor } => {
                        let gi = ops::scale_backward(*factor, &g);
                        accumulate(&mut parents[input.0], gi);
                    }
                    OpRecord::Custom { inputs, op } => {
                        let refs: Vec<&Tensor> =
                            inputs.iter().map(|i| &parents[i.0].value).collect();
                        let grads = op.backward(&refs, &node.value, &g);
                        assert_eq!(
                            grads.len(),
                            inputs.len(),
                            "{}: backward must return one gradient per input",
                            op.name()
                        );
                        for (i, gi) in inputs.iter().zip(grads) {
                            accumulate(&mut parents[i.0], gi);
                        }
                    }
                }
            }
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }
}

fn accumulate(node: &mut Node, contribution: Vec<f64>) {
    debug_assert_eq!(contribution.len(), node.value.numel());
    match &mut node.grad {
        Some(g) => {
            for (acc, c) in g.iter_mut().zip(contribution) {
                *acc += c;
            }
        }
        None => node.grad = Some(contribution),
    }
}

/// Compares analytic gradients against central finite differences.
///
/// `build` constructs the scalar objective from leaves created out of
/// `inputs`; it is re-run twice per input element for the two-sided
/// difference. Returns the worst relative error
/// `|fd - analytic| / max(|fd|, |analytic|, 1e-8)` over all elements.
///
/// The step must lie in [1e-7, 1e-3]: larger steps leave too much
/// truncation error to certify a gradient, smaller ones drown in f64
/// cancellation.
pub fn grad_check<F>(build: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(
            "grad_check",
            format!("step {:e} outside [1e-7, 1e-3]", eps),
        ));
    }

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = build(&mut g, &ids)?;
    if g.value(root).numel() != 1 {
        return Err(Error::invalid(
            "grad_check",
            format!("objective must be scalar, got shape {:?}", g.value(root).shape()),
        ));
    }
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            g.grad(id)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; g.value(id).numel()])
        })
        .collect();

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let root = build(&mut g, &ids)?;
        Ok(g.value(root).item())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let original = t.data()[j];
            work[ti].data_mut()[j] = original + eps;
            let up = eval(&work)?;
            work[ti].data_mut()[j] = original - eps;
            let down = eval(&work)?;
            work[ti].data_mut()[j] = original;
            let fd = (up - down) / (2.0 * eps);
            let a = analytic[ti][j];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_two_x() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1, 1, 1, 3], vec![1.0, -2.0, 3.0]).unwrap());
        let sq = g.pointwise(x, PointwiseFn::Square);
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn product_rule_through_mul() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap());
        let b = g.leaf(Tensor::from_vec(vec![2], vec![5.0, -6.0]).unwrap());
        let p = g.mul(a, b).unwrap();
        let loss = g.sum_all(p);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[5.0, -6.0]);
        assert_eq!(g.grad(b).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn fan_out_accumulates_both_paths() {
        // loss = sum(x^2 + x^2), so d/dx = 4x; exercises gradient
        // accumulation when one node feeds two consumers.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![2], vec![1.5, -0.5]).unwrap());
        let sq = g.pointwise(x, PointwiseFn::Square);
        let twice = g.add(sq, sq).unwrap();
        let loss = g.sum_all(twice);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0, -2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn unrelated_leaf_gets_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.0));
        let y = g.leaf(Tensor::scalar(2.0));
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert!(g.grad(y).is_none());
        assert_eq!(g.value_with_grad(y).grad().unwrap(), &[0.0]);
    }

    #[test]
    fn repeated_backward_resets_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let sq = g.pointwise(x, PointwiseFn::Square);
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn scale_rejects_non_finite_factor() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.0));
        assert!(g.scale(x, f64::NAN).is_err());
        assert!(g.scale(x, 2.0).is_ok());
    }

    #[test]
    fn grad_check_validates_step_size() {
        let inputs = [Tensor::scalar(1.0)];
        let build = |g: &mut Graph, ids: &[NodeId]| Ok(g.sum_all(ids[0]));
        assert!(grad_check(build, &inputs, 1e-2).is_err());
        assert!(grad_check(build, &inputs, 1e-8).is_err());
        assert!(grad_check(build, &inputs, 1e-5).unwrap() < 1e-10);
    }

    #[test]
    fn grad_check_passes_on_a_small_composite() {
        let inputs = [
            Tensor::from_vec(vec![1, 2, 2, 2], vec![0.3, -0.7, 1.2, 0.4, -0.2, 0.9, 0.1, -1.1])
                .unwrap(),
            Tensor::from_vec(vec![1, 2, 2, 2], vec![0.5, 0.6, -0.4, 1.0, 0.8, -0.3, 0.2, 0.7])
                .unwrap(),
        ];
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let s = g.channel_softmax(ids[0])?;
            let att = g.sigmoid(ids[1]);
            let p = g.mul(s, att)?;
            let sq = g.pointwise(p, PointwiseFn::Square);
            Ok(g.sum_all(sq))
        };
        let worst = grad_check(build, &inputs, 1e-5).unwrap();
        assert!(worst < 1e-8, "worst relative error {}", worst);
    }

    #[test]
    fn grad_check_catches_a_wrong_gradient() {
        // A deliberately broken custom op: claims d(sum x^2)/dx = x instead
        // of 2x. The checker must flag it.
        #[derive(Debug)]
        struct WrongSquareSum;
        impl CustomOp for WrongSquareSum {
            fn name(&self) -> &'static str {
                "wrong_square_sum"
            }
            fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64]) -> Vec<Vec<f64>> {
                vec![inputs[0].data().iter().map(|&x| g[0] * x).collect()]
            }
        }
        let inputs = [Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap()];
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let v: f64 = g.value(ids[0]).data().iter().map(|x| x * x).sum();
            Ok(g.custom(&[ids[0]], Tensor::scalar(v), Box::new(WrongSquareSum)))
        };
        let worst = grad_check(build, &inputs, 1e-5).unwrap();
        assert!(worst > 0.4, "a halved gradient must be caught, got {}", worst);
    }

    #[test]
    fn gradients_are_bitwise_reproducible() {
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::from_fn(&[1, 4, 8, 8], |i| (i as f64 * 0.37).sin()));
            let k = g.leaf(Tensor::from_fn(&[2, 4, 3, 3], |i| (i as f64 * 0.11).cos() * 0.1));
            let b = g.leaf(Tensor::zeros(&[2]));
            let c = g.conv2d(x, k, b, 1, 1).unwrap();
            let r = g.relu(c);
            let s = g.sum_all(r);
            g.backward(s).unwrap();
            (
                g.grad(x).unwrap().to_vec(),
                g.grad(k).unwrap().to_vec(),
                g.grad(b).unwrap().to_vec(),
            )
        };
        assert_eq!(run(), run());
    }
}
