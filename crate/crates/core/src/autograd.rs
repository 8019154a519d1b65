//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every recorded node only refers to earlier nodes, so a single reverse
//! sweep visits operations in a valid topological order.

use crate::ops;
use crate::tensor::{Element, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<E: Element> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<E>,
    },
    Mse(Var, Var),
    SelectedMapMse {
        a: Var,
        b: Var,
        mask: Vec<bool>,
    },
    Add(Var, Var),
    Scale(Var, E),
    Sum(Var),
    Reshape(Var),
    MapNormalize {
        input: Var,
        eps: E,
        extrema: Vec<(usize, usize)>,
    },
}

impl<E: Element> Op<E> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::Relu(x) | Op::GlobalAvgPool(x) | Op::Scale(x, _) | Op::Sum(x) | Op::Reshape(x) => {
                vec![*x]
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::Mse(a, b) | Op::Add(a, b) => vec![*a, *b],
            Op::SelectedMapMse { a, b, .. } => vec![*a, *b],
            Op::MapNormalize { input, .. } => vec![*input],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Linear { .. } => "linear",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Mse(..) => "mse",
            Op::SelectedMapMse { .. } => "selected_map_mse",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Reshape(_) => "reshape",
            Op::MapNormalize { .. } => "map_normalize",
        }
    }
}

#[derive(Debug)]
struct Node<E: Element> {
    value: Tensor<E>,
    op: Op<E>,
}

/// Records operations in execution order and replays them backwards.
#[derive(Debug, Default)]
pub struct Tape<E: Element = f32> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input. Gradients accumulate on it when it requires them.
    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut value: Tensor<E>) -> Var {
        value.set_requires_grad(false);
        value.zero_grad();
        self.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated on a leaf by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<E>> {
        let g = self.nodes[v.0].value.grad().map(<[E]>::to_vec);
        self.nodes[v.0].value.zero_grad();
        g
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    fn push(&mut self, mut value: Tensor<E>, op: Op<E>) -> Var {
        let tracked = op
            .inputs()
            .iter()
            .any(|v| self.nodes[v.0].value.requires_grad());
        value.set_requires_grad(tracked);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        self.push(out, Op::Relu(input))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(input))?;
        Ok(self.push(out, Op::GlobalAvgPool(input)))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::linear(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            loss,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mse(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mse(a, b)))
    }

    pub fn selected_map_mse(&mut self, a: Var, b: Var, mask: Vec<bool>) -> Result<Var> {
        let out = ops::selected_map_mse(self.value(a), self.value(b), &mask)?;
        Ok(self.push(out, Op::SelectedMapMse { a, b, mask }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
                detail: "shapes must be identical".into(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, input: Var, factor: E) -> Var {
        let t = self.value(input);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&v| v * factor).collect(),
        )
        .expect("shape preserved");
        self.push(out, Op::Scale(input, factor))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(input))
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let mut out = self.value(input).clone();
        out.zero_grad();
        let out = out.reshape(shape)?;
        Ok(self.push(out, Op::Reshape(input)))
    }

    /// Min-max normalises each trailing `H x W` map.
    pub fn map_normalize(&mut self, input: Var, eps: E) -> Result<Var> {
        let (out, extrema) = ops::map_minmax_normalize(self.value(input), eps)?;
        Ok(self.push(out, Op::MapNormalize { input, eps, extrema }))
    }

    /// Propagates d(loss)/d(node) to every leaf that requires a gradient.
    ///
    /// Leaf gradients accumulate across calls; call [`Tape::zero_grads`] to
    /// reset them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        if !self.needs(loss) && !matches!(self.nodes[loss.0].op, Op::Leaf) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<E>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![E::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                if self.nodes[idx].value.requires_grad() {
                    self.nodes[idx].value.accumulate_grad(&g)?;
                }
                continue;
            }
            for (input, gi) in self.backward_node(idx, &g)? {
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[E]) -> Result<Vec<(Var, Vec<E>)>> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (gi, gk) = ops::conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    *stride,
                    *padding,
                    self.needs(*input),
                    self.needs(*kernel),
                )?;
                out.extend(gi.map(|gi| (*input, gi)));
                out.extend(gk.map(|gk| (*kernel, gk)));
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    out.push((*x, ops::relu_backward(self.value(*x), g)));
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.needs(*x) {
                    out.push((*x, ops::global_avg_pool_backward(self.value(*x).shape(), g)));
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (gi, gw, gb) = ops::linear_backward(self.value(*input), self.value(*weight), g);
                for (v, gv) in [(*input, gi), (*weight, gw), (*bias, gb)] {
                    if self.needs(v) {
                        out.push((v, gv));
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.needs(*logits) {
                    let classes = self.value(*logits).shape()[1];
                    out.push((
                        *logits,
                        ops::softmax_cross_entropy_backward(probs, labels, classes, g[0]),
                    ));
                }
            }
            Op::Mse(a, b) => {
                let ga = ops::mse_backward(self.value(*a), self.value(*b), g[0]);
                if self.needs(*b) {
                    out.push((*b, ga.iter().map(|&v| -v).collect()));
                }
                if self.needs(*a) {
                    out.push((*a, ga));
                }
            }
            Op::SelectedMapMse { a, b, mask } => {
                let ga = ops::selected_map_mse_backward(self.value(*a), self.value(*b), mask, g[0]);
                if self.needs(*b) {
                    out.push((*b, ga.iter().map(|&v| -v).collect()));
                }
                if self.needs(*a) {
                    out.push((*a, ga));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        out.push((v, g.to_vec()));
                    }
                }
            }
            Op::Scale(x, factor) => {
                if self.needs(*x) {
                    out.push((*x, g.iter().map(|&v| v * *factor).collect()));
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    out.push((*x, vec![g[0]; self.value(*x).numel()]));
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    out.push((*x, g.to_vec()));
                }
            }
            Op::MapNormalize { input, eps, extrema } => {
                if self.needs(*input) {
                    out.push((
                        *input,
                        ops::map_minmax_normalize_backward(self.value(*input), extrema, *eps, g),
                    ));
                }
            }
        }
        debug_assert!(
            out.iter().all(|(v, gv)| gv.len() == self.value(*v).numel()),
            "{} produced a gradient of the wrong size",
            node.op.name()
        );
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_relative_error, numeric_grad};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full([2, 3, 4], 0.3).with_requires_grad(true));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn backward_accumulates_and_skips_disconnected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full([3], 1.0).with_requires_grad(true));
        let unused = tape.leaf(Tensor::full([3], 1.0).with_requires_grad(true));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
        assert!(tape.grad(unused).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full([3], 1.0).with_requires_grad(true));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn relu_grad_masks_and_matches_fd() {
        // values kept away from the kink
        let x0 = Tensor::<f64>::new([6], vec![-0.8, -0.3, 0.2, 0.5, 1.1, -0.05]).unwrap();
        let w = random(&[6], 9);
        let f = |x: &Tensor<f64>| -> f64 {
            let r = ops::relu(x);
            r.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(x0.clone().with_requires_grad(true));
        let r = tape.relu(x);
        let xr = tape.reshape(r, [1, 6]).unwrap();
        let wm = tape.constant(w.clone().reshape([1, 6]).unwrap());
        let b = tape.constant(Tensor::zeros([1]));
        let y = tape.linear(xr, wm, b).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(x).unwrap().to_vec();
        let numeric = numeric_grad(&x0, 1e-3, f);
        assert!(max_relative_error(&analytic, &numeric) < 1e-4);
        for (i, &v) in x0.data().iter().enumerate() {
            if v < 0.0 {
                assert_eq!(analytic[i], 0.0);
            }
        }
    }

    #[test]
    fn gap_grad_is_uniform() {
        let x0 = random(&[2, 3, 4, 5], 1);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(x0.clone().with_requires_grad(true));
        let p = tape.global_avg_pool(x).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| (g - 1.0 / 20.0).abs() < 1e-15));
        let numeric = numeric_grad(&x0, 1e-3, |x| ops::global_avg_pool(x).unwrap().data().iter().sum());
        assert!(max_relative_error(tape.grad(x).unwrap(), &numeric) < 1e-4);
    }

    #[test]
    fn cross_entropy_grad_is_softmax_minus_onehot() {
        let logits0 = random(&[3, 5], 2);
        let labels = [1usize, 4, 0];
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(logits0.clone().with_requires_grad(true));
        let loss = tape.softmax_cross_entropy(l, &labels).unwrap();
        tape.backward(loss).unwrap();
        let probs = ops::softmax_rows(logits0.data(), 5);
        let g = tape.grad(l).unwrap();
        for b in 0..3 {
            for c in 0..5 {
                let onehot = if labels[b] == c { 1.0 } else { 0.0 };
                let want = (probs[b * 5 + c] - onehot) / 3.0;
                assert!((g[b * 5 + c] - want).abs() < 1e-12);
            }
        }
        let numeric = numeric_grad(&logits0, 1e-3, |x| {
            ops::softmax_cross_entropy(x, &labels).unwrap().0.item().unwrap()
        });
        assert!(max_relative_error(g, &numeric) < 1e-4);
    }

    #[test]
    fn mse_grad_matches_closed_form() {
        let a0 = random(&[4, 3], 3);
        let b0 = random(&[4, 3], 4);
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(a0.clone().with_requires_grad(true));
        let b = tape.constant(b0.clone());
        let loss = tape.mse(a, b).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(a).unwrap();
        for i in 0..12 {
            let want = 2.0 * (a0.data()[i] - b0.data()[i]) / 12.0;
            assert!((g[i] - want).abs() < 1e-12);
        }
        let numeric = numeric_grad(&a0, 1e-3, |x| ops::mse(x, &b0).unwrap().item().unwrap());
        assert!(max_relative_error(g, &numeric) < 1e-4);
    }

    #[test]
    fn conv_and_linear_grads_match_fd() {
        let x0 = random(&[2, 3, 6, 6], 5);
        let k0 = random(&[4, 3, 3, 3], 6);
        let w0 = random(&[3, 4], 7);
        let b0 = random(&[3], 8);
        let labels = [2usize, 0];
        let net = |x: &Tensor<f64>, k: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            let h = ops::conv2d(x, k, 2, 1).unwrap();
            let p = ops::global_avg_pool(&h).unwrap();
            let y = ops::linear(&p, w, b).unwrap();
            ops::softmax_cross_entropy(&y, &labels).unwrap().0.item().unwrap()
        };
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(x0.clone().with_requires_grad(true));
        let k = tape.leaf(k0.clone().with_requires_grad(true));
        let w = tape.leaf(w0.clone().with_requires_grad(true));
        let b = tape.leaf(b0.clone().with_requires_grad(true));
        let h = tape.conv2d(x, k, 2, 1).unwrap();
        let p = tape.global_avg_pool(h).unwrap();
        let y = tape.linear(p, w, b).unwrap();
        let loss = tape.softmax_cross_entropy(y, &labels).unwrap();
        tape.backward(loss).unwrap();

        let nx = numeric_grad(&x0, 1e-3, |x| net(x, &k0, &w0, &b0));
        let nk = numeric_grad(&k0, 1e-3, |k| net(&x0, k, &w0, &b0));
        let nw = numeric_grad(&w0, 1e-3, |w| net(&x0, &k0, w, &b0));
        let nb = numeric_grad(&b0, 1e-3, |b| net(&x0, &k0, &w0, b));
        assert!(max_relative_error(tape.grad(x).unwrap(), &nx) < 1e-4);
        assert!(max_relative_error(tape.grad(k).unwrap(), &nk) < 1e-4);
        assert!(max_relative_error(tape.grad(w).unwrap(), &nw) < 1e-4);
        assert!(max_relative_error(tape.grad(b).unwrap(), &nb) < 1e-4);
    }

    #[test]
    fn pointwise_conv_grads_match_fd() {
        let x0 = random(&[2, 4, 3, 3], 12);
        let k0 = random(&[5, 4, 1, 1], 13);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(x0.clone().with_requires_grad(true));
        let k = tape.leaf(k0.clone().with_requires_grad(true));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        let target = tape.constant(Tensor::zeros(tape.value(y).shape().to_vec()));
        let loss = tape.mse(y, target).unwrap();
        tape.backward(loss).unwrap();
        let n = 2.0 * 5.0 * 9.0;
        let g = |x: &Tensor<f64>, k: &Tensor<f64>| {
            let y = ops::conv2d(x, k, 1, 0).unwrap();
            y.data().iter().map(|v| v * v).sum::<f64>() / n
        };
        let nx = numeric_grad(&x0, 1e-3, |x| g(x, &k0));
        let nk = numeric_grad(&k0, 1e-3, |k| g(&x0, k));
        assert!(max_relative_error(tape.grad(x).unwrap(), &nx) < 1e-4);
        assert!(max_relative_error(tape.grad(k).unwrap(), &nk) < 1e-4);
    }

    #[test]
    fn map_normalize_grads_match_fd() {
        let x0 = random(&[2, 3, 3, 4], 21);
        let w = random(&[2, 3, 3, 4], 22);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(x0.clone().with_requires_grad(true));
        let y = tape.map_normalize(x, 1e-6).unwrap();
        let target = tape.constant(w.clone());
        let loss = tape.mse(y, target).unwrap();
        tape.backward(loss).unwrap();
        let nx = numeric_grad(&x0, 1e-5, |x| {
            let (y, _) = ops::map_minmax_normalize(x, 1e-6).unwrap();
            ops::mse(&y, &w).unwrap().item().unwrap()
        });
        assert!(max_relative_error(tape.grad(x).unwrap(), &nx) < 1e-4);
    }

    #[test]
    fn map_normalize_sends_constant_maps_to_zero() {
        let x = Tensor::<f32>::full([1, 2, 3, 3], 4.5);
        let (y, _) = ops::map_minmax_normalize(&x, 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
