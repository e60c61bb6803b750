use super::kernels::{self, conv2d_backward, image_dims, matmul_nt, matmul_tn};
use super::{Scalar, Tensor};
use crate::error::{FamError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    AddChannelBias(Var, Var),
    Relu(Var),
    Conv2d(Var, Var),
    MaxPool(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<S>,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Records primitive operations in execution order for reverse-mode
/// differentiation. One tape per forward computation; tapes are not shared.
#[derive(Debug, Default)]
pub struct Tape<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
}

/// Result of [`Tape::backward`]: accumulated gradient per recorded value.
#[derive(Debug)]
pub struct Gradients<S: Scalar = f64> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
    visited: Vec<usize>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to `v`; exactly zero when `v` does
    /// not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<S> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Node indices whose gradient rule fired, in the order they were applied.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let k = S::from_f64(c);
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::Scale(a, c))
    }

    fn zip(&self, a: Var, b: Var, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(FamError::Dimension {
                op,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Adds a bias vector along the last dimension of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = *tx.shape().last().unwrap();
        if tb.shape() != [n] {
            return Err(FamError::Dimension {
                op: "add_bias",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    /// Adds one bias per channel to `[C,H,W]` or `[B,C,H,W]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let err = || FamError::Dimension {
            op: "add_channel_bias",
            left: tx.shape().to_vec(),
            right: tb.shape().to_vec(),
        };
        let (_, c, h, w) = image_dims(tx.shape()).ok_or_else(err)?;
        if tb.shape() != [c] {
            return Err(err());
        }
        let mut out = tx.clone();
        for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let b = tb.data()[i % c];
            for o in plane {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddChannelBias(x, bias)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| if v.re() > 0.0 { v } else { S::zero() });
        self.push(out, Op::Relu(x))
    }

    pub fn conv2d(&mut self, x: Var, kernels: Var) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(kernels))?;
        Ok(self.push(out, Op::Conv2d(x, kernels)))
    }

    pub fn max_pool_2x2(&mut self, x: Var) -> Result<Var> {
        let (out, arg) = kernels::max_pool_2x2(self.value(x))?;
        Ok(self.push(out, Op::MaxPool(x, arg)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = S::zero();
        for &v in self.value(x).data() {
            s += v;
        }
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (b, c) = match *t.shape() {
            [b, c] => (b, c),
            _ => {
                return Err(FamError::Dimension {
                    op: "softmax_cross_entropy",
                    left: t.shape().to_vec(),
                    right: vec![labels.len()],
                })
            }
        };
        if labels.len() != b {
            return Err(FamError::Dimension {
                op: "softmax_cross_entropy",
                left: t.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(FamError::Input(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut total = S::zero();
        for (row, &y) in t.data().chunks(c).zip(labels) {
            let m = row.iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max);
            let m = S::from_f64(m);
            let mut z = S::zero();
            for &v in row {
                z += (v - m).exp();
            }
            let lse = z.ln();
            total += lse - (row[y] - m);
            for &v in row {
                probs.push((v - m - lse).exp());
            }
        }
        let loss = total * S::from_f64(1.0 / b as f64);
        let probs = Tensor::new(vec![b, c], probs)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`, visiting nodes in exact reverse
    /// execution order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if !self.value(loss).is_scalar() {
            return Err(FamError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), S::one()));
        let mut visited = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            visited.push(i);
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = matmul_nt(&g, self.value(*b));
                    let gb = matmul_tn(self.value(*a), &g);
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.clone())?;
                }
                Op::Mul(a, b) => {
                    let ga = elementwise(&g, self.value(*b));
                    let gb = elementwise(&g, self.value(*a));
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Scale(a, c) => {
                    let k = S::from_f64(*c);
                    accumulate(&mut grads, *a, g.map(|v| v * k))?;
                }
                Op::AddBias(x, b) => {
                    let n = self.value(*b).len();
                    let mut gb = vec![S::zero(); n];
                    for row in g.data().chunks(n) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *b, Tensor::new(vec![n], gb)?)?;
                    accumulate(&mut grads, *x, g.clone())?;
                }
                Op::AddChannelBias(x, b) => {
                    let (_, c, h, w) = image_dims(g.shape()).unwrap();
                    let mut gb = vec![S::zero(); c];
                    for (p, plane) in g.data().chunks(h * w).enumerate() {
                        for &v in plane {
                            gb[p % c] += v;
                        }
                    }
                    accumulate(&mut grads, *b, Tensor::new(vec![c], gb)?)?;
                    accumulate(&mut grads, *x, g.clone())?;
                }
                Op::Relu(x) => {
                    let input = self.value(*x);
                    let data = g
                        .data()
                        .iter()
                        .zip(input.data())
                        .map(|(&gv, &xv)| if xv.re() > 0.0 { gv } else { S::zero() })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(g.shape().to_vec(), data)?)?;
                }
                Op::Conv2d(x, k) => {
                    let (gx, gk) = conv2d_backward(self.value(*x), self.value(*k), &g);
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *k, gk)?;
                }
                Op::MaxPool(x, arg) => {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    let data = gx.data_mut();
                    for (&src, &gv) in arg.iter().zip(g.data()) {
                        data[src] += gv;
                    }
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, g.clone().reshape(&shape)?)?;
                }
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    accumulate(&mut grads, *x, Tensor::filled(self.value(*x).shape(), gv))?;
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let c = probs.shape()[1];
                    let scale = g.data()[0] * S::from_f64(1.0 / labels.len() as f64);
                    let mut gl = probs.clone();
                    for (row, &y) in gl.data_mut().chunks_mut(c).zip(labels) {
                        row[y] -= S::one();
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                    accumulate(&mut grads, *logits, gl)?;
                }
            }
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            visited,
        })
    }
}

fn elementwise<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("congruent operands")
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign_checked(&g, "backward"),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vector(v: &[f64]) -> Tensor {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let w = tape.leaf(vector(&[0.3, -1.0, 2.0, 5.0]));
        let loss = tape.sum(w);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).data(), &[1.0; 4]);
    }

    #[test]
    fn half_square_norm_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(vector(&[1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).data(), &[1.0, 2.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut tape = Tape::new();
        let w = tape.leaf(vector(&[1.0, 2.0]));
        let unused = tape.leaf(vector(&[7.0, 7.0, 7.0]));
        let loss = tape.sum(w);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(vector(&[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(FamError::Contract(_))));
    }

    #[test]
    fn visits_in_reverse_execution_order() {
        let mut tape = Tape::new();
        let a = tape.leaf(vector(&[1.0, 2.0]));
        let b = tape.leaf(vector(&[3.0, 4.0]));
        let c = tape.mul(a, b).unwrap();
        let d = tape.add(c, a).unwrap();
        let loss = tape.sum(d);
        let g = tape.backward(loss).unwrap();
        let order = g.visit_order();
        assert_eq!(order, &[4, 3, 2, 1, 0]);
        assert_eq!(g.wrt(a).data(), &[4.0, 5.0]);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::from_vec(&[1, 3], vec![0.0; 3]).unwrap());
        assert!(matches!(
            tape.softmax_cross_entropy(l, &[3]),
            Err(FamError::Input(_))
        ));
    }
}
