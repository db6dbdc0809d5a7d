use crate::graph::Op;
use crate::tensor::strides;
use crate::{Graph, Real, Result, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    /// Elementwise minimum; ties route the gradient to the left operand.
    Min,
    /// Elementwise maximum; ties route the gradient to the left operand.
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Relu,
    Sin,
    Cos,
    Exp,
    Log,
    Sigmoid,
    Softplus,
    LogSigmoid,
    Abs,
    Sqrt,
    Square,
    Clamp(f64, f64),
}

/// Right-aligned broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` expressed in an output of rank `rank`, zero along
/// broadcast dimensions.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let s = strides(shape);
    (0..rank)
        .map(|i| {
            if i + shape.len() < rank {
                0
            } else {
                let j = i + shape.len() - rank;
                if shape[j] == 1 && out[i] != 1 {
                    0
                } else {
                    s[j]
                }
            }
        })
        .collect()
}

/// Visits every output element with the flat indices of both operands.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let rank = out.len();
    let mut counter = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            counter[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if counter[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            counter[d] = 0;
        }
    }
}

#[inline]
fn apply_binary<T: Real>(kind: BinaryKind, a: T, b: T) -> T {
    match kind {
        BinaryKind::Add => a + b,
        BinaryKind::Sub => a - b,
        BinaryKind::Mul => a * b,
        BinaryKind::Div => a / b,
        BinaryKind::Min => {
            if a <= b {
                a
            } else {
                b
            }
        }
        BinaryKind::Max => {
            if a >= b {
                a
            } else {
                b
            }
        }
    }
}

pub(crate) fn binary_forward<T: Real>(kind: BinaryKind, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| apply_binary(kind, x, y))
            .collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| TensorError::ShapeMismatch {
        op: "elementwise",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![T::zero(); out.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = apply_binary(kind, ad[ia], bd[ib]));
    Tensor::new(out, data)
}

pub(crate) fn binary_backward<T: Real>(
    kind: BinaryKind,
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let out = g.shape();
    let sa = broadcast_strides(a.shape(), out);
    let sb = broadcast_strides(b.shape(), out);
    let mut ga = vec![T::zero(); a.numel()];
    let mut gb = vec![T::zero(); b.numel()];
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    for_each_broadcast(out, &sa, &sb, |o, ia, ib| {
        let (x, y, go) = (ad[ia], bd[ib], gd[o]);
        let (da, db) = match kind {
            BinaryKind::Add => (go, go),
            BinaryKind::Sub => (go, -go),
            BinaryKind::Mul => (go * y, go * x),
            BinaryKind::Div => (go / y, -go * x / (y * y)),
            BinaryKind::Min => {
                if x <= y {
                    (go, T::zero())
                } else {
                    (T::zero(), go)
                }
            }
            BinaryKind::Max => {
                if x >= y {
                    (go, T::zero())
                } else {
                    (T::zero(), go)
                }
            }
        };
        ga[ia] += da;
        gb[ib] += db;
    });
    (
        need_a.then(|| Tensor::new(a.shape().to_vec(), ga).unwrap()),
        need_b.then(|| Tensor::new(b.shape().to_vec(), gb).unwrap()),
    )
}

#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn apply_unary<T: Real>(kind: UnaryKind, x: T) -> T {
    match kind {
        UnaryKind::Neg => -x,
        UnaryKind::Scale(c) => x * T::c(c),
        UnaryKind::AddScalar(c) => x + T::c(c),
        UnaryKind::Relu => x.max(T::zero()),
        UnaryKind::Sin => x.sin(),
        UnaryKind::Cos => x.cos(),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Log => x.ln(),
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::Softplus => softplus(x),
        UnaryKind::LogSigmoid => -softplus(-x),
        UnaryKind::Abs => x.abs(),
        UnaryKind::Sqrt => x.sqrt(),
        UnaryKind::Square => x * x,
        UnaryKind::Clamp(lo, hi) => x.max(T::c(lo)).min(T::c(hi)),
    }
}

pub(crate) fn unary_backward<T: Real>(kind: UnaryKind, x: &Tensor<T>, y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .zip(g.data())
        .map(|((&x, &y), &g)| {
            let d = match kind {
                UnaryKind::Neg => -T::one(),
                UnaryKind::Scale(c) => T::c(c),
                UnaryKind::AddScalar(_) => T::one(),
                UnaryKind::Relu => {
                    if x > T::zero() {
                        T::one()
                    } else {
                        T::zero()
                    }
                }
                UnaryKind::Sin => x.cos(),
                UnaryKind::Cos => -x.sin(),
                UnaryKind::Exp => y,
                UnaryKind::Log => T::one() / x,
                UnaryKind::Sigmoid => y * (T::one() - y),
                UnaryKind::Softplus => sigmoid(x),
                UnaryKind::LogSigmoid => sigmoid(-x),
                UnaryKind::Abs => {
                    if x > T::zero() {
                        T::one()
                    } else if x < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                }
                UnaryKind::Sqrt => {
                    if y > T::zero() {
                        T::c(0.5) / y
                    } else {
                        T::zero()
                    }
                }
                UnaryKind::Square => T::c(2.0) * x,
                UnaryKind::Clamp(lo, hi) => {
                    if x >= T::c(lo) && x <= T::c(hi) {
                        T::one()
                    } else {
                        T::zero()
                    }
                }
            };
            g * d
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

impl<T: Real> Graph<T> {
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let value = binary_forward(kind, self.value(a), self.value(b))?;
        self.add_flops(value.numel() as u64);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Min, a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Max, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let value = self.value(x).map(|v| apply_unary(kind, v));
        self.add_flops(value.numel() as u64);
        let rg = self.requires_grad(x);
        self.push(value, Op::Unary { kind, x }, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryKind::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryKind::AddScalar(c), x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sin, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::LogSigmoid, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Abs, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(UnaryKind::Clamp(lo, hi), x)
    }

    /// Replaces entries where `mask` is true with `value`; those entries
    /// receive no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        let src = self.value(x);
        if mask.len() != src.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_fill",
                lhs: src.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let fill = T::c(value);
        let mut out = src.clone();
        for (v, &m) in out.data_mut().iter_mut().zip(mask) {
            if m {
                *v = fill;
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            out,
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[4, 1], &[1, 5]), Some(vec![4, 5]));
        assert_eq!(broadcast_shape(&[], &[2, 2]), Some(vec![2, 2]));
        assert_eq!(broadcast_shape(&[4, 3], &[4]), None);
    }

    #[test]
    fn relu_and_sin() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(vec![3], &[-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

        let z = g.input(Tensor::from_f64(vec![1], &[0.0]).unwrap());
        let s = g.sin(z);
        assert_eq!(g.value(s).data(), &[0.0]);
        let l = g.sum_all(s);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(z).unwrap().data(), &[1.0]);
    }

    #[test]
    fn add_self_doubles_gradient() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::from_f64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let s = g.add(a, a).unwrap();
        let l = g.sum_all(s);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(vec![2, 3]));
        let b = g.input(Tensor::zeros(vec![4]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4]"), "{err}");
    }

    #[test]
    fn broadcast_gradient_reduces() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::ones(vec![3, 2]));
        let b = g.input(Tensor::from_f64(vec![2], &[2.0, 5.0]).unwrap());
        let m = g.mul(a, b).unwrap();
        let l = g.sum_all(m);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[3.0, 3.0]);
        assert_eq!(grads.get(a).unwrap().data(), &[2.0, 5.0, 2.0, 5.0, 2.0, 5.0]);
    }

    #[test]
    fn zero_scaled_loss_gives_zero_grads() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(vec![3], &[0.3, -1.0, 2.0]).unwrap());
        let e = g.exp(x);
        let z = g.scale(e, 0.0);
        let l = g.sum_all(z);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }
}
