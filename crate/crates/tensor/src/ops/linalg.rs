use crate::graph::Op;
use crate::{Graph, Real, Result, Tensor, TensorError, Var};

fn rows_of<T: Real>(a: &Tensor<T>) -> (usize, usize) {
    let k = *a.shape().last().unwrap_or(&1);
    (if k == 0 { 0 } else { a.numel() / k }, k)
}

pub(crate) fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (m, k) = rows_of(a);
    let n = b.shape()[1];
    let ga = need_a.then(|| {
        let mut ga = vec![T::zero(); m * k];
        // ga[m,k] = g[m,n] * b^T[n,k]
        T::gemm(m, n, k, T::one(), g.data(), (n as isize, 1), b.data(), (1, n as isize), T::zero(), &mut ga, (k as isize, 1));
        Tensor::new(a.shape().to_vec(), ga).unwrap()
    });
    let gb = need_b.then(|| {
        let mut gb = vec![T::zero(); k * n];
        // gb[k,n] = a^T[k,m] * g[m,n]
        T::gemm(k, m, n, T::one(), a.data(), (1, k as isize), g.data(), (n as isize, 1), T::zero(), &mut gb, (n as isize, 1));
        Tensor::new(b.shape().to_vec(), gb).unwrap()
    });
    (ga, gb)
}

impl<T: Real> Graph<T> {
    /// `a[..., k] x b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rank() != 2 || av.rank() == 0 || av.shape().last() != Some(&bv.shape()[0]) {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k) = rows_of(av);
        let n = bv.shape()[1];
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), av.data(), (k as isize, 1), bv.data(), (n as isize, 1), T::zero(), &mut out, (n as isize, 1));
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        self.add_flops((m * k * n) as u64);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    /// Affine map over the last axis: `x W + b`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add(y, bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity_and_hand_case() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap());
        let w = g.input(Tensor::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.input(Tensor::zeros(vec![2]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let x = g.constant(Tensor::from_f64(vec![2], &[1.0, 0.0]).unwrap());
        let w = g.input(Tensor::from_f64(vec![2, 2], &[3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = g.input(Tensor::ones(vec![2]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 5.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(vec![4, 3]));
        let w = g.input(Tensor::zeros(vec![2, 2]));
        assert!(g.matmul(x, w).is_err());
    }
}
