use crate::graph::Op;
use crate::tensor::split_axis;
use crate::{Graph, Real, Result, Tensor, TensorError, Var};

pub(crate) fn softmax_backward<T: Real>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = split_axis(y.shape(), axis);
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![T::zero(); y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let dot = (0..len).fold(T::zero(), |acc, a| acc + yd[idx(a)] * gd[idx(a)]);
            for a in 0..len {
                out[idx(a)] = yd[idx(a)] * (gd[idx(a)] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out).unwrap()
}

impl<T: Real> Graph<T> {
    /// Numerically stable softmax along `axis`.
    ///
    /// Logits equal to negative infinity get weight exactly zero. A slice in
    /// which every logit is negative infinity yields all zeros; the returned
    /// flags (one per slice, outer-major) mark those slices.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<bool>)> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::BadAxis { axis, rank: s.len() });
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        let mut empty = vec![false; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let m = (0..len).fold(T::neg_infinity(), |m, a| m.max(xd[idx(a)]));
                if m == T::neg_infinity() {
                    empty[o * inner + i] = true;
                    continue;
                }
                let mut sum = T::zero();
                for a in 0..len {
                    let e = (xd[idx(a)] - m).exp();
                    out[idx(a)] = e;
                    sum += e;
                }
                for a in 0..len {
                    out[idx(a)] /= sum;
                }
            }
        }
        let value = Tensor::new(s, out)?;
        self.add_flops(3 * value.numel() as u64);
        let rg = self.requires_grad(x);
        Ok((self.push(value, Op::Softmax { x, axis }, rg), empty))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(vals: &[f64]) -> Vec<f64> {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(vec![vals.len()], vals).unwrap());
        let (y, _) = g.softmax(x, 0).unwrap();
        g.value(y).data().to_vec()
    }

    #[test]
    fn symmetric_and_analytic() {
        assert_eq!(run(&[0.0, 0.0]), vec![0.5, 0.5]);
        let y = run(&[3f64.ln(), 0.0]);
        assert!((y[0] - 0.75).abs() < 1e-15 && (y[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn masked_entry_gets_zero() {
        assert_eq!(run(&[5.0, f64::NEG_INFINITY]), vec![1.0, 0.0]);
    }

    #[test]
    fn fully_masked_slice_is_flagged() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_f64(vec![2, 2], &[f64::NEG_INFINITY, 1.0, f64::NEG_INFINITY, 2.0]).unwrap());
        let (y, empty) = g.softmax(x, 0).unwrap();
        assert_eq!(empty, vec![true, false]);
        assert_eq!(g.value(y).data()[0], 0.0);
        assert_eq!(g.value(y).data()[2], 0.0);
    }
}
