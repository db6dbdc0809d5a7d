use crate::graph::Op;
use crate::tensor::split_axis;
use crate::{Graph, Real, Result, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    /// Gradient goes to the first maximal index.
    Max,
}

pub(crate) fn concat_backward<T: Real>(shapes: &[&[usize]], g: &Tensor<T>, axis: usize) -> Vec<Tensor<T>> {
    let (outer, total, inner) = split_axis(g.shape(), axis);
    let gd = g.data();
    let mut offset = 0;
    shapes
        .iter()
        .map(|s| {
            let len = s[axis];
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * total + offset) * inner;
                out.extend_from_slice(&gd[base..base + len * inner]);
            }
            offset += len;
            Tensor::new(s.to_vec(), out).unwrap()
        })
        .collect()
}

pub(crate) fn slice_backward<T: Real>(in_shape: &[usize], g: &Tensor<T>, axis: usize, start: usize) -> Tensor<T> {
    let (outer, total, inner) = split_axis(in_shape, axis);
    let len = g.shape()[axis];
    let mut out = vec![T::zero(); outer * total * inner];
    for o in 0..outer {
        let dst = (o * total + start) * inner;
        let src = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
    }
    Tensor::new(in_shape.to_vec(), out).unwrap()
}

pub(crate) fn reduce_backward<T: Real>(kind: ReduceKind, x: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut out = vec![T::zero(); x.numel()];
    let (xd, gd) = (x.data(), g.data());
    for o in 0..outer {
        for i in 0..inner {
            let go = gd[o * inner + i];
            match kind {
                ReduceKind::Sum | ReduceKind::Mean => {
                    let v = if kind == ReduceKind::Mean { go / T::c(len as f64) } else { go };
                    for a in 0..len {
                        out[(o * len + a) * inner + i] = v;
                    }
                }
                ReduceKind::Max => {
                    let mut best = 0;
                    for a in 1..len {
                        if xd[(o * len + a) * inner + i] > xd[(o * len + best) * inner + i] {
                            best = a;
                        }
                    }
                    out[(o * len + best) * inner + i] = go;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

pub(crate) fn gather_rows_backward<T: Real>(in_shape: &[usize], g: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let row = in_shape[1..].iter().product::<usize>();
    let mut out = vec![T::zero(); in_shape.iter().product()];
    for (k, &r) in idx.iter().enumerate() {
        for c in 0..row {
            out[r * row + c] += g.data()[k * row + c];
        }
    }
    Tensor::new(in_shape.to_vec(), out).unwrap()
}

impl<T: Real> Graph<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::BadAxis { axis, rank: first.len() });
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(xs);
        Ok(self.push(value, Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::BadAxis { axis, rank: s.len() });
        }
        if start + len > s[axis] {
            return Err(TensorError::Invalid(format!(
                "slice [{start}, {}) out of range for axis {axis} of {s:?}",
                start + len
            )));
        }
        let (outer, total, inner) = split_axis(&s, axis);
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * total + start) * inner;
            data.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Slice { x, axis, start }, rg))
    }

    /// Splits `x` along `axis` into pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// Reduces along `axis`, removing it from the shape.
    pub fn reduce(&mut self, x: Var, kind: ReduceKind, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::BadAxis { axis, rank: s.len() });
        }
        let (outer, len, inner) = split_axis(&s, axis);
        if len == 0 && kind != ReduceKind::Sum {
            return Err(TensorError::Invalid("reduce over an empty axis".into()));
        }
        let xd = self.value(x).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| xd[(o * len + a) * inner + i];
                data[o * inner + i] = match kind {
                    ReduceKind::Sum => (0..len).fold(T::zero(), |acc, a| acc + at(a)),
                    ReduceKind::Mean => (0..len).fold(T::zero(), |acc, a| acc + at(a)) / T::c(len as f64),
                    ReduceKind::Max => (1..len).fold(at(0), |m, a| if at(a) > m { at(a) } else { m }),
                };
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let value = Tensor::new(shape, data)?;
        self.add_flops(value.numel() as u64 * len as u64);
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reduce { x, kind, axis }, rg))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, ReduceKind::Sum, axis)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, ReduceKind::Mean, axis)
    }

    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, ReduceKind::Max, axis)
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Selects rows (indices along axis 0).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(TensorError::Invalid("gather_rows on a scalar".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(TensorError::Invalid(format!("row {bad} out of range for {s:?}")));
        }
        let row = s[1..].iter().product::<usize>();
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &r in idx {
            data.extend_from_slice(&xd[r * row..(r + 1) * row]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let value = Tensor::new(shape, data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }
}
