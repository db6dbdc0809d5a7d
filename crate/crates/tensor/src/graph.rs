use crate::ops::conv::ConvSpec;
use crate::ops::elementwise::{BinaryKind, UnaryKind};
use crate::ops::shape::ReduceKind;
use crate::ops::{conv, elementwise, linalg, sample, shape, softmax};
use crate::param::{ParamId, ParamStore};
use crate::{Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation whose forward value is computed by the caller.
///
/// `backward` receives the input values, the recorded output and the upstream
/// gradient, and returns one optional gradient per input.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

pub(crate) enum Op<T: Real> {
    Leaf,
    Binary { kind: BinaryKind, a: Var, b: Var },
    Unary { kind: UnaryKind, x: Var },
    MaskedFill { x: Var, mask: Vec<bool> },
    MatMul { a: Var, b: Var },
    Conv { x: Var, w: Var, spec: ConvSpec },
    Upsample { x: Var, factor: [usize; 3] },
    Softmax { x: Var, axis: usize },
    GridSample { feature: Var, coords: Var, valid: Vec<bool> },
    Reshape { x: Var },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reduce { x: Var, kind: ReduceKind, axis: usize },
    SumAll { x: Var },
    GatherRows { x: Var, idx: Vec<usize> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

pub(crate) struct Node<T: Real> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
pub struct Graph<T: Real> {
    pub(crate) nodes: Vec<Node<T>>,
    bindings: Vec<(Var, ParamId)>,
    flops: u64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bindings: Vec::new(),
            flops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate count of all recorded forward operations.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub(crate) fn add_flops(&mut self, n: u64) {
        self.flops += n;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records an input that gradients should reach.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(T::c(value)))
    }

    /// Binds a parameter as a trainable leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let v = self.input(store.get(id).value.clone());
        self.bindings.push((v, id));
        v
    }

    /// Binds a parameter without tracking its gradient.
    pub fn frozen_param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.constant(store.get(id).value.clone())
    }

    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
        flops: u64,
    ) -> Var {
        let rg = inputs.iter().any(|v| self.requires_grad(*v));
        self.flops += flops;
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Runs reverse-mode differentiation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, ig) in self.input_grads(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(ig.shape(), self.nodes[input.0].value.shape());
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            bindings: self.bindings.clone(),
        })
    }

    fn input_grads(&self, i: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let need = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Binary { kind, a, b } => {
                let (ga, gb) = elementwise::binary_backward(*kind, val(a), val(b), g, need(a), need(b));
                ga.map(|t| (*a, t)).into_iter().chain(gb.map(|t| (*b, t))).collect()
            }
            Op::Unary { kind, x } => vec![(*x, elementwise::unary_backward(*kind, val(x), y, g))],
            Op::MaskedFill { x, mask } => {
                let mut gx = g.clone();
                for (v, &m) in gx.data_mut().iter_mut().zip(mask) {
                    if m {
                        *v = T::zero();
                    }
                }
                vec![(*x, gx)]
            }
            Op::MatMul { a, b } => {
                let (ga, gb) = linalg::matmul_backward(val(a), val(b), g, need(a), need(b));
                ga.map(|t| (*a, t)).into_iter().chain(gb.map(|t| (*b, t))).collect()
            }
            Op::Conv { x, w, spec } => {
                let (gx, gw) = conv::conv_backward(val(x), val(w), g, spec, need(x), need(w));
                gx.map(|t| (*x, t)).into_iter().chain(gw.map(|t| (*w, t))).collect()
            }
            Op::Upsample { x, factor } => vec![(*x, conv::upsample_backward(val(x), g, *factor))],
            Op::Softmax { x, axis } => vec![(*x, softmax::softmax_backward(y, g, *axis))],
            Op::GridSample {
                feature,
                coords,
                valid,
            } => {
                let (gf, gc) = sample::grid_sample_backward(
                    val(feature),
                    val(coords),
                    valid,
                    g,
                    need(feature),
                    need(coords),
                );
                gf.map(|t| (*feature, t))
                    .into_iter()
                    .chain(gc.map(|t| (*coords, t)))
                    .collect()
            }
            Op::Reshape { x } => {
                let gx = g.clone().reshaped(val(x).shape().to_vec()).expect("reshape grad");
                vec![(*x, gx)]
            }
            Op::Concat { xs, axis } => {
                let shapes: Vec<&[usize]> = xs.iter().map(|v| val(v).shape()).collect();
                xs.iter().copied().zip(shape::concat_backward(&shapes, g, *axis)).collect()
            }
            Op::Slice { x, axis, start } => vec![(*x, shape::slice_backward(val(x).shape(), g, *axis, *start))],
            Op::Reduce { x, kind, axis } => vec![(*x, shape::reduce_backward(*kind, val(x), g, *axis))],
            Op::SumAll { x } => vec![(*x, Tensor::full(val(x).shape().to_vec(), g.item()))],
            Op::GatherRows { x, idx } => vec![(*x, shape::gather_rows_backward(val(x).shape(), g, idx))],
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(val).collect();
                let grads = op.backward(&ins, y, g);
                assert_eq!(grads.len(), inputs.len(), "custom op `{}` returned wrong arity", op.name());
                inputs
                    .iter()
                    .copied()
                    .zip(grads)
                    .filter_map(|(v, t)| t.map(|t| (v, t)))
                    .collect()
            }
        }
    }
}

/// Result of a backward pass.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    bindings: Vec<(Var, ParamId)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` when `v` is not on a
    /// path to the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Per-parameter gradients, summed over repeated bindings.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = (0..store.len()).map(|_| None).collect();
        for (v, id) in &self.bindings {
            if let Some(g) = self.get(*v) {
                match &mut out[id.index()] {
                    Some(acc) => acc.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}
