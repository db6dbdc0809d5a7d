//! Channel-last 3D cross-correlation via im2col + GEMM. 2D convolution is
//! the special case with a unit kernel along the leading axis.

use crate::graph::Op;
use crate::par;
use crate::{Graph, Real, Result, Tensor, TensorError, Var};

/// Kernel extents, strides and zero padding along the three spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvSpec {
    /// Cubic kernel `k` with "same" padding and the given stride.
    pub fn cube(k: usize, stride: usize) -> Self {
        ConvSpec {
            kernel: [k; 3],
            stride: [stride; 3],
            padding: [k / 2; 3],
        }
    }

    /// Square 2D kernel applied over `[N, h, w, c]`; the batch axis is
    /// treated as a spatial axis with a unit kernel.
    pub fn square_2d(k: usize, stride: usize) -> Self {
        ConvSpec {
            kernel: [1, k, k],
            stride: [1, stride, stride],
            padding: [0, k / 2, k / 2],
        }
    }

    fn out_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if self.kernel[a] > padded || self.stride[a] == 0 {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }
}

struct Layout {
    inp: [usize; 3],
    out: [usize; 3],
    cin: usize,
    cout: usize,
    spec: ConvSpec,
}

impl Layout {
    fn rows(&self) -> usize {
        self.out.iter().product()
    }

    fn cols(&self) -> usize {
        self.spec.kernel.iter().product::<usize>() * self.cin
    }

    /// Calls `f(col_offset, input_offset)` for every in-bounds tap of output row `r`.
    #[inline]
    fn taps(&self, r: usize, mut f: impl FnMut(usize, usize)) {
        let [_, oh, ow] = self.out;
        let (od_i, oh_i, ow_i) = (r / (oh * ow), (r / ow) % oh, r % ow);
        let [kd, kh, kw] = self.spec.kernel;
        let [sd, sh, sw] = self.spec.stride;
        let [pd, ph, pw] = self.spec.padding;
        let [id, ih, iw] = self.inp;
        let mut col = 0;
        for a in 0..kd {
            let z = (od_i * sd + a) as isize - pd as isize;
            for b in 0..kh {
                let y = (oh_i * sh + b) as isize - ph as isize;
                for c in 0..kw {
                    let x = (ow_i * sw + c) as isize - pw as isize;
                    if z >= 0 && y >= 0 && x >= 0 && (z as usize) < id && (y as usize) < ih && (x as usize) < iw {
                        let src = ((z as usize * ih + y as usize) * iw + x as usize) * self.cin;
                        f(col, src);
                    }
                    col += self.cin;
                }
            }
        }
    }
}

fn im2col<T: Real>(x: &[T], l: &Layout) -> Vec<T> {
    let cols = l.cols();
    let mut buf = vec![T::zero(); l.rows() * cols];
    let rows_per_chunk = 64;
    par::for_each_chunk_mut(&mut buf, rows_per_chunk * cols, |ci, chunk| {
        for (ri, row) in chunk.chunks_mut(cols).enumerate() {
            let r = ci * rows_per_chunk + ri;
            l.taps(r, |col, src| row[col..col + l.cin].copy_from_slice(&x[src..src + l.cin]));
        }
    });
    buf
}

fn layout<T: Real>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec) -> Result<Layout> {
    let xs = x.shape();
    let ws = w.shape();
    let mismatch = || TensorError::ShapeMismatch {
        op: "conv",
        lhs: xs.to_vec(),
        rhs: ws.to_vec(),
    };
    if xs.len() != 4 || ws.len() != 5 || ws[3] != xs[3] || ws[..3] != spec.kernel {
        return Err(mismatch());
    }
    if spec.kernel.iter().any(|k| k % 2 == 0) {
        return Err(TensorError::Invalid(format!("conv kernel extents must be odd, got {:?}", spec.kernel)));
    }
    let inp = [xs[0], xs[1], xs[2]];
    let out = spec.out_dims(inp).ok_or_else(|| {
        TensorError::Invalid(format!(
            "conv kernel {:?} larger than padded input {:?} (padding {:?})",
            spec.kernel, inp, spec.padding
        ))
    })?;
    Ok(Layout {
        inp,
        out,
        cin: xs[3],
        cout: ws[4],
        spec: *spec,
    })
}

pub(crate) fn conv_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    spec: &ConvSpec,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let l = layout(x, w, spec).expect("conv layout validated in forward");
    let (rows, k, n) = (l.rows(), l.cols(), l.cout);
    let gw = need_w.then(|| {
        let cols = im2col(x.data(), &l);
        let mut gw = vec![T::zero(); k * n];
        T::gemm(k, rows, n, T::one(), &cols, (1, k as isize), g.data(), (n as isize, 1), T::zero(), &mut gw, (n as isize, 1));
        Tensor::new(w.shape().to_vec(), gw).unwrap()
    });
    let gx = need_x.then(|| {
        let mut dcols = vec![T::zero(); rows * k];
        T::gemm(rows, n, k, T::one(), g.data(), (n as isize, 1), w.data(), (1, n as isize), T::zero(), &mut dcols, (k as isize, 1));
        let mut gx = vec![T::zero(); x.numel()];
        for r in 0..rows {
            let row = &dcols[r * k..(r + 1) * k];
            l.taps(r, |col, dst| {
                for c in 0..l.cin {
                    gx[dst + c] += row[col + c];
                }
            });
        }
        Tensor::new(x.shape().to_vec(), gx).unwrap()
    });
    (gx, gw)
}

pub(crate) fn upsample_backward<T: Real>(x: &Tensor<T>, g: &Tensor<T>, f: [usize; 3]) -> Tensor<T> {
    let s = x.shape();
    let (d, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h * f[1], w * f[2]);
    let mut gx = vec![T::zero(); x.numel()];
    let gd = g.data();
    for z in 0..d * f[0] {
        for y in 0..oh {
            for xx in 0..ow {
                let src = ((z * oh + y) * ow + xx) * c;
                let dst = (((z / f[0]) * h + y / f[1]) * w + xx / f[2]) * c;
                for ch in 0..c {
                    gx[dst + ch] += gd[src + ch];
                }
            }
        }
    }
    Tensor::new(s.to_vec(), gx).unwrap()
}

impl<T: Real> Graph<T> {
    /// Cross-correlation of `x[D, H, W, Cin]` with `weight[kd, kh, kw, Cin, Cout]`.
    pub fn conv_nobias(&mut self, x: Var, weight: Var, spec: ConvSpec) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(weight));
        let l = layout(xv, wv, &spec)?;
        let cols = im2col(xv.data(), &l);
        let (rows, k, n) = (l.rows(), l.cols(), l.cout);
        let mut out = vec![T::zero(); rows * n];
        T::gemm(rows, k, n, T::one(), &cols, (k as isize, 1), wv.data(), (n as isize, 1), T::zero(), &mut out, (n as isize, 1));
        let value = Tensor::new(vec![l.out[0], l.out[1], l.out[2], n], out)?;
        self.add_flops((rows * k * n) as u64);
        let rg = self.any_grad(&[x, weight]);
        Ok(self.push(value, Op::Conv { x, w: weight, spec }, rg))
    }

    /// Convolution with bias. `dims` selects the input layout: 3 for
    /// `[D, H, W, C]` volumes, 2 for `[h, w, C]` or `[N, h, w, C]` images.
    pub fn conv(&mut self, x: Var, weight: Var, bias: Var, dims: usize, stride: usize, padding: usize) -> Result<Var> {
        let ws = self.shape(weight).to_vec();
        let y = match dims {
            3 => {
                if ws.len() != 5 {
                    return Err(TensorError::ShapeMismatch { op: "conv3d", lhs: self.shape(x).to_vec(), rhs: ws });
                }
                let spec = ConvSpec {
                    kernel: [ws[0], ws[1], ws[2]],
                    stride: [stride; 3],
                    padding: [padding; 3],
                };
                self.conv_nobias(x, weight, spec)?
            }
            2 => {
                if ws.len() != 4 {
                    return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: self.shape(x).to_vec(), rhs: ws });
                }
                let xs = self.shape(x).to_vec();
                let x4 = match xs.len() {
                    3 => self.reshape(x, &[1, xs[0], xs[1], xs[2]])?,
                    4 => x,
                    _ => return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: xs, rhs: ws }),
                };
                let w5 = self.reshape(weight, &[1, ws[0], ws[1], ws[2], ws[3]])?;
                let spec = ConvSpec {
                    kernel: [1, ws[0], ws[1]],
                    stride: [1, stride, stride],
                    padding: [0, padding, padding],
                };
                let y = self.conv_nobias(x4, w5, spec)?;
                if xs.len() == 3 {
                    let ys = self.shape(y).to_vec();
                    self.reshape(y, &ys[1..])?
                } else {
                    y
                }
            }
            _ => return Err(TensorError::Invalid(format!("conv dims must be 2 or 3, got {dims}"))),
        };
        self.add(y, bias)
    }

    /// Nearest-neighbour upsampling of `[D, H, W, C]` by per-axis factors.
    pub fn upsample_nearest(&mut self, x: Var, factor: [usize; 3]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::Invalid(format!("upsample expects rank 4, got {s:?}")));
        }
        let (d, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (od, oh, ow) = (d * factor[0], h * factor[1], w * factor[2]);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); od * oh * ow * c];
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let dst = ((z * oh + y) * ow + xx) * c;
                    let src = (((z / factor[0]) * h + y / factor[1]) * w + xx / factor[2]) * c;
                    out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                }
            }
        }
        let value = Tensor::new(vec![od, oh, ow, c], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Upsample { x, factor }, rg))
    }
}
