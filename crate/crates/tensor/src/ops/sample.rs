//! Bilinear sampling of channel-last feature maps, differentiable with
//! respect to both the features and the sampling coordinates.
//!
//! Coordinates are in feature-pixel units: `(u, v) = (column, row)` with
//! integer values addressing pixel centres.

use crate::graph::Op;
use crate::{Graph, Real, Result, Tensor, TensorError, Var};

struct Taps<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: T,
    fy: T,
}

#[inline]
fn taps<T: Real>(u: T, v: T, h: usize, w: usize) -> Taps<T> {
    let axis = |c: T, n: usize| -> (usize, usize, T) {
        if n == 1 {
            return (0, 0, T::zero());
        }
        let i0 = (c.floor().to_usize().unwrap_or(0)).min(n - 2);
        (i0, i0 + 1, c - T::c(i0 as f64))
    };
    let (x0, x1, fx) = axis(u, w);
    let (y0, y1, fy) = axis(v, h);
    Taps { x0, x1, y0, y1, fx, fy }
}

struct Dims {
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    per_batch: usize,
}

fn dims<T: Real>(feature: &Tensor<T>, coords: &Tensor<T>) -> Result<Dims> {
    let fs = feature.shape();
    let cs = coords.shape();
    let err = || TensorError::ShapeMismatch {
        op: "grid_sample_2d",
        lhs: fs.to_vec(),
        rhs: cs.to_vec(),
    };
    if cs.last() != Some(&2) {
        return Err(err());
    }
    let (batch, h, w, c) = match fs.len() {
        3 => (1, fs[0], fs[1], fs[2]),
        4 => (fs[0], fs[1], fs[2], fs[3]),
        _ => return Err(err()),
    };
    let points = coords.numel() / 2;
    if fs.len() == 4 && (cs.len() < 2 || cs[0] != batch) {
        return Err(err());
    }
    Ok(Dims {
        batch,
        h,
        w,
        c,
        per_batch: points / batch.max(1),
    })
}

pub(crate) fn grid_sample_backward<T: Real>(
    feature: &Tensor<T>,
    coords: &Tensor<T>,
    valid: &[bool],
    g: &Tensor<T>,
    need_f: bool,
    need_c: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let d = dims(feature, coords).expect("validated in forward");
    let (fd, cd, gd) = (feature.data(), coords.data(), g.data());
    let mut gf = if need_f { vec![T::zero(); fd.len()] } else { Vec::new() };
    let mut gc = vec![T::zero(); cd.len()];
    let one = T::one();
    for (p, &ok) in valid.iter().enumerate() {
        if !ok {
            continue;
        }
        let b = p / d.per_batch;
        let base = b * d.h * d.w * d.c;
        let t = taps(cd[2 * p], cd[2 * p + 1], d.h, d.w);
        let at = |y: usize, x: usize| base + (y * d.w + x) * d.c;
        let (i00, i01, i10, i11) = (at(t.y0, t.x0), at(t.y0, t.x1), at(t.y1, t.x0), at(t.y1, t.x1));
        let w00 = (one - t.fx) * (one - t.fy);
        let w01 = t.fx * (one - t.fy);
        let w10 = (one - t.fx) * t.fy;
        let w11 = t.fx * t.fy;
        let go = &gd[p * d.c..(p + 1) * d.c];
        let (mut du, mut dv) = (T::zero(), T::zero());
        for ch in 0..d.c {
            let gch = go[ch];
            if need_f {
                gf[i00 + ch] += w00 * gch;
                gf[i01 + ch] += w01 * gch;
                gf[i10 + ch] += w10 * gch;
                gf[i11 + ch] += w11 * gch;
            }
            if need_c {
                let (f00, f01, f10, f11) = (fd[i00 + ch], fd[i01 + ch], fd[i10 + ch], fd[i11 + ch]);
                if d.w > 1 {
                    du += gch * ((one - t.fy) * (f01 - f00) + t.fy * (f11 - f10));
                }
                if d.h > 1 {
                    dv += gch * ((one - t.fx) * (f10 - f00) + t.fx * (f11 - f01));
                }
            }
        }
        gc[2 * p] = du;
        gc[2 * p + 1] = dv;
    }
    (
        need_f.then(|| Tensor::new(feature.shape().to_vec(), gf).unwrap()),
        need_c.then(|| Tensor::new(coords.shape().to_vec(), gc).unwrap()),
    )
}

impl<T: Real> Graph<T> {
    /// Bilinearly samples `feature` (`[h, w, c]`, or `[B, h, w, c]` with
    /// `coords` shaped `[B, ..., 2]`) at `coords`.
    ///
    /// Entries outside `[0, w-1] x [0, h-1]` or excluded by `mask` produce a
    /// zero vector and are reported invalid in the returned flags. Unmasked
    /// non-finite coordinates are an error.
    pub fn grid_sample_2d(&mut self, feature: Var, coords: Var, mask: Option<&[bool]>) -> Result<(Var, Vec<bool>)> {
        let (fv, cv) = (self.value(feature), self.value(coords));
        let d = dims(fv, cv)?;
        let n = cv.numel() / 2;
        if let Some(m) = mask {
            if m.len() != n {
                return Err(TensorError::Invalid(format!("mask length {} != {n} sample points", m.len())));
            }
        }
        let (fd, cd) = (fv.data(), cv.data());
        let mut out = vec![T::zero(); n * d.c];
        let mut valid = vec![false; n];
        let (wmax, hmax) = (T::c(d.w as f64 - 1.0), T::c(d.h as f64 - 1.0));
        for p in 0..n {
            if mask.is_some_and(|m| !m[p]) {
                continue;
            }
            let (u, v) = (cd[2 * p], cd[2 * p + 1]);
            if !u.is_finite() || !v.is_finite() {
                return Err(TensorError::NonFinite("grid_sample_2d coordinates"));
            }
            if u < T::zero() || v < T::zero() || u > wmax || v > hmax {
                continue;
            }
            valid[p] = true;
            let b = p / d.per_batch;
            let base = b * d.h * d.w * d.c;
            let t = taps(u, v, d.h, d.w);
            let at = |y: usize, x: usize| base + (y * d.w + x) * d.c;
            let one = T::one();
            let w00 = (one - t.fx) * (one - t.fy);
            let w01 = t.fx * (one - t.fy);
            let w10 = (one - t.fx) * t.fy;
            let w11 = t.fx * t.fy;
            let (i00, i01, i10, i11) = (at(t.y0, t.x0), at(t.y0, t.x1), at(t.y1, t.x0), at(t.y1, t.x1));
            let o = &mut out[p * d.c..(p + 1) * d.c];
            for ch in 0..d.c {
                o[ch] = w00 * fd[i00 + ch] + w01 * fd[i01 + ch] + w10 * fd[i10 + ch] + w11 * fd[i11 + ch];
            }
        }
        let mut shape = cv.shape().to_vec();
        *shape.last_mut().unwrap() = d.c;
        if fv.rank() == 4 && d.batch == 0 {
            shape = vec![0, 0, d.c];
        }
        let value = Tensor::new(shape, out)?;
        self.add_flops((n * d.c * 4) as u64);
        let rg = self.any_grad(&[feature, coords]);
        Ok((
            self.push(
                value,
                Op::GridSample {
                    feature,
                    coords,
                    valid: valid.clone(),
                },
                rg,
            ),
            valid,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feature() -> Tensor<f64> {
        // 2x3 map with 2 channels.
        Tensor::from_f64(vec![2, 3, 2], &[0.0, 10.0, 1.0, 11.0, 2.0, 12.0, 3.0, 13.0, 4.0, 14.0, 5.0, 15.0]).unwrap()
    }

    fn sample(coords: &[f64]) -> (Vec<f64>, Vec<bool>) {
        let mut g = Graph::<f64>::new();
        let f = g.constant(feature());
        let c = g.constant(Tensor::from_f64(vec![coords.len() / 2, 2], coords).unwrap());
        let (y, valid) = g.grid_sample_2d(f, c, None).unwrap();
        (g.value(y).data().to_vec(), valid)
    }

    #[test]
    fn lattice_point_returns_pixel() {
        let (y, valid) = sample(&[2.0, 1.0]);
        assert_eq!(y, vec![5.0, 15.0]);
        assert_eq!(valid, vec![true]);
    }

    #[test]
    fn centre_of_four_is_mean() {
        let (y, _) = sample(&[0.5, 0.5]);
        assert!((y[0] - 2.0).abs() < 1e-12 && (y[1] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn outside_is_zero_and_invalid() {
        let (y, valid) = sample(&[-0.1, 0.0, 2.5, 1.01]);
        assert_eq!(y, vec![0.0; 4]);
        assert_eq!(valid, vec![false, false]);
    }

    #[test]
    fn non_finite_coordinates_error() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(feature());
        let c = g.constant(Tensor::from_f64(vec![1, 2], &[f64::NAN, 0.0]).unwrap());
        assert!(g.grid_sample_2d(f, c, None).is_err());
    }
}
