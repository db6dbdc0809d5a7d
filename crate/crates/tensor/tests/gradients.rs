//! Central-difference checks for every registered differentiable op, ten
//! random instances each, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxdet_tensor::{gradient_check, ConvSpec, GradCheckOptions, Graph, Result, Tensor, Var};

const TOL: f64 = 1e-4;
const INSTANCES: u64 = 10;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_f64(shape.to_vec(), &(0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>()).unwrap()
}

/// Values bounded away from zero by `gap`, with random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

/// Contracts `y` with a fixed random tensor so upstream gradients are non-uniform.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = rand_tensor(&mut rng, g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

fn check<F>(name: &str, inputs: &[Tensor<f64>], seed: u64, f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let report = gradient_check(
        |g, v| {
            let y = f(g, v)?;
            weighted_sum(g, y, seed)
        },
        inputs,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.worst() <= TOL, "{name} instance {seed}: {:?}", report.max_rel_err);
}

#[test]
fn binary_ops() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let bias = rand_tensor(&mut rng, &[4], -1.0, 1.0);
        let col = rand_tensor(&mut rng, &[3, 1], 0.5, 2.0);
        check("add", &[a.clone(), b.clone()], s, |g, v| g.add(v[0], v[1]));
        check("sub", &[a.clone(), b.clone()], s, |g, v| g.sub(v[0], v[1]));
        check("mul", &[a.clone(), b.clone()], s, |g, v| g.mul(v[0], v[1]));
        check("add-broadcast", &[a.clone(), bias.clone()], s, |g, v| g.add(v[0], v[1]));
        check("mul-broadcast", &[a.clone(), col.clone()], s, |g, v| g.mul(v[0], v[1]));
        check("div", &[a.clone(), col.clone()], s, |g, v| g.div(v[0], v[1]));
        // Keep operands apart so min/max stay differentiable.
        let shifted = a.map(|x| x + 0.3);
        check("min", &[a.clone(), shifted.map(|x| if s % 2 == 0 { x } else { x - 0.6 })], s, |g, v| {
            g.minimum(v[0], v[1])
        });
        check("max", &[a.clone(), shifted], s, |g, v| g.maximum(v[0], v[1]));
    }
}

#[test]
fn unary_ops() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + s);
        let x = rand_tensor(&mut rng, &[2, 5], -2.0, 2.0);
        let nz = away_from_zero(&mut rng, &[2, 5], 0.05);
        let pos = rand_tensor(&mut rng, &[2, 5], 0.2, 3.0);
        check("neg", &[x.clone()], s, |g, v| Ok(g.neg(v[0])));
        check("scale", &[x.clone()], s, |g, v| Ok(g.scale(v[0], -1.7)));
        check("add_scalar", &[x.clone()], s, |g, v| Ok(g.add_scalar(v[0], 0.4)));
        check("relu", &[nz.clone()], s, |g, v| Ok(g.relu(v[0])));
        check("sin", &[x.clone()], s, |g, v| Ok(g.sin(v[0])));
        check("exp", &[x.clone()], s, |g, v| Ok(g.exp(v[0])));
        check("log", &[pos.clone()], s, |g, v| Ok(g.ln(v[0])));
        check("sigmoid", &[x.clone()], s, |g, v| Ok(g.sigmoid(v[0])));
        check("softplus", &[x.clone()], s, |g, v| Ok(g.softplus(v[0])));
        check("log_sigmoid", &[x.clone()], s, |g, v| Ok(g.log_sigmoid(v[0])));
        check("abs", &[nz.clone()], s, |g, v| Ok(g.abs(v[0])));
        check("sqrt", &[pos.clone()], s, |g, v| Ok(g.sqrt(v[0])));
        check("square", &[x.clone()], s, |g, v| Ok(g.square(v[0])));
        let inside = x.map(|v| if (v - 1.0).abs() < 0.01 || (v + 1.0).abs() < 0.01 { v + 0.05 } else { v });
        check("clamp", &[inside], s, |g, v| Ok(g.clamp(v[0], -1.0, 1.0)));
    }
}

#[test]
fn linear_and_matmul() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + s);
        let x = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[5], -1.0, 1.0);
        check("linear", &[x, w, b], s, |g, v| g.linear(v[0], v[1], v[2]));
    }
}

#[test]
fn conv_3d_and_2d() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + s);
        // Random 2x4x4x4x3 input: a [2,4,4,4] grid stack with 3 channels, one volume per batch entry.
        let x = rand_tensor(&mut rng, &[4, 4, 4, 3], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 3, 3, 3, 2], -0.5, 0.5);
        let b = rand_tensor(&mut rng, &[2], -0.5, 0.5);
        let stride = if s % 2 == 0 { 1 } else { 2 };
        check("conv3d", &[x, w, b], s, |g, v| g.conv(v[0], v[1], v[2], 3, stride, 1));

        let img = rand_tensor(&mut rng, &[2, 6, 5, 2], -1.0, 1.0);
        let w2 = rand_tensor(&mut rng, &[3, 3, 2, 3], -0.5, 0.5);
        let b2 = rand_tensor(&mut rng, &[3], -0.5, 0.5);
        check("conv2d", &[img, w2, b2], s, |g, v| g.conv(v[0], v[1], v[2], 2, stride, 1));
    }
}

#[test]
fn conv_on_batched_volume() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[2, 4, 4, 4, 3], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[3, 3, 3, 3, 2], -0.5, 0.5);
    check("conv3d-batched", &[x, w], 7, |g, v| {
        let halves = g.split(v[0], 0, &[1, 1])?;
        let mut outs = vec![];
        for h in halves {
            let h = g.reshape(h, &[4, 4, 4, 3])?;
            outs.push(g.conv_nobias(h, v[1], ConvSpec::cube(3, 1))?);
        }
        g.concat(&outs, 3)
    });
}

#[test]
fn upsample() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + s);
        let x = rand_tensor(&mut rng, &[2, 2, 1, 3], -1.0, 1.0);
        check("upsample", &[x], s, |g, v| g.upsample_nearest(v[0], [2, 2, 2]));
    }
}

#[test]
fn softmax_with_and_without_mask() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + s);
        let x = rand_tensor(&mut rng, &[3, 4, 2], -2.0, 2.0);
        let axis = (s % 3) as usize;
        check("softmax", &[x.clone()], s, |g, v| Ok(g.softmax(v[0], axis)?.0));
        let mask: Vec<bool> = (0..24).map(|i| (i * 7 + s as usize) % 5 == 0).collect();
        check("masked-softmax", &[x], s, |g, v| {
            let m = g.masked_fill(v[0], &mask, f64::NEG_INFINITY)?;
            Ok(g.softmax(m, 0)?.0)
        });
    }
}

#[test]
fn grid_sample_features_and_coordinates() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + s);
        let feat = rand_tensor(&mut rng, &[2, 5, 6, 3], -1.0, 1.0);
        // Fractional parts kept away from lattice lines.
        let coords: Vec<f64> = (0..2 * 7)
            .flat_map(|_| {
                let u = rng.gen_range(0..5) as f64 + rng.gen_range(0.05..0.95);
                let v = rng.gen_range(0..4) as f64 + rng.gen_range(0.05..0.95);
                [u, v]
            })
            .collect();
        let coords = Tensor::from_f64(vec![2, 7, 2], &coords).unwrap();
        check("grid_sample", &[feat, coords], s, |g, v| Ok(g.grid_sample_2d(v[0], v[1], None)?.0));
    }
}

#[test]
fn shape_ops() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + s);
        let a = rand_tensor(&mut rng, &[3, 2, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[3, 1, 4], -1.0, 1.0);
        check("concat", &[a.clone(), b], s, |g, v| g.concat(&[v[0], v[1]], 1));
        check("slice", &[a.clone()], s, |g, v| g.slice(v[0], 2, 1, 2));
        check("reshape", &[a.clone()], s, |g, v| g.reshape(v[0], &[6, 4]));
        check("sum", &[a.clone()], s, |g, v| g.sum_axis(v[0], 1));
        check("mean", &[a.clone()], s, |g, v| g.mean_axis(v[0], 0));
        check("max", &[a.clone()], s, |g, v| g.max_axis(v[0], 2));
        check("gather", &[a.clone()], s, |g, v| g.gather_rows(v[0], &[2, 0, 2]));
        check("mean_all", &[a], s, |g, v| {
            let m = g.mean_all(v[0]);
            let e = g.exp(m);
            Ok(e)
        });
    }
}

#[test]
fn sum_of_sine_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[16], -3.0, 3.0);
    let report = gradient_check(
        |g, v| {
            let s = g.sin(v[0]);
            Ok(g.sum_all(s))
        },
        &[x],
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.worst() <= 1e-7, "{:?}", report.max_rel_err);
}
