//! Central-difference gradient checking in `f64`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Graph, ParamId, ParamStore, Result, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Check at most this many randomly chosen entries per input.
    pub max_entries: Option<usize>,
    pub seed: u64,
    /// Denominator floor of the relative error `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-4,
            max_entries: None,
            seed: 0,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Maximum relative error per input.
    pub max_rel_err: Vec<f64>,
    /// Number of entries checked per input.
    pub checked: Vec<usize>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn entries(n: usize, opts: &GradCheckOptions, salt: u64) -> Vec<usize> {
    match opts.max_entries {
        Some(k) if k < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9e37_79b9));
            let mut idx = sample(&mut rng, n, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

fn scalar_out(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(TensorError::NonScalarLoss(t.shape().to_vec()));
    }
    let y = t.item();
    if !y.is_finite() {
        return Err(TensorError::NonFinite("gradient_check output"));
    }
    Ok(y)
}

/// Compares analytic gradients of a scalar function of `inputs` against
/// central differences.
pub fn gradient_check<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_out(&g, out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_out(&g, out)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: vec![],
        checked: vec![],
    };
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        let idx = entries(inputs[k].numel(), &opts, k as u64);
        let mut worst: f64 = 0.0;
        for &i in &idx {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + opts.h;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = orig - opts.h;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * opts.h);
            worst = worst.max(rel_err(analytic.data()[i], numeric, opts.floor));
        }
        report.max_rel_err.push(worst);
        report.checked.push(idx.len());
    }
    Ok(report)
}

/// Like [`gradient_check`] but perturbs entries of parameters in a store.
pub fn param_gradient_check<F>(
    f: F,
    store: &ParamStore<f64>,
    params: &[ParamId],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    scalar_out(&g, out)?;
    let grads = g.backward(out)?.param_grads(store);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: vec![],
        checked: vec![],
    };
    for (k, &id) in params.iter().enumerate() {
        let n = store.get(id).value.numel();
        let analytic = grads[id.index()]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).value.shape().to_vec()));
        let idx = entries(n, &opts, k as u64);
        let mut worst: f64 = 0.0;
        for &i in &idx {
            let orig = work.get(id).value.data()[i];
            let at = |x: f64, work: &mut ParamStore<f64>| -> Result<f64> {
                work.get_mut(id).value.data_mut()[i] = x;
                let mut g = Graph::new();
                let out = f(&mut g, work)?;
                scalar_out(&g, out)
            };
            let fp = at(orig + opts.h, &mut work)?;
            let fm = at(orig - opts.h, &mut work)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * opts.h);
            worst = worst.max(rel_err(analytic.data()[i], numeric, opts.floor));
        }
        report.max_rel_err.push(worst);
        report.checked.push(idx.len());
    }
    Ok(report)
}
