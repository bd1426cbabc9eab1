use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, VarId};
use super::tensor::TensorData;
use crate::error::{Result, SgError};

/// Outcome of comparing reverse-mode gradients against central finite
/// differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub eps: f64,
}

/// rel_error = |a - n| / max(|a|, |n|, 1e-5). The floor makes gradients
/// smaller than 1e-5 effectively an absolute comparison: central differences
/// of an O(1) function in f64 carry ~1e-11 round-off noise, so demanding
/// relative agreement on such elements only measures that noise.
fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

fn eval_scalar<F>(
    f: &F,
    params: &BTreeMap<String, TensorData<f64>>,
    context: &str,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &BTreeMap<String, VarId>) -> Result<VarId>,
{
    let mut g = Graph::new();
    let mut ids = BTreeMap::new();
    for (name, t) in params {
        ids.insert(name.clone(), g.input(t.clone()));
    }
    let out = f(&mut g, &ids)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(SgError::Config("grad_check function must return a scalar".into()));
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(SgError::Numeric(format!(
            "non-finite function value while evaluating {context}"
        )));
    }
    Ok(v)
}

/// Compare the reverse-mode gradient of `f` with central finite differences,
/// element by element, over every parameter. 64-bit precision throughout.
pub fn grad_check<F>(
    f: &F,
    params: &BTreeMap<String, TensorData<f64>>,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &BTreeMap<String, VarId>) -> Result<VarId>,
{
    grad_check_inner(f, params, eps, None, 0)
}

/// Same check restricted to at most `max_per_param` randomly chosen elements
/// per parameter tensor. Keeps full-model checks tractable.
pub fn grad_check_sampled<F>(
    f: &F,
    params: &BTreeMap<String, TensorData<f64>>,
    eps: f64,
    max_per_param: usize,
    sample_seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &BTreeMap<String, VarId>) -> Result<VarId>,
{
    grad_check_inner(f, params, eps, Some(max_per_param), sample_seed)
}

fn grad_check_inner<F>(
    f: &F,
    params: &BTreeMap<String, TensorData<f64>>,
    eps: f64,
    max_per_param: Option<usize>,
    sample_seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &BTreeMap<String, VarId>) -> Result<VarId>,
{
    if eps <= 0.0 {
        return Err(SgError::Config("grad_check eps must be positive".into()));
    }

    // Analytic pass.
    let mut g = Graph::new();
    let mut ids = BTreeMap::new();
    for (name, t) in params {
        ids.insert(name.clone(), g.param(t.clone()));
    }
    let loss = f(&mut g, &ids)?;
    if !g.value(loss).data()[0].is_finite() {
        return Err(SgError::Numeric(
            "non-finite function value at the unperturbed point".into(),
        ));
    }
    let grads = g.backward(loss);

    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut max_rel = 0.0f64;
    let mut worst = String::new();

    for (name, t) in params {
        let id = ids[name];
        let zero = TensorData::zeros(t.shape().to_vec());
        let analytic = grads[id].as_ref().unwrap_or(&zero);
        let indices: Vec<usize> = match max_per_param {
            Some(k) if t.numel() > k => {
                (0..k).map(|_| rng.gen_range(0..t.numel())).collect()
            }
            _ => (0..t.numel()).collect(),
        };
        for idx in indices {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[idx] += eps;
            let fp = eval_scalar(f, &plus, &format!("{name}[{idx}] + eps"))?;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[idx] -= eps;
            let fm = eval_scalar(f, &minus, &format!("{name}[{idx}] - eps"))?;
            let numeric = (fp - fm) / (2.0 * eps);
            let re = rel_error(analytic.data()[idx], numeric);
            if re > max_rel {
                max_rel = re;
                worst = format!("{name}[{idx}]");
            }
        }
    }

    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst_param: worst,
        eps,
    })
}
