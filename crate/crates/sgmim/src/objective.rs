use serde::{Deserialize, Serialize};

use crate::error::{Result, SgError};
use crate::numerics::{Graph, Scalar, TensorData, VarId};

/// L = lambda_I * L_I + lambda_S * L_S. Defaults 1/1; the Table-style sweep
/// exposes lambda_S in {1, 0.1, 0.01, 0}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_i: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_i: 1.0,
            lambda_s: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_i < 0.0 || self.lambda_s < 0.0 {
            return Err(SgError::Config("loss weights must be >= 0".into()));
        }
        if self.lambda_i == 0.0 && self.lambda_s == 0.0 {
            return Err(SgError::Config("loss weights cannot both be zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_i: f64,
    pub l_s: f64,
    pub l_total: f64,
    pub masked_pixel_counts: (usize, usize),
}

/// Weighted sum of already-evaluated loss components.
pub fn total_loss(l_i: f64, l_s: f64, w: &LossWeights, counts: (usize, usize)) -> LossReport {
    LossReport {
        l_i,
        l_s,
        l_total: w.lambda_i * l_i + w.lambda_s * l_s,
        masked_pixel_counts: counts,
    }
}

/// One-layer prediction head, no activation.
pub fn linear_head<S: Scalar>(g: &mut Graph<S>, x: VarId, w: VarId, b: VarId) -> VarId {
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

/// Mean absolute error over all pixel entries belonging to masked patches:
/// denominator = sum(mask) * Q.
pub fn masked_l1<S: Scalar>(
    g: &mut Graph<S>,
    pred: VarId,
    target: VarId,
    patch_mask: &[u8],
) -> Result<VarId> {
    let (n, q) = (g.value(pred).rows(), g.value(pred).cols());
    if g.value(target).shape() != g.value(pred).shape() {
        return Err(SgError::Geometry(format!(
            "masked_l1 shape mismatch: {:?} vs {:?}",
            g.value(pred).shape(),
            g.value(target).shape()
        )));
    }
    if patch_mask.len() != n {
        return Err(SgError::Geometry(format!(
            "mask length {} does not match {} patches",
            patch_mask.len(),
            n
        )));
    }
    let k: usize = patch_mask.iter().map(|&v| v as usize).sum();
    if k == 0 {
        return Err(SgError::Config("masked_l1 over an empty mask".into()));
    }
    let mut mask_data = vec![S::zero(); n * q];
    for (j, &m) in patch_mask.iter().enumerate() {
        if m == 1 {
            for v in &mut mask_data[j * q..(j + 1) * q] {
                *v = S::one();
            }
        }
    }
    let mask = g.input(TensorData::new(vec![n, q], mask_data)?);
    let diff = g.sub(pred, target);
    let a = g.abs(diff);
    let masked = g.mul(a, mask);
    let s = g.sum(masked);
    Ok(g.scale(s, S::from_f64(1.0 / (k * q) as f64)))
}

/// Number of pixel entries covered by a patch mask (for reporting).
pub fn masked_pixel_count(patch_mask: &[u8], q: usize) -> usize {
    patch_mask.iter().map(|&v| v as usize).sum::<usize>() * q
}
