use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderConfig, INIT_STD};
use crate::error::{Result, SgError};
use crate::guidance;
use crate::numerics::{Graph, Scalar, TensorData, VarId};
use crate::objective::{self, LossWeights};
use crate::patch_mask::{structured_visible_indices, MaskPair, PatchGrid};

/// Named model parameters, stored in f32. BTreeMap keeps every traversal
/// (updates, checkpoints, exports) in one deterministic order.
pub type ParamSet = BTreeMap<String, TensorData<f32>>;
pub type VarMap = BTreeMap<String, VarId>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub img_size: usize,
    pub patch: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            img_size: 64,
            patch: 8,
            depth: 4,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            ln_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            depth: self.depth,
            dim: self.dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            ln_eps: self.ln_eps,
        }
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.img_size, self.img_size, self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        self.grid()?;
        Ok(())
    }
}

/// Initialize every learnable tensor. Weight matrices are truncated normal
/// (std 0.02), biases zero, fusion W^O zero.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let n = grid.patch_count();
    let d = cfg.dim;
    let img_in = grid.p * grid.p * grid.c_img;
    let struct_in = grid.p * grid.p * grid.c_struct;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    params.insert(
        "embed.img_proj.w".into(),
        TensorData::randn_trunc(vec![img_in, d], INIT_STD, &mut rng),
    );
    params.insert("embed.img_proj.b".into(), TensorData::zeros(vec![d]));
    params.insert(
        "embed.struct_proj.w".into(),
        TensorData::randn_trunc(vec![struct_in, d], INIT_STD, &mut rng),
    );
    params.insert("embed.struct_proj.b".into(), TensorData::zeros(vec![d]));
    // One positional table shared by both branches.
    params.insert(
        "embed.pos".into(),
        TensorData::randn_trunc(vec![n, d], INIT_STD, &mut rng),
    );
    params.insert(
        "embed.mask_token".into(),
        TensorData::randn_trunc(vec![d], INIT_STD, &mut rng),
    );
    encoder::init_encoder_params(&cfg.encoder(), &mut rng, &mut params);
    guidance::init_guidance_params(d, &mut rng, &mut params);
    params.insert(
        "head.img.w".into(),
        TensorData::randn_trunc(vec![d, img_in], INIT_STD, &mut rng),
    );
    params.insert("head.img.b".into(), TensorData::zeros(vec![img_in]));
    params.insert(
        "head.struct.w".into(),
        TensorData::randn_trunc(vec![d, struct_in], INIT_STD, &mut rng),
    );
    params.insert("head.struct.b".into(), TensorData::zeros(vec![struct_in]));
    Ok(params)
}

/// Insert every parameter into a graph; `trainable` controls whether
/// gradients flow into them.
pub fn bind_params<S: Scalar>(g: &mut Graph<S>, params: &ParamSet, trainable: bool) -> VarMap {
    let mut vars = BTreeMap::new();
    for (name, t) in params {
        let tensor = t.map_scalar::<S>();
        let id = if trainable {
            g.param(tensor)
        } else {
            g.input(tensor)
        };
        vars.insert(name.clone(), id);
    }
    vars
}

pub fn bind_params_typed<S: Scalar>(
    g: &mut Graph<S>,
    params: &BTreeMap<String, TensorData<S>>,
    trainable: bool,
) -> VarMap {
    let mut vars = BTreeMap::new();
    for (name, t) in params {
        let id = if trainable {
            g.param(t.clone())
        } else {
            g.input(t.clone())
        };
        vars.insert(name.clone(), id);
    }
    vars
}

/// tokens = patches * W + b + pos
pub fn embed_patches<S: Scalar>(
    g: &mut Graph<S>,
    patches: VarId,
    proj_w: VarId,
    proj_b: VarId,
    pos: VarId,
) -> Result<VarId> {
    if g.value(patches).cols() != g.value(proj_w).rows() {
        return Err(SgError::Geometry(format!(
            "projection width mismatch: patches {:?} vs W {:?}",
            g.value(patches).shape(),
            g.value(proj_w).shape()
        )));
    }
    if g.value(patches).rows() != g.value(pos).rows() {
        return Err(SgError::Geometry(format!(
            "position table rows {:?} do not match {} patches",
            g.value(pos).shape(),
            g.value(patches).rows()
        )));
    }
    let t = g.matmul(patches, proj_w);
    let t = g.add_row(t, proj_b);
    Ok(g.add(t, pos))
}

/// Replace rows at M_I = 1 with mask_token + positional embedding; visible
/// rows pass through. Output keeps the full length N (SimMIM-style).
pub fn apply_mask_tokens<S: Scalar>(
    g: &mut Graph<S>,
    seq: VarId,
    m_i: &[u8],
    mask_token: VarId,
    pos: VarId,
) -> VarId {
    let (n, d) = (g.value(seq).rows(), g.value(seq).cols());
    assert_eq!(m_i.len(), n, "mask length mismatch");
    let masked_idx: Vec<usize> = m_i
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 1)
        .map(|(i, _)| i)
        .collect();
    if masked_idx.is_empty() {
        return seq;
    }
    let mut keep = vec![S::one(); n * d];
    for &i in &masked_idx {
        for v in &mut keep[i * d..(i + 1) * d] {
            *v = S::zero();
        }
    }
    let keep = g.input(TensorData::new(vec![n, d], keep).expect("keep mask"));
    let kept = g.mul(seq, keep);
    let pos_rows = g.gather_rows(pos, &masked_idx);
    let tokens = g.repeat_row(mask_token, masked_idx.len());
    let rows = g.add(tokens, pos_rows);
    let scattered = g.scatter_rows(rows, n, &masked_idx);
    g.add(kept, scattered)
}

/// Loss nodes built for one sample.
pub struct SampleLoss {
    pub l_i: VarId,
    pub l_s: Option<VarId>,
    /// Encoder output, exposed for analysis and probing paths.
    pub i_f: VarId,
}

/// Full per-sample pipeline: embed both branches, mask, encode, fuse, heads,
/// masked L1 losses. `guidance_on = false` deletes the structured branch
/// entirely (the ablation baseline).
pub fn build_sample_loss<S: Scalar>(
    g: &mut Graph<S>,
    vars: &VarMap,
    cfg: &ModelConfig,
    img_patches: &TensorData<S>,
    depth_patches: &TensorData<S>,
    mask: &MaskPair,
    guidance_on: bool,
) -> Result<SampleLoss> {
    let enc_cfg = cfg.encoder();
    let img_p = g.input(img_patches.clone());
    let img_tok = embed_patches(
        g,
        img_p,
        vars["embed.img_proj.w"],
        vars["embed.img_proj.b"],
        vars["embed.pos"],
    )?;
    let masked_tok = apply_mask_tokens(g, img_tok, &mask.m_i, vars["embed.mask_token"], vars["embed.pos"]);
    let i_f = encoder::encode(g, masked_tok, vars, &enc_cfg)?;
    let pred_img = objective::linear_head(g, i_f, vars["head.img.w"], vars["head.img.b"]);
    let l_i = objective::masked_l1(g, pred_img, img_p, &mask.m_i)?;

    let l_s = if guidance_on {
        let depth_p = g.input(depth_patches.clone());
        let struct_tok = embed_patches(
            g,
            depth_p,
            vars["embed.struct_proj.w"],
            vars["embed.struct_proj.b"],
            vars["embed.pos"],
        )?;
        let vis_idx = structured_visible_indices(&mask.m_s)?;
        let visible = g.gather_rows(struct_tok, &vis_idx);
        let s_f = guidance::extract_structured_features(g, visible, vars, cfg.ln_eps);
        let i_sf = guidance::fuse(g, i_f, s_f, vars, cfg.heads)?;
        let pred_s = objective::linear_head(g, i_sf, vars["head.struct.w"], vars["head.struct.b"]);
        Some(objective::masked_l1(g, pred_s, depth_p, &mask.m_s)?)
    } else {
        None
    };

    Ok(SampleLoss { l_i, l_s, i_f })
}

/// Weighted scalar loss node for one sample. When lambda_S = 0 the L_S node
/// is left out of the loss so no gradient path exists through the guidance
/// branch.
pub fn weighted_sample_loss<S: Scalar>(
    g: &mut Graph<S>,
    sample: &SampleLoss,
    w: &LossWeights,
) -> VarId {
    let li = g.scale(sample.l_i, S::from_f64(w.lambda_i));
    match sample.l_s {
        Some(ls) if w.lambda_s > 0.0 => {
            let ls = g.scale(ls, S::from_f64(w.lambda_s));
            g.add(li, ls)
        }
        _ => li,
    }
}
