use std::collections::BTreeMap;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SgError};
use crate::model::{bind_params, embed_patches, ModelConfig, ParamSet};
use crate::numerics::{Graph, TensorData};
use crate::objective::linear_head;
use crate::patch_mask::patchify;
use crate::synthdata::{generate_scene, normalize_image, NormStats, SceneConfig};
use crate::trainer::{adamw_update, AdamState};

pub const LOG_AMP_EPS: f64 = 1e-8;
/// Samples along the half-diagonal of the shifted spectrum, 0 to pi inclusive.
pub const PROFILE_POINTS: usize = 17;

/// Reshape a [N, D] token matrix into D channel grids of side sqrt(N),
/// tokens in raster order.
pub fn tokens_to_grid(tokens: &TensorData<f32>, side: usize) -> Result<Vec<Vec<f64>>> {
    let (n, d) = (tokens.rows(), tokens.cols());
    if side * side != n {
        return Err(SgError::Geometry(format!(
            "{n} tokens do not form a {side}x{side} grid"
        )));
    }
    let mut channels = vec![vec![0.0f64; n]; d];
    for t in 0..n {
        for c in 0..d {
            channels[c][t] = tokens.data()[t * d + c] as f64;
        }
    }
    Ok(channels)
}

/// 2-D DFT amplitudes of a side x side grid, row-major, unshifted.
pub fn dft2_amplitude(grid: &[f64], side: usize) -> Result<Vec<f64>> {
    if grid.len() != side * side {
        return Err(SgError::Geometry(format!(
            "grid of {} values is not {side}x{side}",
            grid.len()
        )));
    }
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(side);
    let mut buf: Vec<Complex<f64>> = grid.iter().map(|&v| Complex::new(v, 0.0)).collect();
    // Rows, then columns.
    for row in buf.chunks_exact_mut(side) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); side];
    for j in 0..side {
        for i in 0..side {
            col[i] = buf[i * side + j];
        }
        fft.process(&mut col);
        for i in 0..side {
            buf[i * side + j] = col[i];
        }
    }
    Ok(buf.iter().map(|c| c.norm()).collect())
}

fn fftshift(a: &[f64], side: usize) -> Vec<f64> {
    let half = side / 2;
    let mut out = vec![0.0; side * side];
    for i in 0..side {
        for j in 0..side {
            let si = (i + half) % side;
            let sj = (j + half) % side;
            out[si * side + sj] = a[i * side + j];
        }
    }
    out
}

fn bilinear(a: &[f64], side: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor().min((side - 1) as f64).max(0.0) as usize;
    let x0 = x.floor().min((side - 1) as f64).max(0.0) as usize;
    let y1 = (y0 + 1).min(side - 1);
    let x1 = (x0 + 1).min(side - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    a[y0 * side + x0] * (1.0 - fy) * (1.0 - fx)
        + a[y0 * side + x1] * (1.0 - fy) * fx
        + a[y1 * side + x0] * fy * (1.0 - fx)
        + a[y1 * side + x1] * fy * fx
}

/// Relative log-amplitude profile of a multi-channel feature grid: per-channel
/// 2-D DFT, log(amplitude + eps) averaged over channels, then sampled at
/// PROFILE_POINTS positions along the shifted spectrum's half-diagonal from
/// DC (0) to the corner (pi). Entry 0 is normalized to zero.
pub fn log_amplitude_profile(channels: &[Vec<f64>], side: usize) -> Result<Vec<f64>> {
    if channels.is_empty() {
        return Err(SgError::Config("no channels to analyze".into()));
    }
    let mut avg = vec![0.0f64; side * side];
    for ch in channels {
        let amp = dft2_amplitude(ch, side)?;
        for (a, v) in avg.iter_mut().zip(&amp) {
            *a += (v + LOG_AMP_EPS).ln();
        }
    }
    for a in &mut avg {
        *a /= channels.len() as f64;
    }
    let shifted = fftshift(&avg, side);
    let c = (side / 2) as f64;
    let mut profile = Vec::with_capacity(PROFILE_POINTS);
    for k in 0..PROFILE_POINTS {
        let t = k as f64 / (PROFILE_POINTS - 1) as f64;
        // Walk from DC at the shifted center toward index 0, which carries
        // the Nyquist (pi, pi) component.
        let p = c * (1.0 - t);
        profile.push(bilinear(&shifted, side, p, p));
    }
    let dc = profile[0];
    for v in &mut profile {
        *v -= dc;
    }
    Ok(profile)
}

/// Relative log amplitude at the highest diagonal frequency (pi) versus DC.
pub fn delta_log_amplitude(profile: &[f64]) -> f64 {
    *profile.last().expect("empty profile")
}

pub fn rmse(pred: &[f32], target: &[f32]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(SgError::Geometry("rmse length mismatch or empty".into()));
    }
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum();
    Ok((s / pred.len() as f64).sqrt())
}

/// Fraction of pixels with max(gt/pred, pred/gt) < 1.25. Both inputs must be
/// strictly positive.
pub fn delta1(pred: &[f32], target: &[f32]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(SgError::Geometry("delta1 length mismatch or empty".into()));
    }
    let mut hits = 0usize;
    for (&p, &t) in pred.iter().zip(target) {
        if p <= 0.0 || t <= 0.0 {
            return Err(SgError::Domain(
                "delta1 requires strictly positive depths".into(),
            ));
        }
        let r = (t as f64 / p as f64).max(p as f64 / t as f64);
        if r < 1.25 {
            hits += 1;
        }
    }
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Half-open scene-seed ranges; must not overlap.
    pub train_seeds: (u64, u64),
    pub val_seeds: (u64, u64),
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            train_seeds: (200_000, 200_256),
            val_seeds: (300_000, 300_064),
            steps: 300,
            batch_size: 32,
            lr: 1e-2,
            seed: 7,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_seeds.0 >= self.train_seeds.1 || self.val_seeds.0 >= self.val_seeds.1 {
            return Err(SgError::Config("empty probe seed range".into()));
        }
        if self.train_seeds.0 < self.val_seeds.1 && self.val_seeds.0 < self.train_seeds.1 {
            return Err(SgError::Config(
                "probe train/val seed ranges overlap".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProbeReport {
    pub rmse: f64,
    pub delta1: f64,
    pub train_scenes: usize,
    pub val_scenes: usize,
}

/// Encoder features for one scene: unmasked forward through the frozen
/// encoder, [N, D].
fn scene_features(
    params: &ParamSet,
    model_cfg: &ModelConfig,
    scene_cfg: &SceneConfig,
    stats: &NormStats,
    seed: u64,
) -> Result<(TensorData<f32>, TensorData<f32>)> {
    let grid = model_cfg.grid()?;
    let scene = generate_scene(seed, scene_cfg)?;
    let image = normalize_image(&scene.image, stats);
    let img_patches = patchify(&image, grid.c_img, &grid)?;
    let depth_patches = patchify(&scene.depth, grid.c_struct, &grid)?;
    let mut g: Graph<f32> = Graph::new();
    let vars = bind_params(&mut g, params, false);
    let x = g.input(img_patches);
    let seq = embed_patches(
        &mut g,
        x,
        vars["embed.img_proj.w"],
        vars["embed.img_proj.b"],
        vars["embed.pos"],
    )?;
    let feats = crate::encoder::encode(&mut g, seq, &vars, &model_cfg.encoder())?;
    Ok((g.value(feats).clone(), depth_patches))
}

/// Train a fresh linear head on frozen encoder features and evaluate depth
/// recovery on a disjoint seed range. Predictions are clamped to >= 1e-3 so
/// delta1 stays defined.
pub fn probe_depth(
    params: &ParamSet,
    model_cfg: &ModelConfig,
    scene_cfg: &SceneConfig,
    stats: &NormStats,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    cfg.validate()?;
    let q = model_cfg.patch * model_cfg.patch;
    let d = model_cfg.dim;

    // The encoder is frozen, so features are computed once per scene.
    let mut train: Vec<(TensorData<f32>, TensorData<f32>)> = Vec::new();
    for s in cfg.train_seeds.0..cfg.train_seeds.1 {
        train.push(scene_features(params, model_cfg, scene_cfg, stats, s)?);
    }
    let mut val: Vec<(TensorData<f32>, TensorData<f32>)> = Vec::new();
    for s in cfg.val_seeds.0..cfg.val_seeds.1 {
        val.push(scene_features(params, model_cfg, scene_cfg, stats, s)?);
    }

    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head: BTreeMap<String, TensorData<f32>> = BTreeMap::new();
    head.insert(
        "probe.w".into(),
        TensorData::randn_trunc(vec![d, q], crate::encoder::INIT_STD, &mut rng),
    );
    head.insert("probe.b".into(), TensorData::zeros(vec![q]));
    let mut adam = AdamState::for_params(&head);

    let all_ones: Vec<u8> = vec![1; model_cfg.grid()?.patch_count()];
    for step in 0..cfg.steps {
        let mut grads: BTreeMap<String, TensorData<f32>> = BTreeMap::new();
        let inv_b = 1.0 / cfg.batch_size as f32;
        for i in 0..cfg.batch_size {
            let idx = ((step as usize * cfg.batch_size + i) % train.len()) as usize;
            let (feats, depth) = &train[idx];
            let mut g: Graph<f32> = Graph::new();
            let x = g.input(feats.clone());
            let w = g.param(head["probe.w"].clone());
            let b = g.param(head["probe.b"].clone());
            let pred = linear_head(&mut g, x, w, b);
            let t = g.input(depth.clone());
            let loss = crate::objective::masked_l1(&mut g, pred, t, &all_ones)?;
            let loss = g.scale(loss, inv_b);
            let node_grads = g.backward(loss);
            for (name, id) in [("probe.w", w), ("probe.b", b)] {
                if let Some(grad) = &node_grads[id] {
                    match grads.get_mut(name) {
                        Some(acc) => {
                            for (a, v) in acc.data_mut().iter_mut().zip(grad.data()) {
                                *a += *v;
                            }
                        }
                        None => {
                            grads.insert(name.to_string(), grad.clone());
                        }
                    }
                }
            }
        }
        adam.t += 1;
        for (name, p) in head.iter_mut() {
            if let Some(grad) = grads.get(name) {
                let m = adam.m.get_mut(name).expect("probe adam m");
                let v = adam.v.get_mut(name).expect("probe adam v");
                adamw_update(
                    p.data_mut(),
                    grad.data(),
                    m,
                    v,
                    adam.t,
                    cfg.lr,
                    (0.9, 0.999),
                    0.0,
                );
            }
        }
    }

    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for (feats, depth) in &val {
        let mut g: Graph<f32> = Graph::new();
        let x = g.input(feats.clone());
        let w = g.input(head["probe.w"].clone());
        let b = g.input(head["probe.b"].clone());
        let pred = linear_head(&mut g, x, w, b);
        preds.extend(g.value(pred).data().iter().map(|&v| v.max(1e-3)));
        targets.extend_from_slice(depth.data());
    }
    Ok(ProbeReport {
        rmse: rmse(&preds, &targets)?,
        delta1: delta1(&preds, &targets)?,
        train_scenes: train.len(),
        val_scenes: val.len(),
    })
}

/// Relative log-amplitude profile of the final encoder output I_F, averaged
/// over a set of scenes.
pub fn final_feature_profile(
    params: &ParamSet,
    model_cfg: &ModelConfig,
    scene_cfg: &SceneConfig,
    stats: &NormStats,
    seeds: &[u64],
) -> Result<Vec<f64>> {
    if seeds.is_empty() {
        return Err(SgError::Config("no scenes for spectrum analysis".into()));
    }
    let side = model_cfg.img_size / model_cfg.patch;
    let mut acc = vec![0.0f64; PROFILE_POINTS];
    for &seed in seeds {
        let (feats, _) = scene_features(params, model_cfg, scene_cfg, stats, seed)?;
        let channels = tokens_to_grid(&feats, side)?;
        let profile = log_amplitude_profile(&channels, side)?;
        for (a, v) in acc.iter_mut().zip(&profile) {
            *a += v;
        }
    }
    for v in &mut acc {
        *v /= seeds.len() as f64;
    }
    Ok(acc)
}

/// Per-token RMS channel energy of the final encoder output for one scene,
/// as a side x side grid (for grayscale dumps).
pub fn final_feature_energy(
    params: &ParamSet,
    model_cfg: &ModelConfig,
    scene_cfg: &SceneConfig,
    stats: &NormStats,
    seed: u64,
) -> Result<Vec<f64>> {
    let (feats, _) = scene_features(params, model_cfg, scene_cfg, stats, seed)?;
    let (n, d) = (feats.rows(), feats.cols());
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let row = &feats.data()[t * d..(t + 1) * d];
        let ms: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / d as f64;
        out.push(ms.sqrt());
    }
    Ok(out)
}

/// Per-block relative log-amplitude profiles of encoder feature maps,
/// averaged over a set of scenes.
pub fn encoder_block_profiles(
    params: &ParamSet,
    model_cfg: &ModelConfig,
    scene_cfg: &SceneConfig,
    stats: &NormStats,
    seeds: &[u64],
) -> Result<Vec<Vec<f64>>> {
    if seeds.is_empty() {
        return Err(SgError::Config("no scenes for spectrum analysis".into()));
    }
    let grid = model_cfg.grid()?;
    let side = model_cfg.img_size / model_cfg.patch;
    let mut acc: Vec<Vec<f64>> = vec![vec![0.0; PROFILE_POINTS]; model_cfg.depth];
    for &seed in seeds {
        let scene = generate_scene(seed, scene_cfg)?;
        let image = normalize_image(&scene.image, stats);
        let img_patches = patchify(&image, grid.c_img, &grid)?;
        let mut g: Graph<f32> = Graph::new();
        let vars = bind_params(&mut g, params, false);
        let x = g.input(img_patches);
        let seq = embed_patches(
            &mut g,
            x,
            vars["embed.img_proj.w"],
            vars["embed.img_proj.b"],
            vars["embed.pos"],
        )?;
        let (_, taps) = crate::encoder::encode_collect(&mut g, seq, &vars, &model_cfg.encoder())?;
        for (b, tap) in taps.iter().enumerate() {
            let channels = tokens_to_grid(g.value(*tap), side)?;
            let profile = log_amplitude_profile(&channels, side)?;
            for (a, v) in acc[b].iter_mut().zip(&profile) {
                *a += v;
            }
        }
    }
    for p in &mut acc {
        for v in p.iter_mut() {
            *v /= seeds.len() as f64;
        }
    }
    Ok(acc)
}
