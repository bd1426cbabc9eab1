use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint, CheckpointManifest, CKPT_VERSION};
use crate::error::{Result, SgError};
use crate::model::{
    bind_params_typed, build_sample_loss, weighted_sample_loss, ModelConfig, ParamSet,
};
use crate::numerics::{Graph, Scalar, TensorData};
use crate::objective::{masked_pixel_count, total_loss, LossReport, LossWeights};
use crate::patch_mask::{patchify, MaskPair, MaskingStrategy};
use crate::synthdata::{compute_norm_stats, generate_scene, normalize_image, NormStats, SceneConfig};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub mask_ratio: f64,
    pub loss_weights: LossWeights,
    pub masking_strategy: MaskingStrategy,
    pub seed: u64,
    pub grad_clip: f64,
    pub data_seed_start: u64,
    /// Reuse the step-0 batch every step (overfitting diagnostics).
    pub fixed_batch: bool,
    /// When false the structured branch is deleted entirely (baseline).
    pub guidance_enabled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 16,
            base_lr: 1e-3,
            min_lr: 1e-5,
            warmup_steps: 300,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            mask_ratio: 0.6,
            loss_weights: LossWeights::default(),
            masking_strategy: MaskingStrategy::SelectiveComplement,
            seed: 0,
            grad_clip: 5.0,
            data_seed_start: 100_000,
            fixed_batch: false,
            guidance_enabled: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.steps {
            return Err(SgError::Config(format!(
                "warmup_steps {} must be < steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(SgError::Config("mask_ratio outside (0,1)".into()));
        }
        if self.batch_size == 0 {
            return Err(SgError::Config("batch_size must be >= 1".into()));
        }
        self.loss_weights.validate()
    }
}

/// Linear warmup to base_lr, then cosine decay to min_lr.
pub fn cosine_lr(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.steps - cfg.warmup_steps) as f64;
    let progress = progress.min(1.0);
    cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn for_params(params: &ParamSet) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in params {
            m.insert(name.clone(), vec![0.0; t.numel()]);
            v.insert(name.clone(), vec![0.0; t.numel()]);
        }
        AdamState { m, v, t: 0 }
    }
}

/// One AdamW step on a single tensor. Weight decay is decoupled: applied
/// directly to the parameter, separate from the moment update.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    t: u64,
    lr: f64,
    betas: (f64, f64),
    weight_decay: f64,
) {
    let (b1, b2) = betas;
    let bias1 = 1.0 - b1.powi(t as i32);
    let bias2 = 1.0 - b2.powi(t as i32);
    for i in 0..param.len() {
        let p = param[i] as f64;
        let g = grad[i] as f64;
        let p = p - lr * weight_decay * p;
        let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
        let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let mhat = mi / bias1;
        let vhat = vi / bias2;
        param[i] = (p - lr * mhat / (vhat.sqrt() + ADAM_EPS)) as f32;
    }
}

/// splitmix64; derives per-sample mask seeds from (run seed, step, sample)
/// so resumed training replays the identical mask stream.
pub fn mask_seed(run_seed: u64, step: u64, sample: usize, branch: u64) -> u64 {
    let mut z = run_seed
        .wrapping_add(step.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add((sample as u64).wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(branch.wrapping_mul(0x94d049bb133111eb));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// One sample's patchified inputs plus its masks.
#[derive(Debug, Clone)]
pub struct SampleInput<S> {
    pub img_patches: TensorData<S>,
    pub depth_patches: TensorData<S>,
    pub mask: MaskPair,
}

pub fn make_sample<S: Scalar>(
    scene_seed: u64,
    mask_seed: u64,
    model_cfg: &ModelConfig,
    scene_cfg: &SceneConfig,
    stats: &NormStats,
    strategy: MaskingStrategy,
    ratio: f64,
) -> Result<SampleInput<S>> {
    let grid = model_cfg.grid()?;
    let scene = generate_scene(scene_seed, scene_cfg)?;
    let image = normalize_image(&scene.image, stats);
    let image: Vec<S> = image.iter().map(|&v| S::from_f64(v as f64)).collect();
    let depth: Vec<S> = scene.depth.iter().map(|&v| S::from_f64(v as f64)).collect();
    let img_patches = patchify(&image, grid.c_img, &grid)?;
    let depth_patches = patchify(&depth, grid.c_struct, &grid)?;
    let mask = MaskPair::sample(strategy, grid.patch_count(), ratio, mask_seed)?;
    Ok(SampleInput {
        img_patches,
        depth_patches,
        mask,
    })
}

/// Mean gradients and loss report over a batch, in the requested precision.
/// Per-sample graphs keep memory flat; accumulation order is sample order.
pub fn compute_batch_gradients<S: Scalar>(
    params: &BTreeMap<String, TensorData<S>>,
    model_cfg: &ModelConfig,
    batch: &[SampleInput<S>],
    w: &LossWeights,
    guidance_on: bool,
) -> Result<(BTreeMap<String, TensorData<S>>, LossReport)> {
    let inv_b = 1.0 / batch.len() as f64;
    let mut grads: BTreeMap<String, TensorData<S>> = BTreeMap::new();
    let mut sum_li = 0.0;
    let mut sum_ls = 0.0;
    let mut counts = (0usize, 0usize);
    for sample in batch {
        let mut g: Graph<S> = Graph::new();
        let vars = bind_params_typed(&mut g, params, true);
        let s = build_sample_loss(
            &mut g,
            &vars,
            model_cfg,
            &sample.img_patches,
            &sample.depth_patches,
            &sample.mask,
            guidance_on,
        )?;
        let total = weighted_sample_loss(&mut g, &s, w);
        let total = g.scale(total, S::from_f64(inv_b));
        let node_grads = g.backward(total);
        for (name, &id) in &vars {
            if let Some(grad) = &node_grads[id] {
                match grads.get_mut(name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a = *a + *b;
                        }
                    }
                    None => {
                        grads.insert(name.clone(), grad.clone());
                    }
                }
            }
        }
        sum_li += g.value(s.l_i).data()[0].to_f64();
        if let Some(ls) = s.l_s {
            sum_ls += g.value(ls).data()[0].to_f64();
        }
        let q_img = sample.img_patches.cols();
        let q_dep = sample.depth_patches.cols();
        counts.0 += masked_pixel_count(&sample.mask.m_i, q_img);
        counts.1 += masked_pixel_count(&sample.mask.m_s, q_dep);
    }
    let report = total_loss(sum_li * inv_b, sum_ls * inv_b, w, counts);
    Ok((grads, report))
}

fn clip_gradients(grads: &mut BTreeMap<String, TensorData<f32>>, max_norm: f64) {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for &v in g.data() {
            sq += (v as f64) * (v as f64);
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
}

pub struct TrainOutcome {
    pub params: ParamSet,
    pub adam: AdamState,
    pub reports: Vec<LossReport>,
    pub norm_stats: NormStats,
    pub final_step: u64,
}

/// Deterministic pre-training loop. With `out_dir` set, appends a CSV log
/// (step, lr, L_I, L_S, L_total) and writes `checkpoint.sgm` at the end.
pub fn train(
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    scene_cfg: &SceneConfig,
    out_dir: Option<&Path>,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    train_until(train_cfg, model_cfg, scene_cfg, out_dir, resume, None)
}

/// Like `train`, but stop early at `stop` while keeping cfg.steps as the
/// LR-schedule horizon — checkpoints taken mid-schedule resume exactly.
pub fn train_until(
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    scene_cfg: &SceneConfig,
    out_dir: Option<&Path>,
    resume: Option<&Checkpoint>,
    stop: Option<u64>,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    scene_cfg.validate()?;

    let stats = match resume {
        Some(c) => c.manifest.norm_stats,
        None => compute_norm_stats(scene_cfg)?,
    };
    let (mut params, mut adam, start_step) = match resume {
        Some(c) => {
            let params = c.params();
            let adam = c
                .adam_state()
                .unwrap_or_else(|| AdamState::for_params(&params));
            (params, adam, c.manifest.step)
        }
        None => {
            let params = crate::model::init_params(model_cfg, train_cfg.seed)?;
            let adam = AdamState::for_params(&params);
            (params, adam, 0)
        }
    };

    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("train_log.csv");
            let fresh = !path.exists() || start_step == 0;
            let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
            if fresh && f.metadata()?.len() == 0 {
                writeln!(f, "step,lr,l_i,l_s,l_total")?;
            }
            Some(f)
        }
        None => None,
    };

    let stop = stop.unwrap_or(train_cfg.steps).min(train_cfg.steps);
    let mut reports = Vec::with_capacity(stop.saturating_sub(start_step) as usize);
    for step in start_step..stop {
        let lr = cosine_lr(step, train_cfg);
        let data_step = if train_cfg.fixed_batch { 0 } else { step };
        let mut batch = Vec::with_capacity(train_cfg.batch_size);
        for i in 0..train_cfg.batch_size {
            let scene_seed =
                train_cfg.data_seed_start + data_step * train_cfg.batch_size as u64 + i as u64;
            let ms = mask_seed(train_cfg.seed, data_step, i, 0);
            batch.push(make_sample::<f32>(
                scene_seed,
                ms,
                model_cfg,
                scene_cfg,
                &stats,
                train_cfg.masking_strategy,
                train_cfg.mask_ratio,
            )?);
        }
        let (mut grads, report) = compute_batch_gradients(
            &params,
            model_cfg,
            &batch,
            &train_cfg.loss_weights,
            train_cfg.guidance_enabled,
        )?;
        if !report.l_total.is_finite() {
            return Err(SgError::Numeric(format!(
                "non-finite loss at step {step}"
            )));
        }
        clip_gradients(&mut grads, train_cfg.grad_clip);
        adam.t += 1;
        for (name, p) in params.iter_mut() {
            if let Some(grad) = grads.get(name) {
                let m = adam.m.get_mut(name).expect("adam m");
                let v = adam.v.get_mut(name).expect("adam v");
                adamw_update(
                    p.data_mut(),
                    grad.data(),
                    m,
                    v,
                    adam.t,
                    lr,
                    train_cfg.betas,
                    train_cfg.weight_decay,
                );
            }
        }
        if let Some(f) = log.as_mut() {
            writeln!(
                f,
                "{step},{lr:.8e},{:.8e},{:.8e},{:.8e}",
                report.l_i, report.l_s, report.l_total
            )?;
        }
        reports.push(report);
    }

    let adam_for_save = adam.clone();
    if let Some(dir) = out_dir {
        save_full_checkpoint(
            &params,
            &adam_for_save,
            train_cfg,
            model_cfg,
            scene_cfg,
            &stats,
            stop,
            &dir.join("checkpoint.sgm"),
        )?;
    }
    Ok(TrainOutcome {
        params,
        adam,
        reports,
        norm_stats: stats,
        final_step: stop,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn save_full_checkpoint(
    params: &ParamSet,
    adam: &AdamState,
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    scene_cfg: &SceneConfig,
    stats: &NormStats,
    step: u64,
    path: &Path,
) -> Result<()> {
    let mut tensors = params.clone();
    for (name, m) in &adam.m {
        let shape = params[name].shape().to_vec();
        tensors.insert(format!("opt.m.{name}"), TensorData::new(shape, m.clone())?);
    }
    for (name, v) in &adam.v {
        let shape = params[name].shape().to_vec();
        tensors.insert(format!("opt.v.{name}"), TensorData::new(shape, v.clone())?);
    }
    let manifest = CheckpointManifest {
        version: CKPT_VERSION,
        step,
        encoder_only: false,
        model: *model_cfg,
        train: *train_cfg,
        scene: *scene_cfg,
        norm_stats: *stats,
        adam_t: adam.t,
        tensors: Vec::new(),
    };
    save_checkpoint(&tensors, manifest, path)
}
