use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::analysis::{probe_depth, ProbeConfig};
use crate::error::{Result, SgError};
use crate::model::ModelConfig;
use crate::objective::LossWeights;
use crate::patch_mask::MaskingStrategy;
use crate::synthdata::SceneConfig;
use crate::trainer::{train, TrainConfig};

/// Which slice of the ablation grid to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// All 8 cells: 4 masking + 4 loss-weight configurations.
    Full,
    /// random 0.6; selective 0.5 / 0.6 / 0.7 (lambda fixed at 1/1).
    Masking,
    /// lambda_S in {1, 0.1, 0.01, 0} (selective 0.6).
    LossWeights,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(SweepAxis::Full),
            "masking" => Ok(SweepAxis::Masking),
            "loss_weights" => Ok(SweepAxis::LossWeights),
            other => Err(format!("unknown sweep axis '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub name: String,
    pub strategy: MaskingStrategy,
    pub mask_ratio: f64,
    pub weights: LossWeights,
}

fn cell(name: String, strategy: MaskingStrategy, ratio: f64, lambda_s: f64) -> SweepCell {
    SweepCell {
        name,
        strategy,
        mask_ratio: ratio,
        weights: LossWeights {
            lambda_i: 1.0,
            lambda_s,
        },
    }
}

fn mask_cell(strategy: MaskingStrategy, ratio: f64) -> SweepCell {
    let s = match strategy {
        MaskingStrategy::SelectiveComplement => "selective",
        MaskingStrategy::RandomBoth => "random",
    };
    cell(format!("mask_{s}_r{ratio:.2}"), strategy, ratio, 1.0)
}

fn loss_cell(lambda_s: f64) -> SweepCell {
    cell(
        format!("loss_ls{lambda_s}"),
        MaskingStrategy::SelectiveComplement,
        0.6,
        lambda_s,
    )
}

/// The ablation grid: masking strategies/ratios at lambda 1/1, and loss
/// weightings at selective 0.6. The two axes intentionally share the
/// (selective 0.6, 1/1) configuration, so `Full` runs it twice under two
/// names — one row per table cell.
pub fn grid(axis: SweepAxis) -> Vec<SweepCell> {
    let masking = vec![
        mask_cell(MaskingStrategy::RandomBoth, 0.6),
        mask_cell(MaskingStrategy::SelectiveComplement, 0.5),
        mask_cell(MaskingStrategy::SelectiveComplement, 0.6),
        mask_cell(MaskingStrategy::SelectiveComplement, 0.7),
    ];
    let weights = vec![
        loss_cell(1.0),
        loss_cell(0.1),
        loss_cell(0.01),
        loss_cell(0.0),
    ];
    match axis {
        SweepAxis::Masking => masking,
        SweepAxis::LossWeights => weights,
        SweepAxis::Full => {
            let mut all = masking;
            all.extend(weights);
            all
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub cell: String,
    pub strategy: String,
    pub mask_ratio: f64,
    pub lambda_i: f64,
    pub lambda_s: f64,
    pub seed: String,
    pub final_l_total: f64,
    pub probe_rmse: f64,
    pub probe_delta1: f64,
}

impl SweepRow {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6e},{:.6e},{:.6e}",
            self.cell,
            self.strategy,
            self.mask_ratio,
            self.lambda_i,
            self.lambda_s,
            self.seed,
            self.final_l_total,
            self.probe_rmse,
            self.probe_delta1
        )
    }
}

pub const SWEEP_CSV_HEADER: &str =
    "cell,strategy,mask_ratio,lambda_i,lambda_s,seed,final_l_total,probe_rmse,probe_delta1";

/// Run every (cell, seed) job, write per-job artifacts under
/// out_dir/<cell>/seed<k>/, and emit summary.csv with one row per job plus a
/// mean row per cell. Jobs may run on several worker threads; output order is
/// fixed regardless.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    cells: &[SweepCell],
    seeds: &[u64],
    model_cfg: &ModelConfig,
    train_template: &TrainConfig,
    scene_cfg: &SceneConfig,
    probe_cfg: &ProbeConfig,
    out_dir: &Path,
    workers: usize,
) -> Result<Vec<SweepRow>> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(SgError::Config("empty sweep".into()));
    }
    std::fs::create_dir_all(out_dir)?;

    struct Job {
        cell_idx: usize,
        seed: u64,
    }
    let jobs: Vec<Job> = cells
        .iter()
        .enumerate()
        .flat_map(|(i, _)| {
            seeds.iter().map(move |&s| Job {
                cell_idx: i,
                seed: s,
            })
        })
        .collect();

    let results: Mutex<Vec<Option<Result<SweepRow>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = workers.max(1).min(jobs.len());

    let run_job = |job: &Job| -> Result<SweepRow> {
        let c = &cells[job.cell_idx];
        let mut tc = *train_template;
        tc.masking_strategy = c.strategy;
        tc.mask_ratio = c.mask_ratio;
        tc.loss_weights = c.weights;
        tc.seed = job.seed;
        let job_dir = out_dir.join(&c.name).join(format!("seed{}", job.seed));
        std::fs::create_dir_all(&job_dir)?;
        let outcome = match train(&tc, model_cfg, scene_cfg, Some(&job_dir), None) {
            Ok(o) => o,
            Err(e) => {
                std::fs::write(job_dir.join(".failed"), format!("{e}\n"))?;
                return Err(e);
            }
        };
        let probe = match probe_depth(
            &outcome.params,
            model_cfg,
            scene_cfg,
            &outcome.norm_stats,
            probe_cfg,
        ) {
            Ok(p) => p,
            Err(e) => {
                std::fs::write(job_dir.join(".failed"), format!("{e}\n"))?;
                return Err(e);
            }
        };
        let final_l = outcome.reports.last().map(|r| r.l_total).unwrap_or(f64::NAN);
        Ok(SweepRow {
            cell: c.name.clone(),
            strategy: match c.strategy {
                MaskingStrategy::SelectiveComplement => "selective".into(),
                MaskingStrategy::RandomBoth => "random".into(),
            },
            mask_ratio: c.mask_ratio,
            lambda_i: c.weights.lambda_i,
            lambda_s: c.weights.lambda_s,
            seed: job.seed.to_string(),
            final_l_total: final_l,
            probe_rmse: probe.rmse,
            probe_delta1: probe.delta1,
        })
    };

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = run_job(&jobs[i]);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });

    let results = results.into_inner().unwrap();
    let mut rows = Vec::new();
    let mut first_err: Option<SgError> = None;
    for r in results {
        match r.expect("job not run") {
            Ok(row) => rows.push(row),
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }

    // Per-cell mean rows over whatever seeds completed.
    let mut all_rows = rows.clone();
    for c in cells {
        let cell_rows: Vec<&SweepRow> = rows.iter().filter(|r| r.cell == c.name).collect();
        if cell_rows.is_empty() {
            continue;
        }
        let n = cell_rows.len() as f64;
        all_rows.push(SweepRow {
            cell: c.name.clone(),
            strategy: cell_rows[0].strategy.clone(),
            mask_ratio: c.mask_ratio,
            lambda_i: c.weights.lambda_i,
            lambda_s: c.weights.lambda_s,
            seed: "mean".into(),
            final_l_total: cell_rows.iter().map(|r| r.final_l_total).sum::<f64>() / n,
            probe_rmse: cell_rows.iter().map(|r| r.probe_rmse).sum::<f64>() / n,
            probe_delta1: cell_rows.iter().map(|r| r.probe_delta1).sum::<f64>() / n,
        });
    }

    let mut csv = String::new();
    writeln!(csv, "{SWEEP_CSV_HEADER}").expect("string write");
    for row in &all_rows {
        writeln!(csv, "{}", row.csv()).expect("string write");
    }
    std::fs::write(out_dir.join("summary.csv"), csv)?;

    match first_err {
        Some(e) => Err(e),
        None => Ok(all_rows),
    }
}
