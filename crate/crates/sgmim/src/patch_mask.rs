use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SgError};
use crate::numerics::{Scalar, TensorData};

/// Geometry shared by the image and structured-map branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub h: usize,
    pub w: usize,
    pub p: usize,
    pub c_img: usize,
    pub c_struct: usize,
}

impl PatchGrid {
    pub fn new(h: usize, w: usize, p: usize) -> Result<Self> {
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(SgError::Geometry(format!(
                "patch size {p} must divide {h}x{w}"
            )));
        }
        Ok(PatchGrid {
            h,
            w,
            p,
            c_img: 3,
            c_struct: 1,
        })
    }

    /// N = H*W / P^2
    pub fn patch_count(&self) -> usize {
        (self.h / self.p) * (self.w / self.p)
    }

    pub fn patches_per_row(&self) -> usize {
        self.w / self.p
    }
}

/// Split an H x W x C pixel map (row-major, channel-fastest) into an
/// N x (P^2 * C) matrix: patches in raster order, pixels within a patch
/// row-major, channel-fastest.
pub fn patchify<S: Scalar>(pixels: &[S], c: usize, grid: &PatchGrid) -> Result<TensorData<S>> {
    if pixels.len() != grid.h * grid.w * c {
        return Err(SgError::Geometry(format!(
            "pixel buffer length {} does not match {}x{}x{}",
            pixels.len(),
            grid.h,
            grid.w,
            c
        )));
    }
    let n = grid.patch_count();
    let p = grid.p;
    let per_row = grid.patches_per_row();
    let mut out = Vec::with_capacity(n * p * p * c);
    for j in 0..n {
        let gy = j / per_row;
        let gx = j % per_row;
        for py in 0..p {
            for px in 0..p {
                let y = gy * p + py;
                let x = gx * p + px;
                let base = (y * grid.w + x) * c;
                out.extend_from_slice(&pixels[base..base + c]);
            }
        }
    }
    TensorData::new(vec![n, p * p * c], out)
}

/// Exact inverse of `patchify`.
pub fn unpatchify<S: Scalar>(
    patches: &TensorData<S>,
    c: usize,
    grid: &PatchGrid,
) -> Result<Vec<S>> {
    let n = grid.patch_count();
    let p = grid.p;
    if patches.shape() != [n, p * p * c] {
        return Err(SgError::Geometry(format!(
            "patch matrix shape {:?} does not match grid (expected [{}, {}])",
            patches.shape(),
            n,
            p * p * c
        )));
    }
    let per_row = grid.patches_per_row();
    let mut out = vec![S::zero(); grid.h * grid.w * c];
    for j in 0..n {
        let gy = j / per_row;
        let gx = j % per_row;
        let row = &patches.data()[j * p * p * c..(j + 1) * p * p * c];
        let mut k = 0;
        for py in 0..p {
            for px in 0..p {
                let y = gy * p + py;
                let x = gx * p + px;
                let base = (y * grid.w + x) * c;
                out[base..base + c].copy_from_slice(&row[k..k + c]);
                k += c;
            }
        }
    }
    Ok(out)
}

/// Masking strategies exposed by the trainer: complementary selective
/// guidance vs. independent random masks on both branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingStrategy {
    SelectiveComplement,
    RandomBoth,
}

/// Paired image / structured-map patch masks. Under the selective strategy
/// M_I[j] + M_S[j] = 1 for every j.
#[derive(Debug, Clone)]
pub struct MaskPair {
    pub m_i: Vec<u8>,
    pub m_s: Vec<u8>,
    pub ratio: f64,
}

impl MaskPair {
    pub fn selective(n: usize, ratio: f64, seed: u64) -> Result<Self> {
        let m_i = sample_image_mask(n, ratio, seed)?;
        let m_s = complement_mask(&m_i);
        Ok(MaskPair { m_i, m_s, ratio })
    }

    /// Independent 0/1 masks on both branches (the "Random" ablation row).
    /// Overlap is possible, which is the point of the baseline.
    pub fn random_both(n: usize, ratio: f64, seed: u64) -> Result<Self> {
        let m_i = sample_image_mask(n, ratio, seed)?;
        let m_s = sample_image_mask(n, ratio, seed.wrapping_add(0x9e3779b97f4a7c15))?;
        Ok(MaskPair { m_i, m_s, ratio })
    }

    pub fn sample(strategy: MaskingStrategy, n: usize, ratio: f64, seed: u64) -> Result<Self> {
        match strategy {
            MaskingStrategy::SelectiveComplement => Self::selective(n, ratio, seed),
            MaskingStrategy::RandomBoth => Self::random_both(n, ratio, seed),
        }
    }

    pub fn masked_count(&self) -> usize {
        self.m_i.iter().map(|&v| v as usize).sum()
    }
}

/// Sample a binary image mask with exactly round(ratio * N) ones, positions
/// drawn by a seeded Fisher-Yates shuffle.
pub fn sample_image_mask(n: usize, ratio: f64, seed: u64) -> Result<Vec<u8>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(SgError::Config(format!("mask ratio {ratio} outside (0,1)")));
    }
    let k = (ratio * n as f64).round() as usize;
    if k == 0 || k >= n {
        return Err(SgError::Config(format!(
            "degenerate mask: {k} of {n} patches masked"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let mut mask = vec![0u8; n];
    for &i in idx.iter().take(k) {
        mask[i] = 1;
    }
    Ok(mask)
}

/// M_S[j] = 1 - M_I[j]
pub fn complement_mask(m_i: &[u8]) -> Vec<u8> {
    m_i.iter().map(|&v| 1 - v).collect()
}

/// Indices where the structured map is visible (M_S = 0); these are exactly
/// the image-masked positions under complementarity.
pub fn structured_visible_indices(m_s: &[u8]) -> Result<Vec<usize>> {
    let idx: Vec<usize> = m_s
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 0)
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        return Err(SgError::Config(
            "no structured-visible patches under this mask".into(),
        ));
    }
    Ok(idx)
}
