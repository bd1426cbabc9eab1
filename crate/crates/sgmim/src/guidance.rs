use rand::Rng;

use crate::encoder::{multi_head_attention, INIT_STD};
use crate::error::{Result, SgError};
use crate::model::{ParamSet, VarMap};
use crate::numerics::{Graph, Scalar, TensorData, VarId};

/// Guidance-branch parameters: the shallow MLP feature extractor and the
/// cross-attention fusion weights. W^O starts at zero so fusion is the
/// identity at init.
pub fn init_guidance_params<R: Rng>(dim: usize, rng: &mut R, params: &mut ParamSet) {
    let hidden = dim * 2;
    params.insert(
        "guide.mlp.w1".into(),
        TensorData::randn_trunc(vec![dim, hidden], INIT_STD, rng),
    );
    params.insert("guide.mlp.b1".into(), TensorData::zeros(vec![hidden]));
    params.insert(
        "guide.mlp.w2".into(),
        TensorData::randn_trunc(vec![hidden, dim], INIT_STD, rng),
    );
    params.insert("guide.mlp.b2".into(), TensorData::zeros(vec![dim]));
    params.insert("guide.mlp.ln.g".into(), TensorData::full(vec![dim], 1.0));
    params.insert("guide.mlp.ln.b".into(), TensorData::zeros(vec![dim]));
    for name in ["wq", "wk", "wv"] {
        params.insert(
            format!("guide.fuse.{name}"),
            TensorData::randn_trunc(vec![dim, dim], INIT_STD, rng),
        );
    }
    params.insert("guide.fuse.wo".into(), TensorData::zeros(vec![dim, dim]));
}

/// Shallow MLP feature extraction: D -> 2D -> D with GELU between and a
/// layer norm after, applied independently per token. Produces S_F.
pub fn extract_structured_features<S: Scalar>(
    g: &mut Graph<S>,
    visible: VarId,
    vars: &VarMap,
    ln_eps: f64,
) -> VarId {
    let h = g.matmul(visible, vars["guide.mlp.w1"]);
    let h = g.add_row(h, vars["guide.mlp.b1"]);
    let h = g.gelu(h);
    let out = g.matmul(h, vars["guide.mlp.w2"]);
    let out = g.add_row(out, vars["guide.mlp.b2"]);
    g.layer_norm_rows(out, vars["guide.mlp.ln.g"], vars["guide.mlp.ln.b"], ln_eps)
}

/// Cross-attention feature fusion: queries from I_F (all N positions), keys
/// and values from S_F, residual output I_SF = Concat(heads) W^O + I_F.
pub fn fuse<S: Scalar>(
    g: &mut Graph<S>,
    i_f: VarId,
    s_f: VarId,
    vars: &VarMap,
    heads: usize,
) -> Result<VarId> {
    if g.value(s_f).rows() == 0 {
        return Err(SgError::Config("fusion needs at least one key".into()));
    }
    if g.value(i_f).cols() != g.value(s_f).cols() {
        return Err(SgError::Geometry(format!(
            "fusion width mismatch: {:?} vs {:?}",
            g.value(i_f).shape(),
            g.value(s_f).shape()
        )));
    }
    let mha = multi_head_attention(
        g,
        i_f,
        s_f,
        vars["guide.fuse.wq"],
        vars["guide.fuse.wk"],
        vars["guide.fuse.wv"],
        None,
        heads,
    );
    let proj = g.matmul(mha, vars["guide.fuse.wo"]);
    Ok(g.add(proj, i_f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::bind_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    const D: usize = 8;
    const HEADS: usize = 2;

    fn params(seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = BTreeMap::new();
        init_guidance_params(D, &mut rng, &mut p);
        p
    }

    fn rand_mat(rows: usize, seed: u64) -> TensorData<f32> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * D).map(|_| rng.gen_range(-1.0..1.0)).collect();
        TensorData::new(vec![rows, D], data).unwrap()
    }

    #[test]
    fn extract_preserves_shape() {
        let p = params(0);
        let mut g: Graph<f32> = Graph::new();
        let vars = bind_params(&mut g, &p, false);
        let x = g.input(rand_mat(10, 1));
        let s_f = extract_structured_features(&mut g, x, &vars, 1e-6);
        assert_eq!(g.value(s_f).shape(), [10, D]);
    }

    #[test]
    fn zero_second_layer_gives_constant_rows() {
        let mut p = params(0);
        p.insert("guide.mlp.w2".into(), TensorData::zeros(vec![2 * D, D]));
        p.insert("guide.mlp.b2".into(), TensorData::zeros(vec![D]));
        let mut g: Graph<f32> = Graph::new();
        let vars = bind_params(&mut g, &p, false);
        let x = g.input(rand_mat(5, 2));
        let s_f = extract_structured_features(&mut g, x, &vars, 1e-6);
        let first = &g.value(s_f).data()[0..D];
        for i in 1..5 {
            assert_eq!(first, &g.value(s_f).data()[i * D..(i + 1) * D]);
        }
    }

    #[test]
    fn zero_wo_is_residual_identity() {
        // W^O starts at zero by construction, so a fresh init fuses to I_F.
        let p = params(3);
        let mut g: Graph<f32> = Graph::new();
        let vars = bind_params(&mut g, &p, false);
        let i_f = g.input(rand_mat(6, 4));
        let s_f = g.input(rand_mat(3, 5));
        let i_sf = fuse(&mut g, i_f, s_f, &vars, HEADS).unwrap();
        assert_eq!(g.value(i_sf).data(), g.value(i_f).data());
    }

    #[test]
    fn single_key_outputs_value_row_everywhere() {
        let mut p = params(6);
        // Identity-ish W^O so the attention output is observable.
        let mut wo = vec![0.0f32; D * D];
        for i in 0..D {
            wo[i * D + i] = 1.0;
        }
        p.insert("guide.fuse.wo".into(), TensorData::new(vec![D, D], wo).unwrap());
        let mut g: Graph<f32> = Graph::new();
        let vars = bind_params(&mut g, &p, false);
        let i_f = g.input(rand_mat(4, 7));
        let s_f = g.input(rand_mat(1, 8));
        let i_sf = fuse(&mut g, i_f, s_f, &vars, HEADS).unwrap();
        // With K=1 the softmax row is [1.0]; every query receives the same
        // attended value, so I_SF - I_F has identical rows.
        let mut diff = Vec::new();
        for i in 0..4 {
            let row: Vec<f32> = (0..D)
                .map(|j| g.value(i_sf).data()[i * D + j] - g.value(i_f).data()[i * D + j])
                .collect();
            diff.push(row);
        }
        for i in 1..4 {
            for j in 0..D {
                assert!((diff[0][j] - diff[i][j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identical_kv_rows_give_identical_attention_output() {
        let mut p = params(9);
        let mut wo = vec![0.0f32; D * D];
        for i in 0..D {
            wo[i * D + i] = 1.0;
        }
        p.insert("guide.fuse.wo".into(), TensorData::new(vec![D, D], wo).unwrap());
        let one = rand_mat(1, 10);
        let mut data = Vec::new();
        for _ in 0..5 {
            data.extend_from_slice(one.data());
        }
        let s_f_val = TensorData::new(vec![5, D], data).unwrap();
        let mut g: Graph<f32> = Graph::new();
        let vars = bind_params(&mut g, &p, false);
        let i_f = g.input(rand_mat(4, 11));
        let s_f = g.input(s_f_val);
        let i_sf = fuse(&mut g, i_f, s_f, &vars, HEADS).unwrap();
        let diff: Vec<Vec<f32>> = (0..4)
            .map(|i| {
                (0..D)
                    .map(|j| g.value(i_sf).data()[i * D + j] - g.value(i_f).data()[i * D + j])
                    .collect()
            })
            .collect();
        for i in 1..4 {
            for j in 0..D {
                assert!((diff[0][j] - diff[i][j]).abs() < 1e-6, "rank > 1 row space");
            }
        }
    }

    #[test]
    fn fuse_invariant_under_kv_permutation() {
        let mut p = params(12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        p.insert(
            "guide.fuse.wo".into(),
            TensorData::randn_trunc(vec![D, D], 0.5, &mut rng),
        );
        let s_f_val = rand_mat(5, 14);
        let perm = [4usize, 2, 0, 3, 1];
        let mut permuted = Vec::new();
        for &i in &perm {
            permuted.extend_from_slice(&s_f_val.data()[i * D..(i + 1) * D]);
        }
        let permuted = TensorData::new(vec![5, D], permuted).unwrap();
        let mut g: Graph<f32> = Graph::new();
        let vars = bind_params(&mut g, &p, false);
        let i_f = g.input(rand_mat(6, 15));
        let a = g.input(s_f_val);
        let b = g.input(permuted);
        let out_a = fuse(&mut g, i_f, a, &vars, HEADS).unwrap();
        let out_b = fuse(&mut g, i_f, b, &vars, HEADS).unwrap();
        for (x, y) in g.value(out_a).data().iter().zip(g.value(out_b).data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn guidance_gradients_pass_grad_check() {
        use crate::numerics::{grad_check, VarId};
        // O(1)-scale random weights (rather than the 0.02-std training init)
        // keep every gradient well above the finite-difference noise floor.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p64: BTreeMap<String, TensorData<f64>> = params(20)
            .iter()
            .map(|(k, v)| {
                let t = TensorData::<f64>::randn_trunc(v.shape().to_vec(), 0.5, &mut rng);
                (k.clone(), t)
            })
            .collect();
        let i_f = rand_mat(4, 22).map_scalar::<f64>();
        let vis = rand_mat(3, 23).map_scalar::<f64>();
        // Random output weighting keeps every parameter's gradient away from
        // the finite-difference noise floor.
        let weight = rand_mat(4, 24).map_scalar::<f64>();
        let report = grad_check(
            &move |g: &mut Graph<f64>, ids: &BTreeMap<String, VarId>| {
                let i_f = g.input(i_f.clone());
                let visv = g.input(vis.clone());
                let s_f = extract_structured_features(g, visv, ids, 1e-6);
                let i_sf = fuse(g, i_f, s_f, ids, HEADS)?;
                let w = g.input(weight.clone());
                let wo = g.mul(i_sf, w);
                Ok(g.sum(wo))
            },
            &p64,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
