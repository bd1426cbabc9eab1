use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SgError};
use crate::model::{ParamSet, VarMap};
use crate::numerics::{Graph, Scalar, TensorData, VarId};

pub const INIT_STD: f64 = 0.02;

/// ViT-style encoder hyperparameters. Desk-scale defaults: L=4, D=64, h=4.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            depth: 4,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            ln_eps: 1e-6,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(SgError::Config("encoder depth must be >= 1".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(SgError::Config(format!(
                "dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

pub fn block_prefix(i: usize) -> String {
    format!("enc.b{i:02}")
}

pub fn init_encoder_params<R: Rng>(cfg: &EncoderConfig, rng: &mut R, params: &mut ParamSet) {
    let d = cfg.dim;
    let hidden = d * cfg.mlp_ratio;
    for i in 0..cfg.depth {
        let p = block_prefix(i);
        params.insert(format!("{p}.ln1.g"), TensorData::full(vec![d], 1.0));
        params.insert(format!("{p}.ln1.b"), TensorData::zeros(vec![d]));
        for name in ["wq", "wk", "wv", "wo"] {
            params.insert(
                format!("{p}.attn.{name}"),
                TensorData::randn_trunc(vec![d, d], INIT_STD, rng),
            );
        }
        for name in ["bq", "bk", "bv", "bo"] {
            params.insert(format!("{p}.attn.{name}"), TensorData::zeros(vec![d]));
        }
        params.insert(format!("{p}.ln2.g"), TensorData::full(vec![d], 1.0));
        params.insert(format!("{p}.ln2.b"), TensorData::zeros(vec![d]));
        params.insert(
            format!("{p}.mlp.w1"),
            TensorData::randn_trunc(vec![d, hidden], INIT_STD, rng),
        );
        params.insert(format!("{p}.mlp.b1"), TensorData::zeros(vec![hidden]));
        params.insert(
            format!("{p}.mlp.w2"),
            TensorData::randn_trunc(vec![hidden, d], INIT_STD, rng),
        );
        params.insert(format!("{p}.mlp.b2"), TensorData::zeros(vec![d]));
    }
    params.insert("enc.final_ln.g".into(), TensorData::full(vec![cfg.dim], 1.0));
    params.insert("enc.final_ln.b".into(), TensorData::zeros(vec![cfg.dim]));
}

/// Multi-head scaled-dot-product attention over `q_src` queries and `kv_src`
/// keys/values, without norm or residual. Shared by self-attention and the
/// guidance fusion module (the latter passes no biases).
pub fn multi_head_attention<S: Scalar>(
    g: &mut Graph<S>,
    q_src: VarId,
    kv_src: VarId,
    wq: VarId,
    wk: VarId,
    wv: VarId,
    biases: Option<(VarId, VarId, VarId)>,
    heads: usize,
) -> VarId {
    let d = g.value(wq).cols();
    let dh = d / heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let mut q = g.matmul(q_src, wq);
    let mut k = g.matmul(kv_src, wk);
    let mut v = g.matmul(kv_src, wv);
    if let Some((bq, bk, bv)) = biases {
        q = g.add_row(q, bq);
        k = g.add_row(k, bk);
        v = g.add_row(v, bv);
    }
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let kt = g.transpose(kh);
        let logits = g.matmul(qh, kt);
        let logits = g.scale(logits, scale);
        let att = g.softmax_rows(logits);
        head_outs.push(g.matmul(att, vh));
    }
    g.concat_cols(&head_outs)
}

/// Pre-norm residual self-attention block: x + W^O MHA(LN(x)).
pub fn self_attention<S: Scalar>(
    g: &mut Graph<S>,
    x: VarId,
    vars: &VarMap,
    prefix: &str,
    cfg: &EncoderConfig,
) -> VarId {
    let xn = g.layer_norm_rows(
        x,
        vars[&format!("{prefix}.ln1.g")],
        vars[&format!("{prefix}.ln1.b")],
        cfg.ln_eps,
    );
    let biases = (
        vars[&format!("{prefix}.attn.bq")],
        vars[&format!("{prefix}.attn.bk")],
        vars[&format!("{prefix}.attn.bv")],
    );
    let mha = multi_head_attention(
        g,
        xn,
        xn,
        vars[&format!("{prefix}.attn.wq")],
        vars[&format!("{prefix}.attn.wk")],
        vars[&format!("{prefix}.attn.wv")],
        Some(biases),
        cfg.heads,
    );
    let proj = g.matmul(mha, vars[&format!("{prefix}.attn.wo")]);
    let proj = g.add_row(proj, vars[&format!("{prefix}.attn.bo")]);
    g.add(x, proj)
}

fn mlp_block<S: Scalar>(
    g: &mut Graph<S>,
    x: VarId,
    vars: &VarMap,
    prefix: &str,
    cfg: &EncoderConfig,
) -> VarId {
    let xn = g.layer_norm_rows(
        x,
        vars[&format!("{prefix}.ln2.g")],
        vars[&format!("{prefix}.ln2.b")],
        cfg.ln_eps,
    );
    let h = g.matmul(xn, vars[&format!("{prefix}.mlp.w1")]);
    let h = g.add_row(h, vars[&format!("{prefix}.mlp.b1")]);
    let h = g.gelu(h);
    let out = g.matmul(h, vars[&format!("{prefix}.mlp.w2")]);
    let out = g.add_row(out, vars[&format!("{prefix}.mlp.b2")]);
    g.add(x, out)
}

/// Run the full encoder stack, returning I_F and every block's output
/// (post-residual, pre-final-norm) for analysis taps.
pub fn encode_collect<S: Scalar>(
    g: &mut Graph<S>,
    seq: VarId,
    vars: &VarMap,
    cfg: &EncoderConfig,
) -> Result<(VarId, Vec<VarId>)> {
    let mut x = seq;
    let mut taps = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let p = block_prefix(i);
        x = self_attention(g, x, vars, &p, cfg);
        x = mlp_block(g, x, vars, &p, cfg);
        if !g.value(x).is_finite() {
            return Err(SgError::Numeric(format!(
                "non-finite activation in encoder block {i}"
            )));
        }
        taps.push(x);
    }
    let out = g.layer_norm_rows(x, vars["enc.final_ln.g"], vars["enc.final_ln.b"], cfg.ln_eps);
    Ok((out, taps))
}

/// Encoder forward: L pre-norm blocks then a final layer norm -> I_F.
pub fn encode<S: Scalar>(
    g: &mut Graph<S>,
    seq: VarId,
    vars: &VarMap,
    cfg: &EncoderConfig,
) -> Result<VarId> {
    encode_collect(g, seq, vars, cfg).map(|(out, _)| out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::bind_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            depth: 2,
            dim: 8,
            heads: 2,
            mlp_ratio: 2,
            ln_eps: 1e-6,
        }
    }

    fn tiny_params(cfg: &EncoderConfig, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        init_encoder_params(cfg, &mut rng, &mut params);
        params
    }

    fn random_seq(n: usize, d: usize, seed: u64) -> TensorData<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let data = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        TensorData::new(vec![n, d], data).unwrap()
    }

    #[test]
    fn encode_preserves_shape() {
        let cfg = tiny_cfg();
        let params = tiny_params(&cfg, 0);
        let mut g: Graph<f32> = Graph::new();
        let vars = bind_params(&mut g, &params, false);
        let x = g.input(random_seq(5, 8, 1));
        let out = encode(&mut g, x, &vars, &cfg).unwrap();
        assert_eq!(g.value(out).shape(), [5, 8]);
    }

    #[test]
    fn zero_output_projections_collapse_to_final_layer_norm() {
        let cfg = tiny_cfg();
        let mut params = tiny_params(&cfg, 0);
        for i in 0..cfg.depth {
            let p = block_prefix(i);
            params.insert(format!("{p}.attn.wo"), TensorData::zeros(vec![8, 8]));
            params.insert(format!("{p}.mlp.w2"), TensorData::zeros(vec![16, 8]));
        }
        let seq = random_seq(4, 8, 2);
        let mut g: Graph<f32> = Graph::new();
        let vars = bind_params(&mut g, &params, false);
        let x = g.input(seq.clone());
        let out = encode(&mut g, x, &vars, &cfg).unwrap();
        let expected = {
            let xid = g.input(seq);
            g.layer_norm_rows(xid, vars["enc.final_ln.g"], vars["enc.final_ln.b"], cfg.ln_eps)
        };
        assert_eq!(g.value(out).data(), g.value(expected).data());
    }

    #[test]
    fn zero_attn_projection_is_identity_block() {
        let cfg = tiny_cfg();
        let mut params = tiny_params(&cfg, 3);
        params.insert("enc.b00.attn.wo".into(), TensorData::zeros(vec![8, 8]));
        let seq = random_seq(4, 8, 4);
        let mut g: Graph<f32> = Graph::new();
        let vars = bind_params(&mut g, &params, false);
        let x = g.input(seq.clone());
        let out = self_attention(&mut g, x, &vars, "enc.b00", &cfg);
        assert_eq!(g.value(out).data(), seq.data());
    }

    #[test]
    fn single_token_attention_weight_is_one() {
        let cfg = tiny_cfg();
        let params = tiny_params(&cfg, 5);
        let seq = random_seq(1, 8, 6);
        let mut g: Graph<f32> = Graph::new();
        let vars = bind_params(&mut g, &params, false);
        let x = g.input(seq.clone());
        // With a single key the softmax row is exactly [1.0]; the block output
        // must equal residual + output-projected value path.
        let out = self_attention(&mut g, x, &vars, "enc.b00", &cfg);
        let xn = g.layer_norm_rows(x, vars["enc.b00.ln1.g"], vars["enc.b00.ln1.b"], cfg.ln_eps);
        let v = g.matmul(xn, vars["enc.b00.attn.wv"]);
        let v = g.add_row(v, vars["enc.b00.attn.bv"]);
        let proj = g.matmul(v, vars["enc.b00.attn.wo"]);
        let proj = g.add_row(proj, vars["enc.b00.attn.bo"]);
        let expected = g.add(x, proj);
        for (a, b) in g.value(out).data().iter().zip(g.value(expected).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_tokens_give_uniform_attention() {
        // All rows identical -> equal logits -> each attention weight 1/N, so
        // the attention output equals the value row for every query.
        let cfg = tiny_cfg();
        let params = tiny_params(&cfg, 7);
        let one_row = random_seq(1, 8, 8);
        let mut data = Vec::new();
        for _ in 0..6 {
            data.extend_from_slice(one_row.data());
        }
        let seq = TensorData::new(vec![6, 8], data).unwrap();
        let mut g: Graph<f32> = Graph::new();
        let vars = bind_params(&mut g, &params, false);
        let x = g.input(seq);
        let out = self_attention(&mut g, x, &vars, "enc.b00", &cfg);
        let first = &g.value(out).data()[0..8];
        for i in 1..6 {
            let row = &g.value(out).data()[i * 8..(i + 1) * 8];
            for (a, b) in first.iter().zip(row) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        let cfg = tiny_cfg();
        let params = tiny_params(&cfg, 9);
        let seq = random_seq(6, 8, 10);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut permuted = Vec::new();
        for &i in &perm {
            permuted.extend_from_slice(&seq.data()[i * 8..(i + 1) * 8]);
        }
        let permuted = TensorData::new(vec![6, 8], permuted).unwrap();

        let mut g: Graph<f32> = Graph::new();
        let vars = bind_params(&mut g, &params, false);
        let a = g.input(seq);
        let out_a = encode(&mut g, a, &vars, &cfg).unwrap();
        let b = g.input(permuted);
        let out_b = encode(&mut g, b, &vars, &cfg).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            let ra = &g.value(out_a).data()[i * 8..(i + 1) * 8];
            let rb = &g.value(out_b).data()[j * 8..(j + 1) * 8];
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < 1e-6, "row {i} differs after permutation");
            }
        }
    }

    #[test]
    fn encode_deterministic() {
        let cfg = tiny_cfg();
        let params = tiny_params(&cfg, 11);
        let seq = random_seq(5, 8, 12);
        let run = || {
            let mut g: Graph<f32> = Graph::new();
            let vars = bind_params(&mut g, &params, false);
            let x = g.input(seq.clone());
            let out = encode(&mut g, x, &vars, &cfg).unwrap();
            g.value(out).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn encoder_gradients_pass_grad_check() {
        use crate::numerics::grad_check;
        let cfg = tiny_cfg();
        let params = tiny_params(&cfg, 13);
        // O(1)-scale random weights (rather than the 0.02-std training init)
        // keep every gradient well above the finite-difference noise floor.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let all64: BTreeMap<String, TensorData<f64>> = params
            .iter()
            .map(|(k, v)| {
                let t = TensorData::<f64>::randn_trunc(v.shape().to_vec(), 0.5, &mut rng);
                (k.clone(), t)
            })
            .collect();
        // Key biases have an exactly-zero gradient (softmax is invariant to a
        // constant shift of each logit row), so finite differences see only
        // noise there; bind them as constants instead of checked params.
        let consts: BTreeMap<String, TensorData<f64>> = all64
            .iter()
            .filter(|(k, _)| k.ends_with(".attn.bk"))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let params64: BTreeMap<String, TensorData<f64>> = all64
            .into_iter()
            .filter(|(k, _)| !k.ends_with(".attn.bk"))
            .collect();
        let seq = random_seq(3, 8, 14).map_scalar::<f64>();
        // Weight the output by a random matrix so no parameter direction has
        // a degenerate (near-zero) gradient that finite differences cannot
        // resolve.
        let weight = random_seq(3, 8, 15).map_scalar::<f64>();
        let cfg2 = cfg;
        let report = grad_check(
            &move |g: &mut Graph<f64>, ids: &BTreeMap<String, VarId>| {
                let mut vars = ids.clone();
                for (k, v) in &consts {
                    vars.insert(k.clone(), g.input(v.clone()));
                }
                let x = g.input(seq.clone());
                let out = encode(g, x, &vars, &cfg2)?;
                let w = g.input(weight.clone());
                let wo = g.mul(out, w);
                Ok(g.sum(wo))
            },
            &params64,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = EncoderConfig {
            depth: 0,
            ..tiny_cfg()
        };
        assert!(cfg.validate().is_err());
        let cfg = EncoderConfig {
            dim: 10,
            heads: 4,
            ..tiny_cfg()
        };
        assert!(cfg.validate().is_err());
    }
}
