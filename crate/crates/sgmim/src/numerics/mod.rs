pub mod grad_check;
pub mod graph;
pub mod tensor;

pub use grad_check::{grad_check, grad_check_sampled, GradCheckReport};
pub use graph::{Graph, VarId};
pub use tensor::{Scalar, TensorData};

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::error::Result;

    fn one_param(name: &str, t: TensorData<f64>) -> BTreeMap<String, TensorData<f64>> {
        let mut m = BTreeMap::new();
        m.insert(name.to_string(), t);
        m
    }

    #[test]
    fn grad_check_square() {
        let params = one_param("x", TensorData::scalar(3.0));
        let report = grad_check(
            &|g: &mut Graph<f64>, ids: &BTreeMap<String, VarId>| -> Result<VarId> {
                let x = ids["x"];
                let y = g.mul(x, x);
                Ok(g.sum(y))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let params = one_param(
            "x",
            TensorData::new(vec![3], vec![0.3, -1.2, 2.5]).unwrap(),
        );
        let report = grad_check(
            &|g: &mut Graph<f64>, ids: &BTreeMap<String, VarId>| -> Result<VarId> {
                let c = g.input(TensorData::new(vec![3], vec![2.0, -0.5, 1.5]).unwrap());
                let y = g.mul(ids["x"], c);
                Ok(g.sum(y))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-10, "{report:?}");
    }

    fn random_tensor(shape: Vec<usize>, seed: u64) -> TensorData<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
        TensorData::new(shape, data).unwrap()
    }

    #[test]
    fn grad_check_matmul() {
        let mut params = BTreeMap::new();
        params.insert("a".into(), random_tensor(vec![3, 4], 1));
        params.insert("b".into(), random_tensor(vec![4, 2], 2));
        let report = grad_check(
            &|g: &mut Graph<f64>, ids: &BTreeMap<String, VarId>| -> Result<VarId> {
                let c = g.matmul(ids["a"], ids["b"]);
                let c2 = g.mul(c, c);
                Ok(g.sum(c2))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn grad_check_gelu_softmax_layernorm() {
        let mut params = BTreeMap::new();
        params.insert("x".into(), random_tensor(vec![3, 5], 3));
        params.insert("gamma".into(), random_tensor(vec![5], 4));
        params.insert("beta".into(), random_tensor(vec![5], 5));
        let report = grad_check(
            &|g: &mut Graph<f64>, ids: &BTreeMap<String, VarId>| -> Result<VarId> {
                let h = g.gelu(ids["x"]);
                let s = g.softmax_rows(h);
                let ln = g.layer_norm_rows(s, ids["gamma"], ids["beta"], 1e-6);
                let w = g.input(random_tensor(vec![3, 5], 6));
                let p = g.mul(ln, w);
                Ok(g.sum(p))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn grad_check_abs_mean_reductions() {
        let mut params = BTreeMap::new();
        // Values away from 0 so the |x| kink does not spoil the FD comparison.
        params.insert(
            "x".into(),
            TensorData::new(vec![4], vec![0.7, -1.3, 2.2, -0.4]).unwrap(),
        );
        let report = grad_check(
            &|g: &mut Graph<f64>, ids: &BTreeMap<String, VarId>| -> Result<VarId> {
                let a = g.abs(ids["x"]);
                Ok(g.mean(a))
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn grad_check_concat_slice_gather_scatter_repeat() {
        let mut params = BTreeMap::new();
        params.insert("a".into(), random_tensor(vec![4, 3], 7));
        params.insert("b".into(), random_tensor(vec![4, 2], 8));
        params.insert("v".into(), random_tensor(vec![5], 9));
        let report = grad_check(
            &|g: &mut Graph<f64>, ids: &BTreeMap<String, VarId>| -> Result<VarId> {
                let cat = g.concat_cols(&[ids["a"], ids["b"]]);
                let sl = g.slice_cols(cat, 1, 3);
                let gat = g.gather_rows(sl, &[0, 2, 2]);
                let sc = g.scatter_rows(gat, 6, &[5, 0, 3]);
                let rep = g.repeat_row(ids["v"], 6);
                let rep3 = g.slice_cols(rep, 0, 3);
                let m = g.mul(sc, rep3);
                let w = g.input(random_tensor(vec![6, 3], 10));
                let p = g.mul(m, w);
                Ok(g.sum(p))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn grad_check_transpose_add_row() {
        let mut params = BTreeMap::new();
        params.insert("x".into(), random_tensor(vec![3, 4], 11));
        params.insert("bias".into(), random_tensor(vec![3], 12));
        let report = grad_check(
            &|g: &mut Graph<f64>, ids: &BTreeMap<String, VarId>| -> Result<VarId> {
                let t = g.transpose(ids["x"]);
                let y = g.add_row(t, ids["bias"]);
                let y2 = g.mul(y, y);
                Ok(g.sum(y2))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn grad_check_two_layer_mlp_masked_l1() {
        // Oracle for the masked L1 / MLP path used by the main model.
        let mut params = BTreeMap::new();
        params.insert("w1".into(), random_tensor(vec![8, 6], 20));
        params.insert("b1".into(), random_tensor(vec![6], 21));
        params.insert("w2".into(), random_tensor(vec![6, 8], 22));
        params.insert("b2".into(), random_tensor(vec![8], 23));
        let x = random_tensor(vec![4, 8], 24);
        let target = random_tensor(vec![4, 8], 25);
        // Mask rows 0 and 2.
        let mut mask = vec![0.0; 32];
        for j in 0..8 {
            mask[j] = 1.0;
            mask[16 + j] = 1.0;
        }
        let mask = TensorData::new(vec![4, 8], mask).unwrap();
        let report = grad_check(
            &|g: &mut Graph<f64>, ids: &BTreeMap<String, VarId>| -> Result<VarId> {
                let xin = g.input(x.clone());
                let h = g.matmul(xin, ids["w1"]);
                let h = g.add_row(h, ids["b1"]);
                let h = g.gelu(h);
                let y = g.matmul(h, ids["w2"]);
                let y = g.add_row(y, ids["b2"]);
                let t = g.input(target.clone());
                let diff = g.sub(y, t);
                let a = g.abs(diff);
                let m = g.input(mask.clone());
                let masked = g.mul(a, m);
                let s = g.sum(masked);
                Ok(g.scale(s, 1.0 / 16.0))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let x = random_tensor(vec![5, 7], 30);
        let mut g: Graph<f64> = Graph::new();
        let xid = g.input(x.clone());
        let y = g.softmax_rows(xid);
        for i in 0..5 {
            let row_sum: f64 = g.value(y).data()[i * 7..(i + 1) * 7].iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-12, "row {i} sum {row_sum}");
        }
        // Adding a constant to a row leaves the softmax unchanged.
        let mut shifted = x.clone();
        for v in shifted.data_mut()[7..14].iter_mut() {
            *v += 3.75;
        }
        let sid = g.input(shifted);
        let ys = g.softmax_rows(sid);
        for j in 0..7 {
            let a = g.value(y).data()[7 + j];
            let b = g.value(ys).data()[7 + j];
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_zero_mean_unit_variance() {
        let x = random_tensor(vec![4, 16], 31);
        let mut g: Graph<f64> = Graph::new();
        let xid = g.input(x);
        let gamma = g.input(TensorData::full(vec![16], 1.0));
        let beta = g.input(TensorData::zeros(vec![16]));
        let y = g.layer_norm_rows(xid, gamma, beta, 1e-6);
        for i in 0..4 {
            let row = &g.value(y).data()[i * 16..(i + 1) * 16];
            let mu: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 16.0;
            assert!(mu.abs() < 1e-9, "row {i} mean {mu}");
            // eps in the denominator biases the variance slightly below 1.
            assert!((var - 1.0).abs() < 1e-4, "row {i} var {var}");
        }
    }

    #[test]
    fn abs_subgradient_zero_at_zero() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(TensorData::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let a = g.abs(x);
        let s = g.sum(a);
        let grads = g.backward(s);
        let gx = grads[x].as_ref().unwrap();
        assert_eq!(gx.data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn non_finite_function_value_is_an_error() {
        let params = one_param("x", TensorData::scalar(1.0));
        let err = grad_check(
            &|g: &mut Graph<f64>, ids: &BTreeMap<String, VarId>| -> Result<VarId> {
                let big = g.input(TensorData::scalar(1e308));
                let y = g.mul(ids["x"], big);
                let z = g.mul(y, big);
                Ok(g.sum(z))
            },
            &params,
            1e-5,
        );
        assert!(err.is_err());
    }
}
