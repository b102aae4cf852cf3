mod common;

use common::{random_bundle, rng, tiny_config, tiny_widths};
use ndarray::{arr1, arr2, Array2, ArrayView1};
use proptest::prelude::*;
use safn_core::model::ops::{gelu, sigmoid, LAYER_NORM_EPS};
use safn_core::model::{
    attention_pool, block_forward, expected_param_count, gate_and_fuse, tokenize, Checkpoint, Safn,
    SafnConfig, StreamParams,
};
use safn_core::{Modality, PerModality};

fn zero_tensor(model: &Safn, params: &mut [f64], name: &str) {
    let e = model
        .layout
        .entry(name)
        .unwrap_or_else(|| panic!("no tensor {name}"));
    params[e.tensor.range()].iter_mut().for_each(|v| *v = 0.0);
}

#[test]
fn tokenize_examples() {
    let w = arr2(&[[1.0, 0.0, 0.0], [0.5, 0.5, 0.5]]);
    let b = arr2(&[[0.0, 1.0, 0.0], [0.1, 0.2, 0.3]]);
    let t = tokenize(&[2.0, 0.0], w.view(), b.view()).unwrap();
    assert_eq!(t.row(0), arr1(&[2.0, 1.0, 0.0]));
    // zero input gives the bias row
    assert_eq!(t.row(1), b.row(1));
    let zero = Array2::zeros((2, 3));
    assert_eq!(
        tokenize(&[4.0, -1.0], zero.view(), zero.view()).unwrap(),
        zero
    );
    assert!(tokenize(&[1.0], w.view(), b.view()).is_err());
}

fn ct_stream(model: &Safn) -> &safn_core::model::TokenStreamParams {
    match model.layout.stream(Modality::MriCt).unwrap() {
        StreamParams::Tokens(p) => p,
        _ => unreachable!(),
    }
}

#[test]
fn single_token_attends_to_itself() {
    let model = Safn::new(tiny_config(), tiny_widths()).unwrap();
    let params = model.init_params(2);
    let layer = &ct_stream(&model).layers[0];
    let x = arr2(&[[0.3, -1.0, 0.5, 0.2, 0.0, 1.1, -0.4, 0.9]]);
    let (_, cache) = block_forward(x.view(), x.view(), layer, &params, 2, 0.0, None);
    for w in &cache.attention.weights {
        assert_eq!(w, &arr2(&[[1.0]]));
    }
}

fn layer_norm_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        row.mapv_inplace(|v| (v - mean) / (var + LAYER_NORM_EPS).sqrt());
    }
    out
}

#[test]
fn zero_weights_reduce_encoder_to_layer_norm() {
    let config = SafnConfig {
        d_model: 4,
        n_heads: 2,
        ..tiny_config()
    };
    let model = Safn::new(config, tiny_widths()).unwrap();
    let mut params = model.init_params(0);
    for sub in [
        "attn.q", "attn.k", "attn.v", "attn.out", "ffn.in", "ffn.out",
    ] {
        for part in ["weight", "bias"] {
            zero_tensor(
                &model,
                &mut params,
                &format!("mri_ct.encoder.0.{sub}.{part}"),
            );
        }
    }
    let x = arr2(&[[1.0, 2.0, 3.0, 4.0], [-1.0, 0.5, 0.0, 2.5]]);
    let (y, _) = model.encode(x.view(), &ct_stream(&model).layers, &params, None);
    // residual path: LN(x + 0), then LN(h + 0)
    let expected = layer_norm_rows(&layer_norm_rows(&x));
    for (a, b) in y.iter().zip(expected.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
    let single = layer_norm_rows(&x);
    for (a, b) in y.iter().zip(single.iter()) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn encoder_is_permutation_equivariant() {
    let model = Safn::new(tiny_config(), tiny_widths()).unwrap();
    let params = model.init_params(5);
    let stream = ct_stream(&model);
    let x = [0.7, -1.3, 2.0];
    let w = stream.embed_w.view(&params);
    let b = stream.embed_b.view(&params);
    let t = tokenize(&x, w, b).unwrap();
    let perm = [2usize, 0, 1];
    let tp = Array2::from_shape_fn(t.dim(), |(i, j)| t[[perm[i], j]]);
    let (e, _) = model.encode(t.view(), &stream.layers, &params, None);
    let (ep, _) = model.encode(tp.view(), &stream.layers, &params, None);
    for (i, &pi) in perm.iter().enumerate() {
        for j in 0..e.ncols() {
            assert!((ep[[i, j]] - e[[pi, j]]).abs() < 1e-12);
        }
    }
    let (z, _) = attention_pool(e.view(), &stream.pool_query, &params);
    let (zp, _) = attention_pool(ep.view(), &stream.pool_query, &params);
    for (a, b) in z.iter().zip(zp.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn cross_attention_weight_examples() {
    let model = Safn::new(tiny_config(), tiny_widths()).unwrap();
    let params = model.init_params(3);
    let cross = model.layout.cross.unwrap();
    let mut r = rng(3);
    let queries = Array2::from_shape_fn((3, 8), |_| rand::Rng::random_range(&mut r, -1.0..1.0));
    let one_key = Array2::from_shape_fn((1, 8), |(_, j)| j as f64 * 0.1);
    let (_, cache) = block_forward(
        queries.view(),
        one_key.view(),
        &cross.ct_from_clinical,
        &params,
        2,
        0.0,
        None,
    );
    for w in &cache.attention.weights {
        assert!(w.iter().all(|&v| v == 1.0));
    }
    let twin = ndarray::concatenate![ndarray::Axis(0), one_key, one_key];
    let (_, cache) = block_forward(
        queries.view(),
        twin.view(),
        &cross.ct_from_clinical,
        &params,
        2,
        0.0,
        None,
    );
    for w in &cache.attention.weights {
        assert!(w.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }
}

#[test]
fn zero_value_projection_ignores_keys() {
    let model = Safn::new(tiny_config(), tiny_widths()).unwrap();
    let mut params = model.init_params(4);
    for name in [
        "cross.mri_ct_from_clinical.attn.v.weight",
        "cross.mri_ct_from_clinical.attn.v.bias",
        "cross.mri_ct_from_clinical.attn.out.bias",
    ] {
        zero_tensor(&model, &mut params, name);
    }
    let cross = model.layout.cross.unwrap().ct_from_clinical;
    let q = arr2(&[[0.2, -0.1, 0.4, 1.0, -0.3, 0.0, 0.8, -0.6]]);
    let kv_a = Array2::from_elem((2, 8), 0.3);
    let kv_b = arr2(&[[1.0, -2.0, 0.0, 0.5, 0.5, 0.1, -0.7, 3.0]]);
    let (ya, _) = block_forward(q.view(), kv_a.view(), &cross, &params, 2, 0.0, None);
    let (yb, _) = block_forward(q.view(), kv_b.view(), &cross, &params, 2, 0.0, None);
    assert_eq!(ya, yb);

    // hand trace: h = LN1(q), out = LN2(h + W2 gelu(W1 h + b1) + b2), norms at identity
    let h = layer_norm_rows(&q);
    let w1 = cross.ffn_in.w.view(&params);
    let b1 = cross.ffn_in.b.view(&params);
    let w2 = cross.ffn_out.w.view(&params);
    let b2 = cross.ffn_out.b.view(&params);
    let f = (h.dot(&w1) + b1).mapv(gelu).dot(&w2) + b2;
    let expected = layer_norm_rows(&(&h + &f));
    for (a, b) in ya.iter().zip(expected.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_pool_examples() {
    let model = Safn::new(tiny_config(), tiny_widths()).unwrap();
    let params = model.init_params(8);
    let query = ct_stream(&model).pool_query;
    let one = arr2(&[[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]]);
    assert_eq!(attention_pool(one.view(), &query, &params).0, one.row(0));
    let same = ndarray::concatenate![ndarray::Axis(0), one, one, one];
    let (z, _) = attention_pool(same.view(), &query, &params);
    for (a, b) in z.iter().zip(one.row(0)) {
        assert!((a - b).abs() < 1e-12);
    }

    // query orthogonal to both rows: uniform weights, output is the mean row
    let mut p = params.clone();
    let q = query.range();
    p[q.clone()].copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    let rows = arr2(&[
        [0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 3.0, 0.0, 0.0, 0.0, -1.0, 0.0],
    ]);
    let (z, w) = attention_pool(rows.view(), &query, &p);
    assert_eq!(w, arr1(&[0.5, 0.5]));
    assert_eq!(z, arr1(&[0.0, 0.5, 1.5, 0.0, 1.0, 0.0, -0.5, 0.0]));
}

#[test]
fn gate_examples() {
    let z: Vec<ndarray::Array1<f64>> = (0..4).map(|j| arr1(&[j as f64, 1.0 - j as f64])).collect();
    let views: Vec<ArrayView1<f64>> = z.iter().map(|v| v.view()).collect();
    let w = Array2::zeros((4, 8));
    let (alpha, h) = gate_and_fuse(&views, w.view(), arr1(&[0.0; 4]).view());
    assert_eq!(alpha, vec![0.5; 4]);
    let zcat = ndarray::concatenate(ndarray::Axis(0), &views).unwrap();
    assert_eq!(h, zcat * 0.5);

    let (alpha, _) = gate_and_fuse(&views, w.view(), arr1(&[10.0, -10.0, 0.0, 0.0]).view());
    assert!((alpha[0] - 0.99995).abs() < 1e-5);
    assert!((alpha[1] - 0.00005).abs() < 1e-5);
    assert_eq!(&alpha[2..], &[0.5, 0.5]);
}

#[test]
fn head_examples() {
    // D=2 with four modalities: H has width 8, one hidden unit
    let config = SafnConfig {
        d_model: 2,
        n_heads: 1,
        head_hidden: 1,
        ..tiny_config()
    };
    let model = Safn::new(config, tiny_widths()).unwrap();
    let mut params = model.init_params(0);
    let head = model.layout.head;
    let h = arr1(&[1.0, -1.0, 2.0, 0.0, 0.5, 0.5, -2.0, 3.0]);

    for t in [head.hidden.w, head.hidden.b, head.out.w, head.out.b] {
        params[t.range()].iter_mut().for_each(|v| *v = 0.0);
    }
    let (s, _) = model.head_forward(h.view(), &head, &params, None);
    assert_eq!(s, 0.0);
    assert_eq!(sigmoid(s), 0.5);

    let w1 = [0.5, -0.25, 0.1, 0.0, 0.3, -0.2, 0.05, 0.4];
    params[head.hidden.w.range()].copy_from_slice(&w1);
    params[head.hidden.b.range()].copy_from_slice(&[0.1]);
    params[head.out.w.range()].copy_from_slice(&[2.0]);
    params[head.out.b.range()].copy_from_slice(&[-0.3]);
    let (s, _) = model.head_forward(h.view(), &head, &params, None);

    let mean = h.sum() / 8.0;
    let var = h.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
    let pre: f64 = h
        .iter()
        .zip(w1)
        .map(|(v, w)| (v - mean) / (var + LAYER_NORM_EPS).sqrt() * w)
        .sum::<f64>()
        + 0.1;
    let expected = 2.0 * gelu(pre) - 0.3;
    assert!((s - expected).abs() < 1e-14);
}

#[test]
fn eval_forward_is_deterministic_and_gates_neutral() {
    let model = Safn::new(tiny_config(), tiny_widths()).unwrap();
    let mut params = model.init_params(9);
    let b = random_bundle(&model.widths, 0, &mut rng(9));
    let t1 = model.forward(&b, &params, false, 1).unwrap();
    let t2 = model.forward(&b, &params, false, 2).unwrap();
    assert_eq!(t1.logit, t2.logit);
    assert_eq!(t1.h, t2.h);

    zero_tensor(&model, &mut params, "gate.weight");
    zero_tensor(&model, &mut params, "gate.bias");
    let t = model.forward(&b, &params, false, 0).unwrap();
    assert_eq!(t.alpha, vec![0.5; 4]);
    assert_eq!(t.h, &t.z * 0.5);
}

#[test]
fn train_mode_dropout_depends_on_seed() {
    let config = SafnConfig {
        dropout: 0.3,
        ..tiny_config()
    };
    let model = Safn::new(config, tiny_widths()).unwrap();
    let params = model.init_params(1);
    let b = random_bundle(&model.widths, 1, &mut rng(1));
    let a = model.forward(&b, &params, true, 10).unwrap();
    let a2 = model.forward(&b, &params, true, 10).unwrap();
    let c = model.forward(&b, &params, true, 11).unwrap();
    assert_eq!(a.logit, a2.logit);
    assert_ne!(a.logit, c.logit);
}

#[test]
fn shape_mismatch_rejected() {
    let model = Safn::new(tiny_config(), tiny_widths()).unwrap();
    let params = model.init_params(0);
    let mut b = random_bundle(&model.widths, 1, &mut rng(0));
    b.x_clinical.push(0.0);
    assert!(model.forward(&b, &params, false, 0).is_err());
    assert!(model
        .forward(
            &random_bundle(&model.widths, 1, &mut rng(0)),
            &params[1..],
            false,
            0
        )
        .is_err());
}

#[test]
fn ablated_gate_and_head_widths() {
    let mut config = tiny_config();
    config.wiring.modalities = PerModality::from_fn(|m| m == Modality::Clinical);
    let model = Safn::new(config, tiny_widths()).unwrap();
    let gate = model.layout.gate.unwrap();
    assert_eq!((gate.w.rows, gate.w.cols), (1, 8));
    assert!(model.layout.cross.is_none());
    let b = random_bundle(&model.widths, 1, &mut rng(0));
    let t = model.forward(&b, &model.init_params(0), false, 0).unwrap();
    assert_eq!(t.h.len(), 8);
    assert_eq!(t.alpha.len(), 1);

    let mut config = tiny_config();
    config.wiring.gates = false;
    let model = Safn::new(config, tiny_widths()).unwrap();
    let t = model.forward(&b, &model.init_params(0), false, 0).unwrap();
    assert_eq!(t.h, t.z);
    assert_eq!(t.alpha, vec![1.0; 4]);
}

#[test]
fn cross_attention_off_pools_encoder_output() {
    let mut config = tiny_config();
    config.wiring.cross_attention = false;
    let model = Safn::new(config, tiny_widths()).unwrap();
    let params = model.init_params(6);
    let b = random_bundle(&model.widths, 1, &mut rng(6));
    let t = model.forward(&b, &params, false, 0).unwrap();
    let e = t.encoded.mri_ct.as_ref().unwrap();
    assert_eq!(t.cross_attended.mri_ct.as_ref().unwrap(), e);
    let (z, _) = attention_pool(e.view(), &ct_stream(&model).pool_query, &params);
    assert_eq!(t.pooled.mri_ct.as_ref().unwrap(), &z);
}

#[test]
fn cross_attention_uses_pre_exchange_encodings() {
    let model = Safn::new(tiny_config(), tiny_widths()).unwrap();
    let params = model.init_params(12);
    let b = random_bundle(&model.widths, 0, &mut rng(12));
    let t = model.forward(&b, &params, false, 0).unwrap();
    let cross = model.layout.cross.unwrap();
    let ct = t.encoded.mri_ct.as_ref().unwrap();
    let clin = t.encoded.clinical.as_ref().unwrap();
    let (clin_new, _) = block_forward(
        clin.view(),
        ct.view(),
        &cross.clinical_from_ct,
        &params,
        2,
        0.0,
        None,
    );
    assert_eq!(t.cross_attended.clinical.as_ref().unwrap(), &clin_new);
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let model = Safn::new(tiny_config(), tiny_widths()).unwrap();
    let params = model.init_params(21);
    let ckpt = Checkpoint::new(&model, params.clone());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.params, params);
    assert_eq!(back.model().unwrap().param_count(), model.param_count());

    let mut broken = ckpt.clone();
    broken.params.pop();
    assert!(broken.model().is_err());
    let mut future = ckpt;
    future.version = 99;
    assert!(future.model().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn param_count_formula(
        d_heads in prop::sample::select(vec![(4usize, 1usize), (4, 2), (6, 3), (8, 2)]),
        layers in 0usize..3,
        mask in 1u8..16,
        cross in any::<bool>(),
        gates in any::<bool>(),
        widths in (1usize..6, 1usize..6, 1usize..6, 1usize..6),
    ) {
        let mut config = SafnConfig {
            d_model: d_heads.0,
            n_heads: d_heads.1,
            n_layers: layers,
            head_hidden: 5,
            ffn_multiplier: 2,
            ..tiny_config()
        };
        config.wiring.modalities = PerModality::from_fn(|m| mask & (1 << m.index()) != 0);
        config.wiring.cross_attention = cross;
        config.wiring.gates = gates;
        let widths = PerModality { mri_ct: widths.0, clinical: widths.1, mri_vol: widths.2, demographic: widths.3 };
        let model = Safn::new(config.clone(), widths).unwrap();
        // entries tile [0, len) contiguously
        let mut next = 0;
        for e in &model.layout.entries {
            prop_assert_eq!(e.tensor.offset, next);
            next += e.tensor.len();
        }
        prop_assert_eq!(next, model.param_count());
        prop_assert_eq!(expected_param_count(&config, &widths), model.param_count());
        prop_assert!(model.layout.locate(next.saturating_sub(1)).is_some());
    }

    #[test]
    fn gates_open_interval_and_fusion_identity(seed in 0u64..1000, scale in 0.1f64..20.0) {
        let model = Safn::new(tiny_config(), tiny_widths()).unwrap();
        let params = model.init_params(seed);
        let mut b = random_bundle(&model.widths, 1, &mut rng(seed));
        for m in Modality::ALL {
            b.block_mut(m).iter_mut().for_each(|v| *v *= scale);
        }
        let t = model.forward(&b, &params, false, 0).unwrap();
        prop_assert!(t.alpha.iter().all(|&a| a > 0.0 && a < 1.0));
        prop_assert!(t.prob > 0.0 && t.prob < 1.0);
        prop_assert_eq!(t.prob, sigmoid(t.logit));
        let d = model.config.d_model;
        for (j, &m) in t.active.iter().enumerate() {
            let z = t.pooled[m].as_ref().unwrap();
            for k in 0..d {
                prop_assert_eq!(t.h[j * d + k], t.alpha[j] * z[k]);
            }
        }
    }
}
