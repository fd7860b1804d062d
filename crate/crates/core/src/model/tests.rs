use super::*;
use crate::autodiff::{Tape, Tensor};
use crate::train::{ParamOptimizer, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_features(r: &mut ChaCha8Rng, batch: usize, n: usize) -> Tensor {
    let data = (0..batch * n * 2).map(|_| r.random_range(-1.5..1.5)).collect();
    Tensor::from_vec(&[batch, n, 2], data).unwrap()
}

fn ring_adjacency(n: usize) -> Tensor {
    // Unit-weight ring, symmetrically normalized (degree 2 everywhere).
    let mut a = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let j = (i + 1) % n;
        a.data_mut()[i * n + j] = 0.5;
        a.data_mut()[j * n + i] = 0.5;
    }
    a
}

fn tiny_aceot_config(n: usize) -> AceotConfig {
    AceotConfig {
        n_buses: n,
        h_c: 4,
        arma_layers: 2,
        stacks: 2,
        iterations: 2,
        heads: 2,
        enc_layers: 1,
        d_model: 4,
        d_ff: 8,
        dropout: 0.0,
        pos_weight: 2.0,
    }
}

fn set_param(model: &mut Model, name: &str, value: Tensor) {
    let idx = model.params().index_of(name).unwrap_or_else(|| panic!("{name}?"));
    assert_eq!(model.params().params[idx].value.shape(), value.shape());
    model.params_mut().params[idx].value = value;
}

#[test]
fn config_validation() {
    let mut c = AceotConfig::ieee14(14);
    assert!(c.validate().is_ok());
    assert_eq!(c.head_dim(), 16);
    c.heads = 5;
    assert!(matches!(
        c.validate(),
        Err(ConfigError::HeadSplit { d_model: 64, heads: 5 })
    ));
    c.heads = 4;
    c.enc_layers = 0;
    assert!(matches!(c.validate(), Err(ConfigError::ZeroCount(_))));

    // Tuned defaults for the large system.
    let c300 = AceotConfig::ieee300(300);
    assert_eq!((c300.stacks, c300.iterations, c300.h_c), (3, 5, 32));
    assert_eq!((c300.d_model, c300.d_ff, c300.enc_layers), (256, 512, 2));
    assert_eq!(c300.pos_weight, 9.0);
    let m300 = ModelConfig::defaults(ModelKind::Mlp, 300);
    assert_eq!(m300.pos_weight(), 1.0);
    assert_eq!(m300.dropout(), 0.30);
    let a14 = ModelConfig::defaults(ModelKind::ArmaOnly, 14);
    assert_eq!(a14.default_peak_lr(), 2e-3);
    assert_eq!(ModelConfig::defaults(ModelKind::Aceot, 14).default_peak_lr(), 1e-3);
}

#[test]
fn layer_norm_placement_follows_parity() {
    let cfg3 = ModelConfig::Aceot(tiny_aceot_config(5));
    let m3 = Model::new(cfg3, ring_adjacency(5), 0).unwrap();
    // Two layers: one norm, after layer 2.
    assert!(m3.params().index_of("arma1.ln.gain").is_none());
    assert!(m3.params().index_of("arma2.ln.gain").is_some());

    let mut c4 = tiny_aceot_config(5);
    c4.arma_layers = 4;
    let m4 = Model::new(ModelConfig::Aceot(c4), ring_adjacency(5), 0).unwrap();
    assert!(m4.params().index_of("arma2.ln.gain").is_some());
    assert!(m4.params().index_of("arma3.ln.gain").is_none());
    assert!(m4.params().index_of("arma4.ln.gain").is_some());

    let mut c3 = tiny_aceot_config(5);
    c3.arma_layers = 3;
    let m = Model::new(ModelConfig::Aceot(c3), ring_adjacency(5), 0).unwrap();
    let norms = m
        .params()
        .params
        .iter()
        .filter(|p| p.name.starts_with("arma") && p.name.ends_with("ln.gain"))
        .count();
    assert_eq!(norms, 1);
}

#[test]
fn arma_layer_reductions() {
    // K = 1, T = 1, W0 = 0: the propagation path vanishes and the layer
    // is act(X V).
    let mut tape = Tape::new();
    let mut r = rng(1);
    let x_data: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
    let x = tape.leaf(Tensor::from_vec(&[3, 2], x_data.clone()).unwrap());
    let adj = tape.constant(ring_adjacency(3));
    let w0 = tape.constant(Tensor::zeros(&[2, 2]));
    let w = tape.constant(Tensor::zeros(&[2, 2]));
    let v_data: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
    let v = tape.constant(Tensor::from_vec(&[2, 2], v_data.clone()).unwrap());
    let out = arma_layer(
        &mut tape,
        x,
        adj,
        &[(w0, w, v)],
        1,
        Act::Relu,
        0.0,
        &mut r,
        false,
    )
    .unwrap();
    // Hand evaluation of relu(X V).
    for i in 0..3 {
        for j in 0..2 {
            let want =
                (x_data[i * 2] * v_data[j] + x_data[i * 2 + 1] * v_data[2 + j]).max(0.0);
            assert!((tape.value(out).data()[i * 2 + j] - want).abs() < 1e-12);
        }
    }

    // Edgeless graph: every iteration collapses to act(X V).
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(&[3, 2], x_data).unwrap());
    let zero_adj = tape.constant(Tensor::zeros(&[3, 3]));
    let w0 = tape.constant(Tensor::filled(&[2, 2], 0.7));
    let w = tape.constant(Tensor::filled(&[2, 2], -0.3));
    let v = tape.constant(Tensor::from_vec(&[2, 2], v_data).unwrap());
    let deep = arma_layer(
        &mut tape,
        x,
        zero_adj,
        &[(w0, w, v)],
        4,
        Act::Relu,
        0.0,
        &mut r,
        false,
    )
    .unwrap();
    let shallow = arma_layer(
        &mut tape,
        x,
        zero_adj,
        &[(w0, w, v)],
        1,
        Act::Relu,
        0.0,
        &mut r,
        false,
    )
    .unwrap();
    assert_eq!(tape.value(deep).data(), tape.value(shallow).data());
}

#[test]
fn arma_layer_matches_dense_algebra_on_path_graph() {
    // 3-node path with unit weights: degrees (1, 2, 1).
    let s = 1.0 / 2.0f64.sqrt();
    let mut adj_t = Tensor::zeros(&[3, 3]);
    adj_t.data_mut()[1] = s; // (0,1)
    adj_t.data_mut()[3] = s; // (1,0)
    adj_t.data_mut()[5] = s; // (1,2)
    adj_t.data_mut()[7] = s; // (2,1)

    let mut tape = Tape::new();
    let x0 = tape.leaf(Tensor::from_vec(&[3, 1], vec![1.0, 0.0, 0.0]).unwrap());
    let adj = tape.constant(adj_t.clone());
    let one = tape.constant(Tensor::filled(&[1, 1], 1.0));
    let out = arma_layer(
        &mut tape,
        x0,
        adj,
        &[(one, one, one)],
        2,
        Act::Identity,
        0.0,
        &mut rng(2),
        false,
    )
    .unwrap();

    // Independent dense evaluation of A(A x + x) + x.
    let a = |i: usize, j: usize| adj_t.data()[i * 3 + j];
    let x = [1.0, 0.0, 0.0];
    let mut ax_x = [0.0; 3];
    for i in 0..3 {
        ax_x[i] = (0..3).map(|j| a(i, j) * x[j]).sum::<f64>() + x[i];
    }
    let mut want = [0.0; 3];
    for i in 0..3 {
        want[i] = (0..3).map(|j| a(i, j) * ax_x[j]).sum::<f64>() + x[i];
    }
    for i in 0..3 {
        assert!((tape.value(out).data()[i] - want[i]).abs() < 1e-12);
    }
    // Spot values: the root keeps its skip contributions, the middle
    // node sees one hop of the propagated signal.
    assert!((want[0] - 1.5).abs() < 1e-12);
    assert!((want[1] - s).abs() < 1e-12);
    assert!((want[2] - 0.5).abs() < 1e-12);
}

#[test]
fn attention_matches_hand_computation() {
    // 2 nodes, 1 head, d_model = 2, hand-chosen weights.
    let mut cfg = tiny_aceot_config(2);
    cfg.heads = 1;
    cfg.d_model = 2;
    cfg.d_ff = 4;
    let mut model = Model::new(ModelConfig::Aceot(cfg), ring_adjacency(2), 3).unwrap();
    let wq = vec![0.5, -0.25, 1.0, 0.75];
    let wk = vec![-0.5, 0.5, 0.25, 1.0];
    let wv = vec![1.0, 0.0, 0.0, -1.0];
    let wo = vec![1.0, 2.0, -1.0, 0.5];
    set_param(&mut model, "enc0.attn.wq0", Tensor::from_vec(&[2, 2], wq.clone()).unwrap());
    set_param(&mut model, "enc0.attn.wk0", Tensor::from_vec(&[2, 2], wk.clone()).unwrap());
    set_param(&mut model, "enc0.attn.wv0", Tensor::from_vec(&[2, 2], wv.clone()).unwrap());
    set_param(&mut model, "enc0.attn.wo", Tensor::from_vec(&[2, 2], wo.clone()).unwrap());

    let x = vec![0.8, -0.4, -0.2, 0.6];
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::from_vec(&[1, 2, 2], x.clone()).unwrap());
    let out = model
        .self_attention(&mut tape, xv, 0, 1, 2, 0.0, &mut rng(4), false)
        .unwrap();

    // Pencil-and-paper evaluation.
    let mat = |m: &[f64], r: usize, c: usize| m[r * 2 + c];
    let mm = |a: &[f64], b: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                out[i * 2 + j] = (0..2).map(|k| mat(a, i, k) * mat(b, k, j)).sum();
            }
        }
        out
    };
    let q = mm(&x, &wq);
    let k = mm(&x, &wk);
    let v = mm(&x, &wv);
    let scale = 1.0 / 2.0f64.sqrt();
    let mut attn = vec![0.0; 4];
    for i in 0..2 {
        let s0 = (mat(&q, i, 0) * mat(&k, 0, 0) + mat(&q, i, 1) * mat(&k, 0, 1)) * scale;
        let s1 = (mat(&q, i, 0) * mat(&k, 1, 0) + mat(&q, i, 1) * mat(&k, 1, 1)) * scale;
        let m = s0.max(s1);
        let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
        attn[i * 2] = e0 / (e0 + e1);
        attn[i * 2 + 1] = e1 / (e0 + e1);
        assert!((attn[i * 2] + attn[i * 2 + 1] - 1.0).abs() < 1e-12);
    }
    let head = mm(&attn, &v);
    let want = mm(&head, &wo);
    for (got, want) in tape.value(out).data().iter().zip(&want) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn zero_query_attention_is_mean_pooling() {
    let mut cfg = tiny_aceot_config(4);
    cfg.heads = 1;
    cfg.d_model = 2;
    let mut model = Model::new(ModelConfig::Aceot(cfg), ring_adjacency(4), 5).unwrap();
    set_param(&mut model, "enc0.attn.wq0", Tensor::zeros(&[2, 2]));

    let mut r = rng(6);
    let x_data: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::from_vec(&[1, 4, 2], x_data.clone()).unwrap());
    let out = model
        .self_attention(&mut tape, xv, 0, 1, 2, 0.0, &mut r, false)
        .unwrap();

    // Uniform attention mean-pools the value vectors: all rows equal.
    let o = tape.value(out).data();
    for node in 1..4 {
        for j in 0..2 {
            assert!((o[node * 2 + j] - o[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn single_node_attention_weight_is_one() {
    let mut cfg = tiny_aceot_config(1);
    cfg.heads = 1;
    cfg.d_model = 2;
    let model = Model::new(ModelConfig::Aceot(cfg), Tensor::zeros(&[1, 1]), 7).unwrap();
    let mut tape = Tape::new();
    let x = vec![0.3, -0.9];
    let xv = tape.constant(Tensor::from_vec(&[1, 1, 2], x.clone()).unwrap());
    let out = model
        .self_attention(&mut tape, xv, 0, 1, 2, 0.0, &mut rng(8), false)
        .unwrap();
    // softmax over a singleton is 1, so the output is x Wv Wo.
    let wv = model.params().get("enc0.attn.wv0").unwrap().value.clone();
    let wo = model.params().get("enc0.attn.wo").unwrap().value.clone();
    let hv: Vec<f64> = (0..2)
        .map(|j| x[0] * wv.data()[j] + x[1] * wv.data()[2 + j])
        .collect();
    let want: Vec<f64> = (0..2)
        .map(|j| hv[0] * wo.data()[j] + hv[1] * wo.data()[2 + j])
        .collect();
    for (got, want) in tape.value(out).data().iter().zip(&want) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn zeroed_encoder_layer_is_double_norm_of_input() {
    let mut cfg = tiny_aceot_config(3);
    cfg.heads = 2;
    cfg.d_model = 4;
    let mut model = Model::new(ModelConfig::Aceot(cfg), ring_adjacency(3), 9).unwrap();
    for name in [
        "enc0.attn.wq0",
        "enc0.attn.wq1",
        "enc0.attn.wk0",
        "enc0.attn.wk1",
        "enc0.attn.wv0",
        "enc0.attn.wv1",
        "enc0.attn.wo",
        "enc0.ffn.w1",
        "enc0.ffn.w2",
    ] {
        let shape = model.params().get(name).unwrap().value.shape().to_vec();
        set_param(&mut model, name, Tensor::zeros(&shape));
    }
    let mut r = rng(10);
    let x_data: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
    let x_t = Tensor::from_vec(&[1, 3, 4], x_data).unwrap();

    let mut tape = Tape::new();
    let xv = tape.constant(x_t.clone());
    let out = model
        .encoder_layer(&mut tape, xv, 0, 2, 2, 0.0, &mut r, false)
        .unwrap();

    // Residual paths alone: layer_norm(layer_norm(x)).
    let mut ref_tape = Tape::new();
    let xr = ref_tape.constant(x_t);
    let gain = ref_tape.constant(Tensor::filled(&[4], 1.0));
    let bias = ref_tape.constant(Tensor::zeros(&[4]));
    let ln1 = ref_tape.layer_norm(xr, gain, bias, 1e-5).unwrap();
    let ln2 = ref_tape.layer_norm(ln1, gain, bias, 1e-5).unwrap();
    for (a, b) in tape.value(out).data().iter().zip(ref_tape.value(ln2).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn encoder_output_rows_are_normalized() {
    let model = Model::new(
        ModelConfig::Aceot(tiny_aceot_config(5)),
        ring_adjacency(5),
        11,
    )
    .unwrap();
    let mut r = rng(12);
    let features = random_features(&mut r, 3, 5);
    let mut tape = Tape::new();
    let (trunk, dim) = model.forward_trunk(&mut tape, &features, false, &mut r).unwrap();
    assert_eq!(dim, 4);
    let v = tape.value(trunk).data();
    for row in v.chunks(dim) {
        let mean: f64 = row.iter().sum::<f64>() / dim as f64;
        let var: f64 = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / dim as f64;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-2);
    }
}

#[test]
fn forward_shapes_and_eval_determinism() {
    for kind in [ModelKind::Aceot, ModelKind::ArmaOnly, ModelKind::Mlp] {
        let cfg = match kind {
            ModelKind::Aceot => ModelConfig::Aceot(tiny_aceot_config(5)),
            ModelKind::ArmaOnly => ModelConfig::ArmaOnly(ArmaOnlyConfig {
                n_buses: 5,
                h_c: 4,
                arma_layers: 2,
                stacks: 2,
                iterations: 2,
                dropout: 0.1,
                pos_weight: 1.0,
            }),
            ModelKind::Mlp => ModelConfig::Mlp(MlpConfig {
                n_buses: 5,
                hidden: 8,
                layers: 3,
                dropout: 0.1,
                pos_weight: 1.0,
            }),
        };
        let model = Model::new(cfg, ring_adjacency(5), 13).unwrap();
        let mut r = rng(14);
        let features = random_features(&mut r, 4, 5);
        let a = model.predict(&features).unwrap();
        let b = model.predict(&features).unwrap();
        assert_eq!(a.len(), 4 * 5);
        assert_eq!(a, b, "{kind:?} eval must be deterministic");
        assert!(a.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

#[test]
fn aceot_is_permutation_equivariant_with_embeddings() {
    let n = 6;
    let model = Model::new(
        ModelConfig::Aceot(tiny_aceot_config(n)),
        ring_adjacency(n),
        15,
    )
    .unwrap();
    let mut r = rng(16);
    let features = random_features(&mut r, 1, n);
    let base = model.predict(&features).unwrap();

    let perm: Vec<usize> = vec![3, 0, 5, 1, 4, 2];
    // Permute features rows.
    let mut pf = vec![0.0; n * 2];
    for (new, &old) in perm.iter().enumerate() {
        pf[new * 2] = features.data()[old * 2];
        pf[new * 2 + 1] = features.data()[old * 2 + 1];
    }
    let pfeat = Tensor::from_vec(&[1, n, 2], pf).unwrap();
    // Permute adjacency rows and columns.
    let mut padj = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            padj.data_mut()[i * n + j] =
                model.adj_norm.data()[perm[i] * n + perm[j]];
        }
    }
    // Permute embedding rows alongside.
    let mut pmodel = Model::from_parts(model.config.clone(), padj.clone(), model.params().clone()).unwrap();
    let table = model.params().get("embed.table").unwrap().value.clone();
    let h = table.shape()[1];
    let mut pt = vec![0.0; n * h];
    for (new, &old) in perm.iter().enumerate() {
        pt[new * h..(new + 1) * h].copy_from_slice(&table.data()[old * h..(old + 1) * h]);
    }
    set_param(&mut pmodel, "embed.table", Tensor::from_vec(&[n, h], pt).unwrap());

    let permuted = pmodel.predict(&pfeat).unwrap();
    for (new, &old) in perm.iter().enumerate() {
        assert!(
            (permuted[new] - base[old]).abs() < 1e-10,
            "node {new}: {} vs {}",
            permuted[new],
            base[old]
        );
    }

    // Without permuting the embeddings the property must fail: the
    // positional encoding injects node identity.
    let unpermuted_embed =
        Model::from_parts(model.config.clone(), padj, model.params().clone()).unwrap();
    let broken = unpermuted_embed.predict(&pfeat).unwrap();
    let max_dev = perm
        .iter()
        .enumerate()
        .map(|(new, &old)| (broken[new] - base[old]).abs())
        .fold(0.0f64, f64::max);
    assert!(max_dev > 1e-6, "embeddings do not affect the output");
}

#[test]
fn detect_takes_the_maximum() {
    assert_eq!(detect(&[0.0, 0.0, 0.0]), (0.0, false));
    assert_eq!(detect(&[0.1, 0.9, 0.2]), (0.9, true));
    // Monotone: raising any node never lowers the graph probability.
    let base = detect(&[0.2, 0.4, 0.3]).0;
    for i in 0..3 {
        let mut probs = [0.2, 0.4, 0.3];
        probs[i] += 0.3;
        assert!(detect(&probs).0 >= base);
    }
}

#[test]
fn mlp_ignores_the_graph() {
    let cfg = MlpConfig {
        n_buses: 5,
        hidden: 8,
        layers: 3,
        dropout: 0.0,
        pos_weight: 1.0,
    };
    let a = Model::new(ModelConfig::Mlp(cfg.clone()), ring_adjacency(5), 17).unwrap();
    let b = Model::new(ModelConfig::Mlp(cfg), Tensor::zeros(&[5, 5]), 17).unwrap();
    let mut r = rng(18);
    let features = random_features(&mut r, 2, 5);
    assert_eq!(a.predict(&features).unwrap(), b.predict(&features).unwrap());
}

#[test]
fn arma_baseline_with_zero_propagation_is_pointwise() {
    let cfg = ArmaOnlyConfig {
        n_buses: 5,
        h_c: 4,
        arma_layers: 1,
        stacks: 1,
        iterations: 1,
        dropout: 0.0,
        pos_weight: 1.0,
    };
    let mut a = Model::new(ModelConfig::ArmaOnly(cfg.clone()), ring_adjacency(5), 19).unwrap();
    set_param(&mut a, "arma1.k0.w0", Tensor::zeros(&[4, 4]));
    let mut b = Model::from_parts(a.config.clone(), Tensor::zeros(&[5, 5]), a.params().clone())
        .unwrap();
    set_param(&mut b, "arma1.k0.w0", Tensor::zeros(&[4, 4]));
    let mut r = rng(20);
    let features = random_features(&mut r, 2, 5);
    assert_eq!(a.predict(&features).unwrap(), b.predict(&features).unwrap());
}

#[test]
fn gradients_reach_embeddings_and_projection() {
    let mut model = Model::new(
        ModelConfig::Aceot(tiny_aceot_config(5)),
        ring_adjacency(5),
        21,
    )
    .unwrap();
    let mut r = rng(22);
    let features = random_features(&mut r, 2, 5);
    let targets = Tensor::from_vec(
        &[2, 5],
        (0..10).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();
    model.params_mut().zero_grads();
    let _ = model.loss(&features, &targets, true, &mut r).unwrap();
    for name in ["embed.table", "input.proj"] {
        let g = &model.params().get(name).unwrap().grad;
        assert!(
            g.data().iter().any(|&v| v != 0.0),
            "no gradient reached {name}"
        );
    }
}

#[test]
fn one_training_step_moves_the_embeddings() {
    let mut model = Model::new(
        ModelConfig::Aceot(tiny_aceot_config(5)),
        ring_adjacency(5),
        23,
    )
    .unwrap();
    let before = model.params().get("embed.table").unwrap().value.clone();
    let cfg = TrainConfig::default();
    let mut opt = ParamOptimizer::new(model.params(), cfg.adam_hyper());
    let mut r = rng(24);
    let features = random_features(&mut r, 4, 5);
    let targets = Tensor::from_vec(
        &[4, 5],
        (0..20).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();
    model.params_mut().zero_grads();
    let _ = model.loss(&features, &targets, true, &mut r).unwrap();
    opt.step(model.params_mut(), 1e-3).unwrap();
    let after = &model.params().get("embed.table").unwrap().value;
    let delta: f64 = before
        .data()
        .iter()
        .zip(after.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    assert!(delta > 0.0, "embeddings did not move");
}

#[test]
fn arma_stack_survives_random_fuzz() {
    let model = Model::new(
        ModelConfig::Aceot(tiny_aceot_config(5)),
        ring_adjacency(5),
        25,
    )
    .unwrap();
    let mut r = rng(26);
    for _ in 0..100 {
        let features = random_features(&mut r, 2, 5);
        let probs = model.predict(&features).unwrap();
        assert!(probs.iter().all(|p| p.is_finite()));
    }
}

// Full-model gradient audit: every parameter's reverse-mode gradient
// against central finite differences on a 5-bus toy graph.
#[test]
fn full_model_gradient_audit() {
    let mut model = Model::new(
        ModelConfig::Aceot(tiny_aceot_config(5)),
        ring_adjacency(5),
        27,
    )
    .unwrap();
    let mut r = rng(28);
    let features = random_features(&mut r, 2, 5);
    let targets = Tensor::from_vec(
        &[2, 5],
        (0..10).map(|i| if i % 3 == 1 { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();

    model.params_mut().zero_grads();
    let mut r0 = rng(0);
    let _ = model.loss(&features, &targets, true, &mut r0).unwrap();
    let grads: Vec<Tensor> = model.params().params.iter().map(|p| p.grad.clone()).collect();

    let h = 1e-5;
    for pi in 0..model.params().params.len() {
        let numel = model.params().params[pi].value.numel();
        // Audit a deterministic subset of large tensors to keep runtime down.
        let stride = (numel / 16).max(1);
        for e in (0..numel).step_by(stride) {
            let orig = model.params().params[pi].value.data()[e];
            let eval = |m: &mut Model, v: f64| -> f64 {
                m.params_mut().params[pi].value.data_mut()[e] = v;
                let mut rr = rng(0);
                let out = m.loss(&features, &targets, false, &mut rr).unwrap();
                m.params_mut().params[pi].value.data_mut()[e] = orig;
                out
            };
            let hi = eval(&mut model, orig + h);
            let lo = eval(&mut model, orig - h);
            let fd = (hi - lo) / (2.0 * h);
            let an = grads[pi].data()[e];
            let denom = an.abs().max(fd.abs()).max(1.0);
            assert!(
                (an - fd).abs() / denom <= 1e-4,
                "param {} elem {e}: analytic {an} vs fd {fd}",
                model.params().params[pi].name
            );
        }
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let model = Model::new(
        ModelConfig::Aceot(tiny_aceot_config(5)),
        ring_adjacency(5),
        29,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("aceot.ckpt");
    let config_json = serde_json::to_value(&model.config).unwrap();
    crate::autodiff::write_checkpoint(&path, "aceot", &config_json, 29, model.params()).unwrap();

    let loaded = crate::autodiff::read_checkpoint(&path).unwrap();
    let config: ModelConfig = serde_json::from_value(loaded.config).unwrap();
    let restored = Model::from_parts(config, model.adj_norm.clone(), loaded.params).unwrap();

    let mut r = rng(30);
    let features = random_features(&mut r, 2, 5);
    assert_eq!(
        model.predict(&features).unwrap(),
        restored.predict(&features).unwrap()
    );
}
