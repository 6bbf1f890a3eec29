use fusionmil::model::*;
use fusionmil::numerics::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn random_batch(cfg: &ModelConfig, bags: usize, seed: u64) -> BatchInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.accel_instances();
    BatchInput {
        bags,
        accel: Some(Tensor::from_fn(&[bags * n, 51, 51, 2], |_| rng.random_range(-3.0..3.0))),
        accel_instances: n,
        loc_seq: Some(Tensor::from_fn(&[bags, 10, 2], |_| rng.random_range(0.0..20.0))),
        loc_scalars: Some(Tensor::from_fn(&[bags, 5], |_| rng.random_range(0.0..1.0))),
    }
}

fn dense_count(i: usize, o: usize) -> usize {
    i * o + o
}

#[test]
fn parameter_counts_match_shape_enumeration() {
    let model = Model::new(ModelConfig::default(), 0).unwrap();
    let conv = |cin: usize, cout: usize| 9 * cin * cout + cout;
    let bn = |c: usize| 2 * c;
    let f_a = bn(2)
        + conv(2, 16)
        + bn(16)
        + conv(16, 32)
        + bn(32)
        + conv(32, 64)
        + bn(64)
        + dense_count(6 * 6 * 64, 128)
        + bn(128)
        + dense_count(128, 256)
        + bn(256);
    let lstm_dir = 2 * 4 * 128 + 128 * 4 * 128 + 4 * 128;
    let f_l = bn(2) + 2 * lstm_dir + dense_count(261, 256) + bn(256) + 2 * (dense_count(256, 256) + bn(256));
    let attention = 2 * 256 * 256 + 256;
    let head = dense_count(256, 128) + bn(128) + dense_count(128, 8);
    assert_eq!(model.store.trainable_count(ACCEL_PREFIX), f_a);
    assert_eq!(model.store.trainable_count(LOC_PREFIX), f_l);
    assert_eq!(model.store.trainable_count(ATTENTION_PREFIX), attention);
    assert_eq!(model.store.trainable_count(HEAD_PREFIX), head);
    assert_eq!(model.parameter_count(), f_a + f_l + attention + head);
    // f_a is about 0.35M
    assert!((f_a as f64 / 1e6 - 0.35).abs() < 0.01, "f_a = {f_a}");
    assert_eq!(model.accel_encoder().unwrap().flattened_width(), 2304);
    assert_eq!(model.loc_encoder().unwrap().concat_width(), 261);
}

#[test]
fn encoders_emit_256_wide_deterministic_embeddings() {
    let cfg = ModelConfig::default();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let fa = AccelEncoder::new(&mut store, "f_a", &cfg, &mut rng).unwrap();
    let fl = LocEncoder::new(&mut store, "f_l", &cfg, &mut rng).unwrap();
    let spec = rand_tensor(&[1, 51, 51, 2], &mut rng);
    let pair = Tensor::stack(&[
        &spec.clone().reshape(&[51, 51, 2]).unwrap(),
        &spec.clone().reshape(&[51, 51, 2]).unwrap(),
    ])
    .unwrap();
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.input(pair);
    let h = fa.forward(&mut g, &store, x).unwrap();
    assert_eq!(g.shape(h), &[2, 256]);
    let v = g.value(h).data();
    assert_eq!(&v[..256], &v[256..]);

    let seq = g.input(Tensor::zeros(&[1, 10, 2]));
    let sc = g.input(Tensor::zeros(&[1, 5]));
    let hl = fl.forward(&mut g, &store, seq, sc).unwrap();
    assert_eq!(g.shape(hl), &[1, 256]);
    assert!(g.value(hl).is_finite());

    let bad = g.input(Tensor::zeros(&[1, 50, 51, 2]));
    assert!(fa.forward(&mut g, &store, bad).is_err());
}

fn attention(seed: u64) -> (ParamStore, AttentionPool) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = AttentionPool::new(&mut store, "mil", 6, 5, &mut rng).unwrap();
    (store, a)
}

fn attention_oracle(store: &ParamStore, att: &AttentionPool, h: &[Vec<f64>]) -> Vec<f64> {
    let v = store.get(att.v).data();
    let u = store.get(att.u).data();
    let w = store.get(att.w).data();
    let inner = w.len();
    let d = h[0].len();
    let scores: Vec<f64> = h
        .iter()
        .map(|hn| {
            (0..inner)
                .map(|l| {
                    let vh: f64 = (0..d).map(|k| v[k * inner + l] * hn[k]).sum();
                    let uh: f64 = (0..d).map(|k| u[k * inner + l] * hn[k]).sum();
                    w[l] * vh.tanh() * (1.0 / (1.0 + (-uh).exp()))
                })
                .sum()
        })
        .collect();
    let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn pool(store: &ParamStore, att: &AttentionPool, h: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = h.len();
    let d = h[0].len();
    let t = Tensor::new(vec![1, n, d], h.concat()).unwrap();
    let mut g = Graph::new(Mode::Eval, 0);
    let hv = g.input(t);
    let (z, a) = att.forward(&mut g, store, hv).unwrap();
    (g.value(z).data().to_vec(), g.value(a).data().to_vec())
}

#[test]
fn attention_matches_elementwise_oracle() {
    let (store, att) = attention(2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..6).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let (z, a) = pool(&store, &att, &h);
    let oracle = attention_oracle(&store, &att, &h);
    for (x, y) in a.iter().zip(&oracle) {
        assert!((x - y).abs() < 1e-12);
        assert!(*x > 0.0);
    }
    assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for k in 0..6 {
        let expected: f64 = (0..4).map(|n| oracle[n] * h[n][k]).sum();
        assert!((z[k] - expected).abs() < 1e-12);
    }
}

#[test]
fn attention_symmetry_cases() {
    let (store, att) = attention(4);
    let row = vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.1];
    let (z, a) = pool(&store, &att, &vec![row.clone(); 4]);
    assert!(a.iter().all(|&x| (x - 0.25).abs() < 1e-12));
    assert!(z.iter().zip(&row).all(|(p, q)| (p - q).abs() < 1e-12));
    let (_, a) = pool(&store, &att, &[row]);
    assert_eq!(a, vec![1.0]);
}

#[test]
fn weighted_pool_one_hot_selects_instance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = rand_tensor(&[1, 4, 3], &mut rng);
    let mut g = Graph::new(Mode::Eval, 0);
    let hv = g.input(h.clone());
    let a = g.input(Tensor::new(vec![1, 4], vec![0.0, 0.0, 1.0, 0.0]).unwrap());
    let z = g.weighted_pool(hv, a).unwrap();
    assert_eq!(g.value(z).data(), &h.data()[6..9]);
}

#[test]
fn fuse_is_permutation_invariant() {
    let (store, att) = attention(6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let h: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..6).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let (z, a) = pool(&store, &att, &h);
        let perm = [2, 0, 3, 1];
        let hp: Vec<Vec<f64>> = perm.iter().map(|&i| h[i].clone()).collect();
        let (zp, ap) = pool(&store, &att, &hp);
        for (k, &i) in perm.iter().enumerate() {
            assert!((ap[k] - a[i]).abs() < 1e-12);
        }
        assert!(z.iter().zip(&zp).all(|(p, q)| (p - q).abs() < 1e-12));
    }
}

#[test]
fn classifier_matches_layer_oracle() {
    let cfg = ModelConfig::default();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let head = Head::classifier(&mut store, "head", &cfg, 256, &mut rng).unwrap();
    let Head::Classifier { block, out } = &head else {
        unreachable!()
    };
    // non-trivial running statistics
    let rm = rand_tensor(&[128], &mut rng);
    let rv = Tensor::from_fn(&[128], |_| rng.random_range(0.5..2.0));
    *store.get_mut(block.norm.running_mean) = rm.clone();
    *store.get_mut(block.norm.running_var) = rv.clone();
    let z = rand_tensor(&[1, 256], &mut rng);
    let mut g = Graph::new(Mode::Eval, 0);
    let zv = g.input(z.clone());
    let logits = head.logits(&mut g, &store, zv).unwrap();
    let p = g.sigmoid(logits);
    assert_eq!(g.shape(p), &[1, 8]);

    let affine = |x: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
        let o = b.len();
        (0..o)
            .map(|j| {
                b.data()[j]
                    + x.iter()
                        .enumerate()
                        .map(|(i, xi)| xi * w.data()[i * o + j])
                        .sum::<f64>()
            })
            .collect()
    };
    let h1 = affine(z.data(), store.get(block.dense.weight), store.get(block.dense.bias));
    let gamma = store.get(block.norm.gamma).data();
    let beta = store.get(block.norm.beta).data();
    let h1: Vec<f64> = h1
        .iter()
        .enumerate()
        .map(|(j, v)| (gamma[j] * (v - rm.data()[j]) / (rv.data()[j] + 1e-5).sqrt() + beta[j]).max(0.0))
        .collect();
    let l = affine(&h1, store.get(out.weight), store.get(out.bias));
    for (j, lj) in l.iter().enumerate() {
        assert!((g.value(p).data()[j] - 1.0 / (1.0 + (-lj).exp())).abs() < 1e-10);
    }

    let mut zeroed = store.clone();
    *zeroed.get_mut(out.weight) = Tensor::zeros(&[128, 8]);
    let logits = head.logits(&mut g, &zeroed, zv).unwrap();
    let p = g.sigmoid(logits);
    assert!(g.value(p).data().iter().all(|&v| v == 0.5));
}

#[test]
fn forward_reports_modality_weights_summing_to_one() {
    let cfg = ModelConfig::default();
    let model = Model::new(cfg.clone(), 9).unwrap();
    let preds = model.predict(&random_batch(&cfg, 3, 10)).unwrap();
    assert_eq!(preds.len(), 3);
    for p in preds {
        assert_eq!(p.probs.len(), 8);
        assert_eq!(p.attention.len(), 4);
        assert!(p.attention.iter().all(|&a| a > 0.0));
        assert!((p.accel_weight + p.loc_weight - 1.0).abs() < 1e-12);
        assert!(p.probs.iter().all(|&q| q > 0.0 && q < 1.0));
    }
}

#[test]
fn permuting_accel_instances_permutes_diagnostics_only() {
    let cfg = ModelConfig::default();
    let model = Model::new(cfg.clone(), 11).unwrap();
    let batch = random_batch(&cfg, 1, 12);
    let base = model.predict(&batch).unwrap().remove(0);
    let perm = [2usize, 0, 1];
    let frame = 51 * 51 * 2;
    let src = batch.accel.as_ref().unwrap().data();
    let mut data = Vec::new();
    for &i in &perm {
        data.extend_from_slice(&src[i * frame..(i + 1) * frame]);
    }
    let mut permuted = batch.clone();
    permuted.accel = Some(Tensor::new(vec![3, 51, 51, 2], data).unwrap());
    let got = model.predict(&permuted).unwrap().remove(0);
    assert_eq!(got.label, base.label);
    for (k, &i) in perm.iter().enumerate() {
        assert!((got.attention[k] - base.attention[i]).abs() < 1e-12);
    }
    assert!((got.attention[3] - base.attention[3]).abs() < 1e-12);
    for (a, b) in got.probs.iter().zip(&base.probs) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn masked_location_window_gives_finite_output() {
    let cfg = ModelConfig::default();
    let model = Model::new(cfg.clone(), 13).unwrap();
    let mut batch = random_batch(&cfg, 2, 14);
    batch.loc_seq = Some(Tensor::zeros(&[2, 10, 2]));
    batch.loc_scalars = Some(Tensor::zeros(&[2, 5]));
    for p in model.predict(&batch).unwrap() {
        assert!(p.probs.iter().all(|v| v.is_finite()));
    }
    let mut g = Graph::new(Mode::Train, 0);
    let out = model.forward(&mut g, &batch).unwrap();
    assert!(g.value(out.probs).is_finite());
}

#[test]
fn every_architecture_builds_and_runs() {
    for arch in Architecture::ALL {
        let cfg = ModelConfig::for_architecture(arch);
        let model = Model::new(cfg.clone(), 15).unwrap();
        let batch = random_batch(&cfg, 2, 16);
        let mut g = Graph::new(Mode::Train, 1);
        let out = model.forward(&mut g, &batch).unwrap();
        assert_eq!(g.shape(out.probs), &[2, 8], "{arch}");
        let fused = g.shape(out.fused)[1];
        let expect = if matches!(arch, Architecture::FusionConcat | Architecture::FusionConcatPlus) {
            512
        } else {
            256
        };
        assert_eq!(fused, expect, "{arch}");
        assert_eq!(out.attention.is_some(), arch.uses_attention());
        assert_eq!(Architecture::parse(arch.name()).unwrap(), arch);
        assert_eq!(model.store.trainable_count(LOC_PREFIX) > 0, arch.uses_location());
    }
}

#[test]
fn missing_modalities_are_rejected() {
    let cfg = ModelConfig::default();
    let model = Model::new(cfg.clone(), 17).unwrap();
    let mut batch = random_batch(&cfg, 2, 18);
    batch.loc_seq = None;
    assert!(model.predict(&batch).is_err());
    let mut batch = random_batch(&cfg, 2, 18);
    batch.accel_instances = 2;
    assert!(model.predict(&batch).is_err());
}

fn loss_of(
    model: &Model,
    g: &mut Graph,
    store: &ParamStore,
    batch: &BatchInput,
    labels: &[usize],
) -> fusionmil::Result<Var> {
    let out = model.forward_with(g, store, batch)?;
    let p = g.normalize_rows(out.probs);
    g.cce(p, labels, LOG_EPS)
}

fn perturb_stats(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model
        .store
        .entries()
        .filter(|(_, e)| e.name.ends_with("running_var") || e.name.ends_with("running_mean") || e.name.ends_with("/b"))
        .map(|(id, e)| (id, e.name.ends_with("running_var")))
        .collect();
    for (id, is_var) in ids {
        let t = model.store.get_mut(id);
        for v in t.data_mut() {
            *v = if is_var {
                rng.random_range(0.5..2.0)
            } else {
                rng.random_range(-0.1..0.1)
            };
        }
    }
}

#[test]
fn full_model_gradient_check_eval_mode() {
    let cfg = ModelConfig::default();
    let mut model = Model::new(cfg.clone(), 19).unwrap();
    perturb_stats(&mut model, 20);
    let batch = random_batch(&cfg, 1, 21);
    let r = grad_check_params(
        &model.store,
        |g, st| loss_of(&model, g, st, &batch, &[5]),
        Mode::Eval,
        0,
        Some(4),
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn full_model_gradient_check_training_mode() {
    let cfg = ModelConfig::default();
    let mut model = Model::new(cfg.clone(), 22).unwrap();
    perturb_stats(&mut model, 23);
    let batch = random_batch(&cfg, 4, 24);
    let r = grad_check_params(
        &model.store,
        |g, st| loss_of(&model, g, st, &batch, &[1, 6, 0, 3]),
        Mode::Train,
        7,
        Some(3),
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}
