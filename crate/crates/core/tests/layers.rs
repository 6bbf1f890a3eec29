use fusionmil::numerics::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `sum(r * y)` with fixed random `r`, so no gradient cancels by symmetry.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rand_tensor(g.shape(y), &mut rng);
    let r = g.input(r);
    let p = g.mul(y, r).unwrap();
    g.sum(p)
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

fn bn_store(c: usize) -> (ParamStore, BatchNorm) {
    let mut s = ParamStore::new();
    let bn = BatchNorm::new(&mut s, "bn", c, NormConfig::default()).unwrap();
    (s, bn)
}

// ---------------------------------------------------------------- conv2d

fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (k, cout) = (w.shape()[0], w.shape()[3]);
    let r = (k / 2) as isize;
    let mut out = vec![0.0; n * h * wd * cout];
    for bn in 0..n {
        for i in 0..h {
            for j in 0..wd {
                for co in 0..cout {
                    let mut acc = b.data()[co];
                    for di in 0..k {
                        for dj in 0..k {
                            let ii = i as isize + di as isize - r;
                            let jj = j as isize + dj as isize - r;
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = x.data()[((bn * h + ii as usize) * wd + jj as usize) * cin + ci];
                                let wv = w.data()[((di * k + dj) * cin + ci) * cout + co];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((bn * h + i) * wd + j) * cout + co] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_with_centered_delta_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&[1, 5, 5, 1], &mut rng);
    let mut w = Tensor::zeros(&[3, 3, 1, 1]);
    w.data_mut()[4] = 1.0;
    let mut g = Graph::new(Mode::Eval, 0);
    let (xv, wv, bv) = (g.input(x.clone()), g.input(w), g.input(Tensor::zeros(&[1])));
    let y = g.conv2d(xv, wv, bv).unwrap();
    assert_eq!(g.value(y).data(), x.data());
}

#[test]
fn conv_of_zero_input_is_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = rand_tensor(&[3, 3, 2, 3], &mut rng);
    let b = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
    let mut g = Graph::new(Mode::Eval, 0);
    let (xv, wv, bv) = (g.input(Tensor::zeros(&[1, 4, 4, 2])), g.input(w), g.input(b));
    let y = g.conv2d(xv, wv, bv).unwrap();
    for (i, v) in g.value(y).data().iter().enumerate() {
        assert_eq!(*v, [0.5, -1.0, 2.0][i % 3]);
    }
}

#[test]
fn conv_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[2, 4, 4, 2], &mut rng);
    let w = rand_tensor(&[3, 3, 2, 2], &mut rng);
    let b = rand_tensor(&[2], &mut rng);
    let mut g = Graph::new(Mode::Eval, 0);
    let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
    let y = g.conv2d(xv, wv, bv).unwrap();
    assert_eq!(g.shape(y), &[2, 4, 4, 2]);
    assert_close(g.value(y).data(), &conv_oracle(&x, &w, &b), 1e-12);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.input(Tensor::zeros(&[1, 4, 4, 3]));
    let w = g.input(Tensor::zeros(&[3, 3, 2, 1]));
    let b = g.input(Tensor::zeros(&[1]));
    assert!(g.conv2d(x, w, b).is_err());
}

#[test]
fn conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ins = vec![
        rand_tensor(&[2, 5, 4, 2], &mut rng),
        rand_tensor(&[3, 3, 2, 3], &mut rng),
        rand_tensor(&[3], &mut rng),
    ];
    let r = grad_check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2])?;
            Ok(probe(g, y, 9))
        },
        &ins,
        Mode::Eval,
        0,
        None,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

// ------------------------------------------------------------ batch norm

#[test]
fn batch_norm_of_constant_channel_is_beta() {
    let (mut s, bn) = bn_store(2);
    s.get_mut(bn.beta).data_mut().copy_from_slice(&[0.25, -3.0]);
    let x = Tensor::from_fn(&[6, 2], |i| if i % 2 == 0 { 4.0 } else { -7.0 });
    let mut g = Graph::new(Mode::Train, 0);
    let xv = g.input(x);
    let y = bn.forward(&mut g, &s, xv).unwrap();
    for (i, v) in g.value(y).data().iter().enumerate() {
        assert!((v - [0.25, -3.0][i % 2]).abs() < 1e-12);
        assert!(v.is_finite());
    }
}

#[test]
fn batch_norm_training_centres_each_channel() {
    let (s, bn) = bn_store(3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let normal = rand_distr::StandardNormal;
    let x = Tensor::from_fn(&[64, 3], |_| rng.sample::<f64, _>(normal));
    let mut g = Graph::new(Mode::Train, 0);
    let xv = g.input(x);
    let y = bn.forward(&mut g, &s, xv).unwrap();
    for c in 0..3 {
        let mean: f64 = g.value(y).data().iter().skip(c).step_by(3).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-6, "channel {c} mean {mean}");
    }
}

#[test]
fn batch_norm_matches_statistics_oracle_and_updates_running_stats() {
    let (mut s, bn) = bn_store(2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    s.get_mut(bn.gamma).data_mut().copy_from_slice(&[1.5, 0.5]);
    s.get_mut(bn.beta).data_mut().copy_from_slice(&[0.1, -0.2]);
    let x = Tensor::from_fn(&[5, 3, 2], |_| rng.random_range(-2.0..3.0));
    let mut g = Graph::new(Mode::Train, 0);
    let xv = g.input(x.clone());
    let y = bn.forward(&mut g, &s, xv).unwrap();
    let rows = 15;
    let mut expected = vec![0.0; 30];
    let mut means = [0.0; 2];
    let mut vars = [0.0; 2];
    for c in 0..2 {
        let col: Vec<f64> = (0..rows).map(|r| x.data()[r * 2 + c]).collect();
        let mean = col.iter().sum::<f64>() / rows as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
        for r in 0..rows {
            expected[r * 2 + c] = [1.5, 0.5][c] * (col[r] - mean) / (var + 1e-5).sqrt() + [0.1, -0.2][c];
        }
        means[c] = mean;
        vars[c] = var;
    }
    assert_close(g.value(y).data(), &expected, 1e-10);
    let updates = g.take_stat_updates();
    s.apply_stat_updates(&updates);
    for c in 0..2 {
        assert!((s.get(bn.running_mean).data()[c] - 0.1 * means[c]).abs() < 1e-12);
        assert!((s.get(bn.running_var).data()[c] - (0.9 + 0.1 * vars[c])).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_eval_uses_running_stats() {
    let (mut s, bn) = bn_store(1);
    s.get_mut(bn.running_mean).data_mut()[0] = 2.0;
    s.get_mut(bn.running_var).data_mut()[0] = 4.0;
    let mut g = Graph::new(Mode::Eval, 0);
    let xv = g.input(Tensor::from_vec(vec![2.0, 4.0]).reshape(&[2, 1]).unwrap());
    let y = bn.forward(&mut g, &s, xv).unwrap();
    assert_close(g.value(y).data(), &[0.0, 2.0 / (4.0f64 + 1e-5).sqrt()], 1e-12);
    assert!(g.take_stat_updates().is_empty());
}

#[test]
fn batch_norm_rejects_single_row_in_training() {
    let (s, bn) = bn_store(2);
    let mut g = Graph::new(Mode::Train, 0);
    let xv = g.input(Tensor::zeros(&[1, 2]));
    assert!(bn.forward(&mut g, &s, xv).is_err());
}

#[test]
fn batch_norm_gradients_in_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut s, bn) = bn_store(3);
    s.get_mut(bn.running_mean).data_mut().copy_from_slice(&[0.1, -0.3, 0.2]);
    s.get_mut(bn.running_var).data_mut().copy_from_slice(&[0.7, 1.3, 2.0]);
    let x = rand_tensor(&[4, 2, 3], &mut rng);
    let gamma = rand_tensor(&[3], &mut rng);
    let beta = rand_tensor(&[3], &mut rng);
    for mode in [Mode::Train, Mode::Eval] {
        let r = grad_check(
            |g, v| {
                let y = g.batch_norm(
                    v[0],
                    BatchNormArgs {
                        gamma: v[1],
                        beta: v[2],
                        running_mean: s.get(bn.running_mean),
                        running_var: s.get(bn.running_var),
                        mean_id: bn.running_mean,
                        var_id: bn.running_var,
                        momentum: 0.9,
                        eps: 1e-5,
                        frozen: false,
                    },
                )?;
                Ok(probe(g, y, 11))
            },
            &[x.clone(), gamma.clone(), beta.clone()],
            mode,
            0,
            None,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{mode:?} {r:?}");
    }
}

// -------------------------------------------------------------- max pool

#[test]
fn pool_chain_shapes() {
    let mut g = Graph::new(Mode::Eval, 0);
    let mut x = g.input(Tensor::zeros(&[1, 51, 51, 2]));
    let mut sizes = Vec::new();
    for _ in 0..3 {
        x = g.max_pool2(x).unwrap();
        sizes.push(g.shape(x)[1]);
    }
    assert_eq!(sizes, [25, 12, 6]);
    assert_eq!(g.shape(x), &[1, 6, 6, 2]);
}

#[test]
fn pool_of_constant_is_constant() {
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.input(Tensor::full(&[2, 7, 5, 3], -1.25));
    let y = g.max_pool2(x).unwrap();
    assert_eq!(g.shape(y), &[2, 3, 2, 3]);
    assert!(g.value(y).data().iter().all(|&v| v == -1.25));
}

#[test]
fn pool_matches_block_max() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&[1, 6, 6, 2], &mut rng);
    let mut g = Graph::new(Mode::Eval, 0);
    let xv = g.input(x.clone());
    let y = g.max_pool2(xv).unwrap();
    let at = |i: usize, j: usize, c: usize| x.data()[(i * 6 + j) * 2 + c];
    for i in 0..3 {
        for j in 0..3 {
            for c in 0..2 {
                let block = [
                    at(2 * i, 2 * j, c),
                    at(2 * i + 1, 2 * j, c),
                    at(2 * i, 2 * j + 1, c),
                    at(2 * i + 1, 2 * j + 1, c),
                ];
                let m = block.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(g.value(y).data()[(i * 3 + j) * 2 + c], m);
            }
        }
    }
}

#[test]
fn pool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&[2, 5, 6, 2], &mut rng);
    let r = grad_check(
        |g, v| {
            let y = g.max_pool2(v[0])?;
            Ok(probe(g, y, 3))
        },
        &[x],
        Mode::Eval,
        0,
        None,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

// ----------------------------------------------------------------- dense

fn dense_with(w: Tensor, b: Tensor) -> (ParamStore, Dense) {
    let mut s = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d = Dense::new(&mut s, "d", w.shape()[0], w.shape()[1], &mut rng).unwrap();
    *s.get_mut(d.weight) = w;
    *s.get_mut(d.bias) = b;
    (s, d)
}

#[test]
fn dense_identity_and_zero_input() {
    let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    let (s, d) = dense_with(eye, Tensor::zeros(&[4]));
    let x = Tensor::from_vec(vec![1.0, -2.0, 3.5, 0.25]).reshape(&[1, 4]).unwrap();
    let mut g = Graph::new(Mode::Eval, 0);
    let xv = g.input(x.clone());
    let y = d.forward(&mut g, &s, xv).unwrap();
    assert_eq!(g.value(y).data(), x.data());

    let b = Tensor::from_vec(vec![0.5, 0.25, -1.0]);
    let (s, d) = dense_with(Tensor::full(&[4, 3], 0.7), b.clone());
    let xv = g.input(Tensor::zeros(&[1, 4]));
    let y = d.forward(&mut g, &s, xv).unwrap();
    assert_eq!(g.value(y).data(), b.data());
}

#[test]
fn dense_matches_dot_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let w = rand_tensor(&[8, 4], &mut rng);
    let b = rand_tensor(&[4], &mut rng);
    let x = rand_tensor(&[3, 8], &mut rng);
    let (s, d) = dense_with(w.clone(), b.clone());
    let mut g = Graph::new(Mode::Eval, 0);
    let xv = g.input(x.clone());
    let y = d.forward(&mut g, &s, xv).unwrap();
    let mut expected = Vec::new();
    for r in 0..3 {
        for o in 0..4 {
            expected.push(b.data()[o] + (0..8).map(|i| x.data()[r * 8 + i] * w.data()[i * 4 + o]).sum::<f64>());
        }
    }
    assert_close(g.value(y).data(), &expected, 1e-12);
}

#[test]
fn dense_rejects_wrong_width() {
    let (s, d) = dense_with(Tensor::zeros(&[8, 4]), Tensor::zeros(&[4]));
    let mut g = Graph::new(Mode::Eval, 0);
    let xv = g.input(Tensor::zeros(&[2, 7]));
    assert!(matches!(d.forward(&mut g, &s, xv), Err(fusionmil::Error::Config(_))));
}

#[test]
fn dense_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ins = vec![
        rand_tensor(&[3, 8], &mut rng),
        rand_tensor(&[8, 4], &mut rng),
        rand_tensor(&[4], &mut rng),
    ];
    let r = grad_check(
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let y = g.add_bias(y, v[2])?;
            Ok(probe(g, y, 5))
        },
        &ins,
        Mode::Eval,
        0,
        None,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

// ---------------------------------------------------------------- bilstm

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One direction unrolled with explicit gate equations.
fn lstm_oracle(s: &ParamStore, dir: &LstmDirection, seq: &[Vec<f64>], order: &[usize]) -> Vec<f64> {
    let hd = dir.hidden;
    let wx = s.get(dir.w_input);
    let wh = s.get(dir.w_hidden);
    let b = s.get(dir.bias).data();
    let f = seq[0].len();
    let mut h = vec![0.0; hd];
    let mut c = vec![0.0; hd];
    for &t in order {
        let x = &seq[t];
        let pre = |gate: usize, j: usize, h: &[f64]| {
            let col = gate * hd + j;
            let mut acc = b[col];
            for i in 0..f {
                acc += x[i] * wx.data()[i * 4 * hd + col];
            }
            for i in 0..hd {
                acc += h[i] * wh.data()[i * 4 * hd + col];
            }
            acc
        };
        let mut hn = vec![0.0; hd];
        for j in 0..hd {
            let ig = sig(pre(0, j, &h));
            let fg = sig(pre(1, j, &h));
            let gg = pre(2, j, &h).tanh();
            let og = sig(pre(3, j, &h));
            c[j] = fg * c[j] + ig * gg;
            hn[j] = og * c[j].tanh();
        }
        h = hn;
    }
    h
}

fn bilstm(features: usize, hidden: usize, seed: u64) -> (ParamStore, BiLstm) {
    let mut s = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = BiLstm::new(&mut s, "lstm", features, hidden, &mut rng).unwrap();
    for (id, _) in s.entries().map(|(id, e)| (id, e.name.clone())).collect::<Vec<_>>() {
        let t = rand_tensor(s.get(id).shape(), &mut rng);
        *s.get_mut(id) = t;
    }
    (s, l)
}

#[test]
fn bilstm_matches_unrolled_recurrence() {
    let (s, l) = bilstm(2, 4, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_tensor(&[2, 3, 2], &mut rng);
    let mut g = Graph::new(Mode::Eval, 0);
    let xv = g.input(x.clone());
    let y = l.forward(&mut g, &s, xv).unwrap();
    assert_eq!(g.shape(y), &[2, 8]);
    for n in 0..2 {
        let seq: Vec<Vec<f64>> = (0..3)
            .map(|t| x.data()[(n * 3 + t) * 2..(n * 3 + t + 1) * 2].to_vec())
            .collect();
        let mut expected = lstm_oracle(&s, &l.forward, &seq, &[0, 1, 2]);
        expected.extend(lstm_oracle(&s, &l.backward, &seq, &[2, 1, 0]));
        assert_close(&g.value(y).data()[n * 8..(n + 1) * 8], &expected, 1e-10);
    }
}

#[test]
fn bilstm_single_step_and_zero_weights() {
    let (s, l) = bilstm(2, 3, 14);
    let x = Tensor::from_vec(vec![0.3, -0.8]).reshape(&[1, 1, 2]).unwrap();
    let mut g = Graph::new(Mode::Eval, 0);
    let xv = g.input(x.clone());
    let y = l.forward(&mut g, &s, xv).unwrap();
    let seq = vec![x.data().to_vec()];
    let mut expected = lstm_oracle(&s, &l.forward, &seq, &[0]);
    expected.extend(lstm_oracle(&s, &l.backward, &seq, &[0]));
    assert_close(g.value(y).data(), &expected, 1e-12);

    let mut z = s.clone();
    let ids: Vec<_> = z.entries().map(|(id, _)| id).collect();
    for id in ids {
        let shape = z.get(id).shape().to_vec();
        *z.get_mut(id) = Tensor::zeros(&shape);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let xv = g.input(rand_tensor(&[2, 5, 2], &mut rng));
    let y = l.forward(&mut g, &z, xv).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn bilstm_rejects_empty_sequence_shape() {
    let (s, l) = bilstm(2, 3, 16);
    let mut g = Graph::new(Mode::Eval, 0);
    let xv = g.input(Tensor::zeros(&[1, 4, 3]));
    assert!(l.forward(&mut g, &s, xv).is_err());
    assert!(Tensor::new(vec![1, 0, 2], vec![]).is_err());
}

#[test]
fn bilstm_gradients() {
    let (s, l) = bilstm(2, 3, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = rand_tensor(&[2, 4, 2], &mut rng);
    let r = grad_check_params(
        &s,
        |g, st| {
            let xv = g.input(x.clone());
            let y = l.forward(g, st, xv)?;
            Ok(probe(g, y, 19))
        },
        Mode::Eval,
        0,
        None,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
    let r = grad_check(
        |g, v| {
            let y = l.forward(g, &s, v[0])?;
            Ok(probe(g, y, 19))
        },
        &[x],
        Mode::Eval,
        0,
        None,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

// ------------------------------------------------------------------- cce

fn cce_value(p: &[f64], labels: &[usize]) -> f64 {
    let m = p.len() / labels.len();
    let mut g = Graph::new(Mode::Eval, 0);
    let pv = g.input(Tensor::new(vec![labels.len(), m], p.to_vec()).unwrap());
    let l = g.cce(pv, labels, LOG_EPS).unwrap();
    g.value(l).item()
}

#[test]
fn cce_trivial_values() {
    let mut p = vec![0.2; 8];
    p[3] = 1.0;
    assert!(cce_value(&p, &[3]).abs() < 1e-6);
    p[3] = (-1.0f64).exp();
    assert!((cce_value(&p, &[3]) - 1.0).abs() < 1e-12);
}

#[test]
fn cce_matches_one_hot_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let p: Vec<f64> = (0..32).map(|_| rng.random_range(0.01..0.99)).collect();
    let labels = [1, 7, 0, 4];
    let mut oracle = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        let y: Vec<f64> = (0..8).map(|k| if k == l { 1.0 } else { 0.0 }).collect();
        oracle -= (0..8).map(|k| y[k] * p[r * 8 + k].ln()).sum::<f64>();
    }
    oracle /= 4.0;
    assert!((cce_value(&p, &labels) - oracle).abs() < 1e-12);
}

#[test]
fn cce_rejects_out_of_range_label() {
    let mut g = Graph::new(Mode::Eval, 0);
    let pv = g.input(Tensor::full(&[1, 8], 0.5));
    assert!(g.cce(pv, &[8], LOG_EPS).is_err());
}

#[test]
fn cce_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let logits = rand_tensor(&[3, 8], &mut rng);
    let r = grad_check(
        |g, v| {
            let p = g.sigmoid(v[0]);
            let p = g.normalize_rows(p);
            g.cce(p, &[2, 0, 7], LOG_EPS)
        },
        &[logits],
        Mode::Eval,
        0,
        None,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

// -------------------------------------------------------- remaining ops

#[test]
fn elementwise_and_structural_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let a = rand_tensor(&[3, 4], &mut rng);
    let b = rand_tensor(&[3, 2], &mut rng);
    let h = rand_tensor(&[2, 3, 4], &mut rng);
    let r = grad_check(
        |g, v| {
            let t = g.tanh(v[0]);
            let s = g.sigmoid(v[0]);
            let m = g.mul(t, s)?;
            let c = g.concat(&[m, v[1]])?;
            let sl = g.slice_cols(c, 1, 4)?;
            let sc = g.scale(sl, 1.7);
            let sm = g.softmax(sc);
            let sm = g.reshape(sm, &[2, 6])?;
            let sm = g.slice_cols(sm, 0, 3)?;
            let z = g.weighted_pool(v[2], sm)?;
            let ts = g.reshape(v[2], &[2, 3, 4])?;
            let ts = g.time_step(ts, 1)?;
            let q = g.add(z, ts)?;
            Ok(probe(g, q, 23))
        },
        &[a, b, h],
        Mode::Eval,
        0,
        None,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn dropout_is_identity_in_eval_and_unbiased_in_training() {
    let x = Tensor::full(&[200_000], 1.0);
    let mut g = Graph::new(Mode::Eval, 0);
    let xv = g.input(x.clone());
    let y = g.dropout(xv, 0.3);
    assert_eq!(g.value(y).data(), x.data());

    let mut g = Graph::new(Mode::Train, 7);
    let xv = g.input(x);
    let y = g.dropout(xv, 0.3);
    let mean = g.value(y).data().iter().sum::<f64>() / 200_000.0;
    assert!((mean - 1.0).abs() < 0.01, "mean {mean}");

    let run = |seed| {
        let mut g = Graph::new(Mode::Train, seed);
        let xv = g.input(Tensor::full(&[64], 1.0));
        let y = g.dropout(xv, 0.3);
        g.value(y).clone()
    };
    assert_eq!(run(3), run(3));
}

#[test]
fn dropout_gradients_with_fixed_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let x = rand_tensor(&[4, 6], &mut rng);
    let r = grad_check(
        |g, v| {
            let y = g.dropout(v[0], 0.3);
            Ok(probe(g, y, 25))
        },
        &[x],
        Mode::Train,
        42,
        None,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn frozen_batch_norm_uses_running_stats_in_training() {
    let (mut s, bn) = bn_store(3);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    *s.get_mut(bn.running_mean) = rand_tensor(&[3], &mut rng);
    *s.get_mut(bn.running_var) = Tensor::full(&[3], 2.5);
    let x = rand_tensor(&[6, 3], &mut rng);
    let mut eval = Graph::new(Mode::Eval, 0);
    let xe = eval.input(x.clone());
    let ye = bn.forward(&mut eval, &s, xe).unwrap();
    s.set_frozen("bn", true);
    let mut train = Graph::new(Mode::Train, 0);
    let xt = train.input(x);
    let yt = bn.forward(&mut train, &s, xt).unwrap();
    assert_eq!(train.value(yt), eval.value(ye));
    assert!(train.take_stat_updates().is_empty());
}
