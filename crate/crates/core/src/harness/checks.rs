//! Finite-difference gradient checks of every layer op and the composed
//! Fusion-MIL loss, shared by the CLI and the acceptance suite.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{AttentionPool, BatchInput, Model, ModelConfig};
use crate::numerics::{
    grad_check, grad_check_params, BatchNorm, BatchNormArgs, BiLstm, GradCheckReport, Graph, Mode, NormConfig,
    ParamStore, Tensor, Var, LOG_EPS,
};

pub const LAYER_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance && self.report.checked > 0
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `sum(r * y)` with a fixed random `r`.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.input(rand_tensor(g.shape(y), &mut rng));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn randomise(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.entries().map(|(id, _)| id).collect();
    for id in ids {
        let t = rand_tensor(store.get(id).shape(), rng);
        *store.get_mut(id) = t;
    }
}

fn layer_checks() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();
    let mut push = |name: &str, report: GradCheckReport| {
        out.push(CheckResult {
            name: name.to_string(),
            report,
            tolerance: LAYER_TOLERANCE,
        })
    };

    let ins = vec![
        rand_tensor(&[2, 5, 4, 2], &mut rng),
        rand_tensor(&[3, 3, 2, 3], &mut rng),
        rand_tensor(&[3], &mut rng),
    ];
    push(
        "conv2d",
        grad_check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2])?;
                probe(g, y, 1)
            },
            &ins,
            Mode::Eval,
            0,
            None,
        )?,
    );

    let x = rand_tensor(&[2, 5, 6, 2], &mut rng);
    push(
        "max_pool2",
        grad_check(
            |g, v| {
                let y = g.max_pool2(v[0])?;
                probe(g, y, 2)
            },
            &[x],
            Mode::Eval,
            0,
            None,
        )?,
    );

    let ins = vec![
        rand_tensor(&[3, 8], &mut rng),
        rand_tensor(&[8, 4], &mut rng),
        rand_tensor(&[4], &mut rng),
    ];
    push(
        "dense",
        grad_check(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                let y = g.add_bias(y, v[2])?;
                probe(g, y, 3)
            },
            &ins,
            Mode::Eval,
            0,
            None,
        )?,
    );

    let mut s = ParamStore::new();
    let bn = BatchNorm::new(&mut s, "bn", 3, NormConfig::default())?;
    s.get_mut(bn.running_mean).data_mut().copy_from_slice(&[0.1, -0.3, 0.2]);
    s.get_mut(bn.running_var).data_mut().copy_from_slice(&[0.7, 1.3, 2.0]);
    let ins = vec![
        rand_tensor(&[4, 2, 3], &mut rng),
        rand_tensor(&[3], &mut rng),
        rand_tensor(&[3], &mut rng),
    ];
    for (mode, name) in [(Mode::Train, "batch_norm/train"), (Mode::Eval, "batch_norm/eval")] {
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
                probe(g, y, 4)
            },
            &ins,
            mode,
            0,
            None,
        )?;
        push(name, r);
    }

    let mut s = ParamStore::new();
    let lstm = BiLstm::new(&mut s, "lstm", 2, 3, &mut rng)?;
    randomise(&mut s, &mut rng);
    let x = rand_tensor(&[2, 4, 2], &mut rng);
    push(
        "bilstm/params",
        grad_check_params(
            &s,
            |g, st| {
                let xv = g.input(x.clone());
                let y = lstm.forward(g, st, xv)?;
                probe(g, y, 5)
            },
            Mode::Eval,
            0,
            None,
        )?,
    );
    push(
        "bilstm/input",
        grad_check(
            |g, v| {
                let y = lstm.forward(g, &s, v[0])?;
                probe(g, y, 5)
            },
            &[x],
            Mode::Eval,
            0,
            None,
        )?,
    );

    let mut s = ParamStore::new();
    let att = AttentionPool::new(&mut s, "mil", 6, 4, &mut rng)?;
    let h = rand_tensor(&[2, 4, 6], &mut rng);
    push(
        "gated_attention",
        grad_check_params(
            &s,
            |g, st| {
                let hv = g.input(h.clone());
                let (z, _) = att.forward(g, st, hv)?;
                probe(g, z, 6)
            },
            Mode::Eval,
            0,
            None,
        )?,
    );

    let logits = rand_tensor(&[3, 8], &mut rng);
    push(
        "sigmoid_cce",
        grad_check(
            |g, v| {
                let p = g.sigmoid(v[0]);
                let p = g.normalize_rows(p);
                g.cce(p, &[2, 0, 7], LOG_EPS)
            },
            &[logits],
            Mode::Eval,
            0,
            None,
        )?,
    );

    let ins = vec![
        rand_tensor(&[3, 4], &mut rng),
        rand_tensor(&[3, 2], &mut rng),
        rand_tensor(&[2, 3, 4], &mut rng),
    ];
    push(
        "elementwise",
        grad_check(
            |g, v| {
                let t = g.tanh(v[0]);
                let s = g.sigmoid(v[0]);
                let m = g.mul(t, s)?;
                let c = g.concat(&[m, v[1]])?;
                let sl = g.slice_cols(c, 1, 4)?;
                let sm = g.softmax(sl);
                let sm = g.reshape(sm, &[2, 6])?;
                let sm = g.slice_cols(sm, 0, 3)?;
                let z = g.weighted_pool(v[2], sm)?;
                let r = g.relu(z);
                probe(g, r, 7)
            },
            &ins,
            Mode::Eval,
            0,
            None,
        )?,
    );

    let x = rand_tensor(&[4, 6], &mut rng);
    push(
        "dropout",
        grad_check(
            |g, v| {
                let y = g.dropout(v[0], 0.3);
                probe(g, y, 8)
            },
            &[x],
            Mode::Train,
            42,
            None,
        )?,
    );
    Ok(out)
}

fn random_batch(cfg: &ModelConfig, bags: usize, rng: &mut ChaCha8Rng) -> BatchInput {
    let n = cfg.accel_instances();
    BatchInput {
        bags,
        accel: Some(Tensor::from_fn(
            &[
                bags * n,
                cfg.spectrogram_time,
                cfg.spectrogram_bands,
                cfg.spectrogram_channels,
            ],
            |_| rng.random_range(-3.0..3.0),
        )),
        accel_instances: n,
        loc_seq: Some(Tensor::from_fn(&[bags, cfg.loc_steps, cfg.loc_features], |_| {
            rng.random_range(0.0..20.0)
        })),
        loc_scalars: Some(Tensor::from_fn(&[bags, cfg.loc_scalars], |_| {
            rng.random_range(0.0..1.0)
        })),
    }
}

/// Composed model plus loss in both modes, probing `coords` entries per
/// parameter tensor.
fn model_checks(coords: usize) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let cfg = ModelConfig::default();
    let mut model = Model::new(cfg.clone(), 19)?;
    // move batch-norm statistics and biases off their trivial init
    let ids: Vec<_> = model
        .store
        .entries()
        .filter(|(_, e)| e.name.ends_with("running_var") || e.name.ends_with("running_mean") || e.name.ends_with("/b"))
        .map(|(id, e)| (id, e.name.ends_with("running_var")))
        .collect();
    for (id, is_var) in ids {
        for v in model.store.get_mut(id).data_mut() {
            *v = if is_var {
                rng.random_range(0.5..2.0)
            } else {
                rng.random_range(-0.1..0.1)
            };
        }
    }
    let mut out = Vec::new();
    for (mode, bags, name) in [(Mode::Eval, 1, "fusion_mil/eval"), (Mode::Train, 4, "fusion_mil/train")] {
        let batch = random_batch(&cfg, bags, &mut rng);
        let labels: Vec<usize> = (0..bags).map(|b| (5 + 3 * b) % 8).collect();
        let r = grad_check_params(
            &model.store,
            |g, st| {
                let f = model.forward_with(g, st, &batch)?;
                let p = g.normalize_rows(f.probs);
                g.cce(p, &labels, LOG_EPS)
            },
            mode,
            3,
            Some(coords),
        )?;
        out.push(CheckResult {
            name: name.to_string(),
            report: r,
            tolerance: MODEL_TOLERANCE,
        });
    }
    Ok(out)
}

/// All layer checks and the full-model checks, with the elapsed time.
pub fn gradcheck_suite(model_coords: usize) -> Result<(Vec<CheckResult>, Duration)> {
    let t = Instant::now();
    let mut v = layer_checks()?;
    v.extend(model_checks(model_coords)?);
    Ok((v, t.elapsed()))
}
