//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Mode, Var};
use super::params::{EntryKind, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Step for unit-scaled inputs; scaled by `max(1, |x|)`.
pub const FD_STEP: f64 = 1e-5;

/// Gradients below this magnitude are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-5;

/// Times the step is divided by ten when the two probes straddle a kink.
const MAX_SHRINK: usize = 3;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates left out because every step straddled a kink
    /// (ReLU switch, pooling winner change, CCE clamp).
    pub kinked: usize,
    /// Location of the worst coordinate (tensor name or input index, flat offset).
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric gradient at the worst coordinate.
    pub worst_values: (f64, f64),
}

impl GradCheckReport {
    fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((name.to_string(), idx));
            self.worst_values = (analytic, numeric);
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

fn scalar_of(g: &Graph, v: Var) -> Result<(f64, u64)> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::shape("gradient check needs a scalar function"));
    }
    Ok((t.item(), g.kink_signature()))
}

/// Central difference of `eval` around coordinate value `x0`, shrinking the
/// step until both probes share the base point's branch pattern. `None` if
/// no step up to the shrink limit stays on one smooth piece.
fn central_difference(x0: f64, base: u64, mut eval: impl FnMut(f64) -> Result<(f64, u64)>) -> Result<Option<f64>> {
    let mut h = FD_STEP * x0.abs().max(1.0);
    for _ in 0..=MAX_SHRINK {
        let (fp, sp) = eval(x0 + h)?;
        let (fm, sm) = eval(x0 - h)?;
        if sp == base && sm == base {
            return Ok(Some((fp - fm) / (2.0 * h)));
        }
        h /= 10.0;
    }
    Ok(None)
}

fn pick(len: usize, max: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match max {
        Some(m) if m < len => {
            let mut v = sample(rng, len, m).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

/// Compare the tape gradient of scalar `f` with respect to each input tensor
/// against central differences. At most `max_coords` coordinates per input
/// are probed (all when `None`). `graph_seed` fixes dropout masks so every
/// evaluation sees the same function.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor],
    mode: Mode,
    graph_seed: u64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor]| -> Result<(f64, u64)> {
        let mut g = Graph::new(mode, graph_seed);
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };
    let mut g = Graph::new(mode, graph_seed);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let (_, base) = scalar_of(&g, out)?;
    g.backward(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(graph_seed ^ 0x9e37_79b9);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for idx in pick(inputs[k].len(), max_coords, &mut rng) {
            let x0 = inputs[k].data()[idx];
            let numeric = central_difference(x0, base, |x| {
                work[k].data_mut()[idx] = x;
                eval(&work)
            })?;
            work[k].data_mut()[idx] = x0;
            match numeric {
                Some(n) => report.record(&format!("input{k}"), idx, analytic[idx], n),
                None => report.kinked += 1,
            }
        }
    }
    Ok(report)
}

/// Finite-difference check of parameter gradients for a model-level scalar
/// `f`. Probes up to `coords_per_entry` coordinates of every trainable,
/// unfrozen entry.
pub fn grad_check_params<F>(
    store: &ParamStore,
    f: F,
    mode: Mode,
    graph_seed: u64,
    coords_per_entry: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new(mode, graph_seed);
    let out = f(&mut g, store)?;
    let (_, base) = scalar_of(&g, out)?;
    g.backward(out)?;
    let mut analytic: std::collections::BTreeMap<_, Vec<f64>> = Default::default();
    for (id, grad) in g.param_grads() {
        let e = analytic.entry(id).or_insert_with(|| vec![0.0; grad.len()]);
        e.iter_mut().zip(grad).for_each(|(a, b)| *a += b);
    }
    drop(g);
    let mut rng = ChaCha8Rng::seed_from_u64(graph_seed ^ 0x51f1_5eed);
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store
        .entries()
        .filter(|(_, e)| e.kind == EntryKind::Trainable && !e.frozen)
        .map(|(id, e)| (id, e.name.clone(), e.value.len()))
        .collect();
    for (id, name, len) in ids {
        let zeros = vec![0.0; len];
        let an = analytic.get(&id).unwrap_or(&zeros);
        for idx in pick(len, coords_per_entry, &mut rng) {
            let x0 = store.get(id).data()[idx];
            let numeric = central_difference(x0, base, |x| {
                work.get_mut(id).data_mut()[idx] = x;
                let mut g = Graph::new(mode, graph_seed);
                let v = f(&mut g, &work)?;
                scalar_of(&g, v)
            })?;
            work.get_mut(id).data_mut()[idx] = x0;
            match numeric {
                Some(n) => report.record(&name, idx, an[idx], n),
                None => report.kinked += 1,
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[17], |_| rng.random_range(-2.0..2.0));
        let report = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[x],
            Mode::Eval,
            0,
            None,
        )
        .unwrap();
        assert_eq!(report.checked, 17);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }
}
