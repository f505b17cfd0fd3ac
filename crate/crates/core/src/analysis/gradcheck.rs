//! Central finite-difference gradient oracle and the per-block check suite.

use crate::blocks::{dpg_head_forward, rca_attention, rcm_forward, DpgParams, DpgShape, RcaVariant, RcmParams, RcmShape};
use crate::error::{Error, Result};
use crate::model::{model_forward, ModelConfig, ModelParams};
use crate::params::{Graph, ParamId, ParamKind, ParamStore};
use crate::rng::Rng;
use crate::tensor::ops::NormMode;
use crate::tensor::tape::{OpKind, Tape, Var};
use crate::tensor::{Dims, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
pub const REL_FLOOR: f64 = 1e-8;
pub const MIN_SAMPLES: usize = 20;
/// Fraction of a tensor's peak gradient below which a coordinate is not sampled.
pub const SIGNIFICANT: f64 = 1e-2;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst: usize,
    pub checked: usize,
}

/// Compares `analytic[i]` with `(f(θ + eps·e_i) − f(θ − eps·e_i)) / 2eps` for
/// each `i` in `coords` and returns the worst relative error.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    theta: &[f64],
    analytic: &[f64],
    coords: &[usize],
    eps: f64,
) -> Result<GradCheckReport> {
    let mut probe = theta.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: coords.first().copied().unwrap_or(0),
        checked: 0,
    };
    for &i in coords {
        probe[i] = theta[i] + eps;
        let plus = f(&probe)?;
        probe[i] = theta[i] - eps;
        let minus = f(&probe)?;
        probe[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Outcome for one block of the suite.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCheck {
    pub block: String,
    pub max_rel_error: f64,
    /// Parameter (or `input`) holding the worst coordinate, with its flat index.
    pub worst_param: String,
    pub samples: usize,
}

impl BlockCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Fills learnable params with `U(-0.5, 0.5)` and running variances with
/// `U(0.5, 1.5)`, so no branch is trivially zero.
pub fn randomize_store(store: &mut ParamStore, rng: &mut Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let entry = store.entry(id);
        let is_var = entry.name.ends_with("running_var");
        let is_buffer = entry.kind == ParamKind::Buffer;
        for v in store.value_mut(id).data_mut() {
            *v = match (is_buffer, is_var) {
                (true, true) => rng.uniform(0.5, 1.5),
                (true, false) => rng.uniform(-0.2, 0.2),
                _ => rng.uniform(-0.5, 0.5),
            };
        }
    }
}

/// Differentiable scalar probe: rebuilds a graph from `store` and `input`.
type Probe<'a> = dyn Fn(&mut Graph, Var) -> Result<Var> + 'a;

/// Checks gradients w.r.t. every learnable parameter and the input of a
/// scalar-valued `probe`, at `samples` coordinates chosen so that every
/// tensor is hit at least once.
fn check_probe(
    block: &str,
    store: &ParamStore,
    input: &Tensor,
    probe: &Probe<'_>,
    samples: usize,
    rng: &mut Rng,
    fault: Option<OpKind>,
) -> Result<BlockCheck> {
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.corrupt_backward(kind);
    }
    let mut g = Graph::with_tape(tape, store, NormMode::Eval);
    let x = g.input(input.clone());
    let loss = probe(&mut g, x)?;
    let grads = g.tape.backward(loss)?;

    // flat coordinate space: learnable params in registry order, then the input
    let mut slots: Vec<(String, Option<ParamId>, Var, usize)> = store
        .learnable_ids()
        .map(|id| (store.entry(id).name.clone(), Some(id), g.p(id), store.value(id).len()))
        .collect();
    slots.push(("input".into(), None, x, input.len()));
    let mut offsets = Vec::with_capacity(slots.len());
    let mut theta = Vec::new();
    let mut analytic = Vec::new();
    for (_, id, var, _) in &slots {
        offsets.push(theta.len());
        let value = match id {
            Some(id) => store.value(*id),
            None => input,
        };
        theta.extend_from_slice(value.data());
        analytic.extend_from_slice(grads.get(*var).data());
    }

    // Each tensor contributes its largest-gradient coordinate; extras are drawn
    // from coordinates within SIGNIFICANT of their tensor's peak. Coordinates
    // whose gradient is ~1e-7 of the loss drown in forward-pass roundoff at
    // this step size and say nothing about the backward rule.
    let mut coords = Vec::new();
    let mut pool = Vec::new();
    for ((_, _, _, len), &off) in slots.iter().zip(&offsets) {
        let slice = &analytic[off..off + len];
        let (peak_i, peak) = slice
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |(bi, bv), (i, v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) });
        coords.push(off + peak_i);
        pool.extend((0..*len).filter(|&i| slice[i].abs() >= SIGNIFICANT * peak).map(|i| off + i));
    }
    while coords.len() < samples && !pool.is_empty() {
        coords.push(pool[rng.range(0, pool.len())]);
    }

    let unflatten = |flat: &[f64]| -> Result<(ParamStore, Tensor)> {
        let mut s = store.clone();
        for ((_, id, _, len), &off) in slots.iter().zip(&offsets) {
            if let Some(id) = id {
                s.value_mut(*id).data_mut().copy_from_slice(&flat[off..off + len]);
            }
        }
        let (_, _, _, in_len) = slots.last().expect("input slot");
        let in_off = *offsets.last().expect("input slot");
        let inp = Tensor::from_vec(input.dims(), flat[in_off..in_off + in_len].to_vec())?;
        Ok((s, inp))
    };
    let f = |flat: &[f64]| -> Result<f64> {
        let (s, inp) = unflatten(flat)?;
        let mut g = Graph::new(&s, NormMode::Eval);
        let x = g.input(inp);
        let loss = probe(&mut g, x)?;
        Ok(g.value(loss).data()[0])
    };
    let report = grad_check(f, &theta, &analytic, &coords, DEFAULT_EPS)?;
    let slot = offsets.partition_point(|&o| o <= report.worst) - 1;
    Ok(BlockCheck {
        block: block.to_owned(),
        max_rel_error: report.max_rel_error,
        worst_param: format!("{}[{}]", slots[slot].0, report.worst - offsets[slot]),
        samples: report.checked,
    })
}

fn random_tensor(dims: Dims, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(dims, |_| rng.uniform(-1.0, 1.0))
}

/// `sum(out ⊙ weights)` with fixed random weights.
fn weighted_sum(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.input(weights.clone());
    let prod = g.tape.mul(out, w)?;
    g.tape.sum(prod)
}

fn rcm_fixture(rng: &mut Rng) -> Result<(ParamStore, RcmParams)> {
    let mut store = ParamStore::new();
    let shape = RcmShape {
        channels: 8,
        strip_kernel: 5,
        fusion_kernel: 3,
        mlp_ratio: 2,
    };
    let p = RcmParams::init(&mut store, "rcm", shape, rng)?;
    randomize_store(&mut store, rng);
    Ok((store, p))
}

/// Gradient suite over RCA, RCM (add and mul), the prototype head, and the
/// tiny end-to-end model. `fault` corrupts one op's backward to prove the
/// checker notices.
pub fn run_suite(seed: u64, samples: usize, fault: Option<OpKind>) -> Result<Vec<BlockCheck>> {
    let mut rng = Rng::new(seed);
    let samples = samples.max(MIN_SAMPLES);
    let mut out = Vec::new();

    let dims = [1, 8, 6, 6];
    {
        let (store, p) = rcm_fixture(&mut rng)?;
        let x = random_tensor(dims, &mut rng);
        let w = random_tensor(dims, &mut rng);
        let probe = |g: &mut Graph, x: Var| {
            let a = rca_attention(g, &p, x, RcaVariant::Add)?;
            weighted_sum(g, a, &w)
        };
        out.push(check_probe("rca", &store, &x, &probe, samples, &mut rng, fault)?);
    }
    for (name, variant) in [("rcm.add", RcaVariant::Add), ("rcm.mul", RcaVariant::Mul)] {
        let (store, p) = rcm_fixture(&mut rng)?;
        let x = random_tensor(dims, &mut rng);
        let w = random_tensor(dims, &mut rng);
        let probe = |g: &mut Graph, x: Var| {
            let o = rcm_forward(g, &p, x, variant)?;
            weighted_sum(g, o.out, &w)
        };
        out.push(check_probe(name, &store, &x, &probe, samples, &mut rng, fault)?);
    }
    {
        let mut store = ParamStore::new();
        let shape = DpgShape {
            width: 8,
            hidden: 4,
            classes: 4,
        };
        let p = DpgParams::init(&mut store, "head", shape, &mut rng)?;
        randomize_store(&mut store, &mut rng);
        let x = random_tensor([2, 8, 6, 6], &mut rng);
        let w = random_tensor([2, 4, 6, 6], &mut rng);
        let probe = |g: &mut Graph, x: Var| {
            let l = dpg_head_forward(g, &p, x)?;
            weighted_sum(g, l, &w)
        };
        out.push(check_probe("dpg_head", &store, &x, &probe, samples, &mut rng, fault)?);
    }
    {
        let cfg = ModelConfig {
            input_size: [64, 64],
            ..ModelConfig::default()
        };
        let mut params = ModelParams::init(&cfg, rng.next_u64())?;
        randomize_store(&mut params.store, &mut rng);
        let [h, w] = cfg.input_size;
        let img = Tensor::from_fn([1, cfg.in_channels, h, w], |_| rng.next_f64());
        let labels: Vec<usize> = (0..h * w).map(|_| rng.range(0, cfg.num_classes)).collect();
        let store = params.store.clone();
        let probe = |g: &mut Graph, x: Var| {
            let trace = model_forward(g, &params, x)?;
            g.tape.cross_entropy(trace.logits, &labels)
        };
        out.push(check_probe("model", &store, &img, &probe, samples, &mut rng, fault)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_probe_is_exact() {
        let theta = vec![1.5, -2.25, 0.75, 1.0];
        let analytic: Vec<f64> = theta.iter().map(|t| 2.0 * t).collect();
        let coords: Vec<usize> = (0..4).collect();
        let r = grad_check(|t| Ok(t.iter().map(|v| v * v).sum()), &theta, &analytic, &coords, DEFAULT_EPS).unwrap();
        assert!(r.max_rel_error <= 1e-10, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let theta = vec![1.0, 2.0];
        let coords = [0, 1];
        let r = grad_check(|t| Ok(t[0] * t[1]), &theta, &[4.0, 1.0], &coords, DEFAULT_EPS).unwrap();
        assert!(r.max_rel_error > 0.4);
        assert_eq!(r.worst, 0);
    }

    #[test]
    fn non_finite_probe_errors() {
        let r = grad_check(|t| Ok((t[0] - 1.0).ln()), &[1.0], &[0.0], &[0], DEFAULT_EPS);
        assert!(r.is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-18);
    }
}
