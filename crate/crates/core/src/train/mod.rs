//! Toy segmentation training: synthetic shapes, SGD with momentum, poly decay.

mod data;
mod metrics;
mod optim;

pub use data::{collate, gen_toy_sample, Mask, ShapeKind, ToySample, BACKGROUND, MAX_SIDE, MIN_SIDE, SHAPE_COLORS, SHAPE_NOISE};
pub use metrics::{miou, Confusion, MiouReport};
pub use optim::{clip_grad_norm, poly_lr, sgd_update, Sgd};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{attention_map, model_forward, predict, ModelConfig, ModelParams};
use crate::params::Graph;
use crate::rng::Rng;
use crate::tensor::ops::NormMode;
use crate::tensor::Tensor;

/// Salt separating the held-out stream from the training stream.
const HELDOUT_SALT: u64 = 0x5EED_0F_E7A1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    /// Rescales the full gradient to this global L2 norm when it is larger.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Held-out evaluation every this many steps (and after the last one).
    pub eval_interval: usize,
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 4,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 1.0,
            grad_clip: Some(1.0),
            seed: 0,
            eval_interval: 250,
            eval_samples: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return err("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err("momentum must be in [0, 1)");
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return err("weight_decay must be non-negative");
        }
        if self.poly_power <= 0.0 || !self.poly_power.is_finite() {
            return err("poly_power must be positive");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return err("grad_clip must be positive");
            }
        }
        if self.eval_interval == 0 || self.eval_samples == 0 {
            return err("eval_interval and eval_samples must be positive");
        }
        Ok(())
    }
}

/// Fixed held-out samples for a seed, disjoint from the training stream.
pub fn heldout_set(seed: u64, count: usize, mcfg: &ModelConfig) -> Result<Vec<ToySample>> {
    let mut rng = Rng::new(seed ^ HELDOUT_SALT);
    let [h, w] = mcfg.input_size;
    (0..count)
        .map(|i| gen_toy_sample(&mut rng.fork(i as u64), h, w, mcfg.num_classes))
        .collect()
}

/// mIoU over a sample set, with counts aggregated before taking ratios.
pub fn evaluate(params: &ModelParams, samples: &[ToySample]) -> Result<f64> {
    let mut conf = Confusion::new(params.config.num_classes);
    for s in samples {
        conf.add(&predict(params, &s.image)?, &s.mask.labels)?;
    }
    Ok(conf.miou())
}

/// Mean raw attention of `stage` inside and outside the foreground, each
/// averaged over samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionFocus {
    pub inside: f64,
    pub outside: f64,
}

impl AttentionFocus {
    pub fn ratio(&self) -> f64 {
        self.inside / self.outside
    }
}

pub fn attention_focus(params: &ModelParams, samples: &[ToySample], stage: &str) -> Result<AttentionFocus> {
    let (mut inside, mut outside, mut used) = (0.0, 0.0, 0usize);
    for s in samples {
        let map = attention_map(params, &s.image, stage, false)?;
        let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
        for (&a, &l) in map.data().iter().zip(&s.mask.labels) {
            if l != 0 {
                si += a;
                ni += 1;
            } else {
                so += a;
                no += 1;
            }
        }
        if ni > 0 && no > 0 {
            inside += si / ni as f64;
            outside += so / no as f64;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::InvalidArgument("no sample has both foreground and background".into()));
    }
    Ok(AttentionFocus {
        inside: inside / used as f64,
        outside: outside / used as f64,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// `step=<int> lr=<float> loss=<float> [miou=<float>]`, one per step.
    pub log: Vec<String>,
    pub final_miou: f64,
}

pub fn train_toy(cfg: &TrainConfig, mcfg: &ModelConfig) -> Result<TrainOutcome> {
    train_toy_with(cfg, mcfg, |_| {})
}

/// As [`train_toy`], handing each log line to `on_line` as it is produced.
pub fn train_toy_with(cfg: &TrainConfig, mcfg: &ModelConfig, mut on_line: impl FnMut(&str)) -> Result<TrainOutcome> {
    cfg.validate()?;
    mcfg.validate()?;
    let mut root = Rng::new(cfg.seed);
    let mut params = ModelParams::init(mcfg, root.next_u64())?;
    let mut data_rng = root.fork(1);
    let heldout = heldout_set(cfg.seed, cfg.eval_samples, mcfg)?;
    let [h, w] = mcfg.input_size;
    let mut sgd = Sgd::new(&params.store, cfg.momentum, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut last_miou = None;

    for step in 0..cfg.steps {
        let lr = poly_lr(cfg.lr, step, cfg.steps, cfg.poly_power);
        let batch: Vec<ToySample> = (0..cfg.batch_size)
            .map(|_| gen_toy_sample(&mut data_rng, h, w, mcfg.num_classes))
            .collect::<Result<_>>()?;
        let (images, labels) = collate(&batch)?;

        let diverged = |e: Error| if e.is_numerical() { Error::Diverged { step, loss: f64::NAN } } else { e };
        let mut g = Graph::new(&params.store, NormMode::Train);
        let x = g.input(images);
        let trace = model_forward(&mut g, &params, x).map_err(diverged)?;
        let loss_var = g.tape.cross_entropy(trace.logits, &labels).map_err(diverged)?;
        let loss = g.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let grads = g.tape.backward(loss_var).map_err(diverged)?;
        let mut grads: Vec<Tensor> = sgd.ids().iter().map(|&id| grads.get(g.p(id))).collect();
        if let Some(max_norm) = cfg.grad_clip {
            clip_grad_norm(&mut grads, max_norm);
        }
        sgd.step(&mut params.store, &grads, lr)?;
        params.store.apply_running_stats(&g);

        let mut line = format!("step={step} lr={lr:.8} loss={loss:.6}");
        if (step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.steps {
            let m = evaluate(&params, &heldout).map_err(diverged)?;
            line.push_str(&format!(" miou={m:.6}"));
            last_miou = Some(m);
        }
        on_line(&line);
        log.push(line);
    }

    let final_miou = match last_miou {
        Some(m) => m,
        None => evaluate(&params, &heldout)?,
    };
    Ok(TrainOutcome { params, log, final_miou })
}
