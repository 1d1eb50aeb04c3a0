//! Adam optimization with linear warmup and cosine decay, batch-1
//! training with optional gradient accumulation, periodic evaluation,
//! and best-PLCC checkpoint retention.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::DatasetRecord;
use crate::error::{Error, Result};
use crate::head::cross_entropy_var;
use crate::metrics;
use crate::model::{save_checkpoint, Model};
use crate::numerics::{SharedTensor, Tape};
use crate::seeds::subseed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub finetune_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Gradient accumulation window A; an optimizer step applies the
    /// mean gradient of A consecutive records.
    pub grad_accum: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            base_lr: 5e-5,
            finetune_lr: 1e-6,
            warmup_fraction: 0.1,
            total_steps: 300,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            seed: 0,
            eval_every: 50,
            grad_accum: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Param(format!(
                "warmup_fraction {} outside (0, 1)",
                self.warmup_fraction
            )));
        }
        if self.base_lr <= 0.0 || self.finetune_lr <= 0.0 {
            return Err(Error::Param("learning rates must be positive".into()));
        }
        if self.total_steps == 0 || self.eval_every == 0 || self.grad_accum == 0 {
            return Err(Error::Param(
                "total_steps, eval_every, grad_accum must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr` over W = round(f·T) steps, then cosine
/// decay to zero at T.
pub fn lr_at_step(step: usize, peak_lr: f64, config: &TrainConfig) -> f64 {
    let t = config.total_steps;
    let w = ((config.warmup_fraction * t as f64).round() as usize).max(1);
    if step <= w {
        peak_lr * step as f64 / w as f64
    } else {
        peak_lr * 0.5 * (1.0 + (PI * (step - w) as f64 / (t - w) as f64).cos())
    }
}

/// Per-parameter Adam moment buffers.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: usize,
}

impl AdamState {
    pub fn new(params: &[SharedTensor]) -> AdamState {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.borrow().numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.borrow().numel()]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update from the gradients currently stored
/// on the parameters. Gradients are left untouched (callers zero them).
pub fn adam_step(
    params: &[SharedTensor],
    state: &mut AdamState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - config.beta1.powf(t);
    let bc2 = 1.0 - config.beta2.powf(t);
    for (i, p) in params.iter().enumerate() {
        let mut p = p.borrow_mut();
        let grad = p
            .grad
            .take()
            .unwrap_or_else(|| vec![0.0; p.numel()]);
        if grad.iter().any(|g| !g.is_finite()) {
            p.grad = Some(grad);
            return Err(Error::Numeric(format!(
                "non-finite gradient at parameter {i}, step {}",
                state.step
            )));
        }
        for (j, g) in grad.iter().enumerate() {
            let m = &mut state.m[i][j];
            let v = &mut state.v[i][j];
            *m = config.beta1 * *m + (1.0 - config.beta1) * g;
            *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            p.data[j] -= lr * m_hat / (v_hat.sqrt() + config.eps_adam);
        }
        p.grad = Some(grad);
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub loss: f64,
    pub plcc: f64,
    pub srocc: f64,
    pub rmse: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EvalPoint>,
    pub best_step: usize,
    pub best_plcc: f64,
    pub checkpoint: PathBuf,
    pub final_loss: f64,
}

/// Mean CE loss plus correlation metrics of predicted vs target MOS
/// over a record set (inference mode, deterministic).
pub fn evaluate(model: &Model, records: &[DatasetRecord]) -> Result<(f64, f64, f64, f64)> {
    if records.is_empty() {
        return Err(Error::Param("empty evaluation set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut loss_sum = 0.0;
    let mut pred = Vec::with_capacity(records.len());
    let mut truth = Vec::with_capacity(records.len());
    for rec in records {
        let image = crate::dataio::load_image(&rec.image_ref)?;
        let target = rec.target_distribution()?;
        let mut tape = Tape::new();
        let out = model.forward_image(&mut tape, &image, false, &mut rng)?;
        loss_sum += crate::head::cross_entropy(&out.distribution, &target);
        pred.push(out.mos);
        truth.push(crate::head::mos_from_distribution(&target)?);
    }
    let loss = loss_sum / records.len() as f64;
    let rmse = metrics::rmse(&pred, &truth)?;
    // constant predictions (e.g. a fresh zero-init head) have undefined
    // correlation; report 0 so early evals don't abort training
    let plcc = metrics::plcc(&pred, &truth).unwrap_or(0.0);
    let srocc = metrics::srocc(&pred, &truth).unwrap_or(0.0);
    Ok((loss, plcc, srocc, rmse))
}

fn run_loop(
    model: &Model,
    train_set: &[DatasetRecord],
    eval_set: &[DatasetRecord],
    config: &TrainConfig,
    peak_lr: f64,
    out_path: &Path,
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(Error::Param("empty dataset".into()));
    }
    let named = model.params();
    let params: Vec<SharedTensor> = named.iter().map(|(_, p)| p.clone()).collect();
    let mut state = AdamState::new(&params);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(subseed(config.seed, "dropout"));
    let mut history = Vec::new();
    let mut best_plcc = f64::NEG_INFINITY;
    let mut best_step = 0;
    let mut last_loss = f64::NAN;
    let mut cursor = 0usize;

    // preload once: desk-scale sets fit in memory and reloading PNGs
    // per step dominates runtime otherwise
    let mut cache = Vec::with_capacity(train_set.len());
    for rec in train_set {
        cache.push((crate::dataio::load_image(&rec.image_ref)?, rec.target_distribution()?));
    }
    // manifests are often grouped by source or quality level; a seeded
    // shuffle keeps accumulated gradients from seeing one class at a time
    {
        let mut order_rng = ChaCha8Rng::seed_from_u64(subseed(config.seed, "order"));
        for i in (1..cache.len()).rev() {
            let j = order_rng.gen_range(0..=i);
            cache.swap(i, j);
        }
    }

    for step in 1..=config.total_steps {
        for p in &params {
            p.borrow_mut().zero_grad();
        }
        let mut step_loss = 0.0;
        for _ in 0..config.grad_accum {
            let (image, target) = &cache[cursor];
            cursor = (cursor + 1) % cache.len();
            let mut tape = Tape::new();
            let out = model.forward_image(&mut tape, image, true, &mut dropout_rng)?;
            let ce = cross_entropy_var(&mut tape, out.dist_var, target)?;
            let scaled = tape.scale(ce, 1.0 / config.grad_accum as f64);
            let loss_val = tape.data(ce)[0];
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss_val} at step {step}"
                )));
            }
            step_loss += loss_val / config.grad_accum as f64;
            tape.backward(scaled)?;
        }
        last_loss = step_loss;
        let lr = lr_at_step(step, peak_lr, config);
        adam_step(&params, &mut state, lr, config)?;

        if step % config.eval_every == 0 || step == config.total_steps {
            let (eval_loss, plcc, srocc, rmse) = evaluate(model, eval_set)?;
            history.push(EvalPoint {
                step,
                loss: eval_loss,
                plcc,
                srocc,
                rmse,
            });
            if plcc > best_plcc {
                best_plcc = plcc;
                best_step = step;
                let meta = serde_json::json!({
                    "step": step,
                    "plcc": plcc,
                    "srocc": srocc,
                    "rmse": rmse,
                    "config": config,
                });
                save_checkpoint(model, meta, out_path)?;
            }
        }
    }
    Ok(TrainReport {
        history,
        best_step,
        best_plcc,
        checkpoint: out_path.to_path_buf(),
        final_loss: last_loss,
    })
}

/// Pretraining phase: schedule peaks at `base_lr`.
pub fn train(
    model: &Model,
    train_set: &[DatasetRecord],
    eval_set: &[DatasetRecord],
    config: &TrainConfig,
    out_path: &Path,
) -> Result<TrainReport> {
    run_loop(model, train_set, eval_set, config, config.base_lr, out_path)
}

/// Finetuning phase: same loop with a fresh schedule peaking at
/// `finetune_lr`. Call with the model loaded from the pretrain best
/// checkpoint.
pub fn finetune(
    model: &Model,
    train_set: &[DatasetRecord],
    eval_set: &[DatasetRecord],
    config: &TrainConfig,
    out_path: &Path,
) -> Result<TrainReport> {
    run_loop(
        model,
        train_set,
        eval_set,
        config,
        config.finetune_lr,
        out_path,
    )
}

/// Write the per-eval history as CSV.
pub fn save_report_csv(report: &TrainReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| {
        Error::io(path, std::io::Error::other(e.to_string()))
    })?;
    w.write_record(["step", "loss", "plcc", "srocc", "rmse"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for p in &report.history {
        w.write_record([
            p.step.to_string(),
            format!("{:.6}", p.loss),
            format!("{:.6}", p.plcc),
            format!("{:.6}", p.srocc),
            format!("{:.6}", p.rmse),
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{shared, Tensor};
    use approx::assert_relative_eq;

    fn cfg(total: usize) -> TrainConfig {
        TrainConfig {
            total_steps: total,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_hits_peak_and_endpoints() {
        let c = cfg(100);
        let w = 10;
        assert_relative_eq!(lr_at_step(w, 5e-5, &c), 5e-5);
        assert_relative_eq!(lr_at_step(c.total_steps, 5e-5, &c), 0.0, epsilon = 1e-20);
        // cos(pi/2) midpoint
        assert_relative_eq!(lr_at_step(w + 45, 5e-5, &c), 2.5e-5, epsilon = 1e-12);
        // warmup is linear
        assert_relative_eq!(lr_at_step(5, 5e-5, &c), 2.5e-5);
    }

    #[test]
    fn schedule_is_continuous_and_nonnegative() {
        let c = cfg(73);
        let mut prev = 0.0;
        for step in 0..=c.total_steps {
            let lr = lr_at_step(step, 1e-3, &c);
            assert!(lr >= 0.0);
            assert!((lr - prev).abs() < 1e-3 * 0.2, "jump at {step}");
            prev = lr;
        }
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let p = shared(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap().requires_grad());
        p.borrow_mut().grad = Some(vec![3.0, -0.25]);
        let c = TrainConfig::default();
        let mut state = AdamState::new(&[p.clone()]);
        adam_step(&[p.clone()], &mut state, 0.01, &c).unwrap();
        // bias-corrected m̂/√v̂ = g/|g| up to eps
        let d = &p.borrow().data;
        assert_relative_eq!(d[0], 1.0 - 0.01, epsilon = 1e-6);
        assert_relative_eq!(d[1], -1.0 + 0.01, epsilon = 1e-6);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let p = shared(Tensor::new(vec![2], vec![4.0, 5.0]).unwrap().requires_grad());
        p.borrow_mut().grad = Some(vec![0.0, 0.0]);
        let c = TrainConfig::default();
        let mut state = AdamState::new(&[p.clone()]);
        adam_step(&[p.clone()], &mut state, 0.01, &c).unwrap();
        assert_eq!(p.borrow().data, vec![4.0, 5.0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let p = shared(Tensor::new(vec![1], vec![1.0]).unwrap().requires_grad());
        p.borrow_mut().grad = Some(vec![f64::NAN]);
        let c = TrainConfig::default();
        let mut state = AdamState::new(&[p.clone()]);
        assert!(adam_step(&[p.clone()], &mut state, 0.01, &c).is_err());
        assert_eq!(p.borrow().data, vec![1.0]);
    }

    #[test]
    fn adam_constant_gradient_converges_to_lr_delta() {
        // with eps 0 and a constant gradient the per-step delta tends
        // to exactly -lr
        let p = shared(Tensor::new(vec![1], vec![0.0]).unwrap().requires_grad());
        let c = TrainConfig {
            eps_adam: 0.0,
            ..TrainConfig::default()
        };
        let mut state = AdamState::new(&[p.clone()]);
        let mut prev = 0.0;
        let mut delta = 0.0;
        for _ in 0..500 {
            p.borrow_mut().grad = Some(vec![2.5]);
            adam_step(&[p.clone()], &mut state, 0.01, &c).unwrap();
            let cur = p.borrow().data[0];
            delta = cur - prev;
            prev = cur;
        }
        assert_relative_eq!(delta, -0.01, epsilon = 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            warmup_fraction: 0.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            grad_accum: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }
}
