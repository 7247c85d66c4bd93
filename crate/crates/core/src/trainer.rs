//! Adam optimizer and the training loop with an MSE warm start,
//! best-on-validation checkpointing and early stopping.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{WindowBatch, WindowSet, WindowedData, TARGET_CHANNELS};
use crate::error::{Error, Result};
use crate::forecaster::{encode_checkpoint, to_time_major, Model, UncertaintyMode};
use crate::harness::{evaluate_set, EvalReport};
use crate::objective::{spike_weights, total_objective, LossConfig, LossMode, LossReport};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs trained with the MSE-only objective before switching to the
    /// configured loss mode.
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub clip_norm: f64,
    pub eval_every: usize,
    /// Evaluations without validation RMSE improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_epochs: 10,
            seed: 0,
            clip_norm: 5.0,
            eval_every: 1,
            patience: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 || self.patience == 0 {
            return bad("train.epochs, batch_size, eval_every and patience must be >= 1".into());
        }
        if self.warmup_epochs > self.epochs {
            return bad(format!(
                "train.warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("train.learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("train.beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) || !(self.clip_norm >= 0.0) {
            return bad("train.eps must be > 0 and clip_norm >= 0".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState<T> {
    pub step: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One Adam update with bias correction. Gradients are clipped to the
/// configured global norm first. Returns the pre-clipping gradient norm.
/// Parameters without a gradient entry are left untouched.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<f64> {
    let mut sq = 0.0;
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
        sq += g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
    }
    let norm = sq.sqrt();
    let clip = match cfg.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powi(t));
    let c2 = T::lit(1.0 - cfg.beta2.powi(t));
    let (lr, eps, clip) = (T::lit(cfg.learning_rate), T::lit(cfg.eps), T::lit(clip));
    for (name, w) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(w.shape().to_vec()));
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(w.shape().to_vec()));
        for (((wi, &gi), mi), vi) in w
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gi = gi * clip;
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *wi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(norm)
}

/// Time-major targets and, when spike weighting is on, weights.
pub(crate) fn batch_targets(batch: &WindowBatch, cfg: &LossConfig) -> (Tensor<f64>, Option<Tensor<f64>>) {
    let y: Tensor<f64> = to_time_major(&batch.y).expect("rank-3 targets");
    if cfg.spike_alpha == 0.0 {
        return (y, None);
    }
    let (l, d) = (batch.lookback(), batch.x_env.shape()[2]);
    let last: Vec<f64> = (0..batch.size())
        .flat_map(|b| TARGET_CHANNELS.map(|c| batch.x_env.data()[(b * l + l - 1) * d + c]))
        .collect();
    let w = spike_weights(&batch.y, &last, cfg.spike_alpha, cfg.spike_tau);
    (y, Some(to_time_major(&w).expect("rank-3 weights")))
}

/// Loss and gradients of one batch.
pub fn batch_gradients(
    model: &Model,
    params: &ParamSet<f64>,
    batch: &WindowBatch,
    cfg: &LossConfig,
) -> Result<(LossReport, BTreeMap<String, Tensor<f64>>)> {
    let tape = Tape::new();
    let p = params.bind(&tape)?;
    let pass = model.forward(&tape, &p, &batch.x_env, &batch.x_act)?;
    let (y, w) = batch_targets(batch, cfg);
    let y = tape.constant(y);
    let w = w.map(|w| tape.constant(w));
    let obj = total_objective(&tape, &pass, y, w, cfg)?;
    let report = obj.report(&tape);
    if !report.total.is_finite() {
        return Ok((report, BTreeMap::new()));
    }
    let grads = tape.backward(obj.total)?.named();
    Ok((report, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: SplitName,
    pub mode: LossMode,
    pub loss: LossReport,
    /// Validation rows only.
    pub metrics: Option<EvalReport>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation loss.
    pub params: ParamSet<f64>,
    pub last_params: ParamSet<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// Wall-clock seconds per epoch, kept apart from the deterministic logs.
    pub epoch_seconds: Vec<f64>,
}

fn check_mode(model: &Model, cfg: &LossConfig) -> Result<()> {
    let want = match cfg.mode {
        LossMode::MseOnly => return Ok(()),
        LossMode::MseNllHomo => UncertaintyMode::Homo,
        LossMode::MseNllHetero => UncertaintyMode::Hetero,
    };
    if model.config().uncertainty != want {
        return Err(Error::Config(format!(
            "loss mode {} needs a {:?} uncertainty head",
            cfg.mode.as_str(),
            want
        )));
    }
    Ok(())
}

/// Mean over targets of validation RMSE divided by the target's training SD.
fn normalized_rmse(report: &EvalReport, set: &WindowSet) -> f64 {
    let n = set.normalizer();
    report
        .channels
        .iter()
        .enumerate()
        .map(|(k, c)| c.rmse / n.target_sd(k))
        .sum::<f64>()
        / report.channels.len() as f64
}

/// Trains from the initialization drawn with `cfg.seed`.
pub fn train(model: &Model, data: &WindowedData, cfg: &TrainConfig, loss: &LossConfig) -> Result<TrainOutcome> {
    let params = model.init_params::<f64>(cfg.seed);
    train_from(model, params, data, cfg, loss)
}

pub fn train_from(
    model: &Model,
    mut params: ParamSet<f64>,
    data: &WindowedData,
    cfg: &TrainConfig,
    loss: &LossConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss.validate()?;
    check_mode(model, loss)?;
    if data.train.is_empty() {
        return Err(Error::Config("training split has no windows".into()));
    }
    if data.val.is_empty() {
        return Err(Error::Config("validation split has no windows".into()));
    }
    let adam = cfg.adam();
    let mut state = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    let mut epoch_seconds = Vec::new();
    let mut best: Option<(f64, usize, ParamSet<f64>)> = None;
    let mut best_rmse = f64::INFINITY;
    let mut stale = 0;
    let mut stopped_early = false;
    let mut last_good = params.clone();
    let mut epochs_run = 0;

    for epoch in 0..cfg.epochs {
        let started = std::time::Instant::now();
        let warm = epoch < cfg.warmup_epochs;
        let active = if warm { loss.with_mode(LossMode::MseOnly) } else { loss.clone() };
        if epoch == cfg.warmup_epochs && epoch > 0 {
            // the objective changes scale here, so selection restarts
            best = None;
            best_rmse = f64::INFINITY;
            stale = 0;
        }

        order.shuffle(&mut rng);
        let mut sum = LossReport::default();
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.train.batch(chunk);
            let (report, grads) = batch_gradients(model, &params, &batch, &active)?;
            if !report.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    last_good: encode_checkpoint(model.config(), &last_good),
                });
            }
            adam_step(&mut params, &grads, &mut state, &adam)?;
            steps.push(StepRecord {
                step: steps.len(),
                epoch,
                loss: report,
            });
            sum.add_scaled(&report, chunk.len() as f64);
            seen += chunk.len();
        }
        let mut mean = LossReport::default();
        mean.add_scaled(&sum, 1.0 / seen as f64);
        epochs.push(EpochRecord {
            epoch,
            split: SplitName::Train,
            mode: active.mode,
            loss: mean,
            metrics: None,
        });
        epochs_run = epoch + 1;

        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            let (val_loss, preds) = evaluate_set(model, &params, &data.val, &active, cfg.batch_size)?;
            if !val_loss.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    last_good: encode_checkpoint(model.config(), &last_good),
                });
            }
            let metrics = preds.metrics()?;
            let rmse = normalized_rmse(&metrics, &data.val);
            epochs.push(EpochRecord {
                epoch,
                split: SplitName::Val,
                mode: active.mode,
                loss: val_loss,
                metrics: Some(metrics),
            });
            if best.as_ref().map_or(true, |(b, _, _)| val_loss.total < *b) {
                best = Some((val_loss.total, epoch, params.clone()));
            }
            if rmse < best_rmse {
                best_rmse = rmse;
                stale = 0;
            } else {
                stale += 1;
            }
            epoch_seconds.push(started.elapsed().as_secs_f64());
            last_good = params.clone();
            if !warm && stale >= cfg.patience {
                stopped_early = true;
                break;
            }
        } else {
            epoch_seconds.push(started.elapsed().as_secs_f64());
            last_good = params.clone();
        }
    }

    let (best_epoch, best_params) = match best {
        Some((_, e, p)) => (e, p),
        None => (epochs_run.saturating_sub(1), params.clone()),
    };
    Ok(TrainOutcome {
        params: best_params,
        last_params: params,
        best_epoch,
        epochs_run,
        stopped_early,
        epochs,
        steps,
        epoch_seconds,
    })
}

// ---- logs ------------------------------------------------------------------

pub const EPOCH_LOG_HEADER: &str = "epoch,split,mode,total,mse,nll,r_align,r_ind,r_div,mse_co2,mse_pm25,\
rmse_co2,mae_co2,r2_co2,rmse_pm25,mae_pm25,r2_pm25";
pub const STEP_LOG_HEADER: &str = "step,total,mse,nll,r_align,r_ind,r_div";

/// Writes `# `-prefixed header lines, e.g. a config echo.
pub fn write_comment_lines<W: Write>(out: &mut W, text: &str) -> std::io::Result<()> {
    for line in text.lines() {
        writeln!(out, "# {line}")?;
    }
    Ok(())
}

pub fn write_epoch_log<W: Write>(out: &mut W, records: &[EpochRecord], echo: &str) -> std::io::Result<()> {
    write_comment_lines(out, echo)?;
    writeln!(out, "{EPOCH_LOG_HEADER}")?;
    for r in records {
        let l = &r.loss;
        let split = match r.split {
            SplitName::Train => "train",
            SplitName::Val => "val",
        };
        write!(
            out,
            "{},{split},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.mode.as_str(),
            l.total,
            l.mse,
            l.nll,
            l.r_align,
            l.r_ind,
            l.r_div,
            l.mse_co2,
            l.mse_pm25
        )?;
        match &r.metrics {
            Some(m) => {
                for c in &m.channels {
                    write!(out, ",{},{},{}", c.rmse, c.mae, c.r2)?;
                }
                writeln!(out)?;
            }
            None => writeln!(out, ",,,,,,")?,
        }
    }
    Ok(())
}

pub fn write_step_log<W: Write>(out: &mut W, records: &[StepRecord]) -> std::io::Result<()> {
    writeln!(out, "{STEP_LOG_HEADER}")?;
    for r in records {
        let l = &r.loss;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step, l.total, l.mse, l.nll, l.r_align, l.r_ind, l.r_div
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::homo_nll;
    use rand::Rng;

    fn quadratic_grad(w: &ParamSet<f64>) -> BTreeMap<String, Tensor<f64>> {
        w.iter().map(|(n, t)| (n.to_string(), t.map(|v| 2.0 * v))).collect()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![1.0, -2.0]).unwrap());
        let before = p.clone();
        let grads = [("w".to_string(), Tensor::zeros(vec![2]))].into_iter().collect();
        let mut st = AdamState::new();
        adam_step(&mut p, &grads, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_has_learning_rate_magnitude() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![1.0]).unwrap());
        let cfg = AdamConfig {
            learning_rate: 0.1,
            clip_norm: None,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new();
        let g = quadratic_grad(&p);
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        let w = p.get("w").unwrap().data()[0];
        assert!((w - (1.0 - 0.1 / (1.0 + cfg.eps))).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_the_effective_gradient() {
        let cfg = AdamConfig {
            learning_rate: 0.1,
            clip_norm: Some(1.0),
            ..AdamConfig::default()
        };
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![100.0, 0.0]).unwrap());
        let mut st = AdamState::new();
        let g = quadratic_grad(&p);
        let norm = adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        assert_eq!(norm, 200.0);
        // the first Adam step is scale-free, so clipping only rescales moments
        assert!((p.get("w").unwrap().data()[0] - 99.9).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_the_leaf() {
        let mut p = ParamSet::new();
        p.insert("enc.w", Tensor::vector(vec![1.0]).unwrap());
        let grads = [("enc.w".to_string(), Tensor::vector(vec![f64::NAN]).unwrap())].into_iter().collect();
        let err = adam_step(&mut p, &grads, &mut AdamState::new(), &AdamConfig::default()).unwrap_err();
        assert!(matches!(&err, Error::NonFiniteGradient(n) if n == "enc.w"));
        assert_eq!(p.get("enc.w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = ParamSet::new();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            p.init_linear("w", 3, 4, &mut rng);
            let mut st = AdamState::new();
            for _ in 0..10 {
                let g = quadratic_grad(&p);
                adam_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
            let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(x), bits(y));
        }
    }

    /// The homoscedastic NLL in θ_k is minimized at ½·log(mean residual²).
    #[test]
    fn homo_theta_converges_to_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 200;
        let resid: Vec<f64> = (0..n * 2)
            .map(|i| rng.gen_range(-1.0..1.0) * if i % 2 == 0 { 0.5 } else { 3.0 })
            .collect();
        let y = Tensor::new(vec![n, 2], resid.clone()).unwrap();
        let mu = Tensor::zeros(vec![n, 2]);
        let target: Vec<f64> = (0..2)
            .map(|k| {
                let ms = (0..n).map(|i| resid[i * 2 + k].powi(2)).sum::<f64>() / n as f64;
                0.5 * ms.ln()
            })
            .collect();
        let mut p = ParamSet::new();
        p.insert("theta", Tensor::zeros(vec![2]));
        let cfg = AdamConfig {
            learning_rate: 0.05,
            clip_norm: None,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new();
        for _ in 0..2000 {
            let tape = Tape::new();
            let b = p.bind(&tape).unwrap();
            let loss = homo_nll(&tape, tape.constant(mu.clone()), b.var("theta"), tape.constant(y.clone())).unwrap();
            let g = tape.backward(loss).unwrap().named();
            adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        }
        let theta = p.get("theta").unwrap();
        for k in 0..2 {
            let rel = (theta.data()[k] - target[k]).abs() / target[k].abs();
            assert!(rel < 0.01, "θ_{k} = {} vs {}", theta.data()[k], target[k]);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            warmup_epochs: 60,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
