//! Evaluation layer: metrics, experiment runs, ablation matrices, horizon
//! sweeps and open-loop rollout.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{
    make_windows, DatasetConfig, EmbeddingProvider, Normalizer, Series, WindowSet, ENV_CHANNELS, TARGET_CHANNELS,
};
use crate::error::{Error, Result};
use crate::forecaster::{from_time_major, Model, ModelConfig, UncertaintyMode, Variant, TARGETS};
use crate::objective::{total_objective, LossConfig, LossMode, LossReport};
use crate::params::ParamSet;
use crate::tensor::{Tape, Tensor};
use crate::trainer::{batch_targets, train, TrainConfig, TrainOutcome};

pub const TARGET_NAMES: [&str; 2] = ["co2", "pm25"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    pub r2: f64,
}

/// Pooled per-channel metrics in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub channels: Vec<ChannelMetrics>,
}

impl EvalReport {
    pub fn co2(&self) -> &ChannelMetrics {
        &self.channels[0]
    }

    pub fn pm25(&self) -> &ChannelMetrics {
        &self.channels[1]
    }
}

/// Metrics over `N × K` row-major arrays. R² needs a non-constant truth in
/// every channel.
pub fn metrics(y_true: &[f64], y_pred: &[f64], k: usize) -> Result<EvalReport> {
    if k == 0 || y_true.len() != y_pred.len() || y_true.len() % k != 0 {
        return Err(Error::Metric(format!(
            "shape mismatch: {} true vs {} predicted values for {k} channels",
            y_true.len(),
            y_pred.len()
        )));
    }
    let n = y_true.len() / k;
    if n < 2 {
        return Err(Error::Metric(format!("need at least 2 samples, got {n}")));
    }
    let mut channels = Vec::with_capacity(k);
    for c in 0..k {
        let col = |v: &[f64]| v.iter().skip(c).step_by(k).copied().collect::<Vec<_>>();
        let (t, p) = (col(y_true), col(y_pred));
        let mean = t.iter().sum::<f64>() / n as f64;
        let ss_tot: f64 = t.iter().map(|v| (v - mean) * (v - mean)).sum();
        if ss_tot == 0.0 {
            return Err(Error::Metric(format!("channel {c} has constant truth; R² undefined")));
        }
        let ss_res: f64 = t.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum();
        let mae = t.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
        let mse = ss_res / n as f64;
        channels.push(ChannelMetrics {
            mse,
            rmse: mse.sqrt(),
            mae,
            r2: 1.0 - ss_res / ss_tot,
        });
    }
    Ok(EvalReport { n, channels })
}

/// Predictions over a window set, flattened window by window and step by
/// step, each row holding the two targets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Predictions {
    pub timestamps: Vec<i64>,
    pub y_true: Vec<f64>,
    pub y_pred: Vec<f64>,
    pub sigma: Vec<f64>,
}

pub const PREDICTION_HEADER: &str = "timestamp,y_true_co2,y_pred_co2,y_sigma_co2,y_true_pm25,y_pred_pm25,y_sigma_pm25";

impl Predictions {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn metrics(&self) -> Result<EvalReport> {
        metrics(&self.y_true, &self.y_pred, TARGETS)
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "{PREDICTION_HEADER}")?;
        for i in 0..self.len() {
            let at = |v: &[f64], k: usize| v[i * TARGETS + k];
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.timestamps[i],
                at(&self.y_true, 0),
                at(&self.y_pred, 0),
                at(&self.sigma, 0),
                at(&self.y_true, 1),
                at(&self.y_pred, 1),
                at(&self.sigma, 1)
            )?;
        }
        Ok(())
    }
}

/// Loss averaged over windows and physical-unit predictions for a set.
pub fn evaluate_set(
    model: &Model,
    params: &ParamSet<f64>,
    set: &WindowSet,
    loss: &LossConfig,
    batch_size: usize,
) -> Result<(LossReport, Predictions)> {
    let mut total = LossReport::default();
    let mut preds = Predictions::default();
    let order: Vec<usize> = (0..set.len()).collect();
    let norm = set.normalizer();
    for chunk in order.chunks(batch_size.max(1)) {
        let batch = set.batch(chunk);
        let tape = Tape::new();
        let p = params.bind(&tape)?;
        let pass = model.forward(&tape, &p, &batch.x_env, &batch.x_act)?;
        let (y, w) = batch_targets(&batch, loss);
        let y = tape.constant(y);
        let w = w.map(|w| tape.constant(w));
        let obj = total_objective(&tape, &pass, y, w, loss)?;
        total.add_scaled(&obj.report(&tape), chunk.len() as f64);

        let mu = from_time_major(&tape.value(pass.mu), pass.batch);
        let ls = from_time_major(&tape.value(pass.log_sigma), pass.batch);
        preds.timestamps.extend_from_slice(&batch.target_timestamps);
        for (i, (&m, &s)) in mu.data().iter().zip(ls.data()).enumerate() {
            let k = i % TARGETS;
            preds.y_pred.push(norm.target_inverse(k, m));
            preds.sigma.push(s.exp() * norm.target_sd(k));
            preds.y_true.push(norm.target_inverse(k, batch.y.data()[i]));
        }
    }
    let mut mean = LossReport::default();
    mean.add_scaled(&total, 1.0 / set.len().max(1) as f64);
    Ok((mean, preds))
}

/// Everything needed to train and evaluate one configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Experiment {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Experiment {
    /// Copies window sizes and the embedding width into the model config
    /// and aligns the uncertainty head with the loss mode.
    pub fn resolved(&self, provider: &EmbeddingProvider) -> Self {
        let mut e = self.clone();
        e.model.lookback = e.dataset.lookback;
        e.model.horizon = e.dataset.horizon;
        e.model.d_env = ENV_CHANNELS.len();
        e.model.d_act = provider.dim();
        match e.loss.mode {
            LossMode::MseNllHomo => e.model.uncertainty = UncertaintyMode::Homo,
            LossMode::MseNllHetero => e.model.uncertainty = UncertaintyMode::Hetero,
            LossMode::MseOnly => {}
        }
        e
    }

    pub fn echo(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub experiment: Experiment,
    pub model: Model,
    pub outcome: TrainOutcome,
    pub val: EvalReport,
    pub test: EvalReport,
    pub test_predictions: Predictions,
    pub normalizer: Normalizer,
}

/// Trains on the training split, selects on validation, and reports on test.
pub fn run_experiment(series: &Series, provider: &EmbeddingProvider, exp: &Experiment) -> Result<ExperimentResult> {
    let exp = exp.resolved(provider);
    let data = make_windows(series, provider, &exp.dataset)?;
    if data.test.is_empty() {
        return Err(Error::Config("test split has no windows".into()));
    }
    let model = Model::new(exp.model.clone())?;
    let outcome = train(&model, &data, &exp.train, &exp.loss)?;
    let bs = exp.train.batch_size;
    let (_, val_preds) = evaluate_set(&model, &outcome.params, &data.val, &exp.loss, bs)?;
    let (_, test_predictions) = evaluate_set(&model, &outcome.params, &data.test, &exp.loss, bs)?;
    Ok(ExperimentResult {
        val: val_preds.metrics()?,
        test: test_predictions.metrics()?,
        normalizer: (*data.normalizer).clone(),
        experiment: exp,
        model,
        outcome,
        test_predictions,
    })
}

// ---- report tables ---------------------------------------------------------

pub const REPORT_HEADER: &str = "row,status,co2_rmse,co2_mae,co2_r2,co2_mse,pm25_rmse,pm25_mae,pm25_r2,pm25_mse";

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    /// Test metrics, or the reason the row was skipped.
    pub result: std::result::Result<EvalReport, String>,
    pub echo: String,
}

fn write_rows<W: Write>(out: &mut W, rows: &[ReportRow]) -> std::io::Result<()> {
    writeln!(out, "{REPORT_HEADER}")?;
    for r in rows {
        match &r.result {
            Ok(m) => {
                write!(out, "{},ok", r.label)?;
                for c in &m.channels {
                    write!(out, ",{},{},{},{}", c.rmse, c.mae, c.r2, c.mse)?;
                }
                writeln!(out)?;
            }
            Err(reason) => writeln!(out, "{},skipped: {},,,,,,,,", r.label, reason.replace(',', ";"))?,
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<ReportRow>,
}

impl SweepTable {
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        write_rows(out, &self.rows)
    }
}

/// Lookback/horizon pairs of the default sweep.
pub const DEFAULT_SWEEP: [(usize, usize); 5] = [(24, 5), (48, 15), (60, 30), (90, 30), (120, 60)];

/// Trains and evaluates one experiment per `(lookback, horizon)`. Pairs the
/// series cannot support become skipped rows.
pub fn horizon_sweep(
    series: &Series,
    provider: &EmbeddingProvider,
    base: &Experiment,
    configs: &[(usize, usize)],
) -> Result<SweepTable> {
    let mut rows = Vec::with_capacity(configs.len());
    for &(l, p) in configs {
        let mut exp = base.clone();
        exp.dataset.lookback = l;
        exp.dataset.horizon = p;
        let label = format!("L={l} P={p}");
        let echo = exp.resolved(provider).echo();
        let result = match run_experiment(series, provider, &exp) {
            Ok(r) => Ok(r.test),
            Err(e @ (Error::SeriesTooShort { .. } | Error::Config(_))) => Err(e.to_string()),
            Err(e) => return Err(e),
        };
        rows.push(ReportRow { label, result, echo });
    }
    Ok(SweepTable { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Streams,
    FeedbackR,
    Timescale,
    Loss,
    Regularizers,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] = [
        AblationAxis::Streams,
        AblationAxis::FeedbackR,
        AblationAxis::Timescale,
        AblationAxis::Loss,
        AblationAxis::Regularizers,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::Streams => "streams",
            AblationAxis::FeedbackR => "feedback_r",
            AblationAxis::Timescale => "timescale",
            AblationAxis::Loss => "loss",
            AblationAxis::Regularizers => "regularizers",
        }
    }

    /// Labelled experiments of this axis, derived from `base`.
    pub fn rows(self, base: &Experiment) -> Vec<(String, Experiment)> {
        let with = |f: &dyn Fn(&mut Experiment)| {
            let mut e = base.clone();
            f(&mut e);
            e
        };
        let variant = |v: Variant| with(&|e: &mut Experiment| e.model.variant = v);
        match self {
            AblationAxis::Streams => vec![
                ("env_only".into(), variant(Variant::EnvOnly)),
                ("direct_concat".into(), variant(Variant::DirectConcat)),
                ("two_stream_concat".into(), variant(Variant::TwoStreamConcat)),
                ("no_feedback".into(), variant(Variant::NoFeedback)),
                (format!("full_r{}", base.model.rounds), variant(Variant::Full)),
            ],
            AblationAxis::FeedbackR => [0, 1, 3, 5, 7]
                .into_iter()
                .map(|r| {
                    let e = with(&|e: &mut Experiment| {
                        e.model.variant = Variant::Full;
                        e.model.rounds = r;
                    });
                    (format!("r{r}"), e)
                })
                .collect(),
            AblationAxis::Timescale => vec![
                ("short_only".into(), variant(Variant::ShortOnly)),
                ("long_only".into(), variant(Variant::LongOnly)),
                ("dual".into(), variant(Variant::Full)),
            ],
            AblationAxis::Loss => [LossMode::MseOnly, LossMode::MseNllHomo, LossMode::MseNllHetero]
                .into_iter()
                .map(|m| (m.as_str().to_string(), with(&|e: &mut Experiment| e.loss.mode = m)))
                .collect(),
            AblationAxis::Regularizers => {
                let (a, i, d) = (base.loss.lambda_align, base.loss.lambda_ind, base.loss.lambda_div);
                [("base_loss", 0.0, 0.0, 0.0), ("align", a, 0.0, 0.0), ("align_ind", a, i, 0.0), ("align_ind_div", a, i, d)]
                    .into_iter()
                    .map(|(name, la, li, ld)| {
                        let e = with(&|e: &mut Experiment| {
                            e.loss.lambda_align = la;
                            e.loss.lambda_ind = li;
                            e.loss.lambda_div = ld;
                        });
                        (name.to_string(), e)
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderingCheck {
    pub description: String,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxisTable {
    pub axis: AblationAxis,
    pub rows: Vec<ReportRow>,
    pub orderings: Vec<OrderingCheck>,
}

impl AxisTable {
    fn row(&self, label: &str) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.label == label).and_then(|r| r.result.as_ref().ok())
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        for o in &self.orderings {
            writeln!(out, "# ordering {}: {}", if o.holds { "holds" } else { "violated" }, o.description)?;
        }
        write_rows(out, &self.rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationMatrix {
    pub tables: Vec<AxisTable>,
}

/// Checks that every row shares the dataset split and training budget.
pub fn fairness_holds(rows: &[(String, Experiment)]) -> bool {
    rows.windows(2)
        .all(|w| w[0].1.dataset == w[1].1.dataset && w[0].1.train == w[1].1.train)
}

fn orderings(axis: AblationAxis, t: &AxisTable, base: &Experiment) -> Vec<OrderingCheck> {
    let pm = |label: &str| t.row(label).map(|m| m.pm25().rmse);
    let co2 = |label: &str| t.row(label).map(|m| m.co2().rmse);
    let check = |description: String, holds: Option<bool>| OrderingCheck {
        description,
        holds: holds.unwrap_or(false),
    };
    match axis {
        AblationAxis::Streams => {
            let full = format!("full_r{}", base.model.rounds);
            vec![
                check(
                    "pm25 rmse: full < two_stream_concat < env_only".into(),
                    (|| Some(pm(&full)? < pm("two_stream_concat")? && pm("two_stream_concat")? < pm("env_only")?))(),
                ),
                check(
                    "pm25 rmse: full at least 15% below env_only".into(),
                    (|| Some(pm(&full)? <= 0.85 * pm("env_only")?))(),
                ),
            ]
        }
        AblationAxis::FeedbackR => vec![check(
            "rmse(r3) <= rmse(r0) for co2 and pm25".into(),
            (|| Some(co2("r3")? <= co2("r0")? && pm("r3")? <= pm("r0")?))(),
        )],
        AblationAxis::Timescale => vec![check(
            "pm25 rmse: dual below short_only and long_only".into(),
            (|| Some(pm("dual")? < pm("short_only")? && pm("dual")? < pm("long_only")?))(),
        )],
        AblationAxis::Loss => vec![check(
            "pm25 rmse: mse_nll_hetero below mse_only".into(),
            (|| Some(pm("mse_nll_hetero")? < pm("mse_only")?))(),
        )],
        AblationAxis::Regularizers => vec![check(
            "pm25 rmse: align_ind_div below base_loss".into(),
            (|| Some(pm("align_ind_div")? < pm("base_loss")?))(),
        )],
    }
}

/// Runs every row of each requested axis with a shared seed, split and
/// budget, and evaluates the expected orderings.
pub fn ablation_run(
    series: &Series,
    provider: &EmbeddingProvider,
    base: &Experiment,
    axes: &[AblationAxis],
) -> Result<AblationMatrix> {
    let mut tables = Vec::with_capacity(axes.len());
    for &axis in axes {
        let specs = axis.rows(base);
        if !fairness_holds(&specs) {
            return Err(Error::Config(format!("{} rows differ in split or budget", axis.as_str())));
        }
        let mut rows = Vec::with_capacity(specs.len());
        for (label, exp) in specs {
            let r = run_experiment(series, provider, &exp)?;
            rows.push(ReportRow {
                label,
                result: Ok(r.test),
                echo: r.experiment.echo(),
            });
        }
        let mut table = AxisTable {
            axis,
            rows,
            orderings: Vec::new(),
        };
        table.orderings = orderings(axis, &table, base);
        tables.push(table);
    }
    Ok(AblationMatrix { tables })
}

// ---- rollout ---------------------------------------------------------------

/// Open-loop trajectory in physical units, one row per step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub mu: Vec<[f64; 2]>,
    pub normalized: Vec<[f64; 2]>,
}

/// Iterated forecasting from a single seed window (`L × d_env` normalized
/// environment and `L × d_act` embeddings). Each iteration keeps the first
/// `stride` predicted steps, appends them to the window with temperature,
/// humidity and activity held at their last values, and drops the oldest
/// rows. Nothing after the seed window is ever read.
pub fn rollout(
    model: &Model,
    params: &ParamSet<f64>,
    normalizer: &Normalizer,
    seed_env: &Tensor<f64>,
    seed_act: &Tensor<f64>,
    steps: usize,
    stride: usize,
) -> Result<Trajectory> {
    let cfg = model.config();
    let (l, de, da) = (cfg.lookback, cfg.d_env, cfg.d_act);
    if steps == 0 || stride == 0 || stride > cfg.horizon {
        return Err(Error::Config(format!(
            "rollout needs steps >= 1 and 1 <= stride <= {}",
            cfg.horizon
        )));
    }
    if seed_env.shape() != [l, de] || seed_act.shape() != [l, da] {
        return Err(Error::Config(format!(
            "seed window must be {l}×{de} and {l}×{da}, got {:?} and {:?}",
            seed_env.shape(),
            seed_act.shape()
        )));
    }
    let mut env: Vec<f64> = seed_env.data().to_vec();
    let mut act: Vec<f64> = seed_act.data().to_vec();
    let last_env = env[(l - 1) * de..].to_vec();
    let last_act = act[(l - 1) * da..].to_vec();
    let mut traj = Trajectory {
        mu: Vec::with_capacity(steps),
        normalized: Vec::with_capacity(steps),
    };
    while traj.mu.len() < steps {
        let x_env = Tensor::new(vec![1, l, de], env[env.len() - l * de..].to_vec())?;
        let x_act = Tensor::new(vec![1, l, da], act[act.len() - l * da..].to_vec())?;
        let f = model.predict(params, &x_env, &x_act, normalizer)?;
        for s in 0..stride.min(steps - traj.mu.len()) {
            let z = [f.normalized_mu.data()[s * TARGETS], f.normalized_mu.data()[s * TARGETS + 1]];
            let m = [f.mu.data()[s * TARGETS], f.mu.data()[s * TARGETS + 1]];
            let mut row = last_env.clone();
            for (k, &c) in TARGET_CHANNELS.iter().enumerate() {
                row[c] = z[k];
            }
            env.extend_from_slice(&row);
            act.extend_from_slice(&last_act);
            traj.normalized.push(z);
            traj.mu.push(m);
        }
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook formulas evaluated one channel at a time.
    fn brute(t: &[f64], p: &[f64]) -> (f64, f64, f64) {
        let n = t.len() as f64;
        let mse = t.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
        let mae = t.iter().zip(p).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        let mean = t.iter().sum::<f64>() / n;
        let var = t.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        (mse, mae, 1.0 - mse / var)
    }

    #[test]
    fn metric_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..100.0)).collect();
        let p: Vec<f64> = t.iter().map(|v| v + rng.gen_range(-5.0..5.0)).collect();
        let r = metrics(&t, &p, 2).unwrap();
        assert_eq!(r.n, 100);
        for (k, c) in r.channels.iter().enumerate() {
            assert!((c.rmse * c.rmse - c.mse).abs() < 1e-9);
            assert!(c.r2 <= 1.0);
            let col = |v: &[f64]| v.iter().skip(k).step_by(2).copied().collect::<Vec<_>>();
            let (mse, mae, r2) = brute(&col(&t), &col(&p));
            assert!((c.mse - mse).abs() < 1e-12 && (c.mae - mae).abs() < 1e-12 && (c.r2 - r2).abs() < 1e-12);
        }

        let perfect = metrics(&t, &t, 2).unwrap();
        for c in &perfect.channels {
            assert_eq!((c.mse, c.rmse, c.mae, c.r2), (0.0, 0.0, 0.0, 1.0));
        }

        let means: Vec<f64> = (0..2)
            .map(|k| t.iter().skip(k).step_by(2).sum::<f64>() / 100.0)
            .collect();
        let flat: Vec<f64> = (0..200).map(|i| means[i % 2]).collect();
        for c in &metrics(&t, &flat, 2).unwrap().channels {
            assert!(c.r2.abs() < 1e-12);
        }
    }

    #[test]
    fn metric_errors() {
        assert!(matches!(metrics(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0], 1), Err(Error::Metric(_))));
        assert!(matches!(metrics(&[1.0], &[1.0], 1), Err(Error::Metric(_))));
        assert!(matches!(metrics(&[1.0, 2.0], &[1.0], 1), Err(Error::Metric(_))));
    }

    #[test]
    fn r2_invariant_under_shared_affine_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p: Vec<f64> = t.iter().map(|v| v * 0.8 + rng.gen_range(-0.3..0.3)).collect();
        let map = |v: &[f64]| v.iter().map(|x| 3.5 * x - 7.0).collect::<Vec<_>>();
        let a = metrics(&t, &p, 1).unwrap().channels[0].r2;
        let b = metrics(&map(&t), &map(&p), 1).unwrap().channels[0].r2;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ablation_axes_have_expected_rows() {
        let base = Experiment::default();
        let labels = |a: AblationAxis| a.rows(&base).into_iter().map(|(l, _)| l).collect::<Vec<_>>();
        assert_eq!(
            labels(AblationAxis::Streams),
            ["env_only", "direct_concat", "two_stream_concat", "no_feedback", "full_r3"]
        );
        assert_eq!(labels(AblationAxis::FeedbackR), ["r0", "r1", "r3", "r5", "r7"]);
        assert_eq!(labels(AblationAxis::Timescale), ["short_only", "long_only", "dual"]);
        assert_eq!(labels(AblationAxis::Loss), ["mse_only", "mse_nll_homo", "mse_nll_hetero"]);
        assert_eq!(labels(AblationAxis::Regularizers), ["base_loss", "align", "align_ind", "align_ind_div"]);
        for axis in AblationAxis::ALL {
            let rows = axis.rows(&base);
            assert!(fairness_holds(&rows));
            assert!(rows.iter().all(|(_, e)| e.train.seed == base.train.seed));
        }
        let regs = AblationAxis::Regularizers.rows(&base);
        assert_eq!(regs[0].1.loss.lambda_align, 0.0);
        assert_eq!(regs[3].1.loss.lambda_div, base.loss.lambda_div);
    }

    #[test]
    fn prediction_csv_schema() {
        let p = Predictions {
            timestamps: vec![60, 120],
            y_true: vec![400.0, 3.0, 410.0, 3.5],
            y_pred: vec![401.0, 2.5, 409.0, 4.0],
            sigma: vec![5.0, 0.5, 5.5, 0.25],
        };
        let mut out = Vec::new();
        p.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), PREDICTION_HEADER);
        assert_eq!(lines.next().unwrap(), "60,400,401,5,3,2.5,0.5");
    }

    fn tiny_model() -> (Model, ParamSet<f64>, Normalizer) {
        let cfg = ModelConfig {
            hidden: 4,
            gru_long: 4,
            gru_short: 4,
            rounds: 1,
            d_act: 3,
            lookback: 6,
            horizon: 3,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg).unwrap();
        let params = model.init_params(3);
        let norm = Normalizer {
            channels: ENV_CHANNELS.iter().map(|s| s.to_string()).collect(),
            mean: vec![21.0, 50.0, 600.0, 8.0],
            sd: vec![1.0, 5.0, 150.0, 6.0],
        };
        (model, params, norm)
    }

    #[test]
    fn rollout_with_full_stride_is_one_forward() {
        let (model, params, norm) = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let env = Tensor::new(vec![6, 4], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let act = Tensor::new(vec![6, 3], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let traj = rollout(&model, &params, &norm, &env, &act, 3, 3).unwrap();
        let direct = model
            .predict(&params, &env.reshape(vec![1, 6, 4]).unwrap(), &act.reshape(vec![1, 6, 3]).unwrap(), &norm)
            .unwrap();
        let flat: Vec<f64> = traj.mu.iter().flatten().copied().collect();
        assert_eq!(flat, direct.mu.data());

        let long = rollout(&model, &params, &norm, &env, &act, 10, 1).unwrap();
        assert_eq!(long.mu.len(), 10);
        assert_eq!(long.mu[0], traj.mu[0]);
        assert!(rollout(&model, &params, &norm, &env, &act, 0, 1).is_err());
        assert!(rollout(&model, &params, &norm, &env, &act, 3, 4).is_err());
    }
}
