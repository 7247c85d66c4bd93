//! Recurrent timescale paths, readout head, uncertainty head and the full
//! model forward pass, plus checkpoint persistence.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Normalizer, WindowBatch};
use crate::encoders::{linear, EncoderKind, StreamEncoder};
use crate::error::{Error, Result};
use crate::fusion::{Fused, Fusion};
use crate::params::{pname, Bound, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Number of forecast targets (CO₂, PM₂.₅).
pub const TARGETS: usize = 2;
pub const LOG_SIGMA_MIN: f64 = -7.0;
pub const LOG_SIGMA_MAX: f64 = 3.0;

/// Gated recurrent layer with a zero initial state.
///
/// ```text
/// [z | r] = σ(x·W_zr + b_zr + h·U_zr)
/// n       = tanh(x·W_n + b_n + (r ⊙ h)·U_n)
/// h'      = n + z ⊙ (h − n)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Gru {
    pub prefix: String,
    pub d_in: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(prefix: impl Into<String>, d_in: usize, hidden: usize) -> Self {
        Self {
            prefix: prefix.into(),
            d_in,
            hidden,
        }
    }

    fn var(&self, p: &Bound, local: &str) -> Var {
        p.var(&pname(&self.prefix, local))
    }

    pub fn init<T: Scalar, R: Rng>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        let g = self.hidden;
        params.init_linear(pname(&self.prefix, "w_x"), self.d_in, 3 * g, rng);
        params.init_const(pname(&self.prefix, "b"), vec![3 * g], 0.0);
        params.init_linear(pname(&self.prefix, "u_zr"), g, 2 * g, rng);
        params.init_linear(pname(&self.prefix, "u_n"), g, g, rng);
    }

    /// Projects inputs for all steps at once: `(L·B) × 3g`.
    pub fn project<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, x: Var) -> Result<Var, TensorError> {
        linear(tape, x, self.var(p, "w_x"), Some(self.var(p, "b")))
    }

    /// One recurrent step from projected inputs `xt` (`B × 3g`).
    pub fn cell<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, xt: Var, h: Var) -> Result<Var, TensorError> {
        let g = self.hidden;
        let zr = tape.sigmoid(tape.add(tape.slice_cols(xt, 0, 2 * g)?, tape.matmul(h, self.var(p, "u_zr"))?)?)?;
        let z = tape.slice_cols(zr, 0, g)?;
        let r = tape.slice_cols(zr, g, 2 * g)?;
        let recur = tape.matmul(tape.mul(r, h)?, self.var(p, "u_n"))?;
        let n = tape.tanh(tape.add(tape.slice_cols(xt, 2 * g, 3 * g)?, recur)?)?;
        tape.add(n, tape.mul(z, tape.sub(h, n)?)?)
    }

    /// Runs over an `(L·B) × d_in` time-major sequence, returning all hidden
    /// states as `(L·B) × g`.
    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, x: Var, batch: usize) -> Result<Var, TensorError> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.d_in || shape[0] % batch != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "gru",
                left: shape,
                right: vec![self.d_in, self.hidden],
            });
        }
        let steps = shape[0] / batch;
        let xw = self.project(tape, p, x)?;
        let mut h = tape.constant(Tensor::zeros(vec![batch, self.hidden]));
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = tape.slice_rows(xw, t * batch, (t + 1) * batch)?;
            h = self.cell(tape, p, xt, h)?;
            states.push(h);
        }
        tape.concat(&states, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Environmental stream only, one encoder feeding both paths.
    EnvOnly,
    /// Raw streams concatenated before a single encoder.
    DirectConcat,
    /// Streams encoded separately and concatenated, without fusion.
    TwoStreamConcat,
    /// Fusion without feedback rounds.
    NoFeedback,
    ShortOnly,
    LongOnly,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::EnvOnly,
        Variant::DirectConcat,
        Variant::TwoStreamConcat,
        Variant::NoFeedback,
        Variant::ShortOnly,
        Variant::LongOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::EnvOnly => "env_only",
            Variant::DirectConcat => "direct_concat",
            Variant::TwoStreamConcat => "two_stream_concat",
            Variant::NoFeedback => "no_feedback",
            Variant::ShortOnly => "short_only",
            Variant::LongOnly => "long_only",
        }
    }

    pub fn uses_fusion(self) -> bool {
        matches!(
            self,
            Variant::Full | Variant::NoFeedback | Variant::ShortOnly | Variant::LongOnly
        )
    }

    pub fn uses_actions(self) -> bool {
        self != Variant::EnvOnly
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMode {
    /// One trainable log σ per target.
    Homo,
    /// log σ predicted per step by a small MLP.
    Hetero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub gru_long: usize,
    pub gru_short: usize,
    pub rounds: usize,
    pub encoder: EncoderKind,
    pub ste_depth: usize,
    pub uncertainty: UncertaintyMode,
    pub variant: Variant,
    pub d_env: usize,
    pub d_act: usize,
    pub lookback: usize,
    pub horizon: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            gru_long: 64,
            gru_short: 64,
            rounds: 3,
            encoder: EncoderKind::Temporal,
            ste_depth: 2,
            uncertainty: UncertaintyMode::Hetero,
            variant: Variant::Full,
            d_env: 4,
            d_act: 32,
            lookback: 48,
            horizon: 15,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("gru_long", self.gru_long),
            ("gru_short", self.gru_short),
            ("d_env", self.d_env),
            ("d_act", self.d_act),
            ("lookback", self.lookback),
            ("horizon", self.horizon),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be >= 1")));
        }
        if self.horizon > self.lookback {
            return Err(Error::Config(format!(
                "horizon {} exceeds lookback {}",
                self.horizon, self.lookback
            )));
        }
        Ok(())
    }

    /// Feedback rounds actually run by the configured variant.
    pub fn effective_rounds(&self) -> usize {
        match self.variant {
            Variant::NoFeedback => 0,
            _ => self.rounds,
        }
    }
}

/// Symbolic outputs of one forward pass. Row `t·B + b` of a sequence
/// belongs to window `b` at step `t`.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub batch: usize,
    /// Head output over all `L` steps, `(L·B) × 2`.
    pub head: Var,
    /// Normalized means of the last `P` steps, `(P·B) × 2`.
    pub mu: Var,
    /// `(P·B) × 2`.
    pub log_sigma: Var,
    /// Fusion intermediates, for variants that fuse.
    pub fused: Option<Fused>,
}

/// Predictions for a batch, each `B × P × 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    /// Means in physical units.
    pub mu: Tensor<f64>,
    pub normalized_mu: Tensor<f64>,
    /// log σ in normalized units.
    pub log_sigma: Tensor<f64>,
    /// σ in physical units.
    pub sigma: Tensor<f64>,
}

#[derive(Debug, Clone, PartialEq)]
enum Encoders {
    Separate { env: StreamEncoder, act: StreamEncoder },
    EnvOnly(StreamEncoder),
    Joint(StreamEncoder),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    encoders: Encoders,
    fusion: Option<Fusion>,
    long: Option<Gru>,
    short: Option<Gru>,
}

/// Reorders `B × L × d` into time-major `(L·B) × d`.
pub fn to_time_major<T: Scalar>(x: &Tensor<f64>) -> Result<Tensor<T>, TensorError> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(TensorError::InvalidShape { shape: s.to_vec() });
    }
    let (b, l, d) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(x.len());
    for t in 0..l {
        for w in 0..b {
            let at = (w * l + t) * d;
            out.extend(x.data()[at..at + d].iter().map(|&v| T::lit(v)));
        }
    }
    Tensor::new(vec![l * b, d], out)
}

/// Inverse of [`to_time_major`] for a `(S·B) × d` matrix.
pub fn from_time_major<T: Scalar>(x: &Tensor<T>, batch: usize) -> Tensor<f64> {
    let (rows, d) = (x.rows(), x.cols());
    let steps = rows / batch;
    let mut out = vec![0.0; rows * d];
    for t in 0..steps {
        for w in 0..batch {
            let src = (t * batch + w) * d;
            let dst = (w * steps + t) * d;
            for k in 0..d {
                out[dst + k] = x.data()[src + k].as_f64();
            }
        }
    }
    Tensor::new(vec![batch, steps, d], out).expect("same size")
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (h, c) = (config.hidden, &config);
        let enc = |prefix: &str, d_in: usize| StreamEncoder::new(prefix, d_in, h, c.encoder, c.ste_depth);
        let encoders = match config.variant {
            Variant::EnvOnly => Encoders::EnvOnly(enc("enc_env", c.d_env)),
            Variant::DirectConcat => Encoders::Joint(enc("enc_joint", c.d_env + c.d_act)),
            _ => Encoders::Separate {
                env: enc("enc_env", c.d_env),
                act: enc("enc_act", c.d_act),
            },
        };
        let fusion = config.variant.uses_fusion().then(|| Fusion::new("fusion", h));
        let (long_in, short_in) = match config.variant {
            Variant::EnvOnly | Variant::DirectConcat => (h, h),
            Variant::TwoStreamConcat => (2 * h, 2 * h),
            _ => (h, 2 * h),
        };
        let long = (config.variant != Variant::ShortOnly).then(|| Gru::new("gru_long", long_in, c.gru_long));
        let short = (config.variant != Variant::LongOnly).then(|| Gru::new("gru_short", short_in, c.gru_short));
        Ok(Self {
            config,
            encoders,
            fusion,
            long,
            short,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Width of the head input: the summed hidden sizes of the active paths.
    pub fn d_z(&self) -> usize {
        self.long.as_ref().map_or(0, |g| g.hidden) + self.short.as_ref().map_or(0, |g| g.hidden)
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamSet<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        match &self.encoders {
            Encoders::Separate { env, act } => {
                env.init(&mut params, &mut rng);
                act.init(&mut params, &mut rng);
            }
            Encoders::EnvOnly(e) | Encoders::Joint(e) => e.init(&mut params, &mut rng),
        }
        if let Some(f) = &self.fusion {
            f.init(&mut params, &mut rng);
        }
        for g in self.long.iter().chain(&self.short) {
            g.init(&mut params, &mut rng);
        }
        let d_z = self.d_z();
        params.init_linear("head.w", d_z, TARGETS, &mut rng);
        params.init_const("head.b", vec![TARGETS], 0.0);
        match self.config.uncertainty {
            UncertaintyMode::Homo => params.init_const("sigma.theta", vec![TARGETS], 0.0),
            UncertaintyMode::Hetero => {
                let h = self.config.hidden;
                params.init_linear("sigma.w1", d_z, h, &mut rng);
                params.init_const("sigma.b1", vec![h], 0.0);
                params.init_linear("sigma.w2", h, TARGETS, &mut rng);
                params.init_const("sigma.b2", vec![TARGETS], 0.0);
            }
        }
        params
    }

    /// Builds the forward graph for inputs `B × L × d_env` and `B × L × d_act`.
    /// Targets are not an input.
    pub fn forward<T: Scalar>(
        &self,
        tape: &Tape<T>,
        p: &Bound,
        x_env: &Tensor<f64>,
        x_act: &Tensor<f64>,
    ) -> Result<ForwardPass, TensorError> {
        let c = &self.config;
        let (se, sa) = (x_env.shape(), x_act.shape());
        if se.len() != 3 || sa.len() != 3 || se[..2] != sa[..2] || se[2] != c.d_env || sa[2] != c.d_act || se[1] != c.lookback
        {
            return Err(TensorError::ShapeMismatch {
                op: "forward",
                left: se.to_vec(),
                right: sa.to_vec(),
            });
        }
        let (batch, l) = (se[0], se[1]);
        let env = tape.constant(to_time_major(x_env)?);

        let mut fused = None;
        let (long_in, short_in) = match &self.encoders {
            Encoders::EnvOnly(e) => {
                let h = e.forward(tape, p, env, batch)?;
                (h, h)
            }
            Encoders::Joint(e) => {
                let act = tape.constant(to_time_major(x_act)?);
                let h = e.forward(tape, p, tape.concat(&[env, act], 1)?, batch)?;
                (h, h)
            }
            Encoders::Separate { env: ee, act: ea } => {
                let act = tape.constant(to_time_major(x_act)?);
                let h_e = ee.forward(tape, p, env, batch)?;
                let h_a = ea.forward(tape, p, act, batch)?;
                match &self.fusion {
                    Some(f) => {
                        let out = f.fuse(tape, p, h_e, h_a, c.effective_rounds())?;
                        let private = tape.concat(&[out.state.p_e, out.state.p_a], 1)?;
                        let long_in = out.state.f;
                        fused = Some(out);
                        (long_in, private)
                    }
                    None => {
                        let both = tape.concat(&[h_e, h_a], 1)?;
                        (both, both)
                    }
                }
            }
        };

        let mut paths = Vec::with_capacity(2);
        if let Some(g) = &self.long {
            paths.push(g.forward(tape, p, long_in, batch)?);
        }
        if let Some(g) = &self.short {
            paths.push(g.forward(tape, p, short_in, batch)?);
        }
        let z = if paths.len() == 1 { paths[0] } else { tape.concat(&paths, 1)? };
        let head = linear(tape, z, p.var("head.w"), Some(p.var("head.b")))?;
        let from = (l - c.horizon) * batch;
        let mu = tape.slice_rows(head, from, l * batch)?;
        let log_sigma = match c.uncertainty {
            UncertaintyMode::Homo => {
                let zeros = tape.constant(Tensor::zeros(vec![c.horizon * batch, TARGETS]));
                tape.add(zeros, p.var("sigma.theta"))?
            }
            UncertaintyMode::Hetero => {
                let z_last = tape.slice_rows(z, from, l * batch)?;
                let hidden = tape.relu(linear(tape, z_last, p.var("sigma.w1"), Some(p.var("sigma.b1")))?)?;
                let raw = linear(tape, hidden, p.var("sigma.w2"), Some(p.var("sigma.b2")))?;
                tape.clamp(raw, T::lit(LOG_SIGMA_MIN), T::lit(LOG_SIGMA_MAX))?
            }
        };
        Ok(ForwardPass {
            batch,
            head,
            mu,
            log_sigma,
            fused,
        })
    }

    /// Inference on raw inputs, with non-finite values treated as errors.
    pub fn predict(
        &self,
        params: &ParamSet<f64>,
        x_env: &Tensor<f64>,
        x_act: &Tensor<f64>,
        normalizer: &Normalizer,
    ) -> Result<Forecast> {
        let tape = Tape::strict();
        let p = params.bind(&tape)?;
        let out = self.forward(&tape, &p, x_env, x_act)?;
        let normalized_mu = from_time_major(&tape.value(out.mu), out.batch);
        let log_sigma = from_time_major(&tape.value(out.log_sigma), out.batch);
        let denorm = |t: &Tensor<f64>, f: &dyn Fn(usize, f64) -> f64| {
            let data = t.data().iter().enumerate().map(|(i, &v)| f(i % TARGETS, v)).collect();
            Tensor::new(t.shape().to_vec(), data).expect("same shape")
        };
        let mu = denorm(&normalized_mu, &|k, v| normalizer.target_inverse(k, v));
        let sigma = denorm(&log_sigma, &|k, v| v.exp() * normalizer.target_sd(k));
        Ok(Forecast {
            mu,
            normalized_mu,
            log_sigma,
            sigma,
        })
    }

    pub fn forecast(&self, params: &ParamSet<f64>, batch: &WindowBatch) -> Result<Forecast> {
        self.predict(params, &batch.x_env, &batch.x_act, &batch.normalizer)
    }
}

// ---- checkpoints -----------------------------------------------------------

const MAGIC: &[u8; 8] = b"AIRFUSE\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes the config (as JSON) and every named parameter as
/// little-endian 64-bit floats.
pub fn encode_checkpoint(config: &ModelConfig, params: &ParamSet<f64>) -> Vec<u8> {
    let json = serde_json::to_vec(config).expect("config serializes");
    let mut out = Vec::with_capacity(64 + json.len() + params.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ParamSet<f64>)> {
    let mut cur = Cursor { bytes, at: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = cur.len()?;
    let config: ModelConfig =
        serde_json::from_slice(cur.take(n)?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let count = cur.len()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let n = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(n)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        let shape = (0..rank).map(|_| cur.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint("shape overflow".into()))?;
        let raw = cur.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("shape overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        params.insert(name, t);
    }
    if cur.at != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let model = Model::new(config.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let expected = model.init_params::<f64>(0);
    for (name, t) in expected.iter() {
        match params.get(name) {
            Some(got) if got.shape() == t.shape() => {}
            Some(got) => {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
        }
    }
    if params.len() != expected.len() {
        return Err(Error::Checkpoint("unexpected extra parameters".into()));
    }
    Ok((config, params))
}

pub fn save_checkpoint(path: impl AsRef<Path>, config: &ModelConfig, params: &ParamSet<f64>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(config, params)).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint. When `expected` is given, any difference from the
/// stored config is an error naming the first differing field.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<(ModelConfig, ParamSet<f64>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (config, params) = decode_checkpoint(&bytes)?;
    if let Some(want) = expected {
        check_config_match(want, &config)?;
    }
    Ok((config, params))
}

pub fn check_config_match(want: &ModelConfig, got: &ModelConfig) -> Result<()> {
    if want == got {
        return Ok(());
    }
    let (a, b) = (
        serde_json::to_value(want).expect("serializes"),
        serde_json::to_value(got).expect("serializes"),
    );
    let field = a
        .as_object()
        .and_then(|a| {
            a.iter()
                .find(|(k, v)| b.get(k.as_str()) != Some(v))
                .map(|(k, v)| format!("{k}: config has {v}, checkpoint has {}", b[k.as_str()]))
        })
        .unwrap_or_else(|| "configs differ".into());
    Err(Error::ConfigMismatch(field))
}
