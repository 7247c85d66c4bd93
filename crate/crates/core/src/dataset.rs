//! CSV ingestion, activity embeddings, normalization and sliding windows.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::datagen::{Trace, CSV_HEADER};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Environmental input channels, in column order.
pub const ENV_CHANNELS: [&str; 4] = ["temp_c", "rh_pct", "co2_ppm", "pm25_ugm3"];
/// Indices of the forecast targets within [`ENV_CHANNELS`].
pub const TARGET_CHANNELS: [usize; 2] = [2, 3];
pub const MAX_INTERPOLATED_GAP: usize = 5;
pub const MAX_MISSING_FRACTION: f64 = 0.2;

/// A trace plus a per-step validity mask. Steps inside long gaps are filled
/// for continuity but marked invalid, and no window may touch them.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub trace: Trace,
    pub valid: Vec<bool>,
}

impl From<Trace> for Series {
    fn from(trace: Trace) -> Self {
        let valid = vec![true; trace.len()];
        Self { trace, valid }
    }
}

impl Series {
    pub fn len(&self) -> usize {
        self.trace.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trace.is_empty()
    }

    fn channel(&self, c: usize) -> &[f64] {
        match c {
            0 => &self.trace.temp,
            1 => &self.trace.humidity,
            2 => &self.trace.co2,
            3 => &self.trace.pm25,
            _ => unreachable!("four environmental channels"),
        }
    }
}

pub fn ingest_csv(path: impl AsRef<Path>) -> Result<Series> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(std::io::BufReader::new(file))
}

pub fn read_csv<R: Read>(input: R) -> Result<Series> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let idx: Vec<usize> = CSV_HEADER.iter().map(|h| col(h)).collect::<Result<_>>()?;

    let mut timestamps = Vec::new();
    let mut raw: [Vec<Option<f64>>; 4] = Default::default();
    let mut activity = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(idx[i]).unwrap_or("").trim();
        let ts: i64 = field(0)
            .parse()
            .map_err(|_| Error::Csv(format!("row {}: bad timestamp `{}`", row + 1, field(0))))?;
        if let Some(&prev) = timestamps.last() {
            if ts <= prev {
                return Err(Error::NonMonotoneTimestamps { row: row + 1 });
            }
        }
        timestamps.push(ts);
        for (c, values) in raw.iter_mut().enumerate() {
            let text = field(c + 1);
            let v = if text.is_empty() || text.eq_ignore_ascii_case("nan") {
                None
            } else {
                let x: f64 = text.parse().map_err(|_| {
                    Error::Csv(format!("row {}: bad value `{text}` in {}", row + 1, ENV_CHANNELS[c]))
                })?;
                x.is_finite().then_some(x)
            };
            values.push(v);
        }
        activity.push(field(5).to_string());
    }

    let n = timestamps.len();
    let mut valid = vec![true; n];
    let mut channels: Vec<Vec<f64>> = Vec::with_capacity(4);
    for (c, values) in raw.iter().enumerate() {
        let missing = values.iter().filter(|v| v.is_none()).count();
        if n > 0 && missing as f64 / n as f64 > MAX_MISSING_FRACTION {
            return Err(Error::TooMuchMissing {
                channel: ENV_CHANNELS[c].to_string(),
                pct: 100.0 * missing as f64 / n as f64,
            });
        }
        channels.push(fill_gaps(values, &mut valid));
    }
    let [temp, humidity, co2, pm25]: [Vec<f64>; 4] = channels.try_into().expect("four channels");
    Ok(Series {
        trace: Trace {
            timestamps,
            temp,
            humidity,
            co2,
            pm25,
            activity,
        },
        valid,
    })
}

/// Linearly interpolates interior gaps of at most [`MAX_INTERPOLATED_GAP`]
/// steps. Longer or edge gaps are filled with the nearest known value and
/// flagged invalid.
fn fill_gaps(values: &[Option<f64>], valid: &mut [bool]) -> Vec<f64> {
    let n = values.len();
    let mut out: Vec<f64> = values.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
    let mut i = 0;
    while i < n {
        if values[i].is_some() {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && values[i].is_none() {
            i += 1;
        }
        let end = i; // exclusive
        let left = start.checked_sub(1).and_then(|j| values[j]);
        let right = values.get(end).copied().flatten();
        match (left, right) {
            (Some(a), Some(b)) if end - start <= MAX_INTERPOLATED_GAP => {
                let span = (end - start + 1) as f64;
                for (k, slot) in out[start..end].iter_mut().enumerate() {
                    let w = (k + 1) as f64 / span;
                    *slot = a + (b - a) * w;
                }
            }
            (l, r) => {
                let fill = l.or(r).unwrap_or(0.0);
                for j in start..end {
                    out[j] = fill;
                    valid[j] = false;
                }
            }
        }
    }
    out
}

// ---- embeddings ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingProvider {
    /// Deterministic token hashing onto ±1 components, unit-normalized.
    Hash { dim: usize },
    /// Lookup in a precomputed label → vector table.
    Table {
        dim: usize,
        table: BTreeMap<String, Vec<f64>>,
    },
}

pub const DEFAULT_HASH_DIM: usize = 32;

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl EmbeddingProvider {
    pub fn hash(dim: usize) -> Self {
        EmbeddingProvider::Hash { dim }
    }

    pub fn from_table(table: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let dim = table
            .values()
            .next()
            .map(Vec::len)
            .ok_or_else(|| Error::EmbeddingTable("table is empty".into()))?;
        if dim == 0 {
            return Err(Error::EmbeddingTable("vectors are empty".into()));
        }
        if let Some((label, v)) = table.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::EmbeddingTable(format!(
                "`{label}` has length {}, expected {dim}",
                v.len()
            )));
        }
        if table.values().flatten().any(|x| !x.is_finite()) {
            return Err(Error::EmbeddingTable("non-finite component".into()));
        }
        Ok(EmbeddingProvider::Table { dim, table })
    }

    /// Loads a JSON object `{label: [floats]}`.
    pub fn load_table(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: BTreeMap<String, Vec<f64>> =
            serde_json::from_str(&text).map_err(|e| Error::EmbeddingTable(e.to_string()))?;
        Self::from_table(table)
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingProvider::Hash { dim } | EmbeddingProvider::Table { dim, .. } => *dim,
        }
    }

    pub fn embed(&self, label: &str) -> Result<Vec<f64>> {
        let label = label.trim();
        if label.is_empty() {
            return Ok(vec![0.0; self.dim()]);
        }
        match self {
            EmbeddingProvider::Table { table, .. } => table
                .get(label)
                .cloned()
                .ok_or_else(|| Error::UnknownLabel(label.to_string())),
            EmbeddingProvider::Hash { dim } => {
                let mut v = vec![0.0; *dim];
                for token in label.to_lowercase().split_whitespace() {
                    for (j, slot) in v.iter_mut().enumerate() {
                        let h = fnv1a(token.bytes().chain((j as u32).to_le_bytes()));
                        *slot += if h >> 63 == 1 { 1.0 } else { -1.0 };
                    }
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    v.iter_mut().for_each(|x| *x /= norm);
                }
                Ok(v)
            }
        }
    }

    /// Row `t` of the result is the embedding of `labels[t]`.
    pub fn embed_activities(&self, labels: &[String]) -> Result<Tensor<f64>> {
        let dim = self.dim();
        let mut cache: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        let mut data = Vec::with_capacity(labels.len() * dim);
        for l in labels {
            if !cache.contains_key(l.as_str()) {
                cache.insert(l.as_str(), self.embed(l)?);
            }
            data.extend_from_slice(&cache[l.as_str()]);
        }
        Ok(Tensor::new(vec![labels.len().max(1), dim], if labels.is_empty() { vec![0.0; dim] } else { data })?)
    }
}

// ---- normalization ---------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub channels: Vec<String>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Normalizer {
    /// Fits per-channel mean and standard deviation over the valid steps in
    /// `range`.
    pub fn fit(series: &Series, range: std::ops::Range<usize>) -> Result<Self> {
        let mut mean = Vec::with_capacity(4);
        let mut sd = Vec::with_capacity(4);
        for c in 0..ENV_CHANNELS.len() {
            let xs: Vec<f64> = series.channel(c)[range.clone()]
                .iter()
                .zip(&series.valid[range.clone()])
                .filter(|(_, &ok)| ok)
                .map(|(x, _)| *x)
                .collect();
            let n = xs.len() as f64;
            let m = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            let s = var.sqrt();
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::DegenerateChannel(ENV_CHANNELS[c].to_string()));
            }
            mean.push(m);
            sd.push(s);
        }
        Ok(Self {
            channels: ENV_CHANNELS.iter().map(|s| s.to_string()).collect(),
            mean,
            sd,
        })
    }

    pub fn transform(&self, channel: usize, x: f64) -> f64 {
        (x - self.mean[channel]) / self.sd[channel]
    }

    pub fn inverse(&self, channel: usize, z: f64) -> f64 {
        z * self.sd[channel] + self.mean[channel]
    }

    /// Denormalizes target `k` (0 = CO₂, 1 = PM₂.₅).
    pub fn target_inverse(&self, k: usize, z: f64) -> f64 {
        self.inverse(TARGET_CHANNELS[k], z)
    }

    pub fn target_transform(&self, k: usize, x: f64) -> f64 {
        self.transform(TARGET_CHANNELS[k], x)
    }

    pub fn target_sd(&self, k: usize) -> f64 {
        self.sd[TARGET_CHANNELS[k]]
    }
}

// ---- windowing -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    /// `hash` or `table`.
    pub mode: String,
    pub path: Option<String>,
    pub dim: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            mode: "hash".into(),
            path: None,
            dim: DEFAULT_HASH_DIM,
        }
    }
}

impl EmbeddingConfig {
    pub fn provider(&self) -> Result<EmbeddingProvider> {
        match self.mode.as_str() {
            "hash" => {
                if self.dim == 0 {
                    return Err(Error::Config("embedding dim must be > 0".into()));
                }
                Ok(EmbeddingProvider::hash(self.dim))
            }
            "table" => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Config("table embedding needs a path".into()))?;
                EmbeddingProvider::load_table(path)
            }
            other => Err(Error::Config(format!("unknown embedding mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub stride: usize,
    /// Chronological train / validation / test fractions.
    pub split: [f64; 3],
    pub embedding: EmbeddingConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            lookback: 48,
            horizon: 15,
            stride: 1,
            split: [0.7, 0.15, 0.15],
            embedding: EmbeddingConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 || self.horizon == 0 {
            return Err(Error::Config("lookback and horizon must be >= 1".into()));
        }
        if self.horizon > self.lookback {
            // the readout slices the last `horizon` rows of the lookback
            return Err(Error::Config(format!(
                "horizon {} exceeds lookback {}",
                self.horizon, self.lookback
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        if self.split.iter().any(|f| !(*f >= 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {:?} must be non-negative and sum to 1",
                self.split
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Normalized, embedded series shared by every window of a dataset.
#[derive(Debug)]
pub struct Prepared {
    /// `n × 4` normalized environmental channels.
    pub env: Vec<f64>,
    /// `n × d_a` activity embeddings.
    pub act: Vec<f64>,
    pub d_act: usize,
    pub timestamps: Vec<i64>,
    pub valid: Vec<bool>,
}

/// Windows of one split. Window `i` has input rows `[t−L+1, t]` and target
/// rows `[t+1, t+P]` where `t = ends[i]`.
#[derive(Debug, Clone)]
pub struct WindowSet {
    pub split: Split,
    pub ends: Vec<usize>,
    pub lookback: usize,
    pub horizon: usize,
    /// Half-open raw-series range of the split.
    pub range: std::ops::Range<usize>,
    data: Arc<Prepared>,
    normalizer: Arc<Normalizer>,
}

#[derive(Debug, Clone)]
pub struct WindowBatch {
    /// `B × L × d_e`, normalized.
    pub x_env: Tensor<f64>,
    /// `B × L × d_a`.
    pub x_act: Tensor<f64>,
    /// `B × P × 2`, normalized CO₂ and PM₂.₅.
    pub y: Tensor<f64>,
    /// Index of the first input row of each window.
    pub starts: Vec<usize>,
    /// Timestamps of the `P` target rows of each window, row-major.
    pub target_timestamps: Vec<i64>,
    pub normalizer: Arc<Normalizer>,
}

impl WindowBatch {
    pub fn size(&self) -> usize {
        self.x_env.shape()[0]
    }

    pub fn lookback(&self) -> usize {
        self.x_env.shape()[1]
    }

    pub fn horizon(&self) -> usize {
        self.y.shape()[1]
    }
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.ends.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ends.is_empty()
    }

    pub fn normalizer(&self) -> &Arc<Normalizer> {
        &self.normalizer
    }

    pub fn prepared(&self) -> &Arc<Prepared> {
        &self.data
    }

    pub fn d_act(&self) -> usize {
        self.data.d_act
    }

    /// Materializes the windows at positions `which`.
    pub fn batch(&self, which: &[usize]) -> WindowBatch {
        let (l, p) = (self.lookback, self.horizon);
        let d_e = ENV_CHANNELS.len();
        let d_a = self.data.d_act;
        let b = which.len().max(1);
        let mut x_env = Vec::with_capacity(b * l * d_e);
        let mut x_act = Vec::with_capacity(b * l * d_a);
        let mut y = Vec::with_capacity(b * p * 2);
        let mut starts = Vec::with_capacity(b);
        let mut target_timestamps = Vec::with_capacity(b * p);
        for &w in which {
            let t = self.ends[w];
            let s = t + 1 - l;
            starts.push(s);
            x_env.extend_from_slice(&self.data.env[s * d_e..(t + 1) * d_e]);
            x_act.extend_from_slice(&self.data.act[s * d_a..(t + 1) * d_a]);
            for r in t + 1..=t + p {
                for &c in &TARGET_CHANNELS {
                    y.push(self.data.env[r * d_e + c]);
                }
                target_timestamps.push(self.data.timestamps[r]);
            }
        }
        WindowBatch {
            x_env: Tensor::new(vec![b, l, d_e], x_env).expect("window shape"),
            x_act: Tensor::new(vec![b, l, d_a], x_act).expect("window shape"),
            y: Tensor::new(vec![b, p, 2], y).expect("window shape"),
            starts,
            target_timestamps,
            normalizer: Arc::clone(&self.normalizer),
        }
    }

    pub fn all(&self) -> WindowBatch {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }
}

#[derive(Debug, Clone)]
pub struct WindowedData {
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
    pub normalizer: Arc<Normalizer>,
    pub config: DatasetConfig,
}

impl WindowedData {
    pub fn split(&self, split: Split) -> &WindowSet {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Chronological split boundaries `[0, a), [a, b), [b, n)`.
pub fn split_ranges(n: usize, fractions: [f64; 3]) -> [std::ops::Range<usize>; 3] {
    let a = ((n as f64) * fractions[0]).floor() as usize;
    let b = (a + ((n as f64) * fractions[1]).floor() as usize).min(n);
    [0..a.min(n), a.min(n)..b, b..n]
}

pub fn make_windows(series: &Series, provider: &EmbeddingProvider, cfg: &DatasetConfig) -> Result<WindowedData> {
    cfg.validate()?;
    let ranges = split_ranges(series.len(), cfg.split);
    if ranges[0].len() < 2 {
        return Err(Error::SeriesTooShort {
            len: series.len(),
            needed: cfg.lookback + cfg.horizon,
        });
    }
    let normalizer = Normalizer::fit(series, ranges[0].clone())?;
    make_windows_with(series, provider, cfg, normalizer)
}

/// Like [`make_windows`] but with a fixed normalizer.
pub fn make_windows_with(
    series: &Series,
    provider: &EmbeddingProvider,
    cfg: &DatasetConfig,
    normalizer: Normalizer,
) -> Result<WindowedData> {
    cfg.validate()?;
    let n = series.len();
    let needed = cfg.lookback + cfg.horizon;
    if n < needed {
        return Err(Error::SeriesTooShort { len: n, needed });
    }
    let d_e = ENV_CHANNELS.len();
    let mut env = Vec::with_capacity(n * d_e);
    for i in 0..n {
        for c in 0..d_e {
            env.push(normalizer.transform(c, series.channel(c)[i]));
        }
    }
    let act = provider.embed_activities(&series.trace.activity)?.into_data();
    let prepared = Arc::new(Prepared {
        env,
        act,
        d_act: provider.dim(),
        timestamps: series.trace.timestamps.clone(),
        valid: series.valid.clone(),
    });
    let normalizer = Arc::new(normalizer);

    // prefix count of invalid steps, for O(1) window rejection
    let mut bad = vec![0usize; n + 1];
    for i in 0..n {
        bad[i + 1] = bad[i] + usize::from(!series.valid[i]);
    }

    let ranges = split_ranges(n, cfg.split);
    let make = |split: Split, range: std::ops::Range<usize>| {
        let mut ends = Vec::new();
        if range.len() >= needed {
            let mut t = range.start + cfg.lookback - 1;
            while t + cfg.horizon < range.end {
                let s = t + 1 - cfg.lookback;
                if bad[t + cfg.horizon + 1] == bad[s] {
                    ends.push(t);
                }
                t += cfg.stride;
            }
        }
        WindowSet {
            split,
            ends,
            lookback: cfg.lookback,
            horizon: cfg.horizon,
            range,
            data: Arc::clone(&prepared),
            normalizer: Arc::clone(&normalizer),
        }
    };
    let [tr, va, te] = ranges;
    Ok(WindowedData {
        train: make(Split::Train, tr),
        val: make(Split::Val, va),
        test: make(Split::Test, te),
        normalizer: Arc::clone(&normalizer),
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{default_day_scenario, simulate, write_csv};

    fn synthetic(n: usize) -> Series {
        let t: Vec<f64> = (0..n).map(|i| i as f64).collect();
        Series::from(Trace {
            timestamps: (0..n as i64).collect(),
            temp: t.iter().map(|x| 20.0 + (x * 0.1).sin()).collect(),
            humidity: t.iter().map(|x| 50.0 + (x * 0.07).cos()).collect(),
            co2: t.iter().map(|x| 500.0 + 10.0 * (x * 0.05).sin()).collect(),
            pm25: t.iter().map(|x| 5.0 + (x * 0.3).sin()).collect(),
            activity: (0..n).map(|i| if i % 7 == 0 { "frying".into() } else { String::new() }).collect(),
        })
    }

    fn cfg(l: usize, p: usize, stride: usize, split: [f64; 3]) -> DatasetConfig {
        DatasetConfig {
            lookback: l,
            horizon: p,
            stride,
            split,
            embedding: EmbeddingConfig::default(),
        }
    }

    #[test]
    fn window_count_single_split() {
        let s = synthetic(100);
        let d = make_windows(&s, &EmbeddingProvider::hash(8), &cfg(48, 15, 1, [1.0, 0.0, 0.0])).unwrap();
        assert_eq!(d.train.len(), 38);
        assert!(d.val.is_empty() && d.test.is_empty());
    }

    #[test]
    fn stride_of_l_plus_p_gives_disjoint_windows() {
        let s = synthetic(400);
        let d = make_windows(&s, &EmbeddingProvider::hash(8), &cfg(48, 15, 63, [1.0, 0.0, 0.0])).unwrap();
        for w in d.train.ends.windows(2) {
            let prev_last = w[0] + 15;
            let next_first = w[1] + 1 - 48;
            assert!(next_first > prev_last);
        }
    }

    #[test]
    fn targets_follow_inputs_without_overlap() {
        let s = synthetic(300);
        let d = make_windows(&s, &EmbeddingProvider::hash(8), &cfg(24, 6, 5, [0.6, 0.2, 0.2])).unwrap();
        for set in [&d.train, &d.val, &d.test] {
            for (i, &t) in set.ends.iter().enumerate() {
                let b = set.batch(&[i]);
                assert_eq!(b.starts[0] + 24 - 1, t);
                // first target row is step t+1: compare against the series
                let co2_next = d.normalizer.target_transform(0, s.trace.co2[t + 1]);
                assert!((b.y.data()[0] - co2_next).abs() < 1e-12);
                assert!(t + 6 < set.range.end && b.starts[0] >= set.range.start);
            }
        }
    }

    #[test]
    fn split_hygiene() {
        let s = synthetic(500);
        let d = make_windows(&s, &EmbeddingProvider::hash(8), &cfg(20, 5, 1, [0.7, 0.15, 0.15])).unwrap();
        let max_train = d.train.ends.iter().map(|t| t + 5).max().unwrap();
        let min_val = d.val.ends.iter().map(|t| t + 1 - 20).min().unwrap();
        let max_val = d.val.ends.iter().map(|t| t + 5).max().unwrap();
        let min_test = d.test.ends.iter().map(|t| t + 1 - 20).min().unwrap();
        assert!(max_train < min_val && max_val < min_test);
        // normalizer comes from the training rows only
        let tr = Normalizer::fit(&s, 0..350).unwrap();
        assert_eq!(*d.normalizer, tr);
    }

    #[test]
    fn too_short_series() {
        let s = synthetic(50);
        let err = make_windows(&s, &EmbeddingProvider::hash(8), &cfg(48, 15, 1, [1.0, 0.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::SeriesTooShort { len: 50, needed: 63 }));
    }

    #[test]
    fn no_lookahead_with_fixed_normalizer() {
        let s = synthetic(200);
        let c = cfg(30, 5, 1, [1.0, 0.0, 0.0]);
        let norm = Normalizer::fit(&s, 0..200).unwrap();
        let hp = EmbeddingProvider::hash(8);
        let base = make_windows_with(&s, &hp, &c, norm.clone()).unwrap();
        let w = 40; // window end = ends[40] + 5
        let end = base.train.ends[w] + 5;
        let mut perturbed = s.clone();
        for i in end + 1..200 {
            perturbed.trace.co2[i] += 1e3;
            perturbed.trace.activity[i] = "vacuuming".into();
        }
        let after = make_windows_with(&perturbed, &hp, &c, norm).unwrap();
        let (a, b) = (base.train.batch(&[w]), after.train.batch(&[w]));
        assert_eq!(a.x_env, b.x_env);
        assert_eq!(a.x_act, b.x_act);
        assert_eq!(a.y, b.y);
    }

    #[test]
    fn normalizer_round_trip_and_degenerate_channel() {
        let s = synthetic(100);
        let n = Normalizer::fit(&s, 0..100).unwrap();
        for c in 0..4 {
            for x in [-3.0, 0.0, 17.25, 1234.5] {
                assert!((n.inverse(c, n.transform(c, x)) - x).abs() < 1e-12);
            }
        }
        let mut flat = s.clone();
        flat.trace.humidity.iter_mut().for_each(|x| *x = 40.0);
        assert!(matches!(
            Normalizer::fit(&flat, 0..100),
            Err(Error::DegenerateChannel(c)) if c == "rh_pct"
        ));
    }

    #[test]
    fn hash_embeddings() {
        let p = EmbeddingProvider::hash(32);
        assert_eq!(p.embed("").unwrap(), vec![0.0; 32]);
        let a = p.embed("frying").unwrap();
        assert_eq!(a, p.embed("frying").unwrap());
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_ne!(a, p.embed("toasting").unwrap());
        let labels: Vec<String> = vec!["frying".into(), "frying".into(), "".into()];
        let m = p.embed_activities(&labels).unwrap();
        assert_eq!(m.row(0), m.row(1));
        assert!(m.row(2).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn table_embeddings() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.json");
        std::fs::write(
            &path,
            r#"{"frying":[1,0,0],"toasting":[0,1,0],"making tea":[0,0,1],"cleaning":[0.5,0.5,0]}"#,
        )
        .unwrap();
        let p = EmbeddingProvider::load_table(&path).unwrap();
        assert_eq!(p.dim(), 3);
        assert_eq!(p.embed("making tea").unwrap(), vec![0.0, 0.0, 1.0]);
        assert_eq!(p.embed("cleaning").unwrap(), vec![0.5, 0.5, 0.0]);
        assert_eq!(p.embed("").unwrap(), vec![0.0; 3]);
        assert!(matches!(p.embed("vacuuming"), Err(Error::UnknownLabel(_))));

        std::fs::write(&path, r#"{"a":[1,2],"b":[1]}"#).unwrap();
        assert!(matches!(
            EmbeddingProvider::load_table(&path),
            Err(Error::EmbeddingTable(_))
        ));
    }

    #[test]
    fn datagen_export_round_trips() {
        let tr = simulate(&default_day_scenario(3)).unwrap();
        let mut first = Vec::new();
        write_csv(&tr, &mut first).unwrap();
        let series = read_csv(first.as_slice()).unwrap();
        assert_eq!(series.len(), tr.len());
        assert!(series.valid.iter().all(|&v| v));
        assert_eq!(series.trace.activity, tr.activity);
        for (a, b) in series.trace.co2.iter().zip(&tr.co2) {
            assert!((a - b).abs() <= 1e-9 * b.abs());
        }
        let mut second = Vec::new();
        write_csv(&series.trace, &mut second).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn shuffled_rows_rejected() {
        let text = "timestamp,temp_c,rh_pct,co2_ppm,pm25_ugm3,activity\n0,20,50,400,3,\n2,20,50,400,3,\n1,20,50,400,3,\n";
        assert!(matches!(
            read_csv(text.as_bytes()),
            Err(Error::NonMonotoneTimestamps { row: 3 })
        ));
    }

    #[test]
    fn missing_column_rejected() {
        let text = "timestamp,temp_c,rh_pct,pm25_ugm3,activity\n0,20,50,3,\n";
        assert!(matches!(read_csv(text.as_bytes()), Err(Error::MissingColumn(c)) if c == "co2_ppm"));
    }

    #[test]
    fn single_gap_interpolated_long_gap_masked() {
        let mut text = String::from("timestamp,temp_c,rh_pct,co2_ppm,pm25_ugm3,activity\n");
        let co2 = |i: usize| match i {
            3 => String::new(),
            20..=26 => String::new(),
            _ => format!("{}", 400 + 10 * i),
        };
        for i in 0..40 {
            text.push_str(&format!("{i},20,50,{},3,\n", co2(i)));
        }
        let s = read_csv(text.as_bytes()).unwrap();
        assert_eq!(s.trace.co2[3], (420.0 + 440.0) / 2.0);
        assert!(s.valid[3]);
        assert!((20..=26).all(|i| !s.valid[i]));
        assert!(s.valid[19] && s.valid[27]);
    }

    #[test]
    fn too_much_missing_is_an_error() {
        let mut text = String::from("timestamp,temp_c,rh_pct,co2_ppm,pm25_ugm3,activity\n");
        for i in 0..10 {
            let pm = if i < 3 { "" } else { "4" };
            text.push_str(&format!("{i},20,50,400,{pm},\n"));
        }
        assert!(matches!(read_csv(text.as_bytes()), Err(Error::TooMuchMissing { .. })));
    }

    #[test]
    fn windows_skip_masked_steps() {
        let mut s = synthetic(200);
        for i in 100..110 {
            s.valid[i] = false;
        }
        let d = make_windows(&s, &EmbeddingProvider::hash(4), &cfg(20, 5, 1, [1.0, 0.0, 0.0])).unwrap();
        for &t in &d.train.ends {
            assert!(t + 5 < 100 || t + 1 - 20 >= 110);
        }
    }
}
