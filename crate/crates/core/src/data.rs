//! Series ingestion, z-score normalization, window slicing and the seeded
//! synthetic benchmark generator.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor on per-channel standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// Std of the Gaussian noise in the synthetic base signal.
pub const SYNTHETIC_NOISE: f64 = 0.05;

/// A `T × C` matrix of observations with optional per-timestamp labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MultivariateSeries {
    names: Vec<String>,
    values: Tensor,
    labels: Option<Vec<bool>>,
}

impl MultivariateSeries {
    pub fn new(names: Vec<String>, values: Tensor, labels: Option<Vec<bool>>) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::invalid(format!("series values must be T×C, got {:?}", values.shape())));
        }
        if names.len() != values.cols() {
            return Err(Error::invalid(format!(
                "{} channel names for {} channels",
                names.len(),
                values.cols()
            )));
        }
        if !values.is_finite() {
            return Err(Error::invalid("series contains non-finite values"));
        }
        if let Some(labels) = &labels {
            if labels.len() != values.rows() {
                return Err(Error::invalid(format!(
                    "expected {} labels, got {}",
                    values.rows(),
                    labels.len()
                )));
            }
        }
        Ok(Self { names, values, labels })
    }

    /// Series with generated channel names `ch0, ch1, ...`.
    pub fn unnamed(values: Tensor, labels: Option<Vec<bool>>) -> Result<Self> {
        let names = (0..values.cols()).map(|c| format!("ch{c}")).collect();
        Self::new(names, values, labels)
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn labels(&self) -> Option<&[bool]> {
        self.labels.as_deref()
    }

    pub fn with_labels(mut self, labels: Vec<bool>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::invalid(format!("expected {} labels, got {}", self.len(), labels.len())));
        }
        self.labels = Some(labels);
        Ok(self)
    }
}

/// Reads a comma-separated series (header line of channel names, one row per
/// timestamp) and, optionally, a label file with one `0`/`1` per line.
pub fn load_series(path: &Path, label_path: Option<&Path>) -> Result<MultivariateSeries> {
    let data_err = |line: usize, detail: String| Error::Data {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => data_err(1, format!("{other:?}")),
        })?;
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| data_err(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if names.is_empty() || names.iter().all(String::is_empty) {
        return Err(data_err(1, "missing header line".into()));
    }
    let channels = names.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            match e.kind() {
                csv::ErrorKind::UnequalLengths { len, expected_len, .. } => {
                    data_err(line, format!("expected {expected_len} fields, found {len}"))
                }
                _ => data_err(line, e.to_string()),
            }
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(rows + 2);
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| data_err(line, format!("column {} is not a number: `{field}`", c + 1)))?;
            if !v.is_finite() {
                return Err(data_err(line, format!("column {} is not finite: `{field}`", c + 1)));
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(data_err(2, "no data rows".into()));
    }
    let values = Tensor::matrix(rows, channels, values)?;
    let labels = match label_path {
        Some(lp) => Some(load_labels(lp, rows)?),
        None => None,
    };
    MultivariateSeries::new(names, values, labels)
}

fn load_labels(path: &Path, expected: usize) -> Result<Vec<bool>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut labels = Vec::with_capacity(expected);
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        labels.push(match line {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Data {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    detail: format!("label must be 0 or 1, found `{other}`"),
                })
            }
        });
    }
    if labels.len() != expected {
        return Err(Error::Data {
            path: path.to_path_buf(),
            line: labels.len(),
            detail: format!("expected {expected} labels, found {}", labels.len()),
        });
    }
    Ok(labels)
}

/// Writes a series in the same format `load_series` reads.
pub fn write_series(series: &MultivariateSeries, path: &Path, label_path: Option<&Path>) -> Result<()> {
    let mut out = series.names().join(",");
    out.push('\n');
    for t in 0..series.len() {
        let row: Vec<String> = series.values().row(t).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    if let (Some(lp), Some(labels)) = (label_path, series.labels()) {
        let text: String = labels.iter().map(|&l| if l { "1\n" } else { "0\n" }).collect();
        std::fs::write(lp, text).map_err(|e| Error::io(lp, e))?;
    }
    Ok(())
}

/// Per-channel z-score statistics fitted on training data.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Population mean and standard deviation per channel.
    pub fn fit(train: &MultivariateSeries) -> Result<Self> {
        let (t, c) = (train.len(), train.channels());
        if t < 2 {
            return Err(Error::invalid("normalizer needs at least two timestamps"));
        }
        let mut mean = vec![0.0; c];
        for row in 0..t {
            for (m, v) in mean.iter_mut().zip(train.values().row(row)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= t as f64);
        // Pin constant channels to their exact value so they normalize to 0.
        let first = train.values().row(0);
        for (ch, m) in mean.iter_mut().enumerate() {
            if (1..t).all(|row| train.values().get(row, ch) == first[ch]) {
                *m = first[ch];
            }
        }
        let mut var = vec![0.0; c];
        for row in 0..t {
            for ((s, v), m) in var.iter_mut().zip(train.values().row(row)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|s| (s / t as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, series: &MultivariateSeries) -> Result<MultivariateSeries> {
        if series.channels() != self.mean.len() {
            return Err(Error::invalid(format!(
                "normalizer fitted on {} channels, series has {}",
                self.mean.len(),
                series.channels()
            )));
        }
        let c = series.channels();
        let values = Tensor::from_fn(series.len(), c, |t, ch| {
            (series.values().get(t, ch) - self.mean[ch]) / self.std[ch]
        });
        MultivariateSeries::new(series.names().to_vec(), values, series.labels.clone())
    }
}

/// Fits on `train` and applies the same transform to `train` and every other series.
pub fn fit_and_normalize(
    train: &MultivariateSeries,
    others: &[&MultivariateSeries],
) -> Result<(Normalizer, Vec<MultivariateSeries>)> {
    let norm = Normalizer::fit(train)?;
    let mut out = vec![norm.apply(train)?];
    for s in others {
        out.push(norm.apply(s)?);
    }
    Ok((norm, out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SliceMode {
    /// Disjoint windows; the trailing remainder is dropped.
    Train,
    /// Disjoint windows plus one tail-aligned window when `T mod W != 0`.
    Infer,
}

/// Length-`W` windows cut from a series, with their start offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub window: usize,
    pub windows: Vec<Tensor>,
    pub offsets: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.windows.first().map_or(0, Tensor::cols)
    }
}

pub fn slice_windows(series: &MultivariateSeries, window: usize, mode: SliceMode) -> Result<WindowBatch> {
    let t = series.len();
    if window == 0 {
        return Err(Error::invalid("window size must be positive"));
    }
    if t < window {
        return Err(Error::invalid(format!("series of length {t} is shorter than window {window}")));
    }
    let c = series.channels();
    let mut offsets: Vec<usize> = (0..t / window).map(|k| k * window).collect();
    if mode == SliceMode::Infer && t % window != 0 {
        offsets.push(t - window);
    }
    let data = series.values().data();
    let windows = offsets
        .iter()
        .map(|&o| Tensor::matrix(window, c, data[o * c..(o + window) * c].to_vec()).expect("window shape"))
        .collect();
    Ok(WindowBatch {
        window,
        windows,
        offsets,
    })
}

// ---------------------------------------------------------------------------
// Synthetic benchmark

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AnomalyKind {
    Spike,
    LevelShift,
    NoiseBurst,
}

impl AnomalyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyKind::Spike => "spike",
            AnomalyKind::LevelShift => "level_shift",
            AnomalyKind::NoiseBurst => "noise_burst",
        }
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "spike" => Ok(AnomalyKind::Spike),
            "level_shift" => Ok(AnomalyKind::LevelShift),
            "noise_burst" => Ok(AnomalyKind::NoiseBurst),
            other => Err(Error::invalid(format!("unknown anomaly kind `{other}`"))),
        }
    }
}

/// `⌈x⌉` with a tolerance so products like `0.05 * 100` are not bumped up by
/// representation error.
pub(crate) fn ceil_count(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

struct BaseSignal {
    values: Vec<f64>,
    ranges: Vec<f64>,
}

fn base_signal(rng: &mut ChaCha8Rng, channels: usize, length: usize) -> BaseSignal {
    let params: Vec<(f64, f64)> = (0..channels)
        .map(|_| (rng.random_range(20.0..80.0), rng.random_range(0.0..2.0 * PI)))
        .collect();
    let mut values = vec![0.0; channels * length];
    for t in 0..length {
        for (c, &(period, phase)) in params.iter().enumerate() {
            let noise: f64 = rng.sample(StandardNormal);
            values[t * channels + c] = (2.0 * PI * t as f64 / period + phase).sin() + SYNTHETIC_NOISE * noise;
        }
    }
    let ranges = (0..channels)
        .map(|c| {
            let col = (0..length).map(|t| values[t * channels + c]);
            let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            hi - lo
        })
        .collect();
    BaseSignal { values, ranges }
}

/// Splits `total` anomalous timestamps into segment lengths in `[5, 20]`
/// (a single shorter segment only when `total < 5`).
fn segment_lengths(rng: &mut ChaCha8Rng, total: usize) -> Vec<usize> {
    const MIN: usize = 5;
    const MAX: usize = 20;
    let mut lengths = Vec::new();
    let mut remaining = total;
    while remaining > 0 {
        if remaining <= MAX && (remaining < 2 * MIN || rng.random_bool(0.5)) {
            lengths.push(remaining);
            break;
        }
        let mut len = rng.random_range(MIN..=MAX).min(remaining);
        if remaining - len < MIN {
            len = remaining - MIN;
        }
        lengths.push(len);
        remaining -= len;
    }
    lengths
}

/// Injects anomalies into rows `start..start + span` of `values`; returns labels
/// for that span.
fn inject(
    rng: &mut ChaCha8Rng,
    values: &mut [f64],
    channels: usize,
    ranges: &[f64],
    start: usize,
    span: usize,
    ratio: f64,
    kinds: &[AnomalyKind],
) -> Result<Vec<bool>> {
    let mut labels = vec![false; span];
    if ratio == 0.0 {
        return Ok(labels);
    }
    if kinds.is_empty() {
        return Err(Error::invalid("at least one anomaly kind is required when the ratio is positive"));
    }
    let total = ceil_count(ratio * span as f64);
    let lengths = segment_lengths(rng, total);
    // Leave at least one normal timestamp between segments.
    let gaps_needed = lengths.len().saturating_sub(1);
    let free = span
        .checked_sub(total + gaps_needed)
        .ok_or_else(|| Error::invalid(format!("cannot place {total} anomalous timestamps in {span}")))?;
    let mut cuts: Vec<usize> = (0..lengths.len()).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut order = lengths.clone();
    order.shuffle(rng);

    let mut cursor = 0;
    let mut prev_cut = 0;
    for (k, (&len, &cut)) in order.iter().zip(&cuts).enumerate() {
        cursor += cut - prev_cut + usize::from(k > 0);
        prev_cut = cut;
        let kind = kinds[rng.random_range(0..kinds.len())];
        let mut affected: Vec<usize> = (0..channels).filter(|_| rng.random_bool(0.5)).collect();
        if affected.is_empty() {
            affected.push(rng.random_range(0..channels));
        }
        let magnitude = |rng: &mut ChaCha8Rng, c: usize| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.random_range(3.0..6.0) * SYNTHETIC_NOISE * ranges[c]
        };
        let shifts: Vec<f64> = affected.iter().map(|&c| magnitude(rng, c)).collect();
        for t in cursor..cursor + len {
            let row = (start + t) * channels;
            for (&c, &shift) in affected.iter().zip(&shifts) {
                values[row + c] += match kind {
                    AnomalyKind::Spike => magnitude(rng, c),
                    AnomalyKind::LevelShift => shift,
                    AnomalyKind::NoiseBurst => {
                        // total noise std becomes 10x the base level
                        let z: f64 = rng.sample(StandardNormal);
                        z * SYNTHETIC_NOISE * 99f64.sqrt()
                    }
                };
            }
            labels[t] = true;
        }
        cursor += len;
    }
    Ok(labels)
}

fn check_synthetic_args(channels: usize, ratio: f64, length: usize) -> Result<()> {
    if channels == 0 {
        return Err(Error::invalid("synthetic series needs at least one channel"));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!("anomaly ratio must lie in [0, 1), got {ratio}")));
    }
    if ratio > 0.0 && ratio * (length as f64) < 1.0 {
        return Err(Error::invalid(format!(
            "anomaly ratio {ratio} over {length} timestamps yields no anomalous timestamp"
        )));
    }
    Ok(())
}

/// Sinusoidal channels with random period and phase plus Gaussian noise, with
/// exactly `⌈ratio·T⌉` anomalous timestamps in contiguous labeled segments.
pub fn generate_synthetic(
    channels: usize,
    length: usize,
    ratio: f64,
    kinds: &[AnomalyKind],
    seed: u64,
) -> Result<MultivariateSeries> {
    if length < 100 {
        return Err(Error::invalid(format!("synthetic series needs T >= 100, got {length}")));
    }
    check_synthetic_args(channels, ratio, length)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base = base_signal(&mut rng, channels, length);
    let labels = inject(&mut rng, &mut base.values, channels, &base.ranges, 0, length, ratio, kinds)?;
    MultivariateSeries::unnamed(Tensor::matrix(length, channels, base.values)?, Some(labels))
}

/// A clean training series and a labeled test series that continue the same
/// underlying signal. Anomalies are injected only into the test part.
pub fn synthetic_benchmark(
    channels: usize,
    train_len: usize,
    test_len: usize,
    ratio: f64,
    kinds: &[AnomalyKind],
    seed: u64,
) -> Result<(MultivariateSeries, MultivariateSeries)> {
    if train_len < 100 || test_len < 100 {
        return Err(Error::invalid("synthetic train and test parts need T >= 100 each"));
    }
    check_synthetic_args(channels, ratio, test_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = train_len + test_len;
    let mut base = base_signal(&mut rng, channels, total);
    let labels = inject(&mut rng, &mut base.values, channels, &base.ranges, train_len, test_len, ratio, kinds)?;
    let split = train_len * channels;
    let train = Tensor::matrix(train_len, channels, base.values[..split].to_vec())?;
    let test = Tensor::matrix(test_len, channels, base.values[split..].to_vec())?;
    Ok((
        MultivariateSeries::unnamed(train, Some(vec![false; train_len]))?,
        MultivariateSeries::unnamed(test, Some(labels))?,
    ))
}
