//! Speed series ingestion, normalization, splitting, imputation, windowing
//! and a synthetic congestion generator.
//!
//! Missing observations are held as NaN in memory; files using zero as the
//! missing marker are converted on load according to [`Sentinel`].

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Datelike, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::csv_err;
use crate::model::Batch;
use crate::numerics::Tensor;

pub const SPEED_MAGIC: &[u8; 9] = b"DGCRNDAT\x01";
const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Which raw values count as missing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sentinel {
    /// Exact zeros and NaN.
    #[default]
    Zero,
    /// NaN only.
    Nan,
}

impl Sentinel {
    pub fn is_missing(self, x: f64) -> bool {
        x.is_nan() || (self == Sentinel::Zero && x == 0.0)
    }
}

/// `T x N` speeds sampled every `dt_seconds` from `start`; NaN marks missing.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedSeries {
    pub n_nodes: usize,
    pub dt_seconds: u32,
    pub start: NaiveDateTime,
    values: Vec<f64>,
}

impl SpeedSeries {
    pub fn new(n_nodes: usize, dt_seconds: u32, start: NaiveDateTime, values: Vec<f64>) -> Result<Self> {
        if n_nodes == 0 || dt_seconds == 0 {
            return Err(Error::Config("series needs N >= 1 and dt >= 1".into()));
        }
        if values.is_empty() || values.len() % n_nodes != 0 {
            return Err(Error::dim(
                "speed series",
                format!("{} values for {n_nodes} nodes", values.len()),
            ));
        }
        if let Some(i) = values.iter().position(|v| v.is_infinite()) {
            return Err(Error::Format {
                what: "speed series",
                detail: format!("infinite value at step {}, node {}", i / n_nodes, i % n_nodes),
            });
        }
        Ok(SpeedSeries {
            n_nodes,
            dt_seconds,
            start,
            values,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.values.len() / self.n_nodes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, t: usize, n: usize) -> f64 {
        self.values[t * self.n_nodes + n]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_nodes..(t + 1) * self.n_nodes]
    }

    pub fn node(&self, n: usize) -> Vec<f64> {
        (0..self.n_steps()).map(|t| self.value(t, n)).collect()
    }

    pub fn timestamp(&self, t: usize) -> NaiveDateTime {
        self.start + chrono::Duration::seconds(t as i64 * self.dt_seconds as i64)
    }

    /// Minutes since midnight over 1440, in `[0, 1)`.
    pub fn time_of_day(&self, t: usize) -> f64 {
        let ts = self.timestamp(t);
        (ts.hour() * 60 + ts.minute()) as f64 / 1440.0 + ts.second() as f64 / 86400.0
    }

    pub fn steps_per_day(&self) -> usize {
        (86_400 / self.dt_seconds).max(1) as usize
    }

    /// Slot within the week, Monday midnight = 0.
    pub fn slot_of_week(&self, t: usize) -> usize {
        let ts = self.timestamp(t);
        let secs = ts.num_seconds_from_midnight() as usize;
        ts.weekday().num_days_from_monday() as usize * self.steps_per_day() + secs / self.dt_seconds as usize
    }

    pub fn slice(&self, seg: Segment) -> Result<SpeedSeries> {
        if seg.len == 0 || seg.end() > self.n_steps() {
            return Err(Error::Precondition(format!(
                "segment {}..{} outside series of {} steps",
                seg.start,
                seg.end(),
                self.n_steps()
            )));
        }
        SpeedSeries::new(
            self.n_nodes,
            self.dt_seconds,
            self.timestamp(seg.start),
            self.values[seg.start * self.n_nodes..seg.end() * self.n_nodes].to_vec(),
        )
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_nan()).count()
    }
}

/// Z-score statistics fitted on observed training entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

impl NormStats {
    /// Population mean and std over the non-NaN values.
    pub fn fit<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<Self> {
        let (mut n, mut sum) = (0usize, 0.0);
        let observed: Vec<f64> = values.into_iter().copied().filter(|v| !v.is_nan()).collect();
        for &v in &observed {
            n += 1;
            sum += v;
        }
        if n == 0 {
            return Err(Error::Degenerate("no observed values to fit normalization".into()));
        }
        let mean = sum / n as f64;
        let var = observed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if !(std > 0.0) {
            return Err(Error::Degenerate(format!("constant data (std 0, mean {mean})")));
        }
        Ok(NormStats { mean, std })
    }

    pub fn forward(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Elementwise normalization; NaN passes through.
pub fn normalize(values: &[f64], stats: NormStats, direction: Direction) -> Result<Vec<f64>> {
    if !(stats.std > 0.0) {
        return Err(Error::Degenerate(format!("normalization std {} is not positive", stats.std)));
    }
    Ok(values
        .iter()
        .map(|&x| match direction {
            Direction::Forward => stats.forward(x),
            Direction::Inverse => stats.inverse(x),
        })
        .collect())
}

/// Contiguous run of steps `[start, start + len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Chronological train / validation / test division.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitPolicy {
    /// Fractions of the series, floored, remainder to test.
    Ratio { train: f64, val: f64, test: f64 },
    /// Consecutive whole days from the start of the series.
    Days {
        train_days: usize,
        val_days: usize,
        test_days: usize,
    },
}

impl Default for SplitPolicy {
    fn default() -> Self {
        SplitPolicy::Ratio {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?} (train, val, test)"))),
        }
    }
}

pub fn split(series: &SpeedSeries, policy: &SplitPolicy) -> Result<[Segment; 3]> {
    let t = series.n_steps();
    let (a, b, c) = match *policy {
        SplitPolicy::Ratio { train, val, test } => {
            if [train, val, test].iter().any(|r| !(0.0..=1.0).contains(r)) || (train + val + test - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "split ratios {train}/{val}/{test} must lie in [0, 1] and sum to 1"
                )));
            }
            let a = (train * t as f64 + 1e-9).floor() as usize;
            let b = (val * t as f64 + 1e-9).floor() as usize;
            (a, b, t - a - b)
        }
        SplitPolicy::Days {
            train_days,
            val_days,
            test_days,
        } => {
            let spd = series.steps_per_day();
            let need = (train_days + val_days + test_days) * spd;
            if need > t {
                return Err(Error::Config(format!(
                    "{train_days}+{val_days}+{test_days} days need {need} steps, series has {t}"
                )));
            }
            (train_days * spd, val_days * spd, test_days * spd)
        }
    };
    if a == 0 || b == 0 || c == 0 {
        return Err(Error::Config(format!("split of {t} steps leaves an empty segment ({a}/{b}/{c})")));
    }
    Ok([
        Segment { start: 0, len: a },
        Segment { start: a, len: b },
        Segment { start: a + b, len: c },
    ])
}

/// Per-node means of observed entries within `seg`; NaN for nodes with none.
pub fn node_means(series: &SpeedSeries, seg: Segment) -> Vec<f64> {
    (0..series.n_nodes)
        .map(|n| {
            let (mut s, mut k) = (0.0, 0usize);
            for t in seg.start..seg.end() {
                let v = series.value(t, n);
                if !v.is_nan() {
                    s += v;
                    k += 1;
                }
            }
            if k == 0 {
                f64::NAN
            } else {
                s / k as f64
            }
        })
        .collect()
}

/// Forward fill per node; leading gaps take `fallback[n]`.
pub fn impute_last(series: &SpeedSeries, fallback: &[f64]) -> Result<SpeedSeries> {
    let n = series.n_nodes;
    if fallback.len() != n {
        return Err(Error::dim("impute_last", format!("{} fallbacks for {n} nodes", fallback.len())));
    }
    let mut out = series.values.clone();
    for node in 0..n {
        let mut last = f64::NAN;
        let mut seen = false;
        for t in 0..series.n_steps() {
            let v = &mut out[t * n + node];
            if v.is_nan() {
                *v = if seen { last } else { fallback[node] };
            } else {
                last = *v;
                seen = true;
            }
        }
        if !seen {
            return Err(Error::Degenerate(format!("node {node} has no observed values")));
        }
        if out.iter().skip(node).step_by(n).any(|v| v.is_nan()) {
            return Err(Error::Degenerate(format!("node {node} has a leading gap and no fallback mean")));
        }
    }
    SpeedSeries::new(n, series.dt_seconds, series.start, out)
}

/// Number of stride-1 windows of `p` inputs and `q` targets in `len` steps.
pub fn window_count(len: usize, p: usize, q: usize) -> usize {
    (len + 1).saturating_sub(p + q)
}

/// Absolute start steps of every window inside `seg`.
pub fn make_windows(seg: Segment, p: usize, q: usize) -> Vec<usize> {
    let count = window_count(seg.len, p, q);
    if count == 0 {
        log::warn!(
            "segment of {} steps is shorter than P + Q = {}; no windows",
            seg.len,
            p + q
        );
    }
    (seg.start..seg.start + count).collect()
}

/// Series prepared for training: normalized, imputed inputs plus raw targets.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub raw: SpeedSeries,
    pub norm: NormStats,
    /// Normalized, imputed speeds, `T x N`.
    pub inputs: Vec<f64>,
    /// Time of day per step.
    pub tod: Vec<f64>,
    pub segments: [Segment; 3],
    pub input_len: usize,
    pub output_len: usize,
}

impl Dataset {
    pub fn prepare(raw: SpeedSeries, policy: &SplitPolicy, input_len: usize, output_len: usize) -> Result<Self> {
        Self::prepare_with_norm(raw, policy, input_len, output_len, None)
    }

    /// As [`Dataset::prepare`], but normalizes with `norm` (say, from a
    /// checkpoint) instead of fitting the training segment.
    pub fn prepare_with_norm(
        raw: SpeedSeries,
        policy: &SplitPolicy,
        input_len: usize,
        output_len: usize,
        norm: Option<NormStats>,
    ) -> Result<Self> {
        if input_len == 0 || output_len == 0 {
            return Err(Error::Config("input_len and output_len must be >= 1".into()));
        }
        let segments = split(&raw, policy)?;
        let train = segments[0];
        let n = raw.n_nodes;
        let norm = match norm {
            Some(s) if s.std > 0.0 && s.mean.is_finite() => s,
            Some(s) => return Err(Error::Degenerate(format!("normalization {s:?} is unusable"))),
            None => NormStats::fit(&raw.values[train.start * n..train.end() * n])?,
        };
        let all = Segment {
            start: 0,
            len: raw.n_steps(),
        };
        let fallback: Vec<f64> = node_means(&raw, train)
            .into_iter()
            .zip(node_means(&raw, all))
            .map(|(a, b)| if a.is_nan() { b } else { a })
            .collect();
        let imputed = impute_last(&raw, &fallback)?;
        let inputs = normalize(imputed.values(), norm, Direction::Forward)?;
        let tod = (0..raw.n_steps()).map(|t| raw.time_of_day(t)).collect();
        Ok(Dataset {
            raw,
            norm,
            inputs,
            tod,
            segments,
            input_len,
            output_len,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.raw.n_nodes
    }

    pub fn segment(&self, s: Split) -> Segment {
        self.segments[s.index()]
    }

    pub fn windows(&self, s: Split) -> Vec<usize> {
        make_windows(self.segment(s), self.input_len, self.output_len)
    }

    /// Stacks the windows starting at `starts` into one batch.
    pub fn batch(&self, starts: &[usize]) -> Batch {
        let (n, b) = (self.n_nodes(), starts.len());
        let (p, q) = (self.input_len, self.output_len);
        let encoder_inputs = (0..p)
            .map(|k| {
                Tensor::from_fn(&[b, n, 2], |i| {
                    let (s, rest) = (starts[i / (2 * n)], i % (2 * n));
                    let t = s + k;
                    if rest % 2 == 0 {
                        self.inputs[t * n + rest / 2]
                    } else {
                        self.tod[t]
                    }
                })
            })
            .collect();
        let at = |k: usize, f: &dyn Fn(usize, usize) -> f64, last: usize| {
            let shape: Vec<usize> = if last == 1 { vec![b, n, 1] } else { vec![b, n] };
            Tensor::from_fn(&shape, |i| f(starts[i / n] + p + k, i % n))
        };
        let sentinel = |t: usize, node: usize| self.raw.value(t, node);
        Batch {
            size: b,
            encoder_inputs,
            decoder_tod: (0..q).map(|k| at(k, &|t, _| self.tod[t], 1)).collect(),
            teacher: (0..q).map(|k| at(k, &|t, node| self.inputs[t * n + node], 1)).collect(),
            truth: (0..q)
                .map(|k| {
                    at(
                        k,
                        &|t, node| {
                            let v = sentinel(t, node);
                            if v.is_nan() {
                                0.0
                            } else {
                                v
                            }
                        },
                        0,
                    )
                })
                .collect(),
            mask: (0..q)
                .map(|k| at(k, &|t, node| if sentinel(t, node).is_nan() { 0.0 } else { 1.0 }, 0))
                .collect(),
        }
    }
}

// ---------------------------------------------------------------- file I/O

fn parse_value(field: &str, sentinel: Sentinel) -> Option<f64> {
    let f = field.trim();
    if f.is_empty() || f.eq_ignore_ascii_case("nan") {
        return Some(f64::NAN);
    }
    let v: f64 = f.parse().ok()?;
    Some(if sentinel.is_missing(v) { f64::NAN } else { v })
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .ok()
}

/// `timestamp,<node>,...` with ISO-8601 timestamps at a fixed interval.
pub fn read_speed_csv(path: &Path, sentinel: Sentinel) -> Result<SpeedSeries> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let n = rdr.headers().map_err(|e| csv_err(path, e))?.len().saturating_sub(1);
    if n == 0 {
        return Err(Error::Format {
            what: "speed csv",
            detail: format!("{}: header has no node columns", path.display()),
        });
    }
    let mut values = Vec::new();
    let mut stamps = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = |detail: String| Error::Format {
            what: "speed csv",
            detail: format!("{} row {}: {detail}", path.display(), line + 2),
        };
        if rec.len() != n + 1 {
            return Err(bad(format!("{} fields, expected {}", rec.len(), n + 1)));
        }
        stamps.push(parse_timestamp(&rec[0]).ok_or_else(|| bad(format!("bad timestamp {:?}", &rec[0])))?);
        for field in rec.iter().skip(1) {
            values.push(parse_value(field, sentinel).ok_or_else(|| bad(format!("bad value {field:?}")))?);
        }
    }
    if stamps.is_empty() {
        return Err(Error::Format {
            what: "speed csv",
            detail: format!("{}: no rows", path.display()),
        });
    }
    let dt = if stamps.len() > 1 {
        (stamps[1] - stamps[0]).num_seconds()
    } else {
        300
    };
    if dt <= 0 || dt > u32::MAX as i64 {
        return Err(Error::Format {
            what: "speed csv",
            detail: format!("timestamps must increase, first step is {dt} s"),
        });
    }
    for (i, w) in stamps.windows(2).enumerate() {
        if (w[1] - w[0]).num_seconds() != dt {
            return Err(Error::Format {
                what: "speed csv",
                detail: format!("row {}: timestamps not spaced by {dt} s", i + 3),
            });
        }
    }
    SpeedSeries::new(n, dt as u32, stamps[0], values)
}

pub fn write_speed_csv(path: &Path, series: &SpeedSeries) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["timestamp".to_string()];
    header.extend((0..series.n_nodes).map(|n| n.to_string()));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for t in 0..series.n_steps() {
        let mut row = vec![series.timestamp(t).format(TIMESTAMP_FORMAT).to_string()];
        row.extend(series.row(t).iter().map(|v| if v.is_nan() { "NaN".to_string() } else { v.to_string() }));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn speed_to_bytes(series: &SpeedSeries) -> Vec<u8> {
    let mut out = SPEED_MAGIC.to_vec();
    out.extend((series.n_nodes as u32).to_le_bytes());
    out.extend((series.n_steps() as u32).to_le_bytes());
    out.extend(series.dt_seconds.to_le_bytes());
    out.extend(series.start.and_utc().timestamp().to_le_bytes());
    for &v in &series.values {
        out.extend((v as f32).to_le_bytes());
    }
    out
}

pub fn speed_from_bytes(buf: &[u8], sentinel: Sentinel) -> Result<SpeedSeries> {
    let bad = |detail: String| Error::Format {
        what: "speed binary",
        detail,
    };
    let head = SPEED_MAGIC.len();
    if buf.len() < head + 20 || &buf[..head] != SPEED_MAGIC {
        return Err(bad("bad magic header or truncated header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    let (n, t, dt) = (u32_at(head) as usize, u32_at(head + 4) as usize, u32_at(head + 8));
    let epoch = i64::from_le_bytes(buf[head + 12..head + 20].try_into().unwrap());
    let body = &buf[head + 20..];
    let expected = n.checked_mul(t).and_then(|x| x.checked_mul(4));
    if expected != Some(body.len()) {
        return Err(bad(format!("{} value bytes for N={n}, T={t}", body.len())));
    }
    let start = DateTime::from_timestamp(epoch, 0)
        .ok_or_else(|| bad(format!("start timestamp {epoch} out of range")))?
        .naive_utc();
    let values = body
        .chunks_exact(4)
        .map(|c| {
            let v = f32::from_le_bytes(c.try_into().unwrap()) as f64;
            if sentinel.is_missing(v) {
                f64::NAN
            } else {
                v
            }
        })
        .collect();
    SpeedSeries::new(n, dt, start, values)
}

pub fn write_speed_bin(path: &Path, series: &SpeedSeries) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&speed_to_bytes(series)).map_err(|e| Error::io(path, e))
}

/// Reads either format, chosen by the leading magic bytes.
pub fn read_speed(path: &Path, sentinel: Sentinel) -> Result<SpeedSeries> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.starts_with(SPEED_MAGIC) {
        speed_from_bytes(&buf, sentinel)
    } else {
        read_speed_csv(path, sentinel)
    }
}

// ---------------------------------------------------------------- synthetic

/// Directed road network with per-edge lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadNetwork {
    pub n_nodes: usize,
    /// `(from, to, length)`; traffic flows from `from` to `to`.
    pub edges: Vec<(usize, usize, f64)>,
}

impl RoadNetwork {
    /// Corridors of about five sensors each, chained end to start, plus a few
    /// cross links. Weakly connected by construction.
    pub fn generate(n_nodes: usize, seed: u64) -> Result<Self> {
        if n_nodes < 2 {
            return Err(Error::Config("synthetic network needs at least 2 nodes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e65_7477_6f72_6b);
        let mut edges = Vec::new();
        let corridor = 5;
        for i in 0..n_nodes - 1 {
            let len = rng.random_range(1.0..3.0);
            if (i + 1) % corridor == 0 {
                // Corridor end feeds a random earlier sensor and the next corridor.
                let back = rng.random_range(0..=i);
                if back != i {
                    edges.push((i, back, rng.random_range(2.0..4.0)));
                }
            }
            edges.push((i, i + 1, len));
        }
        for _ in 0..n_nodes / 5 {
            let a = rng.random_range(0..n_nodes);
            let b = rng.random_range(0..n_nodes);
            if a != b && !edges.iter().any(|&(x, y, _)| (x, y) == (a, b) || (x, y) == (b, a)) {
                edges.push((a, b, rng.random_range(2.0..4.0)));
            }
        }
        Ok(RoadNetwork { n_nodes, edges })
    }

    pub fn out_neighbors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_nodes];
        for &(a, b, _) in &self.edges {
            out[a].push(b);
        }
        out
    }

    /// Undirected shortest-path distances between all pairs; infinite where
    /// unreachable.
    pub fn distances(&self) -> Tensor {
        let n = self.n_nodes;
        let mut adj = vec![Vec::new(); n];
        for &(a, b, w) in &self.edges {
            adj[a].push((b, w));
            adj[b].push((a, w));
        }
        let mut d = Tensor::full(&[n, n], f64::INFINITY);
        for src in 0..n {
            // Label-correcting search; graphs here are tiny.
            let mut dist = vec![f64::INFINITY; n];
            dist[src] = 0.0;
            let mut queue = VecDeque::from([src]);
            while let Some(u) = queue.pop_front() {
                for &(v, w) in &adj[u] {
                    if dist[u] + w < dist[v] {
                        dist[v] = dist[u] + w;
                        queue.push_back(v);
                    }
                }
            }
            for (dst, &v) in dist.iter().enumerate() {
                d.set(&[src, dst], v);
            }
        }
        d
    }

    pub fn is_adjacent(&self, a: usize, b: usize) -> bool {
        self.edges.iter().any(|&(x, y, _)| (x, y) == (a, b) || (x, y) == (b, a))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_nodes: usize,
    pub n_days: usize,
    /// Probability per node and step that a congestion event starts.
    pub congestion_rate: f64,
    pub noise_std: f64,
    /// Fraction of entries blanked out as missing.
    pub missing_rate: f64,
    pub dt_seconds: u32,
    /// Seeds both the network and the series, independent of the run seed.
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_nodes: 20,
            n_days: 20,
            congestion_rate: 0.003,
            noise_std: 1.0,
            missing_rate: 0.0,
            dt_seconds: 300,
            seed: 1,
        }
    }
}

pub const FREE_FLOW: f64 = 60.0;
pub const JAM_SPEED: f64 = 15.0;
pub const PROPAGATION_DAMPING: f64 = 0.6;

/// Start of every synthetic series: Monday 2024-01-01 00:00.
pub fn synth_epoch() -> NaiveDateTime {
    chrono::NaiveDate::from_ymd_opt(2024, 1, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap()
}

/// Free flow with a daily sinusoidal dip, plus congestion events that drive
/// a node toward jam speed and spread downstream one step later, damped.
pub fn synth_generate(network: &RoadNetwork, cfg: &SynthConfig, seed: u64) -> Result<SpeedSeries> {
    let n = network.n_nodes;
    if cfg.n_days == 0 || cfg.dt_seconds == 0 {
        return Err(Error::Config("synthetic data needs n_days >= 1 and dt_seconds >= 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.congestion_rate) || !(0.0..1.0).contains(&cfg.missing_rate) || !(cfg.noise_std >= 0.0) {
        return Err(Error::Config("congestion_rate, missing_rate in [0, 1) and noise_std >= 0 required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spd = (86_400 / cfg.dt_seconds).max(1) as usize;
    let t_total = cfg.n_days * spd;
    let dip: Vec<f64> = (0..n).map(|_| rng.random_range(5.0..15.0)).collect();
    let phase: Vec<f64> = (0..n).map(|_| rng.random_range(-0.05..0.05)).collect();
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).unwrap();
    let out = network.out_neighbors();

    let mut own = vec![0.0f64; n];
    let mut remaining = vec![0usize; n];
    let mut level = vec![0.0f64; n];
    let mut values = Vec::with_capacity(t_total * n);
    for t in 0..t_total {
        let tod = (t % spd) as f64 / spd as f64;
        let mut next = vec![0.0f64; n];
        for node in 0..n {
            if remaining[node] > 0 {
                remaining[node] -= 1;
                own[node] = 1.0;
            } else {
                own[node] *= 0.8;
                if cfg.congestion_rate > 0.0 && rng.random::<f64>() < cfg.congestion_rate {
                    remaining[node] = rng.random_range(6..=36);
                    own[node] = 1.0;
                }
            }
            next[node] = next[node].max(own[node]);
            for &m in &out[node] {
                next[m] = next[m].max(PROPAGATION_DAMPING * level[node]);
            }
        }
        level = next;
        for node in 0..n {
            let base = FREE_FLOW - dip[node] * 0.5 * (1.0 - (2.0 * std::f64::consts::PI * (tod - phase[node])).cos());
            let c = level[node].min(1.0);
            let mut v = base * (1.0 - c) + JAM_SPEED * c;
            if cfg.noise_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            if cfg.missing_rate > 0.0 && rng.random::<f64>() < cfg.missing_rate {
                v = f64::NAN;
            }
            values.push(v);
        }
    }
    SpeedSeries::new(n, cfg.dt_seconds, synth_epoch(), values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(n: usize, values: Vec<f64>) -> SpeedSeries {
        SpeedSeries::new(n, 300, synth_epoch(), values).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let s = NormStats { mean: 5.0, std: 5.0 };
        assert_eq!(normalize(&[0.0, 10.0], s, Direction::Forward).unwrap(), vec![-1.0, 1.0]);
        let x = [3.25, -7.0, 61.5];
        let back = normalize(&normalize(&x, s, Direction::Forward).unwrap(), s, Direction::Inverse).unwrap();
        for (a, b) in x.iter().zip(back) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(normalize(&[f64::NAN], s, Direction::Forward).unwrap()[0].is_nan());
        assert!(NormStats::fit(&[4.0, 4.0, f64::NAN]).is_err());
    }

    #[test]
    fn window_count_examples() {
        assert_eq!(window_count(24, 12, 12), 1);
        assert_eq!(window_count(25, 12, 12), 2);
        assert_eq!(window_count(23, 12, 12), 0);
        let seg = Segment { start: 10, len: 25 };
        assert_eq!(make_windows(seg, 12, 12), vec![10, 11]);
    }

    #[test]
    fn ratio_split_examples() {
        let s = series(1, (0..100).map(|v| v as f64 + 1.0).collect());
        let segs = split(&s, &SplitPolicy::default()).unwrap();
        assert_eq!(segs.map(|g| g.len), [70, 10, 20]);
        let s = series(1, (0..10).map(|v| v as f64 + 1.0).collect());
        assert_eq!(split(&s, &SplitPolicy::default()).unwrap().map(|g| g.len), [7, 1, 2]);
        let bad = SplitPolicy::Ratio {
            train: 0.7,
            val: 0.2,
            test: 0.2,
        };
        assert!(matches!(split(&s, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn day_split_is_day_aligned() {
        let s = series(1, vec![1.0; 23 * 288]);
        let p = SplitPolicy::Days {
            train_days: 15,
            val_days: 3,
            test_days: 5,
        };
        let segs = split(&s, &p).unwrap();
        assert_eq!(segs[0], Segment { start: 0, len: 15 * 288 });
        assert_eq!(segs[1], Segment { start: 15 * 288, len: 3 * 288 });
        assert_eq!(segs[2], Segment { start: 18 * 288, len: 5 * 288 });
    }

    #[test]
    fn impute_examples() {
        let nan = f64::NAN;
        let s = series(1, vec![5.0, nan, nan, 7.0]);
        assert_eq!(impute_last(&s, &[0.0]).unwrap().values(), &[5.0, 5.0, 5.0, 7.0]);
        let s = series(1, vec![nan, 4.0]);
        assert_eq!(impute_last(&s, &[6.0]).unwrap().values(), &[6.0, 4.0]);
        let s = series(2, vec![1.0, nan, 2.0, nan]);
        assert!(matches!(impute_last(&s, &[0.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn time_features() {
        let s = series(1, vec![1.0; 300]);
        assert_eq!(s.time_of_day(0), 0.0);
        assert_eq!(s.time_of_day(144), 0.5);
        assert_eq!(s.slot_of_week(0), 0);
        assert_eq!(s.slot_of_week(289), 289);
    }

    #[test]
    fn zero_sentinel_is_missing() {
        assert!(Sentinel::Zero.is_missing(0.0));
        assert!(!Sentinel::Nan.is_missing(0.0));
        assert!(Sentinel::Nan.is_missing(f64::NAN));
    }

    #[test]
    fn binary_round_trip() {
        let s = series(2, vec![1.5, f64::NAN, 3.0, 4.25]);
        let back = speed_from_bytes(&speed_to_bytes(&s), Sentinel::Nan).unwrap();
        assert_eq!(back.n_steps(), 2);
        assert_eq!(back.start, s.start);
        assert!(back.value(0, 1).is_nan());
        assert_eq!(back.value(1, 1), 4.25);
        assert!(speed_from_bytes(&speed_to_bytes(&s)[..30], Sentinel::Nan).is_err());
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let net = RoadNetwork::generate(8, 3).unwrap();
        let cfg = SynthConfig {
            n_nodes: 8,
            n_days: 2,
            ..Default::default()
        };
        let a = synth_generate(&net, &cfg, 5).unwrap();
        let b = synth_generate(&net, &cfg, 5).unwrap();
        assert_eq!(speed_to_bytes(&a), speed_to_bytes(&b));
        let c = synth_generate(&net, &cfg, 6).unwrap();
        assert_ne!(a.values(), c.values());
        assert!(net.distances().data().iter().all(|d| d.is_finite()));
    }
}
