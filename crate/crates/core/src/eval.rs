//! Masked error metrics, reference baselines and dataset statistics.
//!
//! Metrics are taken over the observed entries of each horizon separately:
//! MAE and RMSE in speed units, MAPE in percent.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::data::{Dataset, Segment, Sentinel, SpeedSeries, Split};
use crate::error::{Error, Result};
use crate::graph::csv_err;
use crate::numerics::Tensor;

pub const DEFAULT_HORIZONS: [usize; 3] = [3, 6, 12];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
    pub n_observed: usize,
}

/// Running sums for one horizon.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Sums {
    abs: f64,
    sq: f64,
    ape: f64,
    count: usize,
}

impl Sums {
    fn add(&mut self, pred: f64, truth: f64) {
        let e = pred - truth;
        self.abs += e.abs();
        self.sq += e * e;
        self.ape += (e / truth).abs();
        self.count += 1;
    }

    fn merge(&mut self, o: &Sums) {
        self.abs += o.abs;
        self.sq += o.sq;
        self.ape += o.ape;
        self.count += o.count;
    }

    fn metrics(&self) -> Option<Metrics> {
        (self.count > 0).then(|| {
            let n = self.count as f64;
            Metrics {
                mae: self.abs / n,
                rmse: (self.sq / n).sqrt(),
                mape: 100.0 * self.ape / n,
                n_observed: self.count,
            }
        })
    }
}

/// Streaming masked metrics, one slot per horizon (1-based in reports).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricAccumulator {
    sums: Vec<Sums>,
    sentinel: Sentinel,
}

impl MetricAccumulator {
    pub fn new(n_horizons: usize, sentinel: Sentinel) -> Self {
        MetricAccumulator {
            sums: vec![Sums::default(); n_horizons],
            sentinel,
        }
    }

    pub fn n_horizons(&self) -> usize {
        self.sums.len()
    }

    /// Adds one entry at 0-based step `step`; missing truths are skipped.
    pub fn add(&mut self, step: usize, pred: f64, truth: f64) {
        if !self.sentinel.is_missing(truth) {
            self.sums[step].add(pred, truth);
        }
    }

    pub fn add_slices(&mut self, step: usize, pred: &[f64], truth: &[f64]) {
        for (&p, &t) in pred.iter().zip(truth) {
            self.add(step, p, t);
        }
    }

    /// Metrics at 1-based horizon `h`; `None` when nothing was observed.
    pub fn horizon(&self, h: usize) -> Option<Metrics> {
        self.sums.get(h.checked_sub(1)?)?.metrics()
    }

    /// Metrics pooled over every step.
    pub fn overall(&self) -> Option<Metrics> {
        let mut s = Sums::default();
        for x in &self.sums {
            s.merge(x);
        }
        s.metrics()
    }

    pub fn report(&self, model: &str, horizons: &[usize]) -> MetricReport {
        MetricReport {
            rows: horizons
                .iter()
                .map(|&h| ReportRow {
                    model: model.to_string(),
                    horizon: h,
                    metrics: self.horizon(h),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub horizon: usize,
    /// Absent when the horizon had no observed entries.
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub rows: Vec<ReportRow>,
}

impl MetricReport {
    pub fn extend(&mut self, other: MetricReport) {
        self.rows.extend(other.rows);
    }

    pub fn get(&self, model: &str, horizon: usize) -> Option<Metrics> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.horizon == horizon)
            .and_then(|r| r.metrics)
    }

    /// `model,horizon,mae,rmse,mape,n_observed`; absent horizons leave the
    /// metric fields empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["model", "horizon", "mae", "rmse", "mape", "n_observed"])
            .map_err(|e| csv_err(path, e))?;
        for r in &self.rows {
            let rec = match r.metrics {
                Some(m) => [
                    r.model.clone(),
                    r.horizon.to_string(),
                    format!("{:.6}", m.mae),
                    format!("{:.6}", m.rmse),
                    format!("{:.2}", m.mape),
                    m.n_observed.to_string(),
                ],
                None => [
                    r.model.clone(),
                    r.horizon.to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                    "0".into(),
                ],
            };
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
        let mut s = format!(
            "{:<width$}  {:>7}  {:>9}  {:>9}  {:>8}  {:>10}\n",
            "model", "horizon", "MAE", "RMSE", "MAPE%", "observed"
        );
        for r in &self.rows {
            match r.metrics {
                Some(m) => writeln!(
                    s,
                    "{:<width$}  {:>7}  {:>9.4}  {:>9.4}  {:>8.2}  {:>10}",
                    r.model, r.horizon, m.mae, m.rmse, m.mape, m.n_observed
                ),
                None => writeln!(s, "{:<width$}  {:>7}  {:>9}  {:>9}  {:>8}  {:>10}", r.model, r.horizon, "-", "-", "-", 0),
            }
            .unwrap();
        }
        s
    }
}

/// Masked metrics of `[S, H, N]` predictions against truths at 1-based
/// `horizons`.
pub fn masked_metrics(
    pred: &Tensor,
    truth: &Tensor,
    sentinel: Sentinel,
    model: &str,
    horizons: &[usize],
) -> Result<MetricReport> {
    if pred.shape() != truth.shape() || pred.ndim() != 3 {
        return Err(Error::dim(
            "masked_metrics",
            format!("pred {:?} vs truth {:?}, expected equal [S, H, N]", pred.shape(), truth.shape()),
        ));
    }
    let (s, h, n) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    if let Some(&bad) = horizons.iter().find(|&&x| x == 0 || x > h) {
        return Err(Error::Config(format!("horizon {bad} outside [1, {h}]")));
    }
    let mut acc = MetricAccumulator::new(h, sentinel);
    for si in 0..s {
        for hi in 0..h {
            let o = (si * h + hi) * n;
            acc.add_slices(hi, &pred.data()[o..o + n], &truth.data()[o..o + n]);
        }
    }
    Ok(acc.report(model, horizons))
}

/// Per-node, per-slot-of-week means of a training segment.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoricalAverage {
    n_nodes: usize,
    slots: usize,
    table: Vec<f64>,
}

impl HistoricalAverage {
    /// Empty buckets fall back to the node's mean over the segment.
    pub fn fit(series: &SpeedSeries, seg: Segment) -> Result<Self> {
        let n = series.n_nodes;
        let slots = 7 * series.steps_per_day();
        let mut sum = vec![0.0; slots * n];
        let mut cnt = vec![0usize; slots * n];
        let (mut node_sum, mut node_cnt) = (vec![0.0; n], vec![0usize; n]);
        for t in seg.start..seg.end() {
            let slot = series.slot_of_week(t);
            for node in 0..n {
                let v = series.value(t, node);
                if !v.is_nan() {
                    sum[slot * n + node] += v;
                    cnt[slot * n + node] += 1;
                    node_sum[node] += v;
                    node_cnt[node] += 1;
                }
            }
        }
        if let Some(node) = node_cnt.iter().position(|&c| c == 0) {
            return Err(Error::Degenerate(format!("node {node} has no training observations")));
        }
        let table = (0..slots * n)
            .map(|i| {
                if cnt[i] > 0 {
                    sum[i] / cnt[i] as f64
                } else {
                    node_sum[i % n] / node_cnt[i % n] as f64
                }
            })
            .collect();
        Ok(HistoricalAverage { n_nodes: n, slots, table })
    }

    /// Prediction for `node` at step `t` of `series`.
    pub fn predict(&self, series: &SpeedSeries, t: usize, node: usize) -> f64 {
        self.table[(series.slot_of_week(t) % self.slots) * self.n_nodes + node]
    }
}

/// Last observed value of `node` in the input window ending before `end`;
/// looks further back when the window itself is empty, then forward.
pub fn last_observed(series: &SpeedSeries, end: usize, node: usize) -> f64 {
    (0..end)
        .rev()
        .map(|t| series.value(t, node))
        .find(|v| !v.is_nan())
        .or_else(|| (end..series.n_steps()).map(|t| series.value(t, node)).find(|v| !v.is_nan()))
        .unwrap_or(f64::NAN)
}

/// Persistence forecast for a raw input window: the last observed value
/// repeated over `q` steps.
pub fn baseline_persistence(window: &[Vec<f64>], q: usize) -> Result<Vec<Vec<f64>>> {
    let last = window
        .last()
        .ok_or_else(|| Error::Precondition("persistence needs at least one input step".into()))?;
    let n = last.len();
    let pred: Vec<f64> = (0..n)
        .map(|node| {
            window
                .iter()
                .rev()
                .map(|row| row[node])
                .find(|v| !v.is_nan())
                .unwrap_or(f64::NAN)
        })
        .collect();
    Ok(vec![pred; q])
}

/// Masked metrics of HA and persistence over the windows of `split`.
pub fn evaluate_baselines(data: &Dataset, split: Split, horizons: &[usize], sentinel: Sentinel) -> Result<MetricReport> {
    let (p, q, n) = (data.input_len, data.output_len, data.n_nodes());
    let ha = HistoricalAverage::fit(&data.raw, data.segment(Split::Train))?;
    let mut acc_ha = MetricAccumulator::new(q, sentinel);
    let mut acc_p = MetricAccumulator::new(q, sentinel);
    for s in data.windows(split) {
        for node in 0..n {
            let last = last_observed(&data.raw, s + p, node);
            for k in 0..q {
                let t = s + p + k;
                let truth = data.raw.value(t, node);
                acc_ha.add(k, ha.predict(&data.raw, t, node), truth);
                acc_p.add(k, last, truth);
            }
        }
    }
    let mut report = acc_ha.report("HA", horizons);
    report.extend(acc_p.report("persistence", horizons));
    Ok(report)
}

/// Pearson correlation over steps where both are observed; `None` for fewer
/// than two overlaps or zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let pairs: Vec<(f64, f64)> = a
        .iter()
        .zip(b)
        .filter(|(x, y)| !x.is_nan() && !y.is_nan())
        .map(|(&x, &y)| (x, y))
        .collect();
    if pairs.len() < 2 {
        return None;
    }
    let n = pairs.len() as f64;
    let (ma, mb) = (
        pairs.iter().map(|p| p.0).sum::<f64>() / n,
        pairs.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for &(x, y) in &pairs {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of `a[t]` with `b[t + lag]`.
pub fn lagged_pearson(a: &[f64], b: &[f64], lag: usize) -> Option<f64> {
    if lag >= a.len() {
        return None;
    }
    pearson(&a[..a.len() - lag], &b[lag..])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn build(values: impl IntoIterator<Item = f64>, lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0; bins.max(1)];
        let width = (hi - lo) / counts.len() as f64;
        for v in values {
            if v.is_nan() || v < lo || v > hi {
                continue;
            }
            let i = (((v - lo) / width) as usize).min(counts.len() - 1);
            counts[i] += 1;
        }
        Histogram { lo, hi, counts }
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + w * i as f64, self.lo + w * (i + 1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    /// Correlation of every unordered node pair with both nodes variable.
    pub correlations: Vec<(usize, usize, f64)>,
    pub excluded_nodes: Vec<usize>,
    pub correlation_hist: Histogram,
    pub speed_hist: Histogram,
}

pub fn analyze_dataset(series: &SpeedSeries, bins: usize) -> Result<DatasetStats> {
    if series.n_steps() < 2 {
        return Err(Error::Precondition("analysis needs at least 2 steps".into()));
    }
    let nodes: Vec<Vec<f64>> = (0..series.n_nodes).map(|n| series.node(n)).collect();
    let mut excluded = Vec::new();
    for (i, col) in nodes.iter().enumerate() {
        if pearson(col, col).is_none() {
            log::warn!("node {i} has zero variance; excluded from correlations");
            excluded.push(i);
        }
    }
    let mut correlations = Vec::new();
    for i in 0..nodes.len() {
        for j in i + 1..nodes.len() {
            if let Some(r) = pearson(&nodes[i], &nodes[j]) {
                correlations.push((i, j, r));
            }
        }
    }
    let observed = series.values().iter().copied().filter(|v| !v.is_nan());
    let (lo, hi) = observed
        .clone()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    Ok(DatasetStats {
        correlation_hist: Histogram::build(correlations.iter().map(|c| c.2), -1.0, 1.0, bins),
        speed_hist: Histogram::build(observed, lo.floor(), hi.ceil(), bins),
        correlations,
        excluded_nodes: excluded,
    })
}

/// `kind,bin_lo,bin_hi,count` rows for both histograms.
pub fn write_histograms_csv(path: &Path, stats: &DatasetStats) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["kind", "bin_lo", "bin_hi", "count"]).map_err(|e| csv_err(path, e))?;
    for (kind, h) in [("correlation", &stats.correlation_hist), ("speed", &stats.speed_hist)] {
        for (i, c) in h.counts.iter().enumerate() {
            let (a, b) = h.bin_edges(i);
            w.write_record([kind.to_string(), format!("{a:.4}"), format!("{b:.4}"), c.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t3(v: &[f64]) -> Tensor {
        Tensor::new(vec![1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn single_entry_metrics() {
        let r = masked_metrics(&t3(&[3.0]), &t3(&[2.0]), Sentinel::Zero, "m", &[1]).unwrap();
        let m = r.get("m", 1).unwrap();
        assert_eq!((m.mae, m.rmse, m.mape, m.n_observed), (1.0, 1.0, 50.0, 1));
    }

    #[test]
    fn perfect_and_masked() {
        let r = masked_metrics(&t3(&[1.0, 2.0]), &t3(&[1.0, 2.0]), Sentinel::Zero, "m", &[1]).unwrap();
        let m = r.get("m", 1).unwrap();
        assert_eq!((m.mae, m.rmse, m.mape), (0.0, 0.0, 0.0));
        let r = masked_metrics(&t3(&[99.0, 4.0]), &t3(&[0.0, 4.0]), Sentinel::Zero, "m", &[1]).unwrap();
        assert_eq!(r.get("m", 1).unwrap().mae, 0.0);
        let r = masked_metrics(&t3(&[1.0]), &t3(&[0.0]), Sentinel::Zero, "m", &[1]).unwrap();
        assert!(r.get("m", 1).is_none());
        assert!(r.to_table().contains('-'));
    }

    #[test]
    fn persistence_examples() {
        let ramp: Vec<Vec<f64>> = (0..12).map(|t| vec![t as f64]).collect();
        let pred = baseline_persistence(&ramp, 3).unwrap();
        for (k, row) in pred.iter().enumerate() {
            let truth = 12.0 + k as f64;
            assert_eq!((truth - row[0]).abs(), k as f64 + 1.0);
        }
        let gap = vec![vec![5.0], vec![f64::NAN]];
        assert_eq!(baseline_persistence(&gap, 2).unwrap(), vec![vec![5.0]; 2]);
    }

    #[test]
    fn correlation_examples() {
        let a: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).sin()).collect();
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson(&a, &[1.0; 20]).is_none());
    }

    #[test]
    fn histogram_bins() {
        let h = Histogram::build([0.0, 0.49, 0.5, 1.0, 2.0, f64::NAN], 0.0, 1.0, 2);
        assert_eq!(h.counts, vec![2, 2]);
    }
}
