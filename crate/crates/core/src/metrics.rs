//! Count-regression metrics and range-bucketed reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pair(truths: &[f64], preds: &[f64]) -> Result<()> {
    if truths.is_empty() {
        return Err(Error::Domain("metric over an empty sample".into()));
    }
    if truths.len() != preds.len() {
        return Err(Error::Domain(format!(
            "length mismatch: {} truths vs {} predictions",
            truths.len(),
            preds.len()
        )));
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn mae(truths: &[f64], preds: &[f64]) -> Result<f64> {
    check_pair(truths, preds)?;
    Ok(truths.iter().zip(preds).map(|(y, p)| (y - p).abs()).sum::<f64>() / truths.len() as f64)
}

pub fn rmse(truths: &[f64], preds: &[f64]) -> Result<f64> {
    check_pair(truths, preds)?;
    let mse = truths.iter().zip(preds).map(|(y, p)| (y - p).powi(2)).sum::<f64>() / truths.len() as f64;
    Ok(mse.sqrt())
}

/// Coefficient of determination.
pub fn r2(truths: &[f64], preds: &[f64]) -> Result<f64> {
    check_pair(truths, preds)?;
    let m = mean(truths);
    let ss_tot: f64 = truths.iter().map(|y| (y - m).powi(2)).sum();
    if truths.len() < 2 || ss_tot == 0.0 {
        return Err(Error::Undefined("R² needs at least two distinct truths".into()));
    }
    let ss_res: f64 = truths.iter().zip(preds).map(|(y, p)| (y - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Mean absolute percentage error, in percent.
pub fn mape(truths: &[f64], preds: &[f64]) -> Result<f64> {
    check_pair(truths, preds)?;
    if let Some(y) = truths.iter().find(|&&y| y.is_nan() || y < 1.0) {
        return Err(Error::Domain(format!("MAPE needs truths >= 1, got {y}")));
    }
    Ok(truths.iter().zip(preds).map(|(y, p)| (y - p).abs() / y).sum::<f64>() / truths.len() as f64 * 100.0)
}

pub fn pearson(truths: &[f64], preds: &[f64]) -> Result<f64> {
    check_pair(truths, preds)?;
    if truths.len() < 2 {
        return Err(Error::Undefined("correlation needs at least two pairs".into()));
    }
    let (mx, my) = (mean(truths), mean(preds));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in truths.iter().zip(preds) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation of a constant vector".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Rank correlation: Pearson correlation of average ranks. Reduces to
/// `1 - 6 Σd² / (n(n²-1))` when there are no ties.
pub fn spearman(truths: &[f64], preds: &[f64]) -> Result<f64> {
    check_pair(truths, preds)?;
    pearson(&average_ranks(truths), &average_ranks(preds))
}

/// Five-number summary with Tukey-fence outlier count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub outlier_count: usize,
}

/// Linearly interpolated quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn distribution(xs: &[f64]) -> Result<Distribution> {
    if xs.is_empty() {
        return Err(Error::Domain("distribution of an empty sample".into()));
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    Ok(Distribution {
        min: sorted[0],
        q1,
        median: quantile_sorted(&sorted, 0.5),
        q3,
        max: sorted[sorted.len() - 1],
        outlier_count: sorted.iter().filter(|&&x| x < lo || x > hi).count(),
    })
}

/// All six metrics over one sample. Correlations and R² are absent when undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    pub r2: Option<f64>,
    pub mape: f64,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Undefined(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

impl MetricSet {
    pub fn compute(truths: &[f64], preds: &[f64]) -> Result<Self> {
        Ok(MetricSet {
            n: truths.len(),
            mae: mae(truths, preds)?,
            rmse: rmse(truths, preds)?,
            r2: defined(r2(truths, preds))?,
            mape: mape(truths, preds)?,
            pearson: defined(pearson(truths, preds))?,
            spearman: defined(spearman(truths, preds))?,
        })
    }
}

/// Count ranges used for bucketed error reporting; bounds are inclusive.
pub const BUCKETS: [(u64, Option<u64>); 3] = [(1, Some(20)), (21, Some(50)), (51, None)];

pub fn bucket_label(lo: u64, hi: Option<u64>) -> String {
    match hi {
        Some(h) => format!("[{lo}-{h}]"),
        None => format!("[{lo}, -]"),
    }
}

/// Index into [`BUCKETS`] for a ground-truth count.
pub fn bucket_of(truth: f64) -> usize {
    BUCKETS
        .iter()
        .position(|&(_, hi)| hi.is_none_or(|h| truth <= h as f64))
        .expect("last bucket is unbounded")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketEntry {
    pub label: String,
    /// Absent when no truth falls in the range.
    pub stats: Option<BucketStats>,
}

/// Overall metrics, per-range errors and distribution statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeReport {
    pub metrics: MetricSet,
    pub buckets: Vec<BucketEntry>,
    pub truth_distribution: Distribution,
    pub prediction_distribution: Distribution,
}

impl RangeReport {
    pub fn bucket(&self, index: usize) -> Option<&BucketStats> {
        self.buckets.get(index).and_then(|b| b.stats.as_ref())
    }
}

pub fn bucketed_report(truths: &[f64], preds: &[f64]) -> Result<RangeReport> {
    let metrics = MetricSet::compute(truths, preds)?;
    let mut split: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); BUCKETS.len()];
    for (&y, &p) in truths.iter().zip(preds) {
        let b = bucket_of(y);
        split[b].0.push(y);
        split[b].1.push(p);
    }
    let buckets = BUCKETS
        .iter()
        .zip(split)
        .map(|(&(lo, hi), (ys, ps))| {
            let stats = if ys.is_empty() {
                None
            } else {
                Some(BucketStats {
                    n: ys.len(),
                    mae: mae(&ys, &ps)?,
                    rmse: rmse(&ys, &ps)?,
                })
            };
            Ok(BucketEntry {
                label: bucket_label(lo, hi),
                stats,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RangeReport {
        metrics,
        buckets,
        truth_distribution: distribution(truths)?,
        prediction_distribution: distribution(preds)?,
    })
}

/// Full evaluation of one checkpoint on a test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub parse_failure_count: usize,
    /// All scenes from domains seen during training.
    pub in_domain: Option<RangeReport>,
    /// Scenes from test-only domains.
    pub out_of_domain: Option<RangeReport>,
    pub per_domain: BTreeMap<String, MetricSet>,
    pub per_domain_parse_failures: BTreeMap<String, usize>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned text table: one row per domain plus the aggregate rows.
    pub fn render_table(&self) -> String {
        let mut rows: Vec<(String, &MetricSet)> = self.per_domain.iter().map(|(k, v)| (k.clone(), v)).collect();
        if let Some(r) = &self.in_domain {
            rows.push(("in-domain".into(), &r.metrics));
        }
        if let Some(r) = &self.out_of_domain {
            rows.push(("out-of-domain".into(), &r.metrics));
        }
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(6).max(6);
        let mut out = format!(
            "{:<width$}  {:>5}  {:>10}  {:>10}  {:>8}  {:>9}  {:>8}  {:>8}\n",
            "domain", "n", "MAE", "RMSE", "R2", "MAPE(%)", "Pearson", "Spearman"
        );
        for (name, m) in rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>5}  {:>10.3}  {:>10.3}  {:>8}  {:>9.2}  {:>8}  {:>8}",
                name,
                m.n,
                m.mae,
                m.rmse,
                fmt_opt(m.r2),
                m.mape,
                fmt_opt(m.pearson),
                fmt_opt(m.spearman)
            );
        }
        for (name, r) in [("in-domain", &self.in_domain), ("out-of-domain", &self.out_of_domain)] {
            if let Some(r) = r {
                let _ = write!(out, "{name} ranges:");
                for b in &r.buckets {
                    match &b.stats {
                        Some(s) => {
                            let _ = write!(out, "  {} MAE {:.3} RMSE {:.3} (n={})", b.label, s.mae, s.rmse, s.n);
                        }
                        None => {
                            let _ = write!(out, "  {} -", b.label);
                        }
                    }
                }
                out.push('\n');
            }
        }
        let _ = writeln!(out, "parse failures: {}", self.parse_failure_count);
        out
    }
}
