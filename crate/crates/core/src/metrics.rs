//! Counting metrics (MAE, RMSE, NAE, SRE) and the diagnostics used to show
//! how a few high-count images dominate MAE/RMSE: top-count exclusion and
//! the count histogram.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground-truth and predicted count for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRecord {
    pub id: String,
    pub gt: u64,
    pub pred: f64,
}

impl CountRecord {
    pub fn new(id: impl Into<String>, gt: u64, pred: f64) -> Self {
        CountRecord {
            id: id.into(),
            gt,
            pred,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "L")]
    pub len: usize,
    pub mae: f64,
    pub rmse: f64,
    pub nae: f64,
    pub sre: f64,
}

/// MAE, RMSE, NAE and SRE over `records`.
///
/// Every record needs `gt >= 1`: a zero count makes NAE and SRE undefined and
/// is reported as [`Error::ZeroGroundTruth`] rather than skipped.
pub fn compute_metrics(records: &[CountRecord]) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no records to evaluate".into()));
    }
    let (mut abs, mut sq, mut rel_abs, mut rel_sq) = (0.0, 0.0, 0.0, 0.0);
    for r in records {
        if r.gt == 0 {
            return Err(Error::ZeroGroundTruth { id: r.id.clone() });
        }
        if !r.pred.is_finite() || r.pred < 0.0 {
            return Err(Error::InvalidInput(format!(
                "record `{}`: prediction {} must be finite and nonnegative",
                r.id, r.pred
            )));
        }
        let gt = r.gt as f64;
        let err = r.pred - gt;
        abs += err.abs();
        sq += err * err;
        rel_abs += err.abs() / gt;
        rel_sq += err * err / gt;
    }
    let len = records.len() as f64;
    Ok(MetricReport {
        len: records.len(),
        mae: abs / len,
        rmse: (sq / len).sqrt(),
        nae: rel_abs / len,
        sre: (rel_sq / len).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusionReport {
    pub full: MetricReport,
    pub excluded: MetricReport,
    pub dropped_ids: Vec<String>,
}

/// Metrics before and after dropping the `k` records with the largest
/// ground truth. Ties in `gt` are broken by ascending id.
pub fn exclusion_report(records: &[CountRecord], k: usize) -> Result<ExclusionReport> {
    if k >= records.len() {
        return Err(Error::param(
            "k",
            format!("cannot exclude {k} of {} records", records.len()),
        ));
    }
    let full = compute_metrics(records)?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        let (a, b) = (&records[a], &records[b]);
        b.gt.cmp(&a.gt).then_with(|| a.id.cmp(&b.id))
    });
    let mut keep = vec![true; records.len()];
    order[..k].iter().for_each(|&i| keep[i] = false);
    let dropped_ids = order[..k].iter().map(|&i| records[i].id.clone()).collect();
    let kept: Vec<CountRecord> = records
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(r, _)| r.clone())
        .collect();
    let excluded = compute_metrics(&kept)?;
    Ok(ExclusionReport {
        full,
        excluded,
        dropped_ids,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
}

/// Equal-width histogram of ground-truth counts over `[min gt, max gt]`.
/// Bins are half-open except the last, which includes the top edge.
pub fn bin_distribution(records: &[CountRecord], n_bins: usize) -> Result<Vec<Bin>> {
    if n_bins == 0 {
        return Err(Error::param("n_bins", "must be at least 1"));
    }
    let (Some(min), Some(max)) = (
        records.iter().map(|r| r.gt).min(),
        records.iter().map(|r| r.gt).max(),
    ) else {
        return Err(Error::InvalidInput("no records to bin".into()));
    };
    let (min, max) = (min as f64, max as f64);
    let width = (max - min) / n_bins as f64;
    let mut bins: Vec<Bin> = (0..n_bins)
        .map(|b| Bin {
            low: min + b as f64 * width,
            high: if b + 1 == n_bins { max } else { min + (b + 1) as f64 * width },
            count: 0,
        })
        .collect();
    for r in records {
        let idx = if width > 0.0 {
            (((r.gt as f64 - min) / width).floor() as usize).min(n_bins - 1)
        } else {
            0
        };
        bins[idx].count += 1;
    }
    Ok(bins)
}

pub fn write_histogram_csv<W: Write>(bins: &[Bin], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["bin_low", "bin_high", "count"])?;
    for b in bins {
        writer.write_record([b.low.to_string(), b.high.to_string(), b.count.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads `id,gt,pred` rows.
pub fn read_records_csv<R: Read>(input: R) -> Result<Vec<CountRecord>> {
    let mut reader = csv::Reader::from_reader(input);
    let mut records = Vec::new();
    for row in reader.deserialize() {
        records.push(row?);
    }
    Ok(records)
}

#[derive(Deserialize)]
struct PredictionRow {
    id: String,
    pred: f64,
}

/// Reads predictions from a CSV with at least `id` and `pred` columns.
pub fn read_predictions_csv<R: Read>(input: R) -> Result<Vec<(String, f64)>> {
    let mut reader = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for row in reader.deserialize::<PredictionRow>() {
        let row = row?;
        rows.push((row.id, row.pred));
    }
    Ok(rows)
}

#[derive(Deserialize)]
struct TruthRow {
    #[serde(alias = "pair_id")]
    id: String,
    #[serde(alias = "gt_count")]
    gt: u64,
}

/// Reads ground truth from `id,gt` rows; the mosaic pair table
/// (`pair_id,...,gt_count`) is accepted as well.
pub fn read_ground_truth_csv<R: Read>(input: R) -> Result<HashMap<String, u64>> {
    let mut reader = csv::Reader::from_reader(input);
    let mut truth = HashMap::new();
    for row in reader.deserialize::<TruthRow>() {
        let row = row?;
        if truth.insert(row.id.clone(), row.gt).is_some() {
            return Err(Error::InvalidInput(format!("duplicate ground-truth id `{}`", row.id)));
        }
    }
    Ok(truth)
}

/// Joins predictions with ground truth, keeping prediction order. Every
/// prediction must have a ground-truth entry.
pub fn join_records(
    predictions: &[(String, f64)],
    truth: &HashMap<String, u64>,
) -> Result<Vec<CountRecord>> {
    predictions
        .iter()
        .map(|(id, pred)| {
            truth
                .get(id)
                .map(|&gt| CountRecord::new(id.clone(), gt, *pred))
                .ok_or_else(|| Error::InvalidInput(format!("prediction `{id}` has no ground truth")))
        })
        .collect()
}
