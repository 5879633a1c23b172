//! Dice and depth MAE metrics, test-split evaluation and report output.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Frame;
use crate::manifest::{DatasetManifest, Provenance, Split};
use crate::model::{Network, Tensor};
use crate::scenegen::class;
use crate::training::TrainSample;
use crate::Error;

/// `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64, Error> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("mask sizes {} and {} differ", pred.len(), gt.len())));
    }
    let (inter, total) = dice_counts(pred, gt);
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// `(|A∩B|, |A|+|B|)`
fn dice_counts(pred: &[bool], gt: &[bool]) -> (usize, usize) {
    pred.iter().zip(gt).fold((0, 0), |(i, t), (&a, &b)| (i + (a && b) as usize, t + a as usize + b as usize))
}

/// Mean absolute difference over the pixels where `valid` is set.
pub fn mae_depth(pred_mm: &[f64], gt_mm: &[f64], valid: &[bool]) -> Result<f64, Error> {
    if pred_mm.len() != gt_mm.len() || valid.len() != gt_mm.len() {
        return Err(Error::shape("depth maps and mask differ in size"));
    }
    let (sum, n) = pred_mm
        .iter()
        .zip(gt_mm)
        .zip(valid)
        .filter(|(_, &v)| v)
        .fold((0.0, 0usize), |(s, n), ((p, g), _)| (s + (p - g).abs(), n + 1));
    if n == 0 {
        return Err(Error::invalid("empty valid mask"));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiceAverage {
    /// Mean of per-sample scores.
    #[default]
    Macro,
    /// One score over the pooled pixels of all samples.
    Micro,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub average: DiceAverage,
}

/// Per-sample scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub provenance: Provenance,
    pub dice_needle: f64,
    pub dice_instruments: f64,
    pub mae_depth_mm: Option<f64>,
    #[serde(skip)]
    counts: [(usize, usize); 2],
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMetrics {
    pub label: String,
    pub provenance: Provenance,
    pub samples: usize,
    pub dice_needle: f64,
    pub dice_instruments: f64,
    /// Synthetic rows only.
    pub mae_depth_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub average: DiceAverage,
    pub rows: Vec<CorpusMetrics>,
    pub per_sample: Vec<SampleMetrics>,
}

impl MetricsReport {
    /// Appends the rows and samples of another report.
    pub fn merge(&mut self, other: MetricsReport) {
        self.rows.extend(other.rows);
        self.per_sample.extend(other.per_sample);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table: one column per corpus, one row per metric.
    pub fn to_table(&self) -> String {
        let mut cols = vec!["".to_string()];
        cols.extend(self.rows.iter().map(|r| r.label.clone()));
        let width = cols.iter().map(|c| c.len()).max().unwrap_or(0).max(10) + 2;
        let mut out = String::new();
        let line = |out: &mut String, cells: Vec<String>| {
            for (i, c) in cells.iter().enumerate() {
                let w = if i == 0 { 22 } else { width };
                let _ = write!(out, "{c:<w$}");
            }
            out.push('\n');
        };
        line(&mut out, cols);
        let fmt = |v: Option<f64>, digits: usize| v.map_or("-".to_string(), |v| format!("{v:.digits$}"));
        line(&mut out, std::iter::once("Dice needle".to_string()).chain(self.rows.iter().map(|r| fmt(Some(r.dice_needle), 2))).collect());
        line(
            &mut out,
            std::iter::once("Dice instruments".to_string())
                .chain(self.rows.iter().map(|r| fmt(Some(r.dice_instruments), 2)))
                .collect(),
        );
        line(&mut out, std::iter::once("MAE depth [mm]".to_string()).chain(self.rows.iter().map(|r| fmt(r.mae_depth_mm, 1))).collect());
        line(&mut out, std::iter::once("samples".to_string()).chain(self.rows.iter().map(|r| r.samples.to_string())).collect());
        out
    }
}

/// Scores one predicted label map (and optional depth) against ground truth.
pub fn score_sample(
    id: &str,
    provenance: Provenance,
    pred_labels: &[u8],
    gt_labels: &[u8],
    depth: Option<(&[f64], &[f64])>,
) -> Result<SampleMetrics, Error> {
    let mask = |m: &[u8], c: u8| m.iter().map(|&v| v == c).collect::<Vec<_>>();
    let mut counts = [(0, 0); 2];
    let mut scores = [0.0; 2];
    for (k, c) in [class::NEEDLE, class::INSTRUMENT].into_iter().enumerate() {
        let (p, g) = (mask(pred_labels, c), mask(gt_labels, c));
        scores[k] = dice(&p, &g)?;
        counts[k] = dice_counts(&p, &g);
    }
    let mae_depth_mm = match depth {
        Some((pred, gt)) => {
            let valid: Vec<bool> = gt.iter().map(|&d| d > 0.0).collect();
            Some(mae_depth(pred, gt, &valid)?)
        }
        None => None,
    };
    Ok(SampleMetrics {
        id: id.to_string(),
        provenance,
        dice_needle: scores[0],
        dice_instruments: scores[1],
        mae_depth_mm,
        counts,
    })
}

/// Folds per-sample scores into one table row per provenance present.
pub fn summarize(label: &str, samples: Vec<SampleMetrics>, average: DiceAverage) -> MetricsReport {
    let mut rows = Vec::new();
    for prov in [Provenance::Synthetic, Provenance::Real, Provenance::Prediction] {
        let group: Vec<&SampleMetrics> = samples.iter().filter(|s| s.provenance == prov).collect();
        if group.is_empty() {
            continue;
        }
        let n = group.len() as f64;
        let pooled = |k: usize| {
            let (i, t) = group.iter().fold((0, 0), |(i, t), s| (i + s.counts[k].0, t + s.counts[k].1));
            if t == 0 { 1.0 } else { 2.0 * i as f64 / t as f64 }
        };
        let (dn, di) = match average {
            DiceAverage::Macro => (
                group.iter().map(|s| s.dice_needle).sum::<f64>() / n,
                group.iter().map(|s| s.dice_instruments).sum::<f64>() / n,
            ),
            DiceAverage::Micro => (pooled(0), pooled(1)),
        };
        let maes: Vec<f64> = group.iter().filter_map(|s| s.mae_depth_mm).collect();
        let mae = (prov == Provenance::Synthetic && !maes.is_empty()).then(|| maes.iter().sum::<f64>() / maes.len() as f64);
        let suffix = match prov {
            Provenance::Synthetic => "synthetic",
            Provenance::Real => "real",
            Provenance::Prediction => "prediction",
        };
        rows.push(CorpusMetrics {
            label: if label.is_empty() { suffix.to_string() } else { format!("{label} {suffix}") },
            provenance: prov,
            samples: group.len(),
            dice_needle: dn,
            dice_instruments: di,
            mae_depth_mm: mae,
        });
    }
    MetricsReport { average, rows, per_sample: samples }
}

/// Runs the network over the test split of `manifest`. Labels are the
/// per-pixel argmax of the segmentation output; MAE is reported for
/// synthetic samples only.
pub fn evaluate(network: &Network<f32>, manifest: &DatasetManifest, cfg: &EvalConfig, label: &str) -> Result<MetricsReport, Error> {
    let records: Vec<_> = manifest.split(Split::Test).collect();
    if records.is_empty() {
        return Err(Error::EmptyTestSplit);
    }
    let model = &network.config;
    let samples = records
        .par_iter()
        .map(|record| {
            let frame = Frame::load(manifest, record)?;
            let gt = frame.seg.as_ref().ok_or_else(|| Error::MissingSegmentation(record.id.clone()))?;
            let sample = TrainSample::from_frame(&record.id, &frame, model.depth_scale_mm);
            let [h, w] = model.input_size;
            if [sample.height, sample.width] != [h, w] {
                return Err(Error::shape(format!("record {} does not match the model input size", record.id)));
            }
            let pred = network.forward(&Tensor::from_vec(sample.rgb, [1, 3, h, w])?)?;
            let depth = match (&frame.depth, record.provenance) {
                (Some(d), Provenance::Synthetic) => {
                    Some((pred.depth_mm(0, model.depth_scale_mm), d.as_raw().iter().map(|&v| v as f64).collect::<Vec<_>>()))
                }
                _ => None,
            };
            score_sample(
                &record.id,
                record.provenance,
                &pred.argmax(0),
                gt.as_raw(),
                depth.as_ref().map(|(p, g)| (p.as_slice(), g.as_slice())),
            )
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(summarize(label, samples, cfg.average))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(w: usize, h: usize, x0: usize, y0: usize) -> Vec<bool> {
        let mut m = vec![false; 16];
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                m[y * 4 + x] = true;
            }
        }
        m
    }

    #[test]
    fn dice_examples() {
        let a = block(2, 2, 0, 0);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &block(2, 2, 2, 2)).unwrap(), 0.0);
        // Adjacent blocks sharing a 2x1 strip.
        assert_eq!(dice(&a, &block(2, 2, 1, 0)).unwrap(), 0.5);
        assert_eq!(dice(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert!(dice(&a, &[true; 3]).is_err());
    }

    #[test]
    fn mae_examples() {
        let gt = [12.0, 18.0, 33.0];
        let all = [true; 3];
        assert_eq!(mae_depth(&gt, &gt, &all).unwrap(), 0.0);
        assert!((mae_depth(&[15.0, 21.0, 36.0], &gt, &all).unwrap() - 3.0).abs() < 1e-12);
        assert!((mae_depth(&[10.0, 20.0, 30.0], &gt, &all).unwrap() - 7.0 / 3.0).abs() < 1e-12);
        assert!(mae_depth(&gt, &gt, &[false; 3]).is_err());
        assert!(mae_depth(&gt, &gt[..2], &all).is_err());
    }

    #[test]
    fn macro_and_micro_averages() {
        let gt = [0u8, 1, 1, 2];
        let a = score_sample("a", Provenance::Real, &[0, 1, 1, 2], &gt, None).unwrap();
        let b = score_sample("b", Provenance::Real, &[0, 0, 0, 0], &[0, 1, 0, 0], None).unwrap();
        let mac = summarize("", vec![a.clone(), b.clone()], DiceAverage::Macro);
        assert_eq!(mac.rows[0].dice_needle, 0.5);
        assert_eq!(mac.rows[0].mae_depth_mm, None);
        let mic = summarize("", vec![a, b], DiceAverage::Micro);
        // 2*2 / (2 + 2 + 0 + 1)
        assert!((mic.rows[0].dice_needle - 0.8).abs() < 1e-12);
        assert_eq!(mic.rows[0].dice_instruments, 1.0);
    }

    #[test]
    fn table_lists_every_row() {
        let s = score_sample("s", Provenance::Synthetic, &[1, 2], &[1, 2], Some((&[10.0, 20.0], &[11.0, 20.0]))).unwrap();
        let mut report = summarize("joint", vec![s], DiceAverage::Macro);
        assert_eq!(report.rows[0].mae_depth_mm, Some(0.5));
        let r = score_sample("r", Provenance::Real, &[1, 0], &[1, 2], None).unwrap();
        report.merge(summarize("finetuned", vec![r], DiceAverage::Macro));
        let table = report.to_table();
        assert!(table.contains("joint synthetic") && table.contains("finetuned real"));
        assert!(table.lines().nth(3).unwrap().contains("0.5"));
        let back: MetricsReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back.rows, report.rows);
    }
}
