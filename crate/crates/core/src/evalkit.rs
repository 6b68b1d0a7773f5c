//! Bidirectional nearest-neighbour pore matching and detection metrics.
//!
//! A detection `i` is *true* when its nearest ground-truth pore `j'` has `i`
//! as its own nearest detection. Distances are compared as exact integer
//! squared distances; ties go to the lowest index.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataprep::Pore;
use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;

fn dist2(a: Pore, b: Pore) -> u64 {
    let dr = a.0.abs_diff(b.0) as u64;
    let dc = a.1.abs_diff(b.1) as u64;
    dr * dr + dc * dc
}

fn argmin(values: impl Iterator<Item = u64>) -> Option<usize> {
    let mut best: Option<(usize, u64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Nearest ground-truth pore of every detection (`None` without ground truth).
    pub nearest_gt: Vec<Option<usize>>,
    /// Whether each detection is its nearest pore's nearest detection.
    pub mutual: Vec<bool>,
    pub true_detections: Vec<usize>,
    pub false_detections: Vec<usize>,
    /// Ground-truth pores no true detection claims.
    pub missed: Vec<usize>,
}

pub fn match_pores(detected: &[Pore], gt: &[Pore]) -> MatchResult {
    let mut result = MatchResult::default();
    if gt.is_empty() {
        result.nearest_gt = vec![None; detected.len()];
        result.mutual = vec![false; detected.len()];
        result.false_detections = (0..detected.len()).collect();
        return result;
    }
    // Nearest detection of each ground-truth pore (column argmin).
    let col_best: Vec<Option<usize>> = gt
        .iter()
        .map(|&g| argmin(detected.iter().map(|&d| dist2(d, g))))
        .collect();
    let mut hit = vec![false; gt.len()];
    for (i, &d) in detected.iter().enumerate() {
        let j = argmin(gt.iter().map(|&g| dist2(d, g))).expect("ground truth is non-empty");
        let mutual = col_best[j] == Some(i);
        result.nearest_gt.push(Some(j));
        result.mutual.push(mutual);
        if mutual {
            hit[j] = true;
            result.true_detections.push(i);
        } else {
            result.false_detections.push(i);
        }
    }
    result.missed = hit
        .iter()
        .enumerate()
        .filter(|(_, &h)| !h)
        .map(|(j, _)| j)
        .collect();
    result
}

/// Raw detection tallies; additive across images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub true_detections: usize,
    pub false_detections: usize,
    pub total_gt: usize,
}

impl Counts {
    pub fn from_match(m: &MatchResult, total_gt: usize) -> Self {
        Counts {
            true_detections: m.true_detections.len(),
            false_detections: m.false_detections.len(),
            total_gt,
        }
    }

    pub fn total_detections(&self) -> usize {
        self.true_detections + self.false_detections
    }
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            true_detections: self.true_detections + o.true_detections,
            false_detections: self.false_detections + o.false_detections,
            total_gt: self.total_gt + o.total_gt,
        }
    }
}

/// Detection rates; `r_t` is recall and `r_f` is one minus precision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub r_t: f64,
    pub r_f: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl Rates {
    /// `R_T = 0` without ground truth and `R_F = 0` without detections.
    pub fn from_counts(c: Counts) -> Self {
        let det = c.total_detections();
        let recall = if c.total_gt == 0 {
            0.0
        } else {
            c.true_detections as f64 / c.total_gt as f64
        };
        let r_f = if det == 0 {
            0.0
        } else {
            c.false_detections as f64 / det as f64
        };
        let precision = 1.0 - r_f;
        Rates {
            r_t: recall,
            r_f,
            precision,
            recall,
            f_score: harmonic(precision, recall),
        }
    }

    /// Per-image mean of every rate (F is the mean of per-image F scores).
    pub fn macro_average(per_image: &[Rates]) -> Self {
        if per_image.is_empty() {
            return Rates::default();
        }
        let n = per_image.len() as f64;
        let mean = |f: fn(&Rates) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        Rates {
            r_t: mean(|r| r.r_t),
            r_f: mean(|r| r.r_f),
            precision: mean(|r| r.precision),
            recall: mean(|r| r.recall),
            f_score: mean(|r| r.f_score),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub th_p: Option<f64>,
    pub images: usize,
    pub counts: Counts,
    pub micro: Rates,
    #[serde(rename = "macro")]
    pub macro_: Rates,
}

impl DetectionReport {
    pub fn from_image_counts(per_image: &[Counts], th_p: Option<f64>) -> Self {
        let pooled = per_image.iter().copied().fold(Counts::default(), |a, b| a + b);
        let rates: Vec<Rates> = per_image.iter().map(|&c| Rates::from_counts(c)).collect();
        DetectionReport {
            th_p,
            images: per_image.len(),
            counts: pooled,
            micro: Rates::from_counts(pooled),
            macro_: Rates::macro_average(&rates),
        }
    }
}

/// Report for a single image.
pub fn compute_metrics(m: &MatchResult, total_gt: usize) -> DetectionReport {
    DetectionReport::from_image_counts(&[Counts::from_match(m, total_gt)], None)
}

/// Evenly spaced thresholds `start, start+step, ..., end` (inclusive within
/// half a step), computed by multiplication so they do not drift and rounded
/// to nine decimals so `0.01:0.99:0.01` prints as written.
pub fn threshold_grid(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !start.is_finite() || !end.is_finite() || end < start {
        return Err(Error::config("grid", format!("bad range {start}:{end}:{step}")));
    }
    let n = ((end - start) / step + 0.5).floor() as usize + 1;
    Ok((0..n)
        .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
        .collect())
}

/// Parse `start:end:step`.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::config("grid", format!("expected start:end:step, got {spec:?}"));
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    match parts.as_slice() {
        [a, b, s] => threshold_grid(*a, *b, *s),
        _ => Err(bad()),
    }
}

pub fn default_grid() -> Vec<f64> {
    threshold_grid(0.01, 0.99, 0.01).expect("valid constant grid")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub th_p: f64,
    pub counts: Counts,
    pub micro: Rates,
    #[serde(rename = "macro")]
    pub macro_: Rates,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

/// One image's local-maximum candidates and its ground truth.
pub struct ScoredImage<'a> {
    /// Every local maximum with its intensity, thresholds not yet applied.
    pub candidates: &'a [Detection],
    pub gt: &'a [Pore],
}

/// Counts of one image when only candidates above `th` are kept.
pub fn counts_at(image: &ScoredImage<'_>, th: f64) -> Counts {
    let det: Vec<Pore> = image
        .candidates
        .iter()
        .filter(|d| d.value as f64 > th)
        .map(|d| (d.row, d.col))
        .collect();
    Counts::from_match(&match_pores(&det, image.gt), image.gt.len())
}

/// Sweep thresholds over pre-computed candidates; thresholds must be strictly
/// increasing.
pub fn roc_sweep(images: &[ScoredImage<'_>], grid: &[f64]) -> Result<RocCurve> {
    if grid.is_empty() {
        return Err(Error::Empty("threshold grid"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("grid", "thresholds must be strictly increasing"));
    }
    let points = grid
        .iter()
        .map(|&th| {
            let per_image: Vec<Counts> = images.iter().map(|im| counts_at(im, th)).collect();
            let report = DetectionReport::from_image_counts(&per_image, Some(th));
            RocPoint {
                th_p: th,
                counts: report.counts,
                micro: report.micro,
                macro_: report.macro_,
            }
        })
        .collect();
    Ok(RocCurve { points })
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("th,RT_micro,RF_micro,F_micro,RT_macro,RF_macro,F_macro\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                p.th_p, p.micro.r_t, p.micro.r_f, p.micro.f_score, p.macro_.r_t, p.macro_.r_f, p.macro_.f_score
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_csv().as_bytes())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub th_p: f64,
    pub r_t: f64,
    pub r_f: f64,
    pub f_score: f64,
    /// The requested `R_F` lies outside the range the curve covers.
    pub out_of_range: bool,
}

/// Point whose micro `R_F` is nearest `target_rf`; ties prefer higher `R_T`,
/// then the lower threshold.
pub fn operating_point(curve: &RocCurve, target_rf: f64) -> Result<OperatingPoint> {
    let first = curve.points.first().ok_or(Error::Empty("ROC curve"))?;
    let mut best = first;
    for p in &curve.points[1..] {
        let d = (p.micro.r_f - target_rf).abs();
        let bd = (best.micro.r_f - target_rf).abs();
        if d < bd || (d == bd && p.micro.r_t > best.micro.r_t) {
            best = p;
        }
    }
    let lo = curve.points.iter().map(|p| p.micro.r_f).fold(f64::INFINITY, f64::min);
    let hi = curve.points.iter().map(|p| p.micro.r_f).fold(f64::NEG_INFINITY, f64::max);
    Ok(OperatingPoint {
        th_p: best.th_p,
        r_t: best.micro.r_t,
        r_f: best.micro.r_f,
        f_score: best.micro.f_score,
        out_of_range: target_rf < lo || target_rf > hi,
    })
}

/// Point with the highest micro F-score (lowest threshold among ties).
pub fn best_f_point(curve: &RocCurve) -> Result<OperatingPoint> {
    let first = curve.points.first().ok_or(Error::Empty("ROC curve"))?;
    let best = curve
        .points
        .iter()
        .fold(first, |b, p| if p.micro.f_score > b.micro.f_score { p } else { b });
    Ok(OperatingPoint {
        th_p: best.th_p,
        r_t: best.micro.r_t,
        r_f: best.micro.r_f,
        f_score: best.micro.f_score,
        out_of_range: false,
    })
}

/// Pore map and every local-maximum candidate of each image (no threshold).
pub fn score_images(
    net: &crate::porenet::PoreNet<f32>,
    images: &[&crate::plane::Plane<u8>],
    opts: crate::detector::MaximaOptions,
) -> Result<Vec<Vec<Detection>>> {
    images
        .iter()
        .map(|img| {
            let map = crate::detector::predict_map(net, img)?;
            crate::detector::local_maxima(&map, f32::NEG_INFINITY, opts)
        })
        .collect()
}
