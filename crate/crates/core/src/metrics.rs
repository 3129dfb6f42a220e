//! Segmentation metrics and robustness evaluation.
//!
//! IoU of two empty masks is 1.0. Predictions are binarized with `p >= 0.5`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::masking::PixelMask;
use crate::model::{forward, ModelState, PredMask};
use crate::parallel::par_map;
use crate::rng::RngStream;
use crate::synthdata::{corrupt, occlude_eval, CorruptionKind, SampleRecord, Tag};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const PRECISION_THRESHOLDS: [f64; 3] = [0.5, 0.7, 0.9];
pub const SEVERITIES: [u8; 5] = [1, 2, 3, 4, 5];
pub const DEFAULT_OCCLUSION_FRACTION: f64 = 0.5;

pub fn binarize(pred: &PredMask, threshold: f64) -> PixelMask {
    let bits = pred.probs().iter().map(|&p| p >= threshold).collect();
    PixelMask::from_bits(pred.height(), pred.width(), bits).expect("dims come from a valid PredMask")
}

/// Intersection and union pixel counts.
pub fn intersection_union(pred: &PixelMask, gt: &PixelMask) -> Result<(u64, u64)> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::invalid(format!(
            "mask {}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let (mut i, mut u) = (0u64, 0u64);
    for (&a, &b) in pred.bits().iter().zip(gt.bits()) {
        i += (a && b) as u64;
        u += (a || b) as u64;
    }
    Ok((i, u))
}

fn ratio(i: u64, u: u64) -> f64 {
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

pub fn iou(pred: &PixelMask, gt: &PixelMask) -> Result<f64> {
    let (i, u) = intersection_union(pred, gt)?;
    Ok(ratio(i, u))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub per_sample: Vec<f64>,
    pub intersection: u64,
    pub union: u64,
    pub miou: f64,
    pub oiou: f64,
    /// `(threshold, fraction of samples with IoU above it)`, thresholds ascending.
    pub p_at: Vec<(f64, f64)>,
}

impl EvalResult {
    /// Aggregates per-sample `(intersection, union)` counts in the given order.
    pub fn from_counts(counts: &[(u64, u64)]) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::invalid("no samples to evaluate"));
        }
        let per_sample: Vec<f64> = counts.iter().map(|&(i, u)| ratio(i, u)).collect();
        let intersection = counts.iter().map(|c| c.0).sum();
        let union = counts.iter().map(|c| c.1).sum();
        let n = per_sample.len() as f64;
        let miou = per_sample.iter().sum::<f64>() / n;
        let p_at = PRECISION_THRESHOLDS
            .iter()
            .map(|&t| (t, per_sample.iter().filter(|&&v| v > t).count() as f64 / n))
            .collect();
        Ok(Self {
            per_sample,
            intersection,
            union,
            miou,
            oiou: ratio(intersection, union),
            p_at,
        })
    }

    pub fn from_masks(preds: &[PixelMask], gts: &[PixelMask]) -> Result<Self> {
        if preds.len() != gts.len() {
            return Err(Error::invalid(format!("{} predictions for {} targets", preds.len(), gts.len())));
        }
        let counts = preds
            .iter()
            .zip(gts)
            .map(|(p, g)| intersection_union(p, g))
            .collect::<Result<Vec<_>>>()?;
        Self::from_counts(&counts)
    }

    pub fn precision_at(&self, threshold: f64) -> Option<f64> {
        self.p_at.iter().find(|(t, _)| *t == threshold).map(|&(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.per_sample.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_sample.is_empty()
    }
}

fn sample_counts(state: &ModelState, image: &ImageBuffer, s: &SampleRecord) -> Result<(u64, u64)> {
    let (pred, _) = forward(state, image, &s.tokens)?;
    intersection_union(&binarize(&pred, DEFAULT_THRESHOLD), &s.gt_mask)
}

/// Runs the model on every sample and aggregates in sample order.
pub fn evaluate(state: &ModelState, samples: &[&SampleRecord]) -> Result<EvalResult> {
    let counts = par_map(samples, |s| sample_counts(state, &s.image, s));
    EvalResult::from_counts(&counts.into_iter().collect::<Result<Vec<_>>>()?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionRow {
    pub kind: CorruptionKind,
    /// oIoU at severities 1 through 5.
    pub per_severity: Vec<f64>,
    pub mean_oiou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TagRow {
    pub tag: Tag,
    /// `None` when no validation sample falls in the subset.
    pub result: Option<EvalResult>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessReport {
    pub clean: EvalResult,
    pub corruptions: Vec<CorruptionRow>,
    pub tags: Vec<TagRow>,
}

impl RobustnessReport {
    /// Mean over kinds of the severity-averaged oIoU.
    pub fn mean_corrupted_oiou(&self) -> f64 {
        self.corruptions.iter().map(|r| r.mean_oiou).sum::<f64>() / self.corruptions.len() as f64
    }
}

/// Corruption rows, linguistic-tag rows and the clean result. Each
/// corrupted copy draws noise from a stream keyed by kind, severity and
/// sample index, so the report is a pure function of its inputs.
pub fn robustness_report(
    state: &ModelState,
    samples: &[&SampleRecord],
    kinds: &[CorruptionKind],
    seed: u64,
) -> Result<RobustnessReport> {
    robustness_report_with(state, samples, kinds, seed, DEFAULT_OCCLUSION_FRACTION, corrupt)
}

/// [`robustness_report`] with a caller-supplied corruption function.
pub fn robustness_report_with<F>(
    state: &ModelState,
    samples: &[&SampleRecord],
    kinds: &[CorruptionKind],
    seed: u64,
    occlusion_fraction: f64,
    corrupt_fn: F,
) -> Result<RobustnessReport>
where
    F: Fn(&ImageBuffer, CorruptionKind, u8, &mut RngStream) -> Result<ImageBuffer> + Sync,
{
    if samples.is_empty() {
        return Err(Error::invalid("robustness report needs validation samples"));
    }
    let clean = evaluate(state, samples)?;

    let mut corruptions = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let mut per_severity = Vec::with_capacity(SEVERITIES.len());
        for sev in SEVERITIES {
            let label = format!("corrupt/{kind}/{sev}");
            let indexed: Vec<(usize, &SampleRecord)> = samples.iter().copied().enumerate().collect();
            let counts = par_map(&indexed, |&(i, s)| {
                let mut rng = RngStream::with_counter(seed, &label, i as u64);
                let img = corrupt_fn(&s.image, kind, sev, &mut rng)?;
                sample_counts(state, &img, s)
            });
            let r = EvalResult::from_counts(&counts.into_iter().collect::<Result<Vec<_>>>()?)?;
            per_severity.push(r.oiou);
        }
        let mean_oiou = per_severity.iter().sum::<f64>() / per_severity.len() as f64;
        corruptions.push(CorruptionRow {
            kind,
            per_severity,
            mean_oiou,
        });
    }

    let mut tags = Vec::with_capacity(Tag::ALL.len());
    for tag in Tag::ALL {
        let result = match tag {
            Tag::Occlusion => {
                let mut occluded = Vec::new();
                for (i, s) in samples.iter().enumerate() {
                    let mut rng = RngStream::with_counter(seed, "occlude", i as u64);
                    let o = occlude_eval(s, occlusion_fraction, &mut rng)?;
                    if o.applied {
                        occluded.push(o.sample);
                    }
                }
                let refs: Vec<&SampleRecord> = occluded.iter().collect();
                (!refs.is_empty()).then(|| evaluate(state, &refs)).transpose()?
            }
            _ => {
                let subset: Vec<&SampleRecord> = samples.iter().copied().filter(|s| s.tags.contains(tag)).collect();
                (!subset.is_empty()).then(|| evaluate(state, &subset)).transpose()?
            }
        };
        tags.push(TagRow { tag, result });
    }

    Ok(RobustnessReport {
        clean,
        corruptions,
        tags,
    })
}

pub const EVAL_CSV_HEADER: &str = "subset,n,miou,oiou,p@0.5,p@0.7,p@0.9";
pub const CORRUPTION_CSV_HEADER: &str = "kind,s1,s2,s3,s4,s5,mean_oiou";
pub const LONG_CSV_HEADER: &str = "kind,severity,metric,value";

fn eval_csv_row(out: &mut String, name: &str, r: &EvalResult) {
    let _ = write!(out, "{name},{},{},{}", r.len(), r.miou, r.oiou);
    for (_, v) in &r.p_at {
        let _ = write!(out, ",{v}");
    }
    out.push('\n');
}

/// Clean and per-tag results as CSV. Empty subsets get `n = 0` and blank metrics.
pub fn eval_csv(clean: &EvalResult, tags: &[TagRow]) -> String {
    let mut out = format!("version,1\n{EVAL_CSV_HEADER}\n");
    eval_csv_row(&mut out, "clean", clean);
    for t in tags {
        match &t.result {
            Some(r) => eval_csv_row(&mut out, t.tag.name(), r),
            None => {
                let _ = writeln!(out, "{},0,,,,,", t.tag.name());
            }
        }
    }
    out
}

pub fn corruption_csv(report: &RobustnessReport) -> String {
    let mut out = format!("version,1\n{CORRUPTION_CSV_HEADER}\n");
    for row in &report.corruptions {
        out.push_str(row.kind.name());
        for v in &row.per_severity {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{}", row.mean_oiou);
    }
    out
}

/// One line per (kind, severity, metric); clean results use kind `clean`
/// and severity 0.
pub fn long_csv(report: &RobustnessReport) -> String {
    let mut out = format!("version,1\n{LONG_CSV_HEADER}\n");
    let _ = writeln!(out, "clean,0,miou,{}", report.clean.miou);
    let _ = writeln!(out, "clean,0,oiou,{}", report.clean.oiou);
    for row in &report.corruptions {
        for (sev, v) in SEVERITIES.iter().zip(&row.per_severity) {
            let _ = writeln!(out, "{},{sev},oiou,{v}", row.kind.name());
        }
    }
    out
}

/// Aligned plain-text table of the whole report.
pub fn text_table(report: &RobustnessReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<20}{:>6}{:>9}{:>9}", "subset", "n", "mIoU", "oIoU");
    let mut line = |name: &str, r: Option<&EvalResult>| match r {
        Some(r) => {
            let _ = writeln!(out, "{name:<20}{:>6}{:>9.4}{:>9.4}", r.len(), r.miou, r.oiou);
        }
        None => {
            let _ = writeln!(out, "{name:<20}{:>6}{:>9}{:>9}", 0, "-", "-");
        }
    };
    line("clean", Some(&report.clean));
    for t in &report.tags {
        line(t.tag.name(), t.result.as_ref());
    }
    let _ = writeln!(out);
    let _ = write!(out, "{:<20}", "corruption");
    for s in SEVERITIES {
        let _ = write!(out, "{:>9}", format!("s{s}"));
    }
    let _ = writeln!(out, "{:>9}", "mean");
    for row in &report.corruptions {
        let _ = write!(out, "{:<20}", row.kind.name());
        for v in &row.per_severity {
            let _ = write!(out, "{v:>9.4}");
        }
        let _ = writeln!(out, "{:>9.4}", row.mean_oiou);
    }
    out
}
