//! IoU / mIoU with mergeable per-class accumulators, fold reports and gains.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{check_same, BinaryMask};

/// IoU of two masks. Both empty counts as a perfect match (1.0).
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let c = ClassIoU::from_masks(0, pred, gt)?;
    Ok(c.value())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassIoU {
    pub class_index: u32,
    pub intersection: u64,
    pub union: u64,
}

impl ClassIoU {
    pub fn from_masks(class_index: u32, pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        check_same(gt.dimensions(), pred.dimensions())?;
        let (mut inter, mut union) = (0u64, 0u64);
        for (&p, &g) in pred.as_raw().iter().zip(gt.as_raw()) {
            inter += u64::from(p & g);
            union += u64::from(p | g);
        }
        Ok(Self {
            class_index,
            intersection: inter,
            union,
        })
    }

    pub fn value(&self) -> f64 {
        if self.union == 0 {
            log::debug!(
                "class {}: empty prediction and ground truth, IoU taken as 1.0",
                self.class_index
            );
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

/// Unweighted mean of per-class IoU. Summed in class order, so the result
/// does not depend on the order of `per_class`.
pub fn miou(per_class: &[ClassIoU]) -> Result<f64> {
    if per_class.is_empty() {
        return Err(Error::EmptyClassList);
    }
    let mut values: Vec<(u32, f64)> = per_class.iter().map(|c| (c.class_index, c.value())).collect();
    values.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok(values.iter().map(|v| v.1).sum::<f64>() / values.len() as f64)
}

/// Per-class intersection and union sums over many predictions.
/// Merging is associative and commutative.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IouAccumulator {
    classes: BTreeMap<u32, (u64, u64)>,
}

impl IouAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, class_index: u32, pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
        let c = ClassIoU::from_masks(class_index, pred, gt)?;
        self.add_counts(c);
        Ok(())
    }

    pub fn add_counts(&mut self, c: ClassIoU) {
        let e = self.classes.entry(c.class_index).or_default();
        e.0 += c.intersection;
        e.1 += c.union;
    }

    pub fn merge(&mut self, other: &IouAccumulator) {
        for (&class, &(i, u)) in &other.classes {
            let e = self.classes.entry(class).or_default();
            e.0 += i;
            e.1 += u;
        }
    }

    pub fn per_class(&self) -> Vec<ClassIoU> {
        self.classes
            .iter()
            .map(|(&class_index, &(intersection, union))| ClassIoU {
                class_index,
                intersection,
                union,
            })
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        miou(&self.per_class())
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Everything needed to tell two runs apart.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFingerprint {
    pub dataset: String,
    pub folds: Vec<u32>,
    pub shots: usize,
    pub n_aux: usize,
    pub guidance: Option<String>,
    pub model: String,
    pub episodes_per_fold: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class_index: u32,
    pub intersection: u64,
    pub union: u64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub fold: u32,
    pub miou: f64,
    pub episodes: usize,
    pub failed_episodes: usize,
    pub per_class: Vec<ClassScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fingerprint: RunFingerprint,
    pub folds: Vec<FoldScore>,
    pub mean: f64,
}

impl FoldReport {
    /// Builds a report from one accumulator per fold.
    pub fn from_folds(
        fingerprint: RunFingerprint,
        folds: Vec<(u32, IouAccumulator, usize, usize)>,
    ) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::EmptyClassList);
        }
        let mut scores = Vec::with_capacity(folds.len());
        for (fold, acc, episodes, failed) in folds {
            let per_class = acc
                .per_class()
                .into_iter()
                .map(|c| ClassScore {
                    class_index: c.class_index,
                    intersection: c.intersection,
                    union: c.union,
                    iou: c.value(),
                })
                .collect();
            scores.push(FoldScore {
                fold,
                miou: acc.miou()?,
                episodes,
                failed_episodes: failed,
                per_class,
            });
        }
        let mean = scores.iter().map(|f| f.miou).sum::<f64>() / scores.len() as f64;
        Ok(Self {
            fingerprint,
            folds: scores,
            mean,
        })
    }

    /// Aligned text table, one column per fold then the mean, in percent.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let fp = &self.fingerprint;
        let _ = writeln!(
            out,
            "{} | {}-shot ({} original + {} aux{}) | {}",
            fp.dataset,
            fp.shots,
            fp.shots - fp.n_aux,
            fp.n_aux,
            fp.guidance.as_deref().map(|g| format!(", {g}")).unwrap_or_default(),
            fp.model
        );
        let mut header = format!("{:<10}", "");
        let mut row = format!("{:<10}", "mIoU (%)");
        for f in &self.folds {
            let _ = write!(header, "{:>9}", format!("Fold-{}", f.fold));
            let _ = write!(row, "{:>9.2}", f.miou * 100.0);
        }
        let _ = write!(header, "{:>9}", "Mean");
        let _ = write!(row, "{:>9.2}", self.mean * 100.0);
        let _ = writeln!(out, "{header}");
        let _ = writeln!(out, "{row}");
        out
    }

    /// `fold,class,intersection,union,iou` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,class,intersection,union,iou\n");
        for f in &self.folds {
            for c in &f.per_class {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    f.fold, c.class_index, c.intersection, c.union, c.iou
                );
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRecord {
    pub base_mean: f64,
    pub augmented_mean: f64,
    /// `augmented - base`.
    pub delta: f64,
    pub reference_mean: Option<f64>,
    /// `reference - base`, the gain of a true K-shot run.
    pub reference_delta: Option<f64>,
}

impl GainRecord {
    /// `+x/y` in percentage points, one decimal.
    pub fn format(&self) -> String {
        let mut s = format!("{:+.1}", self.delta * 100.0);
        if let Some(r) = self.reference_delta {
            let _ = write!(s, "/{:.1}", r * 100.0);
        }
        s
    }
}

fn comparable(a: &RunFingerprint, b: &RunFingerprint) -> Result<()> {
    if a.dataset != b.dataset || a.folds != b.folds || a.model != b.model {
        return Err(Error::ConfigMismatch(format!(
            "{}/{:?}/{} vs {}/{:?}/{}",
            a.dataset, a.folds, a.model, b.dataset, b.folds, b.model
        )));
    }
    Ok(())
}

pub fn gain(
    base: &FoldReport,
    augmented: &FoldReport,
    reference_kshot: Option<&FoldReport>,
) -> Result<GainRecord> {
    comparable(&base.fingerprint, &augmented.fingerprint)?;
    if let Some(r) = reference_kshot {
        comparable(&base.fingerprint, &r.fingerprint)?;
    }
    Ok(GainRecord {
        base_mean: base.mean,
        augmented_mean: augmented.mean,
        delta: augmented.mean - base.mean,
        reference_mean: reference_kshot.map(|r| r.mean),
        reference_delta: reference_kshot.map(|r| r.mean - base.mean),
    })
}
