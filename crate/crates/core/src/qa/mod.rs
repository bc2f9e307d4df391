//! Segmentation quality: unsupervised coverage and purity, plus AJI+ and PQ
//! against ground truth.

pub mod gmm;
pub mod hungarian;
pub mod omp;
pub mod purity;
pub mod supervised;

use serde::{Deserialize, Serialize};

pub use gmm::{gmm_fit_1d, gmm_fit_u16, gmm_fit_weighted, gmm_fit_with, GmmConfig, GmmModel};
pub use omp::{relu_omp, OmpResult};
pub use purity::{marker_threshold, purity, ObjectPurity, PurityResult, DEFAULT_SPARSITY};
pub use supervised::{aji_plus, panoptic_quality, PanopticQuality};

use crate::error::{Error, Result};
use crate::raster::{AnnotationSet, Bitmap, ChannelStack};

/// Decision boundary of a two-component mixture over `max(DAPI, PanHistone)`.
/// Pixels strictly above it are nuclear foreground.
pub fn nuclear_threshold(nuclear: &ChannelStack, seed: u64) -> Result<f64> {
    let values = nuclear.nuclear_max()?;
    let model = gmm_fit_u16(&values, &GmmConfig::new(2, seed))?;
    Ok(model.boundaries()[0])
}

/// Nuclear foreground `M_{DAPI,Histone}`.
pub fn foreground_mask(nuclear: &ChannelStack, seed: u64) -> Result<Bitmap> {
    let t = nuclear_threshold(nuclear, seed)?;
    let values = nuclear.nuclear_max()?;
    Bitmap::from_vec(
        nuclear.width(),
        nuclear.height(),
        values.into_iter().map(|v| v as f64 > t).collect(),
    )
}

/// Covered and total foreground pixel counts; sums across frames before dividing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageCounts {
    pub covered: u64,
    pub foreground: u64,
}

impl CoverageCounts {
    pub fn gamma(&self) -> Result<f64> {
        if self.foreground == 0 {
            return Err(Error::UndefinedRatio("coverage over an empty foreground"));
        }
        Ok(self.covered as f64 / self.foreground as f64)
    }
}

impl std::ops::Add for CoverageCounts {
    type Output = CoverageCounts;

    fn add(self, other: CoverageCounts) -> CoverageCounts {
        CoverageCounts {
            covered: self.covered + other.covered,
            foreground: self.foreground + other.foreground,
        }
    }
}

pub fn coverage_counts(model_masks: &AnnotationSet, fg: &Bitmap) -> CoverageCounts {
    let mut union = Bitmap::new(fg.width(), fg.height());
    for m in model_masks.instances() {
        for (x, y) in m.footprint().pixels() {
            if x < fg.width() && y < fg.height() {
                union.set(x, y, true);
            }
        }
    }
    let covered = union
        .as_slice()
        .iter()
        .zip(fg.as_slice())
        .filter(|(&u, &f)| u && f)
        .count() as u64;
    CoverageCounts {
        covered,
        foreground: fg.count(),
    }
}

/// Fraction of foreground pixels covered by the union of `model_masks`.
pub fn coverage_gamma(model_masks: &AnnotationSet, fg: &Bitmap) -> Result<f64> {
    coverage_counts(model_masks, fg).gamma()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaReport {
    pub coverage_gamma: f64,
    pub purity: PurityResult,
    pub cell_count: usize,
    pub aji_plus: Option<f64>,
    pub pq: Option<f64>,
    pub seed: u64,
}

/// Unsupervised report for one frame; supervised scores when `gt` is given.
pub fn qa_report(
    stack: &ChannelStack,
    masks: &AnnotationSet,
    markers: &[String],
    gt: Option<&AnnotationSet>,
    seed: u64,
) -> Result<QaReport> {
    let fg = foreground_mask(stack, seed)?;
    let coverage = coverage_gamma(masks, &fg)?;
    let purity = purity(masks, stack, markers, DEFAULT_SPARSITY, seed)?;
    let (aji, pq) = match gt {
        Some(gt) => (Some(aji_plus(gt, masks)?), Some(panoptic_quality(gt, masks)?.pq)),
        None => (None, None),
    };
    Ok(QaReport {
        coverage_gamma: coverage,
        purity,
        cell_count: masks.len(),
        aji_plus: aji,
        pq,
        seed,
    })
}

/// Supervised scores of `pred` against `gt`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub aji_plus: f64,
    pub pq: PanopticQuality,
    pub gt_count: usize,
    pub pred_count: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "set,aji_plus,pq,sq,rq,tp,fp,fn,gt_count,pred_count";

    pub fn csv_row(&self, label: &str) -> String {
        let q = &self.pq;
        format!(
            "{label},{},{},{},{},{},{},{},{},{}",
            self.aji_plus, q.pq, q.sq, q.rq, q.tp, q.fp, q.fn_, self.gt_count, self.pred_count
        )
    }
}

pub fn evaluate(gt: &AnnotationSet, pred: &AnnotationSet) -> Result<EvalReport> {
    if (gt.width, gt.height) != (pred.width, pred.height) {
        return Err(Error::InvalidRaster(format!(
            "ground truth is {}x{} but predictions are {}x{}",
            gt.width, gt.height, pred.width, pred.height
        )));
    }
    Ok(EvalReport {
        aji_plus: aji_plus(gt, pred)?,
        pq: panoptic_quality(gt, pred)?,
        gt_count: gt.len(),
        pred_count: pred.len(),
    })
}
