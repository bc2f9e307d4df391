//! Mask, box and class losses with analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::pairwise_sum;
use crate::raster::{is_nonconcave, Bitmap, InstanceMask};

use super::eca::sigmoid;

/// Probability clamp that keeps cross-entropy finite.
pub const EPS_P: f64 = 1e-7;

fn clamp_p(p: f64) -> f64 {
    p.clamp(EPS_P, 1.0 - EPS_P)
}

/// Mean binary cross-entropy of probabilities against a binary target.
pub fn bce(pred: &[f64], target: &[bool]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::param("pred", "must be non-empty and match the target"));
    }
    if pred.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("prediction"));
    }
    let terms: Vec<f64> = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = clamp_p(p);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .collect();
    Ok(pairwise_sum(&terms) / pred.len() as f64)
}

/// BCE on `sigmoid(logits)` and its gradient with respect to the logits.
/// Pixels whose probability hits the clamp get zero gradient.
pub fn bce_with_logits(logits: &[f64], target: &[bool]) -> Result<(f64, Vec<f64>)> {
    let p: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let loss = bce(&p, target)?;
    let n = logits.len() as f64;
    let grad = p
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            if !(EPS_P..=1.0 - EPS_P).contains(&p) {
                0.0
            } else {
                (p - if y { 1.0 } else { 0.0 }) / n
            }
        })
        .collect();
    Ok((loss, grad))
}

/// Outputs of the whole, overlap and complement heads over one instance
/// window, row-major `height × width`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadPrediction {
    pub height: u32,
    pub width: u32,
    pub whole: Vec<f64>,
    pub overlap: Vec<f64>,
    pub complement: Vec<f64>,
}

impl HeadPrediction {
    pub fn new(width: u32, height: u32, whole: Vec<f64>, overlap: Vec<f64>, complement: Vec<f64>) -> Result<Self> {
        let n = width as usize * height as usize;
        if n == 0 || whole.len() != n || overlap.len() != n || complement.len() != n {
            return Err(Error::param(
                "head_prediction",
                format!("grids must all hold {width}x{height} values"),
            ));
        }
        if whole.iter().chain(&overlap).chain(&complement).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("head prediction"));
        }
        Ok(Self {
            height,
            width,
            whole,
            overlap,
            complement,
        })
    }

    pub fn uniform(width: u32, height: u32, p: f64) -> Result<Self> {
        let n = width as usize * height as usize;
        Self::new(width, height, vec![p; n], vec![p; n], vec![p; n])
    }

    /// The clamped targets themselves.
    pub fn perfect(target: &InstanceMask) -> Result<Self> {
        let t = Targets::of(target);
        let as_p = |b: &Bitmap| {
            b.as_slice()
                .iter()
                .map(|&v| clamp_p(if v { 1.0 } else { 0.0 }))
                .collect()
        };
        Self::new(
            target.bbox().w,
            target.bbox().h,
            as_p(&t.whole),
            as_p(&t.overlap),
            as_p(&t.complement),
        )
    }

    fn heads(&self) -> [&[f64]; 3] {
        [&self.whole, &self.overlap, &self.complement]
    }
}

/// Head logits; probabilities are their sigmoids.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadLogits {
    pub height: u32,
    pub width: u32,
    pub heads: [Vec<f64>; 3],
}

impl HeadLogits {
    pub fn probabilities(&self) -> Result<HeadPrediction> {
        let s = |v: &Vec<f64>| v.iter().map(|&z| sigmoid(z)).collect();
        HeadPrediction::new(
            self.width,
            self.height,
            s(&self.heads[0]),
            s(&self.heads[1]),
            s(&self.heads[2]),
        )
    }
}

struct Targets {
    whole: Bitmap,
    overlap: Bitmap,
    complement: Bitmap,
}

impl Targets {
    fn of(mask: &InstanceMask) -> Self {
        let (overlap, complement) = mask.component_bitmaps();
        Self {
            whole: mask.footprint().bits().clone(),
            overlap,
            complement,
        }
    }

    fn heads(&self) -> [&[bool]; 3] {
        [
            self.whole.as_slice(),
            self.overlap.as_slice(),
            self.complement.as_slice(),
        ]
    }
}

/// One instance of one tile: prediction, annotated target and the shape gate.
#[derive(Clone, Copy, Debug)]
pub struct MaskSample<'a> {
    pub pred: &'a HeadPrediction,
    pub target: &'a InstanceMask,
    pub nonconcave: bool,
}

/// Shape gate for a target mask.
pub fn gate(target: &InstanceMask, solidity_threshold: f64) -> bool {
    is_nonconcave(&target.footprint(), solidity_threshold)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskLoss {
    pub whole: f64,
    pub overlap: f64,
    pub complement: f64,
    pub total: f64,
    pub included: usize,
    pub excluded: usize,
    pub tiles: usize,
}

fn check_window(s: &MaskSample) -> Result<()> {
    let b = s.target.bbox();
    if s.pred.width != b.w || s.pred.height != b.h {
        return Err(Error::InvalidMask {
            id: s.target.id(),
            reason: format!(
                "prediction window {}x{} differs from the mask bbox {}x{}",
                s.pred.width, s.pred.height, b.w, b.h
            ),
        });
    }
    Ok(())
}

/// Per-head cross-entropies averaged over non-concave instances within each
/// tile, then over tiles that have at least one such instance.
pub fn mask_loss_nonconcave(tiles: &[Vec<MaskSample>]) -> Result<MaskLoss> {
    let mut per_tile = [Vec::new(), Vec::new(), Vec::new()];
    let (mut included, mut excluded) = (0, 0);
    for tile in tiles {
        let mut acc = [Vec::new(), Vec::new(), Vec::new()];
        for s in tile {
            check_window(s)?;
            if !s.nonconcave {
                excluded += 1;
                continue;
            }
            included += 1;
            let t = Targets::of(s.target);
            for (h, (p, y)) in s.pred.heads().iter().zip(t.heads()).enumerate() {
                acc[h].push(bce(p, y)?);
            }
        }
        if acc[0].is_empty() {
            continue;
        }
        for h in 0..3 {
            per_tile[h].push(pairwise_sum(&acc[h]) / acc[h].len() as f64);
        }
    }
    let k = per_tile[0].len();
    if k == 0 {
        return Err(Error::UndefinedRatio("mask loss with every instance gated out"));
    }
    let mean = |v: &Vec<f64>| pairwise_sum(v) / k as f64;
    let (whole, overlap, complement) = (mean(&per_tile[0]), mean(&per_tile[1]), mean(&per_tile[2]));
    Ok(MaskLoss {
        whole,
        overlap,
        complement,
        total: whole + overlap + complement,
        included,
        excluded,
        tiles: k,
    })
}

/// Total non-concave mask loss and its gradient with respect to every head
/// logit, laid out like the input (gated instances get zeros).
/// Gradients with respect to the whole, overlap and complement logits.
pub type HeadGradients = [Vec<f64>; 3];

pub fn mask_loss_logits(tiles: &[Vec<(&HeadLogits, &InstanceMask, bool)>]) -> Result<(f64, Vec<Vec<HeadGradients>>)> {
    let probs: Vec<Vec<HeadPrediction>> = tiles
        .iter()
        .map(|t| t.iter().map(|(l, _, _)| l.probabilities()).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let samples: Vec<Vec<MaskSample>> = tiles
        .iter()
        .zip(&probs)
        .map(|(t, ps)| {
            t.iter()
                .zip(ps)
                .map(|((_, m, g), p)| MaskSample {
                    pred: p,
                    target: m,
                    nonconcave: *g,
                })
                .collect()
        })
        .collect();
    let loss = mask_loss_nonconcave(&samples)?;
    let k = loss.tiles as f64;
    let mut grads = Vec::with_capacity(tiles.len());
    for tile in tiles {
        let n_nc = tile.iter().filter(|s| s.2).count() as f64;
        let mut g_tile = Vec::with_capacity(tile.len());
        for (logits, mask, keep) in tile {
            let n = logits.heads[0].len();
            if !keep {
                g_tile.push([vec![0.0; n], vec![0.0; n], vec![0.0; n]]);
                continue;
            }
            let t = Targets::of(mask);
            let y = t.heads();
            let mut g: [Vec<f64>; 3] = Default::default();
            for h in 0..3 {
                let (_, gh) = bce_with_logits(&logits.heads[h], y[h])?;
                g[h] = gh.into_iter().map(|v| v / (k * n_nc)).collect();
            }
            g_tile.push(g);
        }
        grads.push(g_tile);
    }
    Ok((loss.total, grads))
}

/// Mean smooth-L1 with transition point `beta`, and its gradient.
pub fn smooth_l1(pred: &[f64], target: &[f64], beta: f64) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::param("pred", "must be non-empty and match the target"));
    }
    if beta <= 0.0 {
        return Err(Error::param("beta", "must be positive"));
    }
    let n = pred.len() as f64;
    let mut terms = Vec::with_capacity(pred.len());
    let mut grad = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(target) {
        let d = p - t;
        if d.abs() < beta {
            terms.push(0.5 * d * d / beta);
            grad.push(d / beta / n);
        } else {
            terms.push(d.abs() - 0.5 * beta);
            grad.push(d.signum() / n);
        }
    }
    Ok((pairwise_sum(&terms) / n, grad))
}

/// Cross-entropy of softmax(logits) for the true class, and its gradient.
pub fn softmax_cross_entropy(logits: &[f64], class: usize) -> Result<(f64, Vec<f64>)> {
    if class >= logits.len() {
        return Err(Error::param(
            "class",
            format!("{class} is out of range for {} logits", logits.len()),
        ));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("class logits"));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let sum = pairwise_sum(&exps);
    let loss = sum.ln() + m - logits[class];
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, e)| e / sum - if i == class { 1.0 } else { 0.0 })
        .collect();
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
        }
    }
}

/// `λ1·l_reg + λ2·l_cls + λ3·l_mask`.
pub fn composite_loss(l_reg: f64, l_cls: f64, l_mask: f64, w: &LossWeights) -> f64 {
    w.lambda1 * l_reg + w.lambda2 * l_cls + w.lambda3 * l_mask
}
