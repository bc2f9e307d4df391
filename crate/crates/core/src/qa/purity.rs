//! Marker purity: how much of each object's signal one cell-type marker explains.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gmm::{gmm_fit_u16, GmmConfig};
use super::omp::relu_omp;
use crate::error::{Error, Result};
use crate::numeric::pairwise_mean;
use crate::raster::{AnnotationSet, ChannelStack};

/// Default sparsity for the decomposition.
pub const DEFAULT_SPARSITY: usize = 3;

/// Foreground threshold of one marker channel from a three-component
/// mixture: midpoint between the brightest sample of the second-brightest
/// cluster and the dimmest sample of the brightest cluster. Clusters are the
/// mixture's mean-ordered intervals; empty clusters are skipped.
pub fn marker_threshold(channel: &[u16], seed: u64) -> Result<f64> {
    let model = gmm_fit_u16(channel, &GmmConfig::new(3, seed))?;
    let bounds = model.boundaries();
    let k = model.n_components();
    let mut lo = vec![f64::INFINITY; k];
    let mut hi = vec![f64::NEG_INFINITY; k];
    let mut hist = vec![false; 1 << 16];
    for &s in channel {
        hist[s as usize] = true;
    }
    for (v, _) in hist.iter().enumerate().filter(|(_, &p)| p) {
        let x = v as f64;
        let c = bounds.iter().filter(|&&b| x > b).count();
        lo[c] = lo[c].min(x);
        hi[c] = hi[c].max(x);
    }
    let occupied: Vec<usize> = (0..k).filter(|&c| lo[c].is_finite()).collect();
    if occupied.len() < 2 {
        return Err(Error::Degenerate(
            "marker channel has a single intensity cluster".into(),
        ));
    }
    let top = occupied[occupied.len() - 1];
    let second = occupied[occupied.len() - 2];
    Ok((hi[second] + lo[top]) / 2.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectPurity {
    pub id: u64,
    pub purity: f64,
    /// Sum-normalized coefficient per marker, in marker order.
    pub coefficients: Vec<f64>,
    pub dominant_marker: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurityResult {
    pub markers: Vec<String>,
    pub per_object: Vec<ObjectPurity>,
    /// Mean purity over objects with marker signal; `None` if there are none.
    pub global_pi: Option<f64>,
    pub excluded_count: usize,
    pub excluded_ids: Vec<u64>,
}

impl PurityResult {
    /// Folds several frames into one result (global mean over all objects).
    pub fn combine(parts: Vec<PurityResult>) -> PurityResult {
        let markers = parts.first().map(|p| p.markers.clone()).unwrap_or_default();
        let mut per_object = Vec::new();
        let mut excluded_ids = Vec::new();
        for p in parts {
            per_object.extend(p.per_object);
            excluded_ids.extend(p.excluded_ids);
        }
        let pis: Vec<f64> = per_object.iter().map(|o| o.purity).collect();
        PurityResult {
            markers,
            global_pi: pairwise_mean(&pis),
            excluded_count: excluded_ids.len(),
            per_object,
            excluded_ids,
        }
    }

    /// Per-object CSV: id, purity, dominant marker, one coefficient column per marker.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,purity,dominant_marker");
        for m in &self.markers {
            s.push(',');
            s.push_str(m);
        }
        s.push('\n');
        for o in &self.per_object {
            s.push_str(&format!("{},{},{}", o.id, o.purity, o.dominant_marker));
            for c in &o.coefficients {
                s.push_str(&format!(",{c}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Per-object purity of `masks` against the named marker channels of `stack`.
pub fn purity(
    masks: &AnnotationSet,
    stack: &ChannelStack,
    marker_names: &[String],
    k: usize,
    seed: u64,
) -> Result<PurityResult> {
    if marker_names.is_empty() {
        return Err(Error::param("markers", "at least one marker channel is required"));
    }
    let chans: Vec<usize> = marker_names.iter().map(|n| stack.require(n)).collect::<Result<_>>()?;
    let thresholds: Vec<f64> = chans
        .par_iter()
        .zip(marker_names.par_iter())
        .map(|(&c, name)| match marker_threshold(stack.channel(c), seed) {
            Ok(t) => t,
            Err(e) => {
                warn!("marker `{name}`: no threshold ({e}); treating channel as signal-free");
                f64::INFINITY
            }
        })
        .collect();
    purity_with_thresholds(masks, stack, marker_names, &chans, &thresholds, k)
}

pub(crate) fn purity_with_thresholds(
    masks: &AnnotationSet,
    stack: &ChannelStack,
    marker_names: &[String],
    chans: &[usize],
    thresholds: &[f64],
    k: usize,
) -> Result<PurityResult> {
    let w = stack.width();
    let h = stack.height();
    let results: Vec<Option<ObjectPurity>> = masks
        .instances()
        .par_iter()
        .map(|m| {
            let fp = m.footprint();
            let pixels: Vec<(u32, u32)> = fp.pixels().filter(|&(x, y)| x < w && y < h).collect();
            let target = vec![1.0; pixels.len()];
            let atoms: Vec<Vec<f64>> = chans
                .iter()
                .zip(thresholds)
                .map(|(&c, &t)| {
                    pixels
                        .iter()
                        .map(|&(x, y)| if stack.get(c, x, y) as f64 > t { 1.0 } else { 0.0 })
                        .collect()
                })
                .collect();
            let r = relu_omp(&target, &atoms, k);
            let coefficients = r.normalized();
            let (best, &pi) = coefficients
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))?;
            (pi > 0.0).then(|| ObjectPurity {
                id: m.id(),
                purity: pi,
                dominant_marker: marker_names[best].clone(),
                coefficients,
            })
        })
        .collect();
    let mut per_object = Vec::new();
    let mut excluded_ids = Vec::new();
    for (m, r) in masks.instances().iter().zip(results) {
        match r {
            Some(o) => per_object.push(o),
            None => excluded_ids.push(m.id()),
        }
    }
    let pis: Vec<f64> = per_object.iter().map(|o| o.purity).collect();
    Ok(PurityResult {
        markers: marker_names.to_vec(),
        global_pi: pairwise_mean(&pis),
        excluded_count: excluded_ids.len(),
        per_object,
        excluded_ids,
    })
}
