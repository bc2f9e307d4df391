//! Ground-truth metrics: AJI+ and panoptic quality.
//!
//! Both reduce to matchings on a sparse IoU graph; the graph is split into
//! connected components and each component is solved exactly.

use serde::{Deserialize, Serialize};

use super::hungarian::max_weight_assignment;
use crate::error::{Error, Result};
use crate::raster::{AnnotationSet, BoxIndex, Footprint};

/// `(gt index, pred index, intersection, iou)` for every pair with non-empty
/// intersection.
pub fn overlap_edges(gt: &[Footprint], pred: &[Footprint]) -> Vec<(usize, usize, u64, f64)> {
    let index = BoxIndex::from_boxes(32, pred.iter().map(|p| p.bbox()));
    let mut edges = Vec::new();
    for (i, g) in gt.iter().enumerate() {
        for j in index.query(&g.bbox()) {
            let inter = g.intersection_area(&pred[j]);
            if inter > 0 {
                let union = g.area() + pred[j].area() - inter;
                edges.push((i, j, inter, inter as f64 / union as f64));
            }
        }
    }
    edges
}

struct Dsu(Vec<usize>);

impl Dsu {
    fn new(n: usize) -> Self {
        Dsu((0..n).collect())
    }
    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut c = x;
        while self.0[c] != r {
            let n = self.0[c];
            self.0[c] = r;
            c = n;
        }
        r
    }
    fn union(&mut self, a: usize, b: usize) {
        let (a, b) = (self.find(a), self.find(b));
        if a != b {
            self.0[a.max(b)] = a.min(b);
        }
    }
}

/// Maximum-weight one-to-one matching restricted to `edges` (weights > 0).
/// Returns matched `(gt, pred, edge index)` triples.
fn match_components(n_gt: usize, n_pred: usize, edges: &[(usize, usize, f64)]) -> Vec<(usize, usize, usize)> {
    let mut dsu = Dsu::new(n_gt + n_pred);
    for &(i, j, _) in edges {
        dsu.union(i, n_gt + j);
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (e, &(i, _, _)) in edges.iter().enumerate() {
        groups.entry(dsu.find(i)).or_default().push(e);
    }
    let mut out = Vec::new();
    for (_, es) in groups {
        if es.len() == 1 {
            let (i, j, _) = edges[es[0]];
            out.push((i, j, es[0]));
            continue;
        }
        let mut rows: Vec<usize> = es.iter().map(|&e| edges[e].0).collect();
        let mut cols: Vec<usize> = es.iter().map(|&e| edges[e].1).collect();
        rows.sort_unstable();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        let mut w = vec![vec![0.0; cols.len()]; rows.len()];
        let mut which = vec![vec![usize::MAX; cols.len()]; rows.len()];
        for &e in &es {
            let (i, j, wt) = edges[e];
            let r = rows.binary_search(&i).unwrap();
            let c = cols.binary_search(&j).unwrap();
            w[r][c] = wt;
            which[r][c] = e;
        }
        for (r, c) in max_weight_assignment(&w).into_iter().enumerate() {
            if let Some(c) = c {
                if which[r][c] != usize::MAX {
                    out.push((rows[r], cols[c], which[r][c]));
                }
            }
        }
    }
    out.sort_unstable();
    out
}

/// Aggregated Jaccard Index with one-to-one maximum-IoU matching.
pub fn aji_plus(gt: &AnnotationSet, pred: &AnnotationSet) -> Result<f64> {
    let g: Vec<Footprint> = gt.instances().iter().map(|m| m.footprint()).collect();
    let p: Vec<Footprint> = pred.instances().iter().map(|m| m.footprint()).collect();
    aji_plus_footprints(&g, &p)
}

pub fn aji_plus_footprints(gt: &[Footprint], pred: &[Footprint]) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::UndefinedRatio("AJI+ without ground truth"));
    }
    let edges = overlap_edges(gt, pred);
    let weighted: Vec<(usize, usize, f64)> = edges.iter().map(|&(i, j, _, iou)| (i, j, iou)).collect();
    let matches = match_components(gt.len(), pred.len(), &weighted);
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let (mut inter, mut union) = (0u64, 0u64);
    for (i, j, e) in matches {
        gt_used[i] = true;
        pred_used[j] = true;
        inter += edges[e].2;
        union += gt[i].area() + pred[j].area() - edges[e].2;
    }
    union += gt
        .iter()
        .zip(&gt_used)
        .filter(|(_, &u)| !u)
        .map(|(g, _)| g.area())
        .sum::<u64>();
    union += pred
        .iter()
        .zip(&pred_used)
        .filter(|(_, &u)| !u)
        .map(|(p, _)| p.area())
        .sum::<u64>();
    Ok(inter as f64 / union as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanopticQuality {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Panoptic quality with matches at IoU > 0.5. For non-overlapping instance
/// sets such matches are unique; when a set overlaps itself the matching
/// maximizes the number of matches, then the summed IoU.
pub fn panoptic_quality(gt: &AnnotationSet, pred: &AnnotationSet) -> Result<PanopticQuality> {
    let g: Vec<Footprint> = gt.instances().iter().map(|m| m.footprint()).collect();
    let p: Vec<Footprint> = pred.instances().iter().map(|m| m.footprint()).collect();
    panoptic_quality_footprints(&g, &p)
}

pub fn panoptic_quality_footprints(gt: &[Footprint], pred: &[Footprint]) -> Result<PanopticQuality> {
    if gt.is_empty() && pred.is_empty() {
        return Err(Error::UndefinedRatio("panoptic quality of two empty sets"));
    }
    let cands: Vec<(usize, usize, f64)> = overlap_edges(gt, pred)
        .into_iter()
        .filter(|e| e.3 > 0.5)
        .map(|(i, j, _, iou)| (i, j, iou))
        .collect();
    let lifted: Vec<(usize, usize, f64)> = cands.iter().map(|&(i, j, iou)| (i, j, 1.0 + iou)).collect();
    let matches = match_components(gt.len(), pred.len(), &lifted);
    let tp = matches.len();
    let iou_sum: f64 = matches.iter().map(|&(_, _, e)| cands[e].2).sum();
    let fp = pred.len() - tp;
    let fn_ = gt.len() - tp;
    let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
    let sq = if tp > 0 { iou_sum / tp as f64 } else { 0.0 };
    let rq = tp as f64 / denom;
    Ok(PanopticQuality {
        pq: iou_sum / denom,
        sq,
        rq,
        tp,
        fp,
        fn_,
    })
}
