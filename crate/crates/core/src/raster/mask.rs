use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::rle::{rle_decode, rle_encode, Bitmap, Rle};
use crate::error::{Error, Result};

/// Axis-aligned pixel box `(x, y, w, h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    /// Exclusive right edge.
    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    /// Exclusive bottom edge.
    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn intersect(&self, other: &BBox) -> Option<BBox> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x0 < x1 && y0 < y1).then(|| BBox::new(x0, y0, x1 - x0, y1 - y0))
    }

    pub fn union(&self, other: &BBox) -> BBox {
        let x0 = self.x.min(other.x);
        let y0 = self.y.min(other.y);
        let x1 = self.right().max(other.right());
        let y1 = self.bottom().max(other.bottom());
        BBox::new(x0, y0, x1 - x0, y1 - y0)
    }

    /// Grows the box by `r` on every side, clamped at zero.
    pub fn dilate(&self, r: u32) -> BBox {
        let x0 = self.x.saturating_sub(r);
        let y0 = self.y.saturating_sub(r);
        BBox::new(x0, y0, self.right() + r - x0, self.bottom() + r - y0)
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.right() && y >= self.y && y < self.bottom()
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        other.x >= self.x && other.y >= self.y && other.right() <= self.right() && other.bottom() <= self.bottom()
    }
}

/// A decoded mask anchored at its bounding box. All set-algebra on masks goes
/// through this type.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Footprint {
    bbox: BBox,
    bits: Bitmap,
    area: u64,
}

impl Footprint {
    pub fn new(bbox: BBox, bits: Bitmap) -> Result<Self> {
        if bits.width() != bbox.w || bits.height() != bbox.h {
            return Err(Error::InvalidRaster(format!(
                "bitmap {}x{} does not match bbox {}x{}",
                bits.width(),
                bits.height(),
                bbox.w,
                bbox.h
            )));
        }
        let area = bits.count();
        Ok(Self { bbox, bits, area })
    }

    pub fn rect(x: u32, y: u32, w: u32, h: u32) -> Self {
        let bits = Bitmap::from_fn(w, h, |_, _| true);
        Self {
            bbox: BBox::new(x, y, w, h),
            area: w as u64 * h as u64,
            bits,
        }
    }

    /// Builds a tight footprint from global pixel coordinates. `None` if empty.
    pub fn from_pixels(pixels: impl IntoIterator<Item = (u32, u32)>) -> Option<Self> {
        let pts: Vec<(u32, u32)> = pixels.into_iter().collect();
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
        for &(x, y) in &pts {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        if pts.is_empty() {
            return None;
        }
        let bbox = BBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1);
        let mut bits = Bitmap::new(bbox.w, bbox.h);
        for (x, y) in pts {
            bits.set(x - x0, y - y0, true);
        }
        let area = bits.count();
        Some(Self { bbox, bits, area })
    }

    /// Global-coordinate predicate evaluated over `bbox`.
    pub fn from_predicate(bbox: BBox, mut f: impl FnMut(u32, u32) -> bool) -> Option<Self> {
        let bits = Bitmap::from_fn(bbox.w, bbox.h, |x, y| f(bbox.x + x, bbox.y + y));
        let area = bits.count();
        Self { bbox, bits, area }.tighten()
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    pub fn bits(&self) -> &Bitmap {
        &self.bits
    }

    pub fn area(&self) -> u64 {
        self.area
    }

    pub fn is_empty(&self) -> bool {
        self.area == 0
    }

    #[inline]
    pub fn contains(&self, x: u32, y: u32) -> bool {
        self.bbox.contains(x, y) && self.bits.get(x - self.bbox.x, y - self.bbox.y)
    }

    /// Global coordinates of foreground pixels, row-major.
    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let (ox, oy) = (self.bbox.x, self.bbox.y);
        self.bits.ones().map(move |(x, y)| (x + ox, y + oy))
    }

    /// Shrinks the box to the foreground extent; `None` if no pixel is set.
    pub fn tighten(self) -> Option<Self> {
        if self.area == 0 {
            return None;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for (x, y) in self.bits.ones() {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        if x0 == 0 && y0 == 0 && x1 + 1 == self.bbox.w && y1 + 1 == self.bbox.h {
            return Some(self);
        }
        let bbox = BBox::new(self.bbox.x + x0, self.bbox.y + y0, x1 - x0 + 1, y1 - y0 + 1);
        let bits = Bitmap::from_fn(bbox.w, bbox.h, |x, y| self.bits.get(x + x0, y + y0));
        Some(Self {
            bbox,
            bits,
            area: self.area,
        })
    }

    pub fn intersection_area(&self, other: &Footprint) -> u64 {
        let Some(ib) = self.bbox.intersect(&other.bbox) else {
            return 0;
        };
        let mut n = 0u64;
        for y in ib.y..ib.bottom() {
            let ay = y - self.bbox.y;
            let by = y - other.bbox.y;
            for x in ib.x..ib.right() {
                if self.bits.get(x - self.bbox.x, ay) && other.bits.get(x - other.bbox.x, by) {
                    n += 1;
                }
            }
        }
        n
    }

    pub fn intersection(&self, other: &Footprint) -> Option<Footprint> {
        let ib = self.bbox.intersect(&other.bbox)?;
        Footprint::from_predicate(ib, |x, y| self.contains(x, y) && other.contains(x, y))
    }

    pub fn union(&self, other: &Footprint) -> Footprint {
        let ub = self.bbox.union(&other.bbox);
        Footprint::from_predicate(ub, |x, y| self.contains(x, y) || other.contains(x, y))
            .expect("union of non-empty footprints")
    }

    pub fn difference(&self, other: &Footprint) -> Option<Footprint> {
        Footprint::from_predicate(self.bbox, |x, y| !other.contains(x, y) && self.contains(x, y))
    }

    /// Re-anchors the same pixel pattern at a new top-left corner.
    pub fn moved_to(&self, x: u32, y: u32) -> Footprint {
        Footprint {
            bbox: BBox::new(x, y, self.bbox.w, self.bbox.h),
            bits: self.bits.clone(),
            area: self.area,
        }
    }

    /// Restricts the footprint to `frame`; `None` when nothing remains.
    pub fn clip(&self, frame: &BBox) -> Option<Footprint> {
        let ib = self.bbox.intersect(frame)?;
        Footprint::from_predicate(ib, |x, y| self.contains(x, y))
    }

    pub fn centroid(&self) -> (f64, f64) {
        let (mut sx, mut sy) = (0.0, 0.0);
        for (x, y) in self.pixels() {
            sx += x as f64;
            sy += y as f64;
        }
        let n = self.area.max(1) as f64;
        (sx / n, sy / n)
    }

    /// Pixels with at least one 4-neighbour outside the footprint.
    pub fn boundary_pixels(&self) -> Vec<(u32, u32)> {
        let w = self.bbox.w;
        let h = self.bbox.h;
        let inside =
            |x: i64, y: i64| x >= 0 && y >= 0 && x < w as i64 && y < h as i64 && self.bits.get(x as u32, y as u32);
        self.bits
            .ones()
            .filter(|&(x, y)| {
                let (x, y) = (x as i64, y as i64);
                !(inside(x - 1, y) && inside(x + 1, y) && inside(x, y - 1) && inside(x, y + 1))
            })
            .map(|(x, y)| (x + self.bbox.x, y + self.bbox.y))
            .collect()
    }
}

/// One instance mask: row-major RLE inside its bounding box plus the optional
/// overlap / complement split used for multi-head targets.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMask {
    id: u64,
    bbox: BBox,
    rle: Rle,
    area: u64,
    overlap: Option<Rle>,
    complement: Option<Rle>,
    score: Option<f64>,
}

impl InstanceMask {
    pub fn new(id: u64, bbox: BBox, rle: Rle, score: Option<f64>) -> Result<Self> {
        if rle.total() != bbox.area() {
            return Err(Error::InvalidMask {
                id,
                reason: format!("rle sums to {}, bbox holds {}", rle.total(), bbox.area()),
            });
        }
        let area = rle.foreground();
        if area == 0 {
            return Err(Error::InvalidMask {
                id,
                reason: "empty mask".into(),
            });
        }
        if let Some(s) = score {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::InvalidMask {
                    id,
                    reason: format!("score {s} outside [0, 1]"),
                });
            }
        }
        Ok(Self {
            id,
            bbox,
            rle,
            area,
            overlap: None,
            complement: None,
            score,
        })
    }

    /// Encodes a footprint with its tight bounding box.
    pub fn from_footprint(id: u64, fp: &Footprint) -> Result<Self> {
        let fp = fp.clone().tighten().ok_or(Error::InvalidMask {
            id,
            reason: "empty mask".into(),
        })?;
        Ok(Self {
            id,
            bbox: fp.bbox(),
            rle: rle_encode(fp.bits()),
            area: fp.area(),
            overlap: None,
            complement: None,
            score: None,
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    pub fn rle(&self) -> &Rle {
        &self.rle
    }

    pub fn area(&self) -> u64 {
        self.area
    }

    pub fn score(&self) -> Option<f64> {
        self.score
    }

    pub fn overlap_rle(&self) -> Option<&Rle> {
        self.overlap.as_ref()
    }

    pub fn complement_rle(&self) -> Option<&Rle> {
        self.complement.as_ref()
    }

    pub fn has_components(&self) -> bool {
        self.overlap.is_some() && self.complement.is_some()
    }

    pub fn with_id(mut self, id: u64) -> Self {
        self.id = id;
        self
    }

    pub fn with_score(mut self, score: Option<f64>) -> Self {
        self.score = score;
        self
    }

    pub fn footprint(&self) -> Footprint {
        let bits = rle_decode(&self.rle, self.bbox.w, self.bbox.h).expect("validated at construction");
        Footprint {
            bbox: self.bbox,
            bits,
            area: self.area,
        }
    }

    fn component_bitmap(&self, rle: &Rle) -> Bitmap {
        rle_decode(rle, self.bbox.w, self.bbox.h).expect("validated at construction")
    }

    /// Overlap component in global coordinates; empty footprints yield `None`.
    pub fn overlap_footprint(&self) -> Option<Footprint> {
        let bits = self.component_bitmap(self.overlap.as_ref()?);
        Footprint::new(self.bbox, bits).ok()?.tighten()
    }

    pub fn complement_footprint(&self) -> Option<Footprint> {
        let bits = self.component_bitmap(self.complement.as_ref()?);
        Footprint::new(self.bbox, bits).ok()?.tighten()
    }

    /// `(overlap, complement)` bitmaps over the mask's own bbox. Masks without
    /// components count as fully non-overlapped.
    pub fn component_bitmaps(&self) -> (Bitmap, Bitmap) {
        match (&self.overlap, &self.complement) {
            (Some(o), Some(c)) => (self.component_bitmap(o), self.component_bitmap(c)),
            _ => {
                let whole = self.component_bitmap(&self.rle);
                (Bitmap::new(self.bbox.w, self.bbox.h), whole)
            }
        }
    }

    /// Marks `self ∩ region` as overlapped (accumulating with any previous
    /// overlap) and the remainder as complement.
    pub fn with_overlap_region(mut self, region: Option<&Footprint>) -> Self {
        let whole = self.footprint();
        let (mut overlap, _) = self.component_bitmaps();
        if let Some(region) = region {
            for (x, y) in whole.pixels() {
                if region.contains(x, y) {
                    overlap.set(x - self.bbox.x, y - self.bbox.y, true);
                }
            }
        }
        let complement = Bitmap::from_fn(self.bbox.w, self.bbox.h, |x, y| {
            whole.bits.get(x, y) && !overlap.get(x, y)
        });
        self.overlap = Some(rle_encode(&overlap));
        self.complement = Some(rle_encode(&complement));
        self
    }

    /// Attaches externally supplied components after checking they partition
    /// the mask.
    pub fn with_component_rles(mut self, overlap: Rle, complement: Rle) -> Result<Self> {
        let bad = |reason: &str| Error::InvalidMask {
            id: self.id,
            reason: reason.to_string(),
        };
        let whole = self.component_bitmap(&self.rle);
        let o = rle_decode(&overlap, self.bbox.w, self.bbox.h).map_err(|_| bad("overlap rle does not fit bbox"))?;
        let c =
            rle_decode(&complement, self.bbox.w, self.bbox.h).map_err(|_| bad("complement rle does not fit bbox"))?;
        for i in 0..whole.as_slice().len() {
            let (w, o, c) = (whole.as_slice()[i], o.as_slice()[i], c.as_slice()[i]);
            if (o && c) || (w != (o || c)) {
                return Err(bad("overlap and complement do not partition the mask"));
            }
        }
        self.overlap = Some(overlap);
        self.complement = Some(complement);
        Ok(self)
    }

    pub fn clear_components(mut self) -> Self {
        self.overlap = None;
        self.complement = None;
        self
    }

    /// Shifts the mask by `(dx, dy)`; fails if it would leave the positive quadrant.
    pub fn translated(&self, dx: i64, dy: i64) -> Result<Self> {
        let x = self.bbox.x as i64 + dx;
        let y = self.bbox.y as i64 + dy;
        if x < 0 || y < 0 || x > u32::MAX as i64 || y > u32::MAX as i64 {
            return Err(Error::InvalidMask {
                id: self.id,
                reason: format!("translation to ({x}, {y}) leaves the frame"),
            });
        }
        let mut out = self.clone();
        out.bbox.x = x as u32;
        out.bbox.y = y as u32;
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Raw,
    Filtered,
    Augmented,
}

/// The mask collection of one tile (or of a whole slide after merging).
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    pub tile_id: String,
    pub width: u32,
    pub height: u32,
    pub stage: Stage,
    instances: Vec<InstanceMask>,
}

impl AnnotationSet {
    pub fn new(
        tile_id: impl Into<String>,
        width: u32,
        height: u32,
        stage: Stage,
        instances: Vec<InstanceMask>,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for m in &instances {
            if !seen.insert(m.id()) {
                return Err(Error::InvalidMask {
                    id: m.id(),
                    reason: "duplicate instance id".into(),
                });
            }
        }
        Ok(Self {
            tile_id: tile_id.into(),
            width,
            height,
            stage,
            instances,
        })
    }

    pub fn empty(tile_id: impl Into<String>, width: u32, height: u32, stage: Stage) -> Self {
        Self {
            tile_id: tile_id.into(),
            width,
            height,
            stage,
            instances: Vec::new(),
        }
    }

    pub fn instances(&self) -> &[InstanceMask] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&InstanceMask> {
        self.instances.iter().find(|m| m.id() == id)
    }

    pub fn next_id(&self) -> u64 {
        self.instances.iter().map(|m| m.id()).max().map_or(1, |m| m + 1)
    }

    pub fn ids(&self) -> Vec<u64> {
        self.instances.iter().map(|m| m.id()).collect()
    }

    /// Same frame, different instances.
    pub fn with_instances(&self, stage: Stage, instances: Vec<InstanceMask>) -> Result<Self> {
        Self::new(self.tile_id.clone(), self.width, self.height, stage, instances)
    }

    pub fn into_instances(self) -> Vec<InstanceMask> {
        self.instances
    }

    pub fn frame(&self) -> BBox {
        BBox::new(0, 0, self.width, self.height)
    }

    /// Union of all masks rasterized over the frame.
    pub fn union_bitmap(&self) -> Bitmap {
        let mut out = Bitmap::new(self.width, self.height);
        for m in &self.instances {
            for (x, y) in m.footprint().pixels() {
                if x < self.width && y < self.height {
                    out.set(x, y, true);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc(cx: f64, cy: f64, r: f64) -> Footprint {
        let b = BBox::new(
            (cx - r).floor().max(0.0) as u32,
            (cy - r).floor().max(0.0) as u32,
            (2.0 * r + 2.0) as u32,
            (2.0 * r + 2.0) as u32,
        );
        Footprint::from_predicate(b, |x, y| {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            dx * dx + dy * dy <= r * r
        })
        .unwrap()
    }

    #[test]
    fn footprint_roundtrip_through_mask() {
        let fp = disc(20.0, 15.0, 6.0);
        let m = InstanceMask::from_footprint(3, &fp).unwrap();
        assert_eq!(m.area(), fp.area());
        assert_eq!(m.footprint(), fp);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let rle = Rle { counts: vec![4] };
        assert!(InstanceMask::new(1, BBox::new(0, 0, 2, 2), rle, None).is_err());
        let rle = Rle { counts: vec![1, 2] };
        assert!(InstanceMask::new(1, BBox::new(0, 0, 2, 2), rle, None).is_err());
    }

    #[test]
    fn components_partition_the_mask() {
        let a = disc(20.0, 20.0, 7.0);
        let b = disc(28.0, 20.0, 7.0);
        let m = InstanceMask::from_footprint(1, &a)
            .unwrap()
            .with_overlap_region(Some(&b));
        let o = m.overlap_footprint().unwrap();
        let c = m.complement_footprint().unwrap();
        assert_eq!(o.intersection_area(&c), 0);
        assert_eq!(o.union(&c), a);
        assert_eq!(o.area(), a.intersection_area(&b));
    }

    #[test]
    fn overlap_accumulates() {
        let a = Footprint::rect(0, 0, 10, 10);
        let m = InstanceMask::from_footprint(1, &a)
            .unwrap()
            .with_overlap_region(Some(&Footprint::rect(0, 0, 2, 10)))
            .with_overlap_region(Some(&Footprint::rect(8, 0, 2, 10)));
        assert_eq!(m.overlap_footprint().unwrap().area(), 40);
        assert_eq!(m.complement_footprint().unwrap().area(), 60);
    }

    #[test]
    fn bad_component_partition_rejected() {
        let m = InstanceMask::from_footprint(1, &Footprint::rect(0, 0, 2, 2)).unwrap();
        let all = Rle { counts: vec![0, 4] };
        assert!(m.clone().with_component_rles(all.clone(), all).is_err());
        let none = Rle { counts: vec![4] };
        let all = Rle { counts: vec![0, 4] };
        assert!(m.with_component_rles(none, all).is_ok());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let m = InstanceMask::from_footprint(1, &Footprint::rect(0, 0, 2, 2)).unwrap();
        assert!(AnnotationSet::new("t", 8, 8, Stage::Raw, vec![m.clone(), m]).is_err());
    }
}
