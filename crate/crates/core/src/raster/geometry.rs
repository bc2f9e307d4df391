//! Pairwise overlap ratios and convex-hull solidity.

use super::mask::{Footprint, InstanceMask};
use crate::error::{Error, Result};

/// Default solidity threshold below which a contour counts as concave.
pub const DEFAULT_SOLIDITY_THRESHOLD: f64 = 0.92;

pub fn iou(a: &InstanceMask, b: &InstanceMask) -> Result<f64> {
    footprint_iou(&a.footprint(), &b.footprint())
}

pub fn footprint_iou(a: &Footprint, b: &Footprint) -> Result<f64> {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return Err(Error::UndefinedRatio("iou of two empty masks"));
    }
    Ok(inter as f64 / union as f64)
}

/// `|a ∩ b| / |b|`: how much of `b` lies inside `a`.
pub fn containment(a: &InstanceMask, b: &InstanceMask) -> Result<f64> {
    footprint_containment(&a.footprint(), &b.footprint())
}

pub fn footprint_containment(a: &Footprint, b: &Footprint) -> Result<f64> {
    if b.area() == 0 {
        return Err(Error::UndefinedRatio("containment in an empty mask"));
    }
    Ok(a.intersection_area(b) as f64 / b.area() as f64)
}

/// Area over convex-hull area, clamped to 1.
pub fn solidity(mask: &InstanceMask) -> f64 {
    footprint_solidity(&mask.footprint())
}

/// The hull is taken over pixel centres (raw shoelace area, no half-pixel
/// dilation), so compact shapes can exceed 1 before clamping. Collinear or
/// tiny masks have zero hull area and report 1.
pub fn footprint_solidity(fp: &Footprint) -> f64 {
    if fp.area() < 3 {
        return 1.0;
    }
    let hull = convex_hull(&row_extremes(fp));
    let hull_area = polygon_area(&hull);
    if hull_area <= 0.0 {
        return 1.0;
    }
    (fp.area() as f64 / hull_area).min(1.0)
}

pub fn is_nonconcave(fp: &Footprint, threshold: f64) -> bool {
    footprint_solidity(fp) >= threshold
}

/// Leftmost and rightmost pixel of every row; these span the same hull as
/// the full boundary.
fn row_extremes(fp: &Footprint) -> Vec<(i64, i64)> {
    let b = fp.bbox();
    let bits = fp.bits();
    let mut pts = Vec::with_capacity(2 * b.h as usize);
    for y in 0..b.h {
        let mut first = None;
        let mut last = None;
        for x in 0..b.w {
            if bits.get(x, y) {
                first.get_or_insert(x);
                last = Some(x);
            }
        }
        if let (Some(f), Some(l)) = (first, last) {
            let gy = (b.y + y) as i64;
            pts.push(((b.x + f) as i64, gy));
            if l != f {
                pts.push(((b.x + l) as i64, gy));
            }
        }
    }
    pts
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Andrew's monotone chain; counter-clockwise, no repeated end point.
pub fn convex_hull(points: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let mut pts = points.to_vec();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<(i64, i64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(i64, i64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Shoelace area (absolute).
pub fn polygon_area(poly: &[(i64, i64)]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut twice = 0i64;
    for i in 0..poly.len() {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % poly.len()];
        twice += x0 * y1 - x1 * y0;
    }
    (twice as f64).abs() / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{BBox, InstanceMask};
    use proptest::prelude::*;

    fn disc(cx: f64, cy: f64, r: f64) -> Footprint {
        let b = BBox::new(0, 0, (cx + r + 2.0) as u32, (cy + r + 2.0) as u32);
        Footprint::from_predicate(b, |x, y| {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            dx * dx + dy * dy <= r * r
        })
        .unwrap()
    }

    fn mask(fp: &Footprint) -> InstanceMask {
        InstanceMask::from_footprint(1, fp).unwrap()
    }

    /// Hull oracle: brute force over every pixel centre, gift wrapping by
    /// checking each ordered pair as a supporting line.
    fn brute_hull_area(fp: &Footprint) -> f64 {
        let pts: Vec<(i64, i64)> = fp.pixels().map(|(x, y)| (x as i64, y as i64)).collect();
        let mut edges = Vec::new();
        for &a in &pts {
            for &b in &pts {
                if a == b {
                    continue;
                }
                if pts.iter().all(|&p| cross(a, b, p) >= 0) {
                    // only keep edges without interior collinear points doubling up
                    edges.push((a, b));
                }
            }
        }
        // area via sum over supporting edges of the triangle fan to the mean point,
        // keeping only maximal edges (no other supporting point strictly between)
        let maximal: Vec<_> = edges
            .iter()
            .filter(|&&(a, b)| {
                !pts.iter().any(|&p| {
                    cross(a, b, p) == 0
                        && p != a
                        && p != b
                        && ((p.0 - a.0) * (b.0 - a.0) + (p.1 - a.1) * (b.1 - a.1) < 0
                            || (p.0 - b.0) * (a.0 - b.0) + (p.1 - b.1) * (a.1 - b.1) < 0)
                })
            })
            .collect();
        let s: i64 = maximal.iter().map(|&&(a, b)| a.0 * b.1 - b.0 * a.1).sum();
        (s as f64).abs() / 2.0
    }

    #[test]
    fn iou_cases() {
        let a = mask(&Footprint::rect(2, 2, 4, 4));
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = mask(&Footprint::rect(10, 10, 3, 3));
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        // two 2x4 rectangles overlapping on a 2x1 strip: 2 / (8 + 8 - 2)
        let r1 = mask(&Footprint::rect(0, 0, 2, 4));
        let r2 = mask(&Footprint::rect(0, 3, 2, 4));
        assert!((iou(&r1, &r2).unwrap() - 2.0 / 14.0).abs() < 1e-15);
    }

    #[test]
    fn containment_cases() {
        let a = mask(&Footprint::rect(0, 0, 10, 10));
        let b = mask(&Footprint::rect(2, 2, 3, 3));
        assert_eq!(containment(&a, &b).unwrap(), 1.0);
        let far = mask(&Footprint::rect(20, 20, 3, 3));
        assert_eq!(containment(&a, &far).unwrap(), 0.0);
        let half = mask(&Footprint::rect(8, 0, 4, 5));
        assert_eq!(containment(&a, &half).unwrap(), 0.5);
    }

    #[test]
    fn empty_footprint_ratios_error() {
        let empty = Footprint::new(BBox::new(0, 0, 1, 1), crate::raster::Bitmap::new(1, 1)).unwrap();
        assert!(footprint_iou(&empty, &empty).is_err());
        assert!(footprint_containment(&empty, &empty).is_err());
    }

    #[test]
    fn rectangle_is_solid() {
        assert_eq!(solidity(&mask(&Footprint::rect(3, 3, 8, 5))), 1.0);
    }

    #[test]
    fn collinear_is_one() {
        assert_eq!(footprint_solidity(&Footprint::rect(0, 0, 9, 1)), 1.0);
    }

    #[test]
    fn hull_matches_brute_force_on_disc() {
        let d = disc(22.0, 22.0, 20.0);
        let hull = polygon_area(&convex_hull(&row_extremes(&d)));
        let oracle = brute_hull_area(&disc(8.0, 8.0, 6.0));
        let small = polygon_area(&convex_hull(&row_extremes(&disc(8.0, 8.0, 6.0))));
        assert_eq!(small, oracle);
        let s = d.area() as f64 / hull;
        assert!(s >= 0.95, "disc solidity {s}");
        assert!(footprint_solidity(&d) >= 0.95);
    }

    #[test]
    fn crescent_is_concave() {
        let d = disc(30.0, 30.0, 20.0);
        let bite = disc(42.0, 30.0, 18.0);
        let crescent = d.difference(&bite).unwrap();
        let oracle = crescent.area() as f64 / brute_hull_area(&crescent);
        let s = footprint_solidity(&crescent);
        assert!((s - oracle.min(1.0)).abs() < 1e-12);
        assert!(s < DEFAULT_SOLIDITY_THRESHOLD, "crescent solidity {s}");
    }

    proptest! {
        #[test]
        fn iou_symmetric(ax in 0u32..20, ay in 0u32..20, aw in 1u32..10, ah in 1u32..10,
                         bx in 0u32..20, by in 0u32..20, bw in 1u32..10, bh in 1u32..10) {
            let a = mask(&Footprint::rect(ax, ay, aw, ah));
            let b = mask(&Footprint::rect(bx, by, bw, bh));
            prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
            prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
            if b.footprint().pixels().all(|(x, y)| a.footprint().contains(x, y)) {
                prop_assert_eq!(containment(&a, &b).unwrap(), 1.0);
            }
        }

        #[test]
        fn bite_never_increases_solidity(w in 6u32..20, h in 6u32..20, bw in 1u32..5, bh in 1u32..5) {
            let full = Footprint::rect(0, 0, w, h);
            let bite = Footprint::rect(w / 2 - bw.min(w / 2) / 2, 0, bw.min(w / 2), bh.min(h / 2));
            let bitten = full.difference(&bite).unwrap();
            prop_assert!(footprint_solidity(&full) >= footprint_solidity(&bitten));
        }
    }
}
