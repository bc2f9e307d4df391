//! Dicing a slide into overlapping square tiles and merging per-tile masks
//! back into slide coordinates.

use std::cmp::Reverse;
use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{footprint_iou, AnnotationSet, BoxIndex, ChannelStack, InstanceMask, Stage};

pub const DEFAULT_TILE_SIZE: u32 = 512;
pub const DEFAULT_OVERLAP: u32 = 50;
pub const DEFAULT_DEDUP_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileIndex {
    pub tile_id: String,
    pub row: u32,
    pub col: u32,
    pub origin: (u32, u32),
    /// Nominal tile edge; `width`/`height` only differ when the slide is smaller.
    pub size: u32,
    pub overlap: u32,
    pub width: u32,
    pub height: u32,
    pub slide_width: u32,
    pub slide_height: u32,
}

impl TileIndex {
    pub fn name(row: u32, col: u32) -> String {
        format!("tile_{row:04}_{col:04}")
    }

    pub fn stride(&self) -> u32 {
        self.size - self.overlap
    }

    /// Whether the left, top, right, bottom edges border another tile.
    pub fn interior_edges(&self) -> [bool; 4] {
        let (x, y) = self.origin;
        [
            x > 0,
            y > 0,
            x + self.width < self.slide_width,
            y + self.height < self.slide_height,
        ]
    }
}

/// Origins along one axis: stride steps with the last tile flush to the edge.
pub fn axis_origins(len: u32, size: u32, overlap: u32) -> Result<Vec<u32>> {
    if len == 0 {
        return Err(Error::TileGeometry("empty slide axis".into()));
    }
    if size == 0 || overlap >= size {
        return Err(Error::param(
            "tile_size",
            format!("needs tile_size > overlap, got {size} and {overlap}"),
        ));
    }
    if len <= size {
        return Ok(vec![0]);
    }
    let stride = size - overlap;
    let n = (len - size).div_ceil(stride) + 1;
    let mut out: Vec<u32> = (0..n - 1).map(|i| i * stride).collect();
    out.push(len - size);
    Ok(out)
}

/// Row-major tile layout for a `width × height` slide.
pub fn tile_grid(width: u32, height: u32, size: u32, overlap: u32) -> Result<Vec<TileIndex>> {
    if width == 0 || height == 0 {
        return Err(Error::TileGeometry(format!("empty slide {width}x{height}")));
    }
    let xs = axis_origins(width, size, overlap)?;
    let ys = axis_origins(height, size, overlap)?;
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for (row, &y) in ys.iter().enumerate() {
        for (col, &x) in xs.iter().enumerate() {
            out.push(TileIndex {
                tile_id: TileIndex::name(row as u32, col as u32),
                row: row as u32,
                col: col as u32,
                origin: (x, y),
                size,
                overlap,
                width: size.min(width),
                height: size.min(height),
                slide_width: width,
                slide_height: height,
            });
        }
    }
    Ok(out)
}

pub fn dice(slide: &ChannelStack, size: u32, overlap: u32) -> Result<Vec<(TileIndex, ChannelStack)>> {
    let grid = tile_grid(slide.width(), slide.height(), size, overlap)?;
    Ok(grid
        .into_par_iter()
        .map(|t| {
            let crop = slide.crop(t.origin.0 as i64, t.origin.1 as i64, t.width, t.height);
            (t, crop)
        })
        .collect())
}

fn check_geometry(tiles: &[&TileIndex]) -> Result<()> {
    let Some(first) = tiles.first() else {
        return Ok(());
    };
    let grid = tile_grid(first.slide_width, first.slide_height, first.size, first.overlap)?;
    let cols = axis_origins(first.slide_width, first.size, first.overlap)?.len() as u32;
    let mut seen = BTreeSet::new();
    for t in tiles {
        let expected = grid
            .get((t.row * cols + t.col) as usize)
            .filter(|g| g.row == t.row && g.col == t.col);
        if expected != Some(*t) {
            return Err(Error::TileGeometry(format!(
                "{} does not belong to the {}x{} grid with size {} and overlap {}",
                t.tile_id, first.slide_width, first.slide_height, first.size, first.overlap
            )));
        }
        if !seen.insert(&t.tile_id) {
            return Err(Error::TileGeometry(format!("{} appears twice", t.tile_id)));
        }
    }
    Ok(())
}

/// A mask touching a tile edge that borders another tile was likely cut off.
fn is_suspect(tile: &TileIndex, m: &InstanceMask) -> bool {
    let b = m.bbox();
    let [l, t, r, btm] = tile.interior_edges();
    (l && b.x == 0) || (t && b.y == 0) || (r && b.right() >= tile.width) || (btm && b.bottom() >= tile.height)
}

struct Candidate<'a> {
    tile: usize,
    suspect: bool,
    mask: InstanceMask,
    tile_id: &'a str,
}

/// Slide-level mask set from per-tile sets. Conflicts with IoU above
/// `dedup_iou` keep the unsuspected mask, then the larger one, then the
/// lower tile id. Output ids are renumbered from 1.
pub fn merge(per_tile: &[(TileIndex, AnnotationSet)], dedup_iou: f64) -> Result<AnnotationSet> {
    if !(0.0..=1.0).contains(&dedup_iou) {
        return Err(Error::param("dedup_iou", "must lie in [0, 1]"));
    }
    let tiles: Vec<&TileIndex> = per_tile.iter().map(|(t, _)| t).collect();
    check_geometry(&tiles)?;
    let Some((first, _)) = per_tile.first() else {
        return Err(Error::TileGeometry("no tiles to merge".into()));
    };
    let stage = per_tile[0].1.stage;
    let mut cands = Vec::new();
    for (i, (tile, set)) in per_tile.iter().enumerate() {
        if set.width != tile.width || set.height != tile.height {
            return Err(Error::TileGeometry(format!(
                "{}: masks are {}x{} but the tile is {}x{}",
                tile.tile_id, set.width, set.height, tile.width, tile.height
            )));
        }
        for m in set.instances() {
            cands.push(Candidate {
                tile: i,
                suspect: is_suspect(tile, m),
                mask: m.translated(tile.origin.0 as i64, tile.origin.1 as i64)?,
                tile_id: &tile.tile_id,
            });
        }
    }
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by_key(|&i| {
        let c = &cands[i];
        (c.suspect, Reverse(c.mask.area()), c.tile_id, c.mask.id())
    });

    let cell = first.size.max(16);
    let mut index = BoxIndex::new(cell);
    let mut kept: Vec<(usize, crate::raster::Footprint)> = Vec::new();
    for i in order {
        let fp = cands[i].mask.footprint();
        let mut clash = false;
        for j in index.query(&fp.bbox()) {
            if footprint_iou(&fp, &kept[j].1)? > dedup_iou {
                clash = true;
                break;
            }
        }
        if !clash {
            index.insert(fp.bbox());
            kept.push((i, fp));
        }
    }
    let mut survivors: Vec<usize> = kept.into_iter().map(|(i, _)| i).collect();
    survivors.sort_by_key(|&i| (cands[i].tile, cands[i].mask.id()));
    let instances = survivors
        .iter()
        .enumerate()
        .map(|(n, &i)| cands[i].mask.clone().with_id(n as u64 + 1))
        .collect();
    AnnotationSet::new("slide", first.slide_width, first.slide_height, stage, instances)
}

/// Slide masks as the per-tile sets a dicing would produce: every mask fully
/// inside a tile is listed in that tile, in tile coordinates.
pub fn split(slide_masks: &AnnotationSet, grid: &[TileIndex], stage: Stage) -> Result<Vec<(TileIndex, AnnotationSet)>> {
    grid.iter()
        .map(|t| {
            let frame = crate::raster::BBox::new(t.origin.0, t.origin.1, t.width, t.height);
            let inside = slide_masks
                .instances()
                .iter()
                .filter(|m| frame.contains_box(&m.bbox()))
                .map(|m| m.translated(-(t.origin.0 as i64), -(t.origin.1 as i64)))
                .collect::<Result<Vec<_>>>()?;
            Ok((
                t.clone(),
                AnnotationSet::new(t.tile_id.clone(), t.width, t.height, stage, inside)?,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{Footprint, DAPI};
    use proptest::prelude::*;

    fn slide(w: u32, h: u32) -> ChannelStack {
        let px: Vec<u16> = (0..w * h).map(|i| (i % 65521) as u16).collect();
        ChannelStack::from_planes(w, h, vec![(DAPI.into(), px)]).unwrap()
    }

    #[test]
    fn exact_fit_is_one_tile() {
        let g = tile_grid(512, 512, 512, 50).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].origin, (0, 0));
        assert_eq!(g[0].tile_id, "tile_0000_0000");
    }

    #[test]
    fn two_tiles_across() {
        assert_eq!(axis_origins(974, 512, 50).unwrap(), vec![0, 462]);
        let g = tile_grid(974, 512, 512, 50).unwrap();
        assert_eq!(g.iter().map(|t| t.origin).collect::<Vec<_>>(), vec![(0, 0), (462, 0)]);
    }

    #[test]
    fn large_slide_count_by_cover_formula() {
        // count ceil((L - size) / stride) + 1 along each axis independently
        let count = |l: u32| ((l - 512) as f64 / 462.0).ceil() as usize + 1;
        assert_eq!(count(29398), 64);
        assert_eq!(count(43054), 94);
        assert_eq!(tile_grid(29398, 43054, 512, 50).unwrap().len(), 6016);
    }

    #[test]
    fn small_slide_gives_clamped_tile() {
        let g = tile_grid(100, 700, 512, 50).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!((g[0].width, g[0].height), (100, 512));
        assert_eq!(g[1].origin, (0, 188));
    }

    #[test]
    fn bad_geometry_rejected() {
        assert!(tile_grid(0, 10, 512, 50).is_err());
        assert!(tile_grid(10, 10, 50, 50).is_err());
    }

    #[test]
    fn dice_copies_pixels() {
        let s = slide(974, 600);
        let tiles = dice(&s, 512, 50).unwrap();
        assert_eq!(tiles.len(), 4);
        for (t, c) in &tiles {
            for &(x, y) in &[(0, 0), (511, 511), (100, 37)] {
                assert_eq!(c.get(0, x, y), s.get(0, t.origin.0 + x, t.origin.1 + y));
            }
        }
    }

    fn set_of(id: &str, w: u32, h: u32, fps: &[Footprint]) -> AnnotationSet {
        let inst = fps
            .iter()
            .enumerate()
            .map(|(i, f)| InstanceMask::from_footprint(i as u64 + 1, f).unwrap())
            .collect();
        AnnotationSet::new(id, w, h, Stage::Raw, inst).unwrap()
    }

    #[test]
    fn interior_instance_round_trips() {
        let g = tile_grid(974, 512, 512, 50).unwrap();
        let a = Footprint::rect(100, 100, 20, 15);
        let b = Footprint::rect(200, 300, 10, 10);
        let per = vec![
            (g[0].clone(), set_of(&g[0].tile_id, 512, 512, std::slice::from_ref(&a))),
            (g[1].clone(), set_of(&g[1].tile_id, 512, 512, std::slice::from_ref(&b))),
        ];
        let m = merge(&per, 0.5).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.instances()[0].footprint(), a);
        assert_eq!(m.instances()[1].footprint(), b.moved_to(662, 300));
    }

    #[test]
    fn duplicate_across_tiles_keeps_larger() {
        let g = tile_grid(974, 512, 512, 50).unwrap();
        // slide-frame nucleus at x 470..490; the right tile sees a trimmed copy
        let big = Footprint::rect(470, 200, 20, 20);
        let small = Footprint::rect(470 - 462, 200, 18, 20);
        let iou = footprint_iou(&big, &small.moved_to(470, 200)).unwrap();
        assert!((iou - 0.9).abs() < 1e-12);
        let per = vec![
            (
                g[0].clone(),
                set_of(&g[0].tile_id, 512, 512, std::slice::from_ref(&big)),
            ),
            (g[1].clone(), set_of(&g[1].tile_id, 512, 512, &[small])),
        ];
        let m = merge(&per, 0.5).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.instances()[0].footprint(), big);
    }

    #[test]
    fn suspect_mask_loses_even_when_larger() {
        let g = tile_grid(974, 512, 512, 50).unwrap();
        // left copy is cut at the left tile's right edge and bleeds wider
        let cut = Footprint::rect(480, 200, 32, 20);
        let whole = Footprint::rect(480 - 462, 200, 28, 20);
        let per = vec![
            (g[0].clone(), set_of(&g[0].tile_id, 512, 512, &[cut])),
            (
                g[1].clone(),
                set_of(&g[1].tile_id, 512, 512, std::slice::from_ref(&whole)),
            ),
        ];
        let m = merge(&per, 0.5).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.instances()[0].footprint(), whole.moved_to(480, 200));
    }

    #[test]
    fn disjoint_tiles_concatenate() {
        let g = tile_grid(2000, 512, 512, 50).unwrap();
        let per: Vec<_> = g
            .iter()
            .map(|t| {
                (
                    t.clone(),
                    set_of(&t.tile_id, 512, 512, &[Footprint::rect(200, 200, 30, 30)]),
                )
            })
            .collect();
        assert_eq!(merge(&per, 0.5).unwrap().len(), g.len());
    }

    #[test]
    fn inconsistent_geometry_errors() {
        let g = tile_grid(974, 512, 512, 50).unwrap();
        let mut bad = g[1].clone();
        bad.origin = (400, 0);
        let per = vec![
            (g[0].clone(), AnnotationSet::empty("a", 512, 512, Stage::Raw)),
            (bad, AnnotationSet::empty("b", 512, 512, Stage::Raw)),
        ];
        assert!(merge(&per, 0.5).is_err());
        let per = vec![(g[0].clone(), AnnotationSet::empty("a", 100, 512, Stage::Raw))];
        assert!(merge(&per, 0.5).is_err());
    }

    #[test]
    fn split_then_merge_is_identity_away_from_bands() {
        let (w, h) = (1500u32, 1100u32);
        let g = tile_grid(w, h, 512, 50).unwrap();
        let mut fps = Vec::new();
        for y in (5..h - 20).step_by(37) {
            for x in (5..w - 20).step_by(41) {
                let f = Footprint::rect(x, y, 12, 9);
                let holders = g
                    .iter()
                    .filter(|t| {
                        crate::raster::BBox::new(t.origin.0, t.origin.1, t.width, t.height).contains_box(&f.bbox())
                    })
                    .count();
                if holders == 1 {
                    fps.push(f);
                }
            }
        }
        let slide_set = set_of("slide", w, h, &fps);
        let per = split(&slide_set, &g, Stage::Raw).unwrap();
        let merged = merge(&per, 0.5).unwrap();
        let mut a: Vec<_> = fps.iter().map(|f| f.bbox()).collect();
        let mut b: Vec<_> = merged.instances().iter().map(|m| m.bbox()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn every_pixel_covered(w in 1u32..1400, h in 1u32..900, size in 20u32..600, ov in 0u32..19) {
            let g = tile_grid(w, h, size, ov).unwrap();
            let mut hits = vec![0u8; (w * h) as usize];
            for t in &g {
                prop_assert!(t.origin.0 + t.width <= w && t.origin.1 + t.height <= h);
                for y in t.origin.1..t.origin.1 + t.height {
                    for x in t.origin.0..t.origin.0 + t.width {
                        hits[(y * w + x) as usize] = hits[(y * w + x) as usize].saturating_add(1);
                    }
                }
            }
            prop_assert!(hits.iter().all(|&c| c >= 1));
            // overlap bands between neighbouring tiles are seen at least twice
            if ov > 0 {
                for t in g.iter().filter(|t| t.interior_edges()[2]) {
                    let x = t.origin.0 + t.width - 1;
                    prop_assert!(hits[(t.origin.1 * w + x) as usize] >= 2);
                }
            }
        }

        #[test]
        fn merge_leaves_no_conflicts(rects in prop::collection::vec((0u32..960, 0u32..490, 4u32..30, 4u32..30, 0usize..2), 1..40)) {
            let g = tile_grid(974, 512, 512, 50).unwrap();
            let mut per: Vec<Vec<Footprint>> = vec![Vec::new(), Vec::new()];
            for (x, y, w, h, t) in rects {
                let ox = g[t].origin.0;
                if x >= ox && x + w <= ox + 512 && y + h <= 512 {
                    per[t].push(Footprint::rect(x - ox, y, w, h));
                }
            }
            let input: Vec<_> = g.iter().zip(&per).map(|(t, f)| (t.clone(), set_of(&t.tile_id, 512, 512, f))).collect();
            let m = merge(&input, 0.5).unwrap();
            let fps: Vec<_> = m.instances().iter().map(|i| i.footprint()).collect();
            for i in 0..fps.len() {
                for j in i + 1..fps.len() {
                    prop_assert!(footprint_iou(&fps[i], &fps[j]).unwrap() <= 0.5);
                }
            }
        }
    }
}
