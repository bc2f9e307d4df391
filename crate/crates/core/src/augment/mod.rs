//! Copy-and-paste augmentation that manufactures overlapping nuclei together
//! with their overlap / complement annotations.

mod transform;

pub use transform::{extract_patch, transform_nucleus, Patch};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::DimRule;
use crate::raster::{
    footprint_solidity, AnnotationSet, BoxIndex, ChannelStack, Footprint, InstanceMask, Stage,
    DEFAULT_SOLIDITY_THRESHOLD,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    /// Paste attempts per copy nucleus.
    pub t: usize,
    pub max_overlap_ratio: f64,
    pub opacity_range: (f64, f64),
    pub border_margin: u32,
    pub isolation_radius: u32,
    pub solidity_threshold: f64,
    pub max_retries: usize,
    pub max_area_change: f64,
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            t: 3,
            max_overlap_ratio: 0.5,
            opacity_range: (0.6, 1.0),
            border_margin: 10,
            isolation_radius: 5,
            solidity_threshold: DEFAULT_SOLIDITY_THRESHOLD,
            max_retries: 50,
            max_area_change: 0.15,
            seed: 17,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_overlap_ratio > 0.0 && self.max_overlap_ratio < 1.0) {
            return Err(Error::param("max_overlap_ratio", "must lie in (0, 1)"));
        }
        let (lo, hi) = self.opacity_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::param(
                "opacity_range",
                format!("[{lo}, {hi}] is not inside (0, 1]"),
            ));
        }
        if self.max_retries == 0 {
            return Err(Error::param("max_retries", "must be positive"));
        }
        Ok(())
    }
}

/// Masks meeting all four selection rules: isolated, away from the border,
/// not concave and not dim.
pub fn eligible_nuclei(set: &AnnotationSet, dim: &DimRule, params: &AugmentParams) -> Vec<InstanceMask> {
    let inst = set.instances();
    let index = BoxIndex::from_boxes(64, inst.iter().map(|m| m.bbox()));
    let m = params.border_margin;
    inst.iter()
        .enumerate()
        .filter(|(i, mask)| {
            let b = mask.bbox();
            let inside = b.x >= m
                && b.y >= m
                && b.right() as u64 + m as u64 <= set.width as u64
                && b.bottom() as u64 + m as u64 <= set.height as u64;
            if !inside {
                return false;
            }
            let halo = b.dilate(params.isolation_radius);
            if index.query(&halo).into_iter().any(|j| j != *i) {
                return false;
            }
            let fp = mask.footprint();
            footprint_solidity(&fp) >= params.solidity_threshold && !dim.is_dim(&fp)
        })
        .map(|(_, mask)| mask.clone())
        .collect()
}

pub fn eligible_copy(tile: &ChannelStack, set: &AnnotationSet, params: &AugmentParams) -> Result<Vec<InstanceMask>> {
    Ok(eligible_nuclei(set, &DimRule::fit(tile, params.seed)?, params))
}

/// Same rules as [`eligible_copy`].
pub fn eligible_paste(tile: &ChannelStack, set: &AnnotationSet, params: &AugmentParams) -> Result<Vec<InstanceMask>> {
    eligible_copy(tile, set, params)
}

/// Random rotation and opacity; angles that distort the area too much are
/// redrawn, falling back to no rotation.
pub fn transform(
    tile: &ChannelStack,
    nucleus: &Footprint,
    params: &AugmentParams,
    rng: &mut impl Rng,
) -> Result<Patch> {
    let (lo, hi) = params.opacity_range;
    let opacity = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    for _ in 0..10 {
        let angle = rng.random_range(0.0..360.0);
        let p = transform_nucleus(tile, nucleus, angle, opacity)?;
        let change = (p.area() as f64 - nucleus.area() as f64).abs() / nucleus.area() as f64;
        if change <= params.max_area_change {
            return Ok(p);
        }
    }
    transform_nucleus(tile, nucleus, 0.0, opacity)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub copy_id: Option<u64>,
    pub paste_id: u64,
    pub new_id: u64,
    pub origin: (u32, u32),
    pub angle_deg: f64,
    pub opacity: f64,
    pub overlap_area: u64,
    pub overlap_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub copy_id: u64,
    pub paste_id: u64,
    pub reason: String,
}

/// A tile being augmented: image, masks and a spatial index over them.
pub struct Canvas {
    pub image: ChannelStack,
    template: AnnotationSet,
    instances: Vec<InstanceMask>,
    fps: Vec<Footprint>,
    index: BoxIndex,
    next_id: u64,
}

impl Canvas {
    pub fn new(image: ChannelStack, set: &AnnotationSet) -> Result<Self> {
        if set.width != image.width() || set.height != image.height() {
            return Err(Error::InvalidRaster(format!(
                "{}: masks are {}x{} but the image is {}x{}",
                set.tile_id,
                set.width,
                set.height,
                image.width(),
                image.height()
            )));
        }
        let fps: Vec<Footprint> = set.instances().iter().map(|m| m.footprint()).collect();
        Ok(Self {
            image,
            template: AnnotationSet::empty(set.tile_id.clone(), set.width, set.height, Stage::Augmented),
            instances: set.instances().to_vec(),
            index: BoxIndex::from_boxes(64, fps.iter().map(|f| f.bbox())),
            fps,
            next_id: set.next_id(),
        })
    }

    fn position(&self, id: u64) -> Result<usize> {
        self.instances
            .iter()
            .position(|m| m.id() == id)
            .ok_or_else(|| Error::InvalidMask {
                id,
                reason: "paste target not in the tile".into(),
            })
    }

    /// Overlap of `fp` with the paste target, or `None` when it also touches
    /// any other mask.
    fn overlap_with(&self, fp: &Footprint, target: usize) -> Option<u64> {
        let mut ov = 0;
        for j in self.index.query(&fp.bbox()) {
            let a = fp.intersection_area(&self.fps[j]);
            if j == target {
                ov = a;
            } else if a > 0 {
                return None;
            }
        }
        Some(ov)
    }

    /// Blends `patch` with its top-left at `(x, y)` and records the new
    /// instance, without checking any overlap rule.
    pub fn place_patch(&mut self, patch: &Patch, paste_id: u64, x: u32, y: u32) -> Result<Placement> {
        let target = self.position(paste_id)?;
        if x as u64 + patch.width() as u64 > self.image.width() as u64
            || y as u64 + patch.height() as u64 > self.image.height() as u64
        {
            return Err(Error::param(
                "placement",
                format!("patch at ({x}, {y}) leaves the tile"),
            ));
        }
        let copy_fp = patch.mask.moved_to(x, y);
        for c in 0..self.image.channels() {
            let ch = patch.pixels.names().iter().position(|n| n == &self.image.names()[c]);
            let Some(ch) = ch else { continue };
            for (u, v) in patch.mask.pixels() {
                let add = patch.pixels.get(ch, u, v);
                let cur = self.image.get(c, x + u, y + v);
                self.image.set(c, x + u, y + v, cur.saturating_add(add));
            }
        }
        let overlap = copy_fp.intersection(&self.fps[target]);
        let overlap_area = overlap.as_ref().map_or(0, |o| o.area());
        let id = self.next_id;
        self.next_id += 1;
        let new_mask = InstanceMask::from_footprint(id, &copy_fp)?.with_overlap_region(overlap.as_ref());
        let paste = self.instances[target].clone().with_overlap_region(overlap.as_ref());
        self.instances[target] = paste;
        self.index.insert(copy_fp.bbox());
        self.fps.push(copy_fp);
        self.instances.push(new_mask);
        Ok(Placement {
            copy_id: None,
            paste_id,
            new_id: id,
            origin: (x, y),
            angle_deg: patch.angle_deg,
            opacity: patch.opacity,
            overlap_area,
            overlap_ratio: overlap_area as f64 / patch.area().min(self.fps[target].area()) as f64,
        })
    }

    /// Searches a ring around the paste nucleus for a spot where the copy
    /// overlaps it with ratio in `(0, max_overlap_ratio]` and touches nothing
    /// else. `None` when the retries run out.
    pub fn copy_paste(
        &mut self,
        patch: &Patch,
        paste_id: u64,
        params: &AugmentParams,
        rng: &mut impl Rng,
    ) -> Result<Option<Placement>> {
        let target = self.position(paste_id)?;
        let paste = &self.fps[target];
        let denom = patch.area().min(paste.area()) as f64;
        let (px, py) = paste.centroid();
        let (cx, cy) = patch.mask.centroid();
        let reach =
            (patch.area() as f64 / std::f64::consts::PI).sqrt() + (paste.area() as f64 / std::f64::consts::PI).sqrt();
        for _ in 0..params.max_retries {
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let r = rng.random_range(0.3 * reach..=reach);
            let ox = (px + r * phi.cos() - cx).round();
            let oy = (py + r * phi.sin() - cy).round();
            if ox < 0.0
                || oy < 0.0
                || ox + patch.width() as f64 > self.image.width() as f64
                || oy + patch.height() as f64 > self.image.height() as f64
            {
                continue;
            }
            let fp = patch.mask.moved_to(ox as u32, oy as u32);
            let Some(ov) = self.overlap_with(&fp, target) else {
                continue;
            };
            if ov == 0 || ov as f64 / denom > params.max_overlap_ratio {
                continue;
            }
            return self.place_patch(patch, paste_id, ox as u32, oy as u32).map(Some);
        }
        Ok(None)
    }

    pub fn finish(self) -> Result<(ChannelStack, AnnotationSet)> {
        let set = self.template.with_instances(Stage::Augmented, self.instances)?;
        Ok((self.image, set))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedTile {
    pub image: ChannelStack,
    pub masks: AnnotationSet,
    pub placements: Vec<Placement>,
    pub skipped: Vec<Skipped>,
}

/// Augments one filtered tile with a private RNG seeded by `seed ^ tile_index`.
pub fn augment_tile(
    image: &ChannelStack,
    set: &AnnotationSet,
    params: &AugmentParams,
    tile_index: u64,
) -> Result<AugmentedTile> {
    params.validate()?;
    if set.stage != Stage::Filtered {
        return Err(Error::Stage {
            stage: "augment".into(),
            source: Box::new(Error::InvalidMask {
                id: 0,
                reason: format!("{} is not a filtered mask set", set.tile_id),
            }),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ tile_index);
    let dim = DimRule::fit(image, params.seed)?;
    let copies = eligible_nuclei(set, &dim, params);
    let pastes = copies.clone();
    let mut canvas = Canvas::new(image.clone(), set)?;
    let mut placements = Vec::new();
    let mut skipped = Vec::new();
    for copy in &copies {
        let patch = transform(image, &copy.footprint(), params, &mut rng)?;
        let targets: Vec<u64> = pastes.iter().map(|m| m.id()).filter(|&id| id != copy.id()).collect();
        if targets.is_empty() {
            continue;
        }
        for _ in 0..params.t {
            let paste_id = targets[rng.random_range(0..targets.len())];
            match canvas.copy_paste(&patch, paste_id, params, &mut rng)? {
                Some(mut p) => {
                    p.copy_id = Some(copy.id());
                    placements.push(p);
                }
                None => {
                    log::debug!("{}: no placement for {} onto {}", set.tile_id, copy.id(), paste_id);
                    skipped.push(Skipped {
                        copy_id: copy.id(),
                        paste_id,
                        reason: format!("no valid placement in {} tries", params.max_retries),
                    });
                }
            }
        }
    }
    let (image, masks) = canvas.finish()?;
    Ok(AugmentedTile {
        image,
        masks,
        placements,
        skipped,
    })
}

/// Augments every tile in parallel; results do not depend on scheduling.
pub fn run_algorithm2(data: &[(ChannelStack, AnnotationSet)], params: &AugmentParams) -> Result<Vec<AugmentedTile>> {
    params.validate()?;
    data.par_iter()
        .enumerate()
        .map(|(i, (img, set))| augment_tile(img, set, params, i as u64))
        .collect()
}

/// Pixels touched by any pasted copy.
pub fn pasted_region(tile: &AugmentedTile) -> Vec<Footprint> {
    tile.placements
        .iter()
        .filter_map(|p| tile.masks.get(p.new_id).map(|m| m.footprint()))
        .collect()
}
