//! Nucleus-centred windows and their seven difficulty features.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numeric::{pairwise_mean, pairwise_sum};
use crate::raster::{AnnotationSet, BBox, ChannelStack, Footprint, DAPI, PAN_HISTONE};

pub const PATCH_SIZE: u32 = 80;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyFeatures {
    pub foreground_contrast: f64,
    pub occlusion_score: f64,
    pub boundary_variability: f64,
    pub nucleus_size: f64,
    pub aspect_ratio: f64,
    pub edge_intensity: f64,
    pub background_variability: f64,
}

impl DifficultyFeatures {
    pub const NAMES: [&'static str; 7] = [
        "foreground_contrast",
        "occlusion_score",
        "boundary_variability",
        "nucleus_size",
        "aspect_ratio",
        "edge_intensity",
        "background_variability",
    ];

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.foreground_contrast,
            self.occlusion_score,
            self.boundary_variability,
            self.nucleus_size,
            self.aspect_ratio,
            self.edge_intensity,
            self.background_variability,
        ]
    }
}

/// An 80×80 window of the nuclear channels around one nucleus. `origin` is
/// the window's top-left in frame coordinates and may be negative; pixels
/// outside the frame are zero and flagged in `valid`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchWindow {
    pub nucleus_id: u64,
    pub origin: (i64, i64),
    pub pixels: ChannelStack,
    pub valid: Vec<bool>,
}

impl PatchWindow {
    pub fn center(&self) -> (f64, f64) {
        (
            self.origin.0 as f64 + PATCH_SIZE as f64 / 2.0,
            self.origin.1 as f64 + PATCH_SIZE as f64 / 2.0,
        )
    }

    /// `max(DAPI, PanHistone)` at window pixel `(u, v)`.
    fn intensity(&self, u: u32, v: u32) -> f64 {
        self.pixels.get(0, u, v).max(self.pixels.get(1, u, v)) as f64
    }

    fn window_of(&self, x: u32, y: u32) -> Option<(u32, u32)> {
        let u = x as i64 - self.origin.0;
        let v = y as i64 - self.origin.1;
        let s = PATCH_SIZE as i64;
        (u >= 0 && v >= 0 && u < s && v < s).then_some((u as u32, v as u32))
    }
}

/// One window per mask, centred on the mask's pixel centroid.
pub fn extract_patches(image: &ChannelStack, set: &AnnotationSet) -> Result<Vec<PatchWindow>> {
    let nuclear = image.select(&[DAPI, PAN_HISTONE])?;
    Ok(set
        .instances()
        .iter()
        .map(|m| {
            let (cx, cy) = m.footprint().centroid();
            // pixel centres sit at +0.5
            let half = PATCH_SIZE as i64 / 2;
            let ox = (cx + 0.5).round() as i64 - half;
            let oy = (cy + 0.5).round() as i64 - half;
            let valid = (0..PATCH_SIZE as i64)
                .flat_map(|v| (0..PATCH_SIZE as i64).map(move |u| (u, v)))
                .map(|(u, v)| {
                    let (x, y) = (ox + u, oy + v);
                    x >= 0 && y >= 0 && x < image.width() as i64 && y < image.height() as i64
                })
                .collect();
            PatchWindow {
                nucleus_id: m.id(),
                origin: (ox, oy),
                pixels: nuclear.crop(ox, oy, PATCH_SIZE, PATCH_SIZE),
                valid,
            }
        })
        .collect())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let Some(mean) = pairwise_mean(xs) else {
        return (0.0, 0.0);
    };
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    (mean, (pairwise_sum(&sq) / xs.len() as f64).sqrt())
}

/// Features of `mask` inside `window`; `neighbours` are the other nuclei.
/// Padding pixels are left out of the background statistics.
pub fn difficulty_features(window: &PatchWindow, mask: &Footprint, neighbours: &[Footprint]) -> DifficultyFeatures {
    let s = PATCH_SIZE;
    let mut inside = Vec::new();
    let mut outside = Vec::new();
    let mut in_window = vec![false; (s * s) as usize];
    for (x, y) in mask.pixels() {
        if let Some((u, v)) = window.window_of(x, y) {
            in_window[(v * s + u) as usize] = true;
        }
    }
    for v in 0..s {
        for u in 0..s {
            let i = (v * s + u) as usize;
            if in_window[i] {
                inside.push(window.intensity(u, v));
            } else if window.valid[i] {
                outside.push(window.intensity(u, v));
            }
        }
    }
    let (fg, _) = mean_std(&inside);
    let (bg, bg_sd) = mean_std(&outside);

    let occluded = mask
        .pixels()
        .filter(|&(x, y)| neighbours.iter().any(|n| n.contains(x, y)))
        .count();
    let boundary = mask.boundary_pixels();
    let edge: Vec<f64> = boundary
        .iter()
        .filter_map(|&(x, y)| window.window_of(x, y))
        .map(|(u, v)| window.intensity(u, v))
        .collect();
    let area = mask.area() as f64;
    let b: BBox = mask.bbox();
    DifficultyFeatures {
        foreground_contrast: fg - bg,
        occlusion_score: occluded as f64 / area,
        boundary_variability: boundary.len() as f64 / area,
        nucleus_size: (inside.len() as f64 / (s * s) as f64).min(1.0),
        aspect_ratio: b.w as f64 / b.h as f64,
        edge_intensity: pairwise_mean(&edge).unwrap_or(0.0),
        background_variability: bg_sd,
    }
}
