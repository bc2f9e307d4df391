//! Rotation and opacity scaling of a single nucleus.

use crate::error::{Error, Result};
use crate::raster::{ChannelStack, Footprint};

/// A nucleus cut out of a tile. `mask` is anchored at `(0, 0)` and `pixels`
/// covers its bbox with zeros outside the mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub mask: Footprint,
    pub pixels: ChannelStack,
    pub angle_deg: f64,
    pub opacity: f64,
}

impl Patch {
    pub fn width(&self) -> u32 {
        self.mask.bbox().w
    }

    pub fn height(&self) -> u32 {
        self.mask.bbox().h
    }

    pub fn area(&self) -> u64 {
        self.mask.area()
    }
}

fn snap(v: f64) -> f64 {
    if v.abs() < 1e-12 {
        0.0
    } else if (v.abs() - 1.0).abs() < 1e-12 {
        v.signum()
    } else {
        v
    }
}

fn bilinear(plane: &[u16], w: u32, h: u32, gx: f64, gy: f64) -> f64 {
    let at = |x: i64, y: i64| {
        let x = x.clamp(0, w as i64 - 1) as usize;
        let y = y.clamp(0, h as i64 - 1) as usize;
        plane[y * w as usize + x] as f64
    };
    let (x0, y0) = (gx.floor(), gy.floor());
    let (fx, fy) = (gx - x0, gy - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let mut v = at(x0, y0) * (1.0 - fx) * (1.0 - fy);
    if fx > 0.0 {
        v += at(x0 + 1, y0) * fx * (1.0 - fy);
    }
    if fy > 0.0 {
        v += at(x0, y0 + 1) * (1.0 - fx) * fy;
    }
    if fx > 0.0 && fy > 0.0 {
        v += at(x0 + 1, y0 + 1) * fx * fy;
    }
    v
}

/// Rotates `mask` (global coordinates in `tile`) by
/// `angle_deg` about its bbox centre and scales intensities by `opacity`.
/// Mask samples use nearest neighbour, intensities bilinear interpolation.
pub fn transform_nucleus(tile: &ChannelStack, mask: &Footprint, angle_deg: f64, opacity: f64) -> Result<Patch> {
    if !(opacity > 0.0 && opacity <= 1.0) {
        return Err(Error::param("opacity", format!("{opacity} is outside (0, 1]")));
    }
    let b = mask.bbox();
    let theta = angle_deg.to_radians();
    let (c, s) = (snap(theta.cos()), snap(theta.sin()));
    let ow = (b.w as f64 * c.abs() + b.h as f64 * s.abs() - 1e-9).ceil().max(1.0) as u32;
    let oh = (b.w as f64 * s.abs() + b.h as f64 * c.abs() - 1e-9).ceil().max(1.0) as u32;
    let cx = b.x as f64 + b.w as f64 / 2.0;
    let cy = b.y as f64 + b.h as f64 / 2.0;
    let source = |u: u32, v: u32| {
        let px = u as f64 + 0.5 - ow as f64 / 2.0;
        let py = v as f64 + 0.5 - oh as f64 / 2.0;
        // inverse rotation back into the tile
        (cx + c * px - s * py, cy + s * px + c * py)
    };
    let inside = |u: u32, v: u32| {
        let (sx, sy) = source(u, v);
        let (fx, fy) = (sx.floor(), sy.floor());
        fx >= 0.0 && fy >= 0.0 && mask.contains(fx as u32, fy as u32)
    };
    let rotated = Footprint::from_predicate(crate::raster::BBox::new(0, 0, ow, oh), inside)
        .ok_or_else(|| Error::Degenerate("rotation left no mask pixels".into()))?;
    let rb = rotated.bbox();
    let mut pixels = ChannelStack::zeros(rb.w, rb.h, tile.names().to_vec())?;
    for ch in 0..tile.channels() {
        let plane = tile.channel(ch);
        for (u, v) in rotated.pixels() {
            let (sx, sy) = source(u, v);
            let val = bilinear(plane, tile.width(), tile.height(), sx - 0.5, sy - 0.5);
            let out = (val * opacity).round().clamp(0.0, u16::MAX as f64) as u16;
            pixels.set(ch, u - rb.x, v - rb.y, out);
        }
    }
    Ok(Patch {
        mask: rotated.moved_to(0, 0),
        pixels,
        angle_deg,
        opacity,
    })
}

/// The untouched nucleus.
pub fn extract_patch(tile: &ChannelStack, mask: &Footprint) -> Result<Patch> {
    transform_nucleus(tile, mask, 0.0, 1.0)
}
