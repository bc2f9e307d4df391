//! Seeded synthetic slides: convex nuclei on a noisy background, marker
//! channels, and teacher masks with planted union, duplicate and dim errors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{AnnotationSet, BBox, ChannelStack, Footprint, InstanceMask, Stage, DAPI, PAN_HISTONE};

pub const CHANNELS: [&str; 8] = [DAPI, PAN_HISTONE, "NeuN", "Iba1", "Olig2", "S100b", "GFP", "PCNA"];
pub const CELL_TYPE_MARKERS: [&str; 5] = ["NeuN", "Iba1", "Olig2", "S100b", "GFP"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub width: u32,
    pub height: u32,
    /// True nuclei, including both members of every union pair.
    pub nuclei: usize,
    /// Semi-axis range of the elliptical nuclei.
    pub radius: (f64, f64),
    pub unions: usize,
    pub duplicates: usize,
    pub dim: usize,
    /// Pairs of true nuclei that overlap each other.
    pub overlapping_pairs: usize,
    pub background: u16,
    pub nuclear_level: (u16, u16),
    pub marker_level: u16,
    pub noise: u16,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            width: 512,
            height: 512,
            nuclei: 60,
            radius: (6.0, 11.0),
            unions: 4,
            duplicates: 4,
            dim: 4,
            overlapping_pairs: 0,
            background: 300,
            nuclear_level: (1800, 3000),
            marker_level: 1500,
            noise: 40,
            seed: 1,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.radius;
        if !(lo >= 2.0 && hi >= lo) {
            return Err(Error::param(
                "radius",
                format!("({lo}, {hi}) must satisfy 2 <= lo <= hi"),
            ));
        }
        if 2 * (self.unions + self.overlapping_pairs) > self.nuclei {
            return Err(Error::param(
                "unions",
                "union and overlapping pairs need two nuclei each",
            ));
        }
        if self.duplicates > self.nuclei {
            return Err(Error::param("duplicates", "at most one duplicate per nucleus"));
        }
        if self.nuclear_level.0 <= self.background || self.nuclear_level.1 < self.nuclear_level.0 {
            return Err(Error::param("nuclear_level", "must lie above the background"));
        }
        let min = (4.0 * hi) as u32 + 8;
        if self.width < min || self.height < min {
            return Err(Error::param("width", "slide too small for the nuclei"));
        }
        Ok(())
    }
}

/// Teacher ids of the planted errors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Planted {
    pub unions: Vec<u64>,
    pub duplicates: Vec<u64>,
    pub dim: Vec<u64>,
}

impl Planted {
    pub fn all(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self
            .unions
            .iter()
            .chain(&self.duplicates)
            .chain(&self.dim)
            .copied()
            .collect();
        v.sort_unstable();
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSlide {
    pub image: ChannelStack,
    /// True nuclei, ids `1..=n`.
    pub gt: AnnotationSet,
    /// The true nuclei under the same ids followed by the planted errors.
    pub teacher: AnnotationSet,
    pub planted: Planted,
    /// Cell-type marker of each true nucleus, in gt order.
    pub cell_types: Vec<String>,
}

struct Nucleus {
    fp: Footprint,
    level: u16,
}

/// Disc bookkeeping for rejection placement.
struct Occupancy {
    cell: f64,
    cols: usize,
    buckets: Vec<Vec<(f64, f64, f64)>>,
}

impl Occupancy {
    fn new(w: u32, h: u32, cell: f64) -> Self {
        let cols = (w as f64 / cell).ceil() as usize + 1;
        let rows = (h as f64 / cell).ceil() as usize + 1;
        Self {
            cell,
            cols,
            buckets: vec![Vec::new(); cols * rows],
        }
    }

    fn bucket(&self, x: f64, y: f64) -> (usize, usize) {
        ((x / self.cell) as usize, (y / self.cell) as usize)
    }

    fn free(&self, x: f64, y: f64, r: f64, gap: f64) -> bool {
        let (bx, by) = self.bucket(x, y);
        let rows = self.buckets.len() / self.cols;
        for yy in by.saturating_sub(1)..(by + 2).min(rows) {
            for xx in bx.saturating_sub(1)..(bx + 2).min(self.cols) {
                for &(ox, oy, or) in &self.buckets[yy * self.cols + xx] {
                    let d = ((ox - x).powi(2) + (oy - y).powi(2)).sqrt();
                    if d < or + r + gap {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn add(&mut self, x: f64, y: f64, r: f64) {
        let (bx, by) = self.bucket(x, y);
        self.buckets[by * self.cols + bx].push((x, y, r));
    }
}

fn ellipse(cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> Option<Footprint> {
    let r = a.max(b).ceil() + 1.0;
    let x0 = (cx - r).floor().max(0.0) as u32;
    let y0 = (cy - r).floor().max(0.0) as u32;
    let side = (2.0 * r) as u32 + 2;
    let (s, c) = theta.sin_cos();
    Footprint::from_predicate(BBox::new(x0, y0, side, side), |x, y| {
        let dx = x as f64 + 0.5 - cx;
        let dy = y as f64 + 0.5 - cy;
        let u = (dx * c + dy * s) / a;
        let v = (-dx * s + dy * c) / b;
        u * u + v * v <= 1.0
    })
}

/// Erodes `fp` by one pixel `times` times.
fn erode(fp: &Footprint, times: u32) -> Option<Footprint> {
    let mut cur = fp.clone();
    for _ in 0..times {
        let prev = cur.clone();
        cur = Footprint::from_predicate(prev.bbox(), |x, y| {
            prev.contains(x, y)
                && x > 0
                && y > 0
                && prev.contains(x - 1, y)
                && prev.contains(x + 1, y)
                && prev.contains(x, y - 1)
                && prev.contains(x, y + 1)
        })?;
    }
    Some(cur)
}

/// A 3-pixel-wide segment between two points, clipped to `frame`.
fn bridge(a: (f64, f64), b: (f64, f64), frame: BBox) -> Option<Footprint> {
    let bbox = BBox::new(
        (a.0.min(b.0) - 2.0).max(0.0) as u32,
        (a.1.min(b.1) - 2.0).max(0.0) as u32,
        ((a.0 - b.0).abs() + 5.0) as u32,
        ((a.1 - b.1).abs() + 5.0) as u32,
    );
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    Footprint::from_predicate(bbox, |x, y| {
        let (px, py) = (x as f64 + 0.5 - a.0, y as f64 + 0.5 - a.1);
        let t = ((px * dx + py * dy) / len2).clamp(0.0, 1.0);
        let (qx, qy) = (px - t * dx, py - t * dy);
        frame.contains(x, y) && qx * qx + qy * qy <= 2.25
    })
}

fn noise_planes(p: &SynthParams) -> Vec<(String, Vec<u16>)> {
    let (w, h) = (p.width as usize, p.height as usize);
    CHANNELS
        .par_iter()
        .enumerate()
        .map(|(c, name)| {
            let base = if c < 2 { p.background } else { p.background / 3 };
            let mut plane = vec![0u16; w * h];
            plane.par_chunks_mut(w).enumerate().for_each(|(row, line)| {
                let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ ((c as u64) << 40) ^ ((row as u64) << 8) ^ 0x5eed);
                for v in line {
                    let n = rng.random_range(0..=2 * p.noise as u32) as i64 - p.noise as i64;
                    *v = (base as i64 + n).clamp(0, u16::MAX as i64) as u16;
                }
            });
            (name.to_string(), plane)
        })
        .collect()
}

fn paint(plane: &mut [u16], width: u32, fp: &Footprint, level: u16, noise: u16, rng: &mut ChaCha8Rng) {
    for (x, y) in fp.pixels() {
        let n = rng.random_range(0..=2 * noise as u32) as i64 - noise as i64;
        let v = (level as i64 + n).clamp(0, u16::MAX as i64) as u16;
        let px = &mut plane[(y * width + x) as usize];
        *px = (*px).max(v);
    }
}

pub fn synth_slide(p: &SynthParams) -> Result<SynthSlide> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let frame = BBox::new(0, 0, p.width, p.height);
    let mut occ = Occupancy::new(p.width, p.height, 4.0 * p.radius.1 + 8.0);
    let gap = 4.0;
    let margin = p.radius.1 + 3.0;
    let mut nuclei: Vec<Nucleus> = Vec::new();
    let mut union_pairs = Vec::new();

    let draw_shape = |rng: &mut ChaCha8Rng| {
        let a = rng.random_range(p.radius.0..=p.radius.1);
        let b = rng.random_range(p.radius.0..=p.radius.1).min(a).max(a * 0.6);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let level = rng.random_range(p.nuclear_level.0..=p.nuclear_level.1);
        (a, b, theta, level)
    };
    let place = |rng: &mut ChaCha8Rng, occ: &Occupancy, r: f64| -> Result<(f64, f64)> {
        let crowded = || Error::param("nuclei", "could not place every nucleus; the slide is too crowded");
        if 2.0 * (margin + r) >= p.width.min(p.height) as f64 {
            return Err(crowded());
        }
        for _ in 0..10_000 {
            let x = rng.random_range(margin + r..p.width as f64 - margin - r);
            let y = rng.random_range(margin + r..p.height as f64 - margin - r);
            if occ.free(x, y, r, gap) {
                return Ok((x, y));
            }
        }
        Err(crowded())
    };

    let pairs = p.unions + p.overlapping_pairs;
    for k in 0..pairs {
        let (a1, b1, t1, l1) = draw_shape(&mut rng);
        let (a2, b2, t2, l2) = draw_shape(&mut rng);
        let touching = k < p.unions;
        // union pairs sit a few pixels apart, overlapping pairs share a sliver
        let d = if touching { a1 + a2 + 3.0 } else { (a1 + a2) * 0.8 };
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let reach = d / 2.0 + a1.max(a2);
        let (mx, my) = place(&mut rng, &occ, reach)?;
        let c1 = (mx - phi.cos() * d / 2.0, my - phi.sin() * d / 2.0);
        let c2 = (mx + phi.cos() * d / 2.0, my + phi.sin() * d / 2.0);
        occ.add(mx, my, reach);
        let f1 = ellipse(c1.0, c1.1, a1, b1, t1).expect("non-empty ellipse");
        let f2 = ellipse(c2.0, c2.1, a2, b2, t2).expect("non-empty ellipse");
        if touching {
            union_pairs.push((nuclei.len(), nuclei.len() + 1, c1, c2));
        }
        nuclei.push(Nucleus { fp: f1, level: l1 });
        nuclei.push(Nucleus { fp: f2, level: l2 });
    }
    while nuclei.len() < p.nuclei {
        let (a, b, t, l) = draw_shape(&mut rng);
        let (x, y) = place(&mut rng, &occ, a)?;
        occ.add(x, y, a);
        nuclei.push(Nucleus {
            fp: ellipse(x, y, a, b, t).expect("non-empty ellipse"),
            level: l,
        });
    }
    let mut dim_blobs = Vec::new();
    for _ in 0..p.dim {
        let (a, b, t, _) = draw_shape(&mut rng);
        let (x, y) = place(&mut rng, &occ, a)?;
        occ.add(x, y, a);
        dim_blobs.push(ellipse(x, y, a, b, t).expect("non-empty ellipse"));
    }

    let mut planes = noise_planes(p);
    let w = p.width;
    let mut cell_types = Vec::with_capacity(nuclei.len());
    for n in &nuclei {
        let ph = (n.level as f64 * rng.random_range(0.6..0.9)) as u16;
        paint(&mut planes[0].1, w, &n.fp, n.level, p.noise, &mut rng);
        paint(&mut planes[1].1, w, &n.fp, ph.max(p.background + 1), p.noise, &mut rng);
        let ty = rng.random_range(0..CELL_TYPE_MARKERS.len());
        paint(&mut planes[2 + ty].1, w, &n.fp, p.marker_level, p.noise, &mut rng);
        if rng.random_bool(0.3) {
            paint(&mut planes[7].1, w, &n.fp, p.marker_level / 2, p.noise, &mut rng);
        }
        cell_types.push(CELL_TYPE_MARKERS[ty].to_string());
    }
    // barely above background: indistinguishable under the foreground model
    let faint = p.background + p.noise / 4;
    for fp in &dim_blobs {
        paint(&mut planes[0].1, w, fp, faint, p.noise / 4, &mut rng);
    }
    let image = ChannelStack::from_planes(p.width, p.height, planes)?;

    let gt_masks: Vec<InstanceMask> = nuclei
        .iter()
        .enumerate()
        .map(|(i, n)| InstanceMask::from_footprint(i as u64 + 1, &n.fp))
        .collect::<Result<_>>()?;
    let mut teacher = gt_masks.clone();
    let mut next = teacher.len() as u64 + 1;
    let mut planted = Planted::default();
    for &(i, j, c1, c2) in &union_pairs {
        let mut u = nuclei[i].fp.union(&nuclei[j].fp);
        if let Some(b) = bridge(c1, c2, frame) {
            u = u.union(&b);
        }
        teacher.push(InstanceMask::from_footprint(next, &u)?);
        planted.unions.push(next);
        next += 1;
    }
    // duplicates go on nuclei outside union pairs so they never become union parts
    let first_single = 2 * p.unions;
    let candidates: Vec<usize> = (first_single..nuclei.len()).collect();
    let mut chosen = Vec::new();
    let mut pool = candidates;
    while chosen.len() < p.duplicates.min(pool.len()) {
        let k = rng.random_range(0..pool.len());
        chosen.push(pool.swap_remove(k));
    }
    chosen.sort_unstable();
    for i in chosen {
        let fp = &nuclei[i].fp;
        let inner = erode(fp, 1)
            .filter(|e| e.area() * 2 > fp.area())
            .unwrap_or_else(|| fp.clone());
        let dup = if inner.area() < fp.area() {
            inner
        } else {
            // too small to erode: drop one boundary pixel instead
            let (bx, by) = fp.boundary_pixels()[0];
            fp.difference(&Footprint::rect(bx, by, 1, 1))
                .expect("more than one pixel")
        };
        teacher.push(InstanceMask::from_footprint(next, &dup)?);
        planted.duplicates.push(next);
        next += 1;
    }
    for fp in &dim_blobs {
        teacher.push(InstanceMask::from_footprint(next, fp)?);
        planted.dim.push(next);
        next += 1;
    }
    Ok(SynthSlide {
        image,
        gt: AnnotationSet::new("slide", p.width, p.height, Stage::Raw, gt_masks)?,
        teacher: AnnotationSet::new("slide", p.width, p.height, Stage::Raw, teacher)?,
        planted,
        cell_types,
    })
}

/// A mask that misses most of `fp`: the part beyond a quarter of the way
/// from the centroid towards the right edge.
fn botched(fp: &Footprint) -> Footprint {
    let (cx, _) = fp.centroid();
    let b = fp.bbox();
    let cut = cx + 0.5 + (b.right() as f64 - cx) * 0.25;
    Footprint::from_predicate(b, |x, y| fp.contains(x, y) && x as f64 + 0.5 > cut)
        .unwrap_or_else(|| Footprint::rect(b.right() - 1, b.y, 1, 1))
}

/// Ground truth plus a weak teacher and a student. The teacher botches each
/// nucleus with probability `teacher_error`; the student botches only a
/// `student_share` fraction of those, so it is strictly better.
#[derive(Clone, Debug, PartialEq)]
pub struct W2sFixture {
    pub image: ChannelStack,
    pub gt: AnnotationSet,
    pub pseudo: AnnotationSet,
    pub student: AnnotationSet,
}

/// `set` with each mask independently botched at `rate`; ids are kept.
pub fn botch_some(set: &AnnotationSet, rate: f64, seed: u64) -> Result<AnnotationSet> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::param("rate", format!("{rate} is outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = set
        .instances()
        .iter()
        .map(|m| {
            if rng.random_bool(rate) {
                InstanceMask::from_footprint(m.id(), &botched(&m.footprint()))
            } else {
                Ok(m.clone())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    set.with_instances(set.stage, out)
}

pub fn synth_w2s(p: &SynthParams, teacher_error: f64, student_share: f64) -> Result<W2sFixture> {
    if !(0.0..=1.0).contains(&teacher_error) || !(0.0..=1.0).contains(&student_share) {
        return Err(Error::param("teacher_error", "error rates must lie in [0, 1]"));
    }
    let base = SynthParams {
        unions: 0,
        duplicates: 0,
        dim: 0,
        ..p.clone()
    };
    let slide = synth_slide(&base)?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x77_32_73);
    let mut pseudo = Vec::new();
    let mut student = Vec::new();
    for m in slide.gt.instances() {
        let fp = m.footprint();
        let bad = rng.random_bool(teacher_error);
        let student_bad = bad && rng.random_bool(student_share);
        let pick = |wrong: bool| if wrong { botched(&fp) } else { fp.clone() };
        pseudo.push(InstanceMask::from_footprint(m.id(), &pick(bad))?);
        student.push(InstanceMask::from_footprint(m.id(), &pick(student_bad))?);
    }
    let (w, h) = (p.width, p.height);
    Ok(W2sFixture {
        image: slide.image,
        pseudo: AnnotationSet::new("slide", w, h, Stage::Raw, pseudo)?,
        student: AnnotationSet::new("slide", w, h, Stage::Raw, student)?,
        gt: slide.gt,
    })
}
