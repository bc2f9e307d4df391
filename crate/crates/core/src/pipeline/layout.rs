//! On-disk layout of stage outputs, shared by the pipeline and the
//! single-stage commands so both write identical bytes.
//!
//! Tiles live in `tile_{row:04}_{col:04}/` directories holding one PNG per
//! channel and `masks.json`. Per-tile mask sets without rasters are stored as
//! `<tile_id>.json`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::augment::{AugmentedTile, Placement, Skipped};
use crate::error::{Error, Result};
use crate::filter::{FilteredTile, Removal};
use crate::io::{read_masks, read_raster, write_channel_dir, write_json, write_masks, write_text};
use crate::raster::{AnnotationSet, ChannelStack};
use crate::tiler::TileIndex;

pub const TILE_MASKS: &str = "masks.json";
pub const GRID_FILE: &str = "grid.json";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes a tile directory; returns the paths written.
pub fn write_tile(root: &Path, image: Option<&ChannelStack>, masks: &AnnotationSet) -> Result<Vec<PathBuf>> {
    let dir = root.join(&masks.tile_id);
    create_dir(&dir)?;
    let mut written = Vec::new();
    if let Some(img) = image {
        write_channel_dir(&dir, img)?;
        written.extend(img.names().iter().map(|n| dir.join(format!("{n}.png"))));
    }
    let m = dir.join(TILE_MASKS);
    write_masks(&m, masks)?;
    written.push(m);
    Ok(written)
}

/// Mask sets found in `dir`, either `<tile>/masks.json` or `<tile>.json`,
/// sorted by tile id.
pub fn read_tile_masks(dir: &Path) -> Result<Vec<AnnotationSet>> {
    let mut found = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if !name.starts_with("tile_") {
            continue;
        }
        if p.is_dir() && p.join(TILE_MASKS).is_file() {
            found.push(p.join(TILE_MASKS));
        } else if p.extension().is_some_and(|x| x == "json") {
            found.push(p);
        }
    }
    let mut sets = found.iter().map(|p| read_masks(p)).collect::<Result<Vec<_>>>()?;
    sets.sort_by(|a, b| a.tile_id.cmp(&b.tile_id));
    if sets.is_empty() {
        return Err(Error::format(
            dir,
            "no tile mask files (tile_*.json or tile_*/masks.json)",
        ));
    }
    Ok(sets)
}

/// The raster of `tile_id` below `root`: a channel directory or `<tile>.tif`.
pub fn read_tile_image(root: &Path, tile_id: &str) -> Result<ChannelStack> {
    let dir = root.join(tile_id);
    if dir.is_dir() {
        return read_raster(&dir);
    }
    for ext in ["tif", "tiff"] {
        let f = root.join(format!("{tile_id}.{ext}"));
        if f.is_file() {
            return read_raster(&f);
        }
    }
    Err(Error::format(root, format!("no raster for {tile_id}")))
}

/// Masks from `masks_dir` paired with rasters from `images_dir`.
pub fn read_tiles(masks_dir: &Path, images_dir: &Path) -> Result<Vec<(ChannelStack, AnnotationSet)>> {
    read_tile_masks(masks_dir)?
        .into_iter()
        .map(|m| Ok((read_tile_image(images_dir, &m.tile_id)?, m)))
        .collect()
}

pub fn write_grid(root: &Path, grid: &[TileIndex]) -> Result<PathBuf> {
    let p = root.join(GRID_FILE);
    write_json(&p, &grid)?;
    Ok(p)
}

pub fn read_grid(path: &Path) -> Result<Vec<TileIndex>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn jsonl<T: Serialize>(rows: impl IntoIterator<Item = T>) -> String {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(&r).expect("serialisable row"));
        s.push('\n');
    }
    s
}

fn join_ids(ids: &[u64]) -> String {
    ids.iter().map(u64::to_string).collect::<Vec<_>>().join(";")
}

pub fn removals_csv(removals: &[Removal]) -> String {
    let mut s = String::from("tile_id,mask_id,rule,ratio,secondary,related\n");
    for r in removals {
        let rule = serde_json::to_value(r.rule).expect("rule");
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.tile_id,
            r.mask_id,
            rule.as_str().unwrap_or_default(),
            r.ratio,
            r.secondary,
            join_ids(&r.related)
        );
    }
    s
}

/// `<out>/<tile>.json` per tile plus the removal audit log.
pub fn write_filtered(out: &Path, tiles: &[FilteredTile]) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let mut written = Vec::new();
    for t in tiles {
        let p = out.join(format!("{}.json", t.masks.tile_id));
        write_masks(&p, &t.masks)?;
        written.push(p);
    }
    let removals: Vec<&Removal> = tiles.iter().flat_map(|t| &t.removals).collect();
    let log = out.join("removals.jsonl");
    write_text(&log, &jsonl(&removals))?;
    let csv = out.join("removals.csv");
    write_text(&csv, &removals_csv(&removals.into_iter().cloned().collect::<Vec<_>>()))?;
    written.extend([log, csv]);
    Ok(written)
}

#[derive(Serialize)]
struct TilePlacement<'a> {
    tile_id: &'a str,
    #[serde(flatten)]
    placement: &'a Placement,
}

#[derive(Serialize)]
struct TileSkip<'a> {
    tile_id: &'a str,
    #[serde(flatten)]
    skipped: &'a Skipped,
}

pub fn placements_csv(tiles: &[AugmentedTile]) -> String {
    let mut s = String::from("tile_id,copy_id,paste_id,new_id,x,y,angle_deg,opacity,overlap_area,overlap_ratio\n");
    for t in tiles {
        for p in &t.placements {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                t.masks.tile_id,
                p.copy_id.map(|c| c.to_string()).unwrap_or_default(),
                p.paste_id,
                p.new_id,
                p.origin.0,
                p.origin.1,
                p.angle_deg,
                p.opacity,
                p.overlap_area,
                p.overlap_ratio
            );
        }
    }
    s
}

/// Augmented tile directories plus placement and skip logs.
pub fn write_augmented(out: &Path, tiles: &[AugmentedTile]) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let mut written = Vec::new();
    for t in tiles {
        written.extend(write_tile(out, Some(&t.image), &t.masks)?);
    }
    let placements = jsonl(tiles.iter().flat_map(|t| {
        t.placements.iter().map(|p| TilePlacement {
            tile_id: &t.masks.tile_id,
            placement: p,
        })
    }));
    let skipped = jsonl(tiles.iter().flat_map(|t| {
        t.skipped.iter().map(|s| TileSkip {
            tile_id: &t.masks.tile_id,
            skipped: s,
        })
    }));
    for (name, text) in [
        ("placements.jsonl", placements),
        ("placements.csv", placements_csv(tiles)),
        ("skipped.jsonl", skipped),
    ] {
        let p = out.join(name);
        write_text(&p, &text)?;
        written.push(p);
    }
    Ok(written)
}

/// Two-column `key,value` table of a flat JSON object.
pub fn summary_csv<T: Serialize>(value: &T) -> String {
    let mut s = String::from("key,value\n");
    if let Ok(serde_json::Value::Object(map)) = serde_json::to_value(value) {
        for (k, v) in map {
            match v {
                serde_json::Value::Object(_) | serde_json::Value::Array(_) => continue,
                serde_json::Value::Null => {
                    let _ = writeln!(s, "{k},");
                }
                serde_json::Value::String(x) => {
                    let _ = writeln!(s, "{k},{x}");
                }
                other => {
                    let _ = writeln!(s, "{k},{other}");
                }
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{Footprint, InstanceMask, Stage};

    #[test]
    fn tile_dirs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = ChannelStack::from_planes(8, 6, vec![("DAPI".into(), (0..48).collect())]).unwrap();
        let m = InstanceMask::from_footprint(1, &Footprint::rect(1, 1, 3, 2)).unwrap();
        for name in ["tile_0000_0001", "tile_0000_0000"] {
            let set = AnnotationSet::new(name, 8, 6, Stage::Raw, vec![m.clone()]).unwrap();
            write_tile(dir.path(), Some(&img), &set).unwrap();
        }
        let tiles = read_tiles(dir.path(), dir.path()).unwrap();
        assert_eq!(tiles.len(), 2);
        assert_eq!(tiles[0].1.tile_id, "tile_0000_0000");
        assert_eq!(tiles[1].0, img);
    }

    #[test]
    fn summary_skips_nested_values() {
        #[derive(Serialize)]
        struct S {
            a: f64,
            b: Option<u8>,
            c: Vec<u8>,
        }
        assert_eq!(
            summary_csv(&S {
                a: 0.5,
                b: None,
                c: vec![1]
            }),
            "key,value\na,0.5\nb,\n"
        );
    }
}
