//! Mask exchange JSON.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{AnnotationSet, BBox, InstanceMask, Rle, Stage};

#[derive(Serialize, Deserialize)]
struct RleJson {
    order: String,
    counts: Vec<u32>,
}

impl RleJson {
    fn of(rle: &Rle) -> Self {
        Self {
            order: "row-major".into(),
            counts: rle.counts.clone(),
        }
    }

    fn into_rle(self, id: u64) -> Result<Rle> {
        if self.order != "row-major" {
            return Err(Error::InvalidMask {
                id,
                reason: format!("unsupported rle order {:?}", self.order),
            });
        }
        Ok(Rle { counts: self.counts })
    }
}

#[derive(Serialize, Deserialize)]
struct InstanceJson {
    id: u64,
    bbox: [u32; 4],
    area: u64,
    rle: RleJson,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    overlap_rle: Option<RleJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    complement_rle: Option<RleJson>,
}

#[derive(Serialize, Deserialize)]
struct SetJson {
    tile_id: String,
    width: u32,
    height: u32,
    stage: Stage,
    instances: Vec<InstanceJson>,
}

fn to_json(set: &AnnotationSet) -> SetJson {
    SetJson {
        tile_id: set.tile_id.clone(),
        width: set.width,
        height: set.height,
        stage: set.stage,
        instances: set
            .instances()
            .iter()
            .map(|m| {
                let b = m.bbox();
                InstanceJson {
                    id: m.id(),
                    bbox: [b.x, b.y, b.w, b.h],
                    area: m.area(),
                    rle: RleJson::of(m.rle()),
                    score: m.score(),
                    overlap_rle: m.overlap_rle().map(RleJson::of),
                    complement_rle: m.complement_rle().map(RleJson::of),
                }
            })
            .collect(),
    }
}

fn from_json(j: SetJson) -> Result<AnnotationSet> {
    let mut instances = Vec::with_capacity(j.instances.len());
    for i in j.instances {
        let [x, y, w, h] = i.bbox;
        let mask = InstanceMask::new(i.id, BBox::new(x, y, w, h), i.rle.into_rle(i.id)?, i.score)?;
        if mask.area() != i.area {
            return Err(Error::InvalidMask {
                id: i.id,
                reason: format!("area {} disagrees with the rle ({})", i.area, mask.area()),
            });
        }
        if x as u64 + w as u64 > j.width as u64 || y as u64 + h as u64 > j.height as u64 {
            return Err(Error::InvalidMask {
                id: i.id,
                reason: format!("bbox leaves the {}x{} frame", j.width, j.height),
            });
        }
        let mask = match (i.overlap_rle, i.complement_rle) {
            (Some(o), Some(c)) => mask.with_component_rles(o.into_rle(i.id)?, c.into_rle(i.id)?)?,
            (None, None) => mask,
            _ => {
                return Err(Error::InvalidMask {
                    id: i.id,
                    reason: "overlap_rle and complement_rle must appear together".into(),
                })
            }
        };
        instances.push(mask);
    }
    AnnotationSet::new(j.tile_id, j.width, j.height, j.stage, instances)
}

/// Compact JSON with a fixed field order.
pub fn masks_to_string(set: &AnnotationSet) -> String {
    serde_json::to_string(&to_json(set)).expect("mask json is always serialisable")
}

pub fn masks_from_str(s: &str) -> Result<AnnotationSet> {
    from_json(serde_json::from_str(s)?)
}

pub fn read_masks(path: &Path) -> Result<AnnotationSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    from_json(parsed).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_masks(path: &Path, set: &AnnotationSet) -> Result<()> {
    let mut s = masks_to_string(set);
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Footprint;

    fn sample() -> AnnotationSet {
        let a = InstanceMask::from_footprint(3, &Footprint::rect(1, 1, 2, 2))
            .unwrap()
            .with_score(Some(0.5));
        let b = InstanceMask::from_footprint(7, &Footprint::rect(2, 0, 2, 3))
            .unwrap()
            .with_overlap_region(Some(&Footprint::rect(2, 1, 1, 2)));
        AnnotationSet::new("tile_0000_0001", 6, 4, Stage::Augmented, vec![a, b]).unwrap()
    }

    #[test]
    fn exact_layout() {
        let s = masks_to_string(&sample());
        assert_eq!(
            s,
            concat!(
                r#"{"tile_id":"tile_0000_0001","width":6,"height":4,"stage":"augmented","instances":["#,
                r#"{"id":3,"bbox":[1,1,2,2],"area":4,"rle":{"order":"row-major","counts":[0,4]},"score":0.5},"#,
                r#"{"id":7,"bbox":[2,0,2,3],"area":6,"rle":{"order":"row-major","counts":[0,6]},"#,
                r#""overlap_rle":{"order":"row-major","counts":[2,1,1,1,1]},"#,
                r#""complement_rle":{"order":"row-major","counts":[0,2,1,1,1,1]}}]}"#
            )
        );
    }

    #[test]
    fn round_trip() {
        let set = sample();
        assert_eq!(masks_from_str(&masks_to_string(&set)).unwrap(), set);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        write_masks(&p, &set).unwrap();
        assert_eq!(read_masks(&p).unwrap(), set);
    }

    #[test]
    fn bad_files_rejected() {
        let good = masks_to_string(&sample());
        assert!(masks_from_str(&good.replace("\"area\":4", "\"area\":5")).is_err());
        assert!(masks_from_str(&good.replace("row-major", "col-major")).is_err());
        assert!(masks_from_str(&good.replace("\"width\":6", "\"width\":3")).is_err());
        assert!(masks_from_str(&good.replace("[2,1,1,1,1]", "[2,1,1,1,0,1]")).is_err());
        assert!(read_masks(Path::new("/nonexistent/m.json")).is_err());
    }
}
