//! Declarative run configuration (TOML) and its validation.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentParams;
use crate::error::{Error, Result};
use crate::filter::FilterParams;
use crate::io::channel_names;
use crate::raster::{DAPI, PAN_HISTONE};
use crate::synth::CELL_TYPE_MARKERS;
use crate::tiler::{DEFAULT_DEDUP_IOU, DEFAULT_OVERLAP, DEFAULT_TILE_SIZE};
use crate::w2s::DEFAULT_KNN;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Slide raster: multi-page TIFF or a directory of per-channel files.
    pub images: PathBuf,
    /// Slide-level teacher mask JSON.
    pub teacher_masks: PathBuf,
    pub gt: Option<PathBuf>,
    pub student: Option<PathBuf>,
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tiling {
    pub tile_size: u32,
    pub overlap: u32,
    pub dedup_iou: f64,
    /// Write per-channel tile rasters next to the tile masks.
    pub write_rasters: bool,
}

impl Default for Tiling {
    fn default() -> Self {
        Self {
            tile_size: DEFAULT_TILE_SIZE,
            overlap: DEFAULT_OVERLAP,
            dedup_iou: DEFAULT_DEDUP_IOU,
            write_rasters: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QaConfig {
    pub markers: Vec<String>,
    pub seed: u64,
}

impl Default for QaConfig {
    fn default() -> Self {
        Self {
            markers: CELL_TYPE_MARKERS.iter().map(|s| s.to_string()).collect(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct W2sConfig {
    pub k_nn: usize,
}

impl Default for W2sConfig {
    fn default() -> Self {
        Self { k_nn: DEFAULT_KNN }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub dice: bool,
    pub filter: bool,
    pub augment: bool,
    pub qa: bool,
    pub eval: bool,
    pub w2s: bool,
    pub merge: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self::all(true)
    }
}

impl Stages {
    pub const NAMES: [&'static str; 7] = ["dice", "filter", "augment", "qa", "eval", "w2s", "merge"];

    pub fn all(on: bool) -> Self {
        Self {
            dice: on,
            filter: on,
            augment: on,
            qa: on,
            eval: on,
            w2s: on,
            merge: on,
        }
    }

    pub fn enabled(&self, name: &str) -> bool {
        match name {
            "dice" => self.dice,
            "filter" => self.filter,
            "augment" => self.augment,
            "qa" => self.qa,
            "eval" => self.eval,
            "w2s" => self.w2s,
            "merge" => self.merge,
            _ => false,
        }
    }

    pub fn any(&self) -> bool {
        Self::NAMES.iter().any(|n| self.enabled(n))
    }

    /// Only `names` switched on.
    pub fn only(names: &[&str]) -> Result<Self> {
        let mut s = Self::all(false);
        for &n in names {
            match n {
                "dice" => s.dice = true,
                "filter" => s.filter = true,
                "augment" => s.augment = true,
                "qa" => s.qa = true,
                "eval" => s.eval = true,
                "w2s" => s.w2s = true,
                "merge" => s.merge = true,
                other => return Err(Error::param("stages", format!("unknown stage `{other}`"))),
            }
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub paths: Paths,
    pub tiling: Tiling,
    pub filter: FilterParams,
    pub augment: AugmentParams,
    pub qa: QaConfig,
    pub w2s: W2sConfig,
    pub stages: Stages,
}

/// One violated constraint and the dotted path of the field at fault.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn parse_override(s: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::param("set", format!("`{s}` is not key=value")))?;
    let key: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if key.iter().any(|k| k.is_empty()) {
        return Err(Error::param("set", format!("`{s}` has an empty key segment")));
    }
    let raw = raw.trim();
    // bare words fall back to strings so `paths.output=out` works
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key, value))
}

fn apply_override(table: &mut toml::Table, key: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = key.split_last().expect("non-empty key");
    let mut cur = table;
    for k in parents {
        let entry = cur
            .entry(k.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::param("set", format!("`{}` is not a table", key.join("."))))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if !p.as_os_str().is_empty() && p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    /// Parses TOML text, applies `key=value` overrides, and resolves relative
    /// paths against `base`.
    pub fn from_toml(text: &str, overrides: &[String], base: &Path) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Degenerate(format!("config: {e}")))?;
        for o in overrides {
            let (k, v) = parse_override(o)?;
            apply_override(&mut table, &k, v)?;
        }
        let mut cfg: PipelineConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Degenerate(format!("config: {e}")))?;
        let p = &mut cfg.paths;
        for path in [&mut p.images, &mut p.teacher_masks, &mut p.output] {
            resolve(base, path);
        }
        for path in [p.gt.as_mut(), p.student.as_mut()].into_iter().flatten() {
            resolve(base, path);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, overrides, base).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }
}

/// Every violated constraint of `cfg`; empty when the config can run.
pub fn validate_config(cfg: &PipelineConfig) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut diag = |path: &str, message: String| {
        out.push(Diagnostic {
            path: path.to_string(),
            message,
        })
    };
    let st = &cfg.stages;
    let p = &cfg.paths;
    if p.output.as_os_str().is_empty() {
        diag("paths.output", "an output directory is required".into());
    }
    let needs_inputs = st.any();
    let mut channels = None;
    if needs_inputs {
        if !p.images.exists() {
            diag("paths.images", format!("`{}` does not exist", p.images.display()));
        } else {
            match channel_names(&p.images) {
                Ok(names) => channels = Some(names),
                Err(e) => diag("paths.images", e.to_string()),
            }
        }
        if !p.teacher_masks.is_file() {
            diag(
                "paths.teacher_masks",
                format!("`{}` is not a file", p.teacher_masks.display()),
            );
        }
    }
    if st.eval || st.w2s {
        match &p.gt {
            None => diag("paths.gt", "required by the eval and w2s stages".into()),
            Some(g) if !g.is_file() => diag("paths.gt", format!("`{}` is not a file", g.display())),
            _ => {}
        }
    }
    if st.w2s {
        match &p.student {
            None => diag("paths.student", "required by the w2s stage".into()),
            Some(s) if !s.is_file() => diag("paths.student", format!("`{}` is not a file", s.display())),
            _ => {}
        }
    }

    let t = &cfg.tiling;
    if t.tile_size == 0 {
        diag("tiling.tile_size", "must be positive".into());
    } else if t.overlap >= t.tile_size {
        diag(
            "tiling.overlap",
            format!("{} must be smaller than tile_size {}", t.overlap, t.tile_size),
        );
    }
    if !(t.dedup_iou > 0.0 && t.dedup_iou <= 1.0) {
        diag("tiling.dedup_iou", format!("{} is outside (0, 1]", t.dedup_iou));
    }

    let f = &cfg.filter;
    for (name, v) in [
        ("filter.beta1", f.beta1),
        ("filter.beta2", f.beta2),
        ("filter.beta3", f.beta3),
    ] {
        if !(v > 0.0 && v <= 1.0) {
            diag(name, format!("{v} is outside (0, 1]"));
        }
    }
    if !(0.0..=1.0).contains(&f.solidity_threshold) {
        diag(
            "filter.solidity_threshold",
            format!("{} is outside [0, 1]", f.solidity_threshold),
        );
    }

    let a = &cfg.augment;
    if st.augment && !st.filter {
        diag(
            "stages.augment",
            "augmentation consumes filtered masks; enable stages.filter".into(),
        );
    }
    if a.t == 0 {
        diag("augment.t", "must be at least 1".into());
    }
    if !(a.max_overlap_ratio > 0.0 && a.max_overlap_ratio < 1.0) {
        diag(
            "augment.max_overlap_ratio",
            format!("{} is outside (0, 1)", a.max_overlap_ratio),
        );
    }
    let (lo, hi) = a.opacity_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        diag("augment.opacity_range", format!("[{lo}, {hi}] is not inside (0, 1]"));
    }
    if a.max_retries == 0 {
        diag("augment.max_retries", "must be positive".into());
    }
    if !(0.0..=1.0).contains(&a.solidity_threshold) {
        diag(
            "augment.solidity_threshold",
            format!("{} is outside [0, 1]", a.solidity_threshold),
        );
    }
    if a.max_area_change.is_nan() || a.max_area_change < 0.0 {
        diag("augment.max_area_change", "must be non-negative".into());
    }

    if st.qa {
        if cfg.qa.markers.is_empty() {
            diag("qa.markers", "at least one marker channel is required".into());
        }
        for (i, m) in cfg.qa.markers.iter().enumerate() {
            let path = format!("qa.markers[{i}]");
            if m.trim().is_empty() {
                diag(&path, "empty channel name".into());
            } else if let Some(names) = &channels {
                if !names.iter().any(|n| n == m) {
                    diag(
                        &path,
                        format!("channel `{m}` is not in the images ({})", names.join(", ")),
                    );
                }
            }
        }
    }
    if let Some(names) = &channels {
        for req in [DAPI, PAN_HISTONE] {
            if !names.iter().any(|n| n == req) {
                diag("paths.images", format!("nuclear channel `{req}` is missing"));
            }
        }
    }
    if cfg.w2s.k_nn == 0 {
        diag("w2s.k_nn", "must be at least 1".into());
    }
    out
}
