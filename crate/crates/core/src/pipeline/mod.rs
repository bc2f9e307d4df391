//! End-to-end runs: dice, filter, augment, qa, eval, w2s, merge.

mod config;
pub mod layout;

pub use config::{validate_config, Diagnostic, Paths, PipelineConfig, QaConfig, Stages, Tiling, W2sConfig};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::run_algorithm2;
use crate::error::{Error, Result};
use crate::filter::run_algorithm1;
use crate::io::{hash_path, read_masks, read_raster, write_json, write_masks, write_text};
use crate::qa::{evaluate, qa_report, EvalReport};
use crate::raster::{AnnotationSet, ChannelStack, Stage};
use crate::tiler::{dice, merge, split, tile_grid, TileIndex};
use crate::w2s::{build_w2s_report, features_csv, W2sFrame};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub duration_ms: f64,
    /// Relative to the output directory.
    pub outputs: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: PipelineConfig,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<InputRecord>,
    pub stages: Vec<StageRecord>,
    pub failure: Option<Failure>,
}

impl Manifest {
    fn new(cfg: &PipelineConfig) -> Self {
        let seeds = BTreeMap::from([
            ("filter".to_string(), cfg.filter.seed),
            ("augment".to_string(), cfg.augment.seed),
            ("qa".to_string(), cfg.qa.seed),
        ]);
        Self {
            tool: "wsqa".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: cfg.clone(),
            seeds,
            inputs: Vec::new(),
            stages: Vec::new(),
            failure: None,
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// A run that stopped early; `manifest` records the stages that finished.
#[derive(Debug, thiserror::Error)]
#[error("stage `{stage}` failed: {source}")]
pub struct PipelineError {
    pub stage: String,
    pub source: Error,
    pub manifest: Box<Manifest>,
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    out: PathBuf,
    manifest: Manifest,
}

/// Intermediate products carried between stages.
#[derive(Default)]
struct State {
    image: Option<ChannelStack>,
    teacher: Option<AnnotationSet>,
    grid: Vec<TileIndex>,
    tiles: Vec<(ChannelStack, AnnotationSet)>,
    filtered: Option<Vec<AnnotationSet>>,
    merged: Option<AnnotationSet>,
    gt: Option<AnnotationSet>,
}

impl Run<'_> {
    fn rel(&self, p: PathBuf) -> PathBuf {
        p.strip_prefix(&self.out).map(Path::to_path_buf).unwrap_or(p)
    }

    fn stage(
        &mut self,
        name: &str,
        state: &mut State,
        f: impl FnOnce(&Self, &mut State) -> Result<Vec<PathBuf>>,
    ) -> std::result::Result<(), (String, Error)> {
        let t0 = Instant::now();
        log::info!("stage {name}");
        let outputs = f(self, state).map_err(|e| (name.to_string(), e))?;
        let outputs = outputs.into_iter().map(|p| self.rel(p)).collect();
        self.manifest.stages.push(StageRecord {
            name: name.into(),
            duration_ms: t0.elapsed().as_secs_f64() * 1e3,
            outputs,
        });
        Ok(())
    }

    fn dir(&self, name: &str) -> Result<PathBuf> {
        let d = self.out.join(name);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    }

    fn execute(&mut self, state: &mut State) -> std::result::Result<(), (String, Error)> {
        let cfg = self.cfg;
        let st = &cfg.stages;
        if !st.any() {
            return Ok(());
        }
        let load = |e| ("load".to_string(), e);
        let p = &cfg.paths;
        let mut inputs = vec![("images", p.images.clone()), ("teacher_masks", p.teacher_masks.clone())];
        if st.eval || st.w2s {
            inputs.extend(p.gt.clone().map(|g| ("gt", g)));
        }
        if st.w2s {
            inputs.extend(p.student.clone().map(|s| ("student", s)));
        }
        for (role, path) in inputs {
            let sha256 = hash_path(&path).map_err(load)?;
            self.manifest.inputs.push(InputRecord {
                role: role.into(),
                path,
                sha256,
            });
        }
        let image = read_raster(&p.images).map_err(load)?;
        let teacher = read_masks(&p.teacher_masks).map_err(load)?;
        if (teacher.width, teacher.height) != (image.width(), image.height()) {
            return Err(load(Error::InvalidRaster(format!(
                "teacher masks are {}x{} but the slide is {}x{}",
                teacher.width,
                teacher.height,
                image.width(),
                image.height()
            ))));
        }
        state.image = Some(image);
        state.teacher = Some(teacher);

        if st.dice {
            self.stage("dice", state, |run, s| {
                run.dice(s, cfg.tiling.tile_size, cfg.tiling.overlap)
            })?;
        } else {
            // a single tile spanning the slide
            let img = state.image.as_ref().expect("loaded");
            let side = img.width().max(img.height());
            self.dice_in_memory(state, side, 0)
                .map_err(|e| ("load".to_string(), e))?;
        }
        if st.filter {
            self.stage("filter", state, Self::filter)?;
        }
        if st.augment {
            self.stage("augment", state, Self::augment)?;
        }
        if st.qa {
            self.stage("qa", state, Self::qa)?;
        }
        if st.eval {
            self.stage("eval", state, Self::eval)?;
        }
        if st.w2s {
            self.stage("w2s", state, Self::w2s)?;
        }
        if st.merge {
            self.stage("merge", state, Self::merge)?;
        }
        Ok(())
    }

    fn dice_in_memory(&self, s: &mut State, size: u32, overlap: u32) -> Result<()> {
        let image = s.image.as_ref().expect("loaded");
        let teacher = s.teacher.as_ref().expect("loaded");
        let grid = tile_grid(image.width(), image.height(), size, overlap)?;
        let images = dice(image, size, overlap)?;
        let sets = split(teacher, &grid, Stage::Raw)?;
        s.tiles = images
            .into_iter()
            .zip(sets)
            .map(|((_, img), (_, set))| (img, set))
            .collect();
        s.grid = grid;
        Ok(())
    }

    fn dice(&self, s: &mut State, size: u32, overlap: u32) -> Result<Vec<PathBuf>> {
        self.dice_in_memory(s, size, overlap)?;
        let root = self.dir("tiles")?;
        let mut written = vec![layout::write_grid(&root, &s.grid)?];
        for (img, set) in &s.tiles {
            let image = self.cfg.tiling.write_rasters.then_some(img);
            written.extend(layout::write_tile(&root, image, set)?);
        }
        Ok(written)
    }

    fn filter(&self, s: &mut State) -> Result<Vec<PathBuf>> {
        let out = run_algorithm1(&s.tiles, &self.cfg.filter)?;
        let written = layout::write_filtered(&self.dir("filtered")?, &out)?;
        s.filtered = Some(out.into_iter().map(|t| t.masks).collect());
        Ok(written)
    }

    fn augment(&self, s: &mut State) -> Result<Vec<PathBuf>> {
        let filtered = s.filtered.as_ref().expect("augment runs after filter");
        let data: Vec<(ChannelStack, AnnotationSet)> = s
            .tiles
            .iter()
            .zip(filtered)
            .map(|((img, _), f)| (img.clone(), f.clone()))
            .collect();
        let out = run_algorithm2(&data, &self.cfg.augment)?;
        layout::write_augmented(&self.dir("augmented")?, &out)
    }

    /// Slide-level masks: merged filtered tiles, or merged raw tiles when the
    /// filter is off.
    fn merged<'s>(&self, s: &'s mut State) -> Result<&'s AnnotationSet> {
        if s.merged.is_none() {
            let sets: Vec<AnnotationSet> = match &s.filtered {
                Some(f) => f.clone(),
                None => s.tiles.iter().map(|(_, m)| m.clone()).collect(),
            };
            let per_tile: Vec<(TileIndex, AnnotationSet)> = s.grid.iter().cloned().zip(sets).collect();
            s.merged = Some(merge(&per_tile, self.cfg.tiling.dedup_iou)?);
        }
        Ok(s.merged.as_ref().expect("just set"))
    }

    fn gt<'s>(&self, s: &'s mut State) -> Result<&'s AnnotationSet> {
        if s.gt.is_none() {
            let path = self
                .cfg
                .paths
                .gt
                .as_ref()
                .ok_or_else(|| Error::param("paths.gt", "not set"))?;
            s.gt = Some(read_masks(path)?);
        }
        Ok(s.gt.as_ref().expect("just set"))
    }

    fn qa(&self, s: &mut State) -> Result<Vec<PathBuf>> {
        self.merged(s)?;
        let image = s.image.as_ref().expect("loaded");
        let report = qa_report(
            image,
            s.merged.as_ref().expect("merged"),
            &self.cfg.qa.markers,
            None,
            self.cfg.qa.seed,
        )?;
        let dir = self.dir("qa")?;
        let (json, purity, summary) = (dir.join("qa.json"), dir.join("purity.csv"), dir.join("qa.csv"));
        write_json(&json, &report)?;
        write_text(&purity, &report.purity.to_csv())?;
        write_text(&summary, &layout::summary_csv(&report))?;
        Ok(vec![json, purity, summary])
    }

    fn eval(&self, s: &mut State) -> Result<Vec<PathBuf>> {
        self.merged(s)?;
        self.gt(s)?;
        let gt = s.gt.as_ref().expect("gt");
        let rows = [
            ("teacher", evaluate(gt, s.teacher.as_ref().expect("loaded"))?),
            ("curated", evaluate(gt, s.merged.as_ref().expect("merged"))?),
        ];
        let dir = self.dir("eval")?;
        let report: BTreeMap<&str, &EvalReport> = rows.iter().map(|(k, v)| (*k, v)).collect();
        let mut csv = format!("{}\n", EvalReport::CSV_HEADER);
        for (k, v) in &rows {
            csv.push_str(&v.csv_row(k));
            csv.push('\n');
        }
        let (json, table) = (dir.join("eval.json"), dir.join("eval.csv"));
        write_json(&json, &report)?;
        write_text(&table, &csv)?;
        Ok(vec![json, table])
    }

    fn w2s(&self, s: &mut State) -> Result<Vec<PathBuf>> {
        self.merged(s)?;
        self.gt(s)?;
        let path = self
            .cfg
            .paths
            .student
            .as_ref()
            .ok_or_else(|| Error::param("paths.student", "not set"))?;
        let student = read_masks(path)?;
        let frame = W2sFrame {
            image: s.image.as_ref().expect("loaded"),
            gt: s.gt.as_ref().expect("gt"),
            pseudo: s.merged.as_ref().expect("merged"),
            student: &student,
        };
        let (report, records) = build_w2s_report(&[frame], self.cfg.w2s.k_nn)?;
        let dir = self.dir("w2s")?;
        let (json, feats, summary) = (dir.join("w2s.json"), dir.join("features.csv"), dir.join("w2s.csv"));
        write_json(&json, &report)?;
        write_text(&feats, &features_csv(&records))?;
        write_text(&summary, &layout::summary_csv(&report))?;
        Ok(vec![json, feats, summary])
    }

    fn merge(&self, s: &mut State) -> Result<Vec<PathBuf>> {
        let merged = self.merged(s)?;
        let p = self.out.join("merged.json");
        write_masks(&p, merged)?;
        Ok(vec![p])
    }
}

/// Sizes the global worker pool; call before any parallel work.
pub fn set_global_workers(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Degenerate(format!("thread pool: {e}")))
}

/// Runs every enabled stage and writes `manifest.json` into the output
/// directory, also when a stage fails.
pub fn run_pipeline(cfg: &PipelineConfig) -> std::result::Result<Manifest, PipelineError> {
    let fail = |stage: &str, source: Error, manifest: Manifest| PipelineError {
        stage: stage.into(),
        source,
        manifest: Box::new(manifest),
    };
    let diags = validate_config(cfg);
    if !diags.is_empty() {
        let msg = diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; ");
        return Err(fail("config", Error::Degenerate(msg), Manifest::new(cfg)));
    }
    let out = cfg.paths.output.clone();
    if let Err(e) = fs::create_dir_all(&out) {
        return Err(fail("config", Error::io(&out, e), Manifest::new(cfg)));
    }
    let mut run = Run {
        cfg,
        out: out.clone(),
        manifest: Manifest::new(cfg),
    };
    let mut state = State::default();
    let result = match rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build() {
        Ok(pool) => pool.install(|| run.execute(&mut state)),
        Err(e) => Err(("config".to_string(), Error::Degenerate(format!("thread pool: {e}")))),
    };
    if let Err((stage, e)) = &result {
        run.manifest.failure = Some(Failure {
            stage: stage.clone(),
            message: e.to_string(),
        });
    }
    let mpath = out.join(MANIFEST_FILE);
    let written = write_json(&mpath, &run.manifest);
    match (result, written) {
        (Ok(()), Ok(())) => Ok(run.manifest),
        (Err((stage, e)), _) => Err(fail(&stage, e, run.manifest)),
        (Ok(()), Err(e)) => Err(fail("manifest", e, run.manifest)),
    }
}
