use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::Args;

use wsqa_core::augment::{run_algorithm2, AugmentParams};
use wsqa_core::filter::{run_algorithm1, FilterParams};
use wsqa_core::io::{read_masks, read_raster, write_json, write_masks, write_text, write_tiff_stack};
use wsqa_core::model_math::{run_selftest, GRADCHECK_TOLERANCE};
use wsqa_core::pipeline::layout::{self, read_grid, read_tile_masks, read_tiles};
use wsqa_core::pipeline::{run_pipeline, validate_config, Manifest, PipelineConfig, Stages};
use wsqa_core::qa::{
    coverage_counts, evaluate, foreground_mask, purity, EvalReport, PurityResult, QaReport, DEFAULT_SPARSITY,
};
use wsqa_core::raster::{AnnotationSet, ChannelStack, Stage};
use wsqa_core::synth::{botch_some, synth_slide, SynthParams};
use wsqa_core::tiler::{
    dice, merge as merge_tiles, split, tile_grid, DEFAULT_DEDUP_IOU, DEFAULT_OVERLAP, DEFAULT_TILE_SIZE,
};
use wsqa_core::w2s::{build_w2s_report, features_csv, W2sFrame, DEFAULT_KNN};
use wsqa_core::Error;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_STAGE: u8 = 3;

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

type CmdResult = Result<(), Failure>;

trait Classify<T> {
    /// Bad arguments or configuration: exit 2.
    fn config(self) -> Result<T, Failure>;
    /// Anything going wrong while processing: exit 3, or 2 for bad parameters
    /// and unknown channels.
    fn stage(self, what: &str) -> Result<T, Failure>;
}

impl<T> Classify<T> for Result<T, Error> {
    fn config(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code: EXIT_CONFIG,
            error: e.into(),
        })
    }

    fn stage(self, what: &str) -> Result<T, Failure> {
        self.map_err(|e| {
            let code = match e {
                Error::InvalidParameter { .. } | Error::MissingChannel(_) => EXIT_CONFIG,
                _ => EXIT_STAGE,
            };
            Failure {
                code,
                error: anyhow::Error::new(e).context(what.to_string()),
            }
        })
    }
}

fn config_err(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        error: anyhow!(msg.into()),
    }
}

fn with_ext(p: &Path, ext: &str) -> PathBuf {
    p.with_extension(ext)
}

#[derive(Args)]
pub struct TileArgs {
    /// Slide raster: multi-page TIFF or channel directory.
    #[arg(long)]
    images: PathBuf,
    /// Slide-level mask JSON.
    #[arg(long)]
    masks: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TILE_SIZE)]
    tile_size: u32,
    #[arg(long, default_value_t = DEFAULT_OVERLAP)]
    overlap: u32,
    /// Write only the tile masks and grid.
    #[arg(long)]
    no_rasters: bool,
    #[arg(long)]
    out: PathBuf,
}

pub fn tile(a: TileArgs) -> CmdResult {
    let image = read_raster(&a.images).config()?;
    let masks = read_masks(&a.masks).config()?;
    let grid = tile_grid(image.width(), image.height(), a.tile_size, a.overlap).stage("tiling")?;
    let tiles = dice(&image, a.tile_size, a.overlap).stage("dicing")?;
    let sets = split(&masks, &grid, masks.stage).stage("splitting masks")?;
    fs::create_dir_all(&a.out).map_err(|e| Failure {
        code: EXIT_STAGE,
        error: e.into(),
    })?;
    layout::write_grid(&a.out, &grid).stage("writing grid")?;
    for ((_, img), (_, set)) in tiles.iter().zip(&sets) {
        layout::write_tile(&a.out, (!a.no_rasters).then_some(img), set).stage("writing tiles")?;
    }
    println!("{} tiles written to {}", grid.len(), a.out.display());
    Ok(())
}

#[derive(Args)]
pub struct FilterArgs {
    /// Directory of tile mask files.
    #[arg(long)]
    masks: PathBuf,
    /// Directory of tile rasters.
    #[arg(long)]
    images: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    beta1: f64,
    #[arg(long, default_value_t = 0.7)]
    beta2: f64,
    #[arg(long, default_value_t = 0.5)]
    beta3: f64,
    #[arg(long)]
    recover_branches: bool,
    #[arg(long, default_value_t = FilterParams::default().solidity_threshold)]
    solidity: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

pub fn filter(a: FilterArgs) -> CmdResult {
    let params = FilterParams {
        beta1: a.beta1,
        beta2: a.beta2,
        beta3: a.beta3,
        recover_branches: a.recover_branches,
        solidity_threshold: a.solidity,
        seed: a.seed,
    };
    params.validate().config()?;
    let tiles = read_tiles(&a.masks, &a.images).config()?;
    let out = run_algorithm1(&tiles, &params).stage("filter")?;
    layout::write_filtered(&a.out, &out).stage("writing filtered masks")?;
    let removed: usize = out.iter().map(|t| t.removals.len()).sum();
    println!("{} tiles filtered, {removed} masks removed", out.len());
    Ok(())
}

#[derive(Args)]
pub struct AugmentArgs {
    /// Directory of filtered tile mask files.
    #[arg(long)]
    masks: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long, default_value_t = AugmentParams::default().seed)]
    seed: u64,
    /// Paste attempts per copied nucleus.
    #[arg(long, default_value_t = AugmentParams::default().t)]
    t: usize,
    #[arg(long, default_value_t = AugmentParams::default().max_overlap_ratio)]
    max_overlap: f64,
    #[arg(long)]
    out: PathBuf,
}

pub fn augment(a: AugmentArgs) -> CmdResult {
    let params = AugmentParams {
        seed: a.seed,
        t: a.t,
        max_overlap_ratio: a.max_overlap,
        ..AugmentParams::default()
    };
    params.validate().config()?;
    let tiles = read_tiles(&a.masks, &a.images).config()?;
    let out = run_algorithm2(&tiles, &params).stage("augment")?;
    layout::write_augmented(&a.out, &out).stage("writing augmented tiles")?;
    let pasted: usize = out.iter().map(|t| t.placements.len()).sum();
    println!("{} tiles augmented, {pasted} nuclei pasted", out.len());
    Ok(())
}

#[derive(Args)]
pub struct QaArgs {
    /// A mask JSON file, or a directory of tile mask files.
    #[arg(long)]
    masks: PathBuf,
    /// The matching raster, or a directory of tile rasters.
    #[arg(long)]
    images: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "NeuN,Iba1,Olig2,S100b,GFP")]
    markers: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report JSON; per-object purity goes next to it as CSV.
    #[arg(long)]
    out: PathBuf,
}

pub fn qa(a: QaArgs) -> CmdResult {
    let frames: Vec<(ChannelStack, AnnotationSet)> = if a.masks.is_dir() {
        read_tiles(&a.masks, &a.images).config()?
    } else {
        vec![(read_raster(&a.images).config()?, read_masks(&a.masks).config()?)]
    };
    let report = if let [(img, set)] = frames.as_slice() {
        wsqa_core::qa::qa_report(img, set, &a.markers, None, a.seed).stage("qa")?
    } else {
        // tiles are scored independently and pooled
        let mut counts = None;
        let mut parts = Vec::new();
        let mut cells = 0;
        for (img, set) in &frames {
            let fg = foreground_mask(img, a.seed).stage(&format!("foreground of {}", set.tile_id))?;
            let c = coverage_counts(set, &fg);
            counts = Some(counts.map_or(c, |acc| acc + c));
            parts.push(purity(set, img, &a.markers, DEFAULT_SPARSITY, a.seed).stage("purity")?);
            cells += set.len();
        }
        QaReport {
            coverage_gamma: counts.expect("at least one tile").gamma().stage("coverage")?,
            purity: PurityResult::combine(parts),
            cell_count: cells,
            aji_plus: None,
            pq: None,
            seed: a.seed,
        }
    };
    write_json(&a.out, &report).stage("writing report")?;
    write_text(&with_ext(&a.out, "purity.csv"), &report.purity.to_csv()).stage("writing purity table")?;
    write_text(&with_ext(&a.out, "csv"), &layout::summary_csv(&report)).stage("writing summary")?;
    println!(
        "coverage {:.4}, purity {}, {} cells",
        report.coverage_gamma,
        report.purity.global_pi.map_or("n/a".into(), |p| format!("{p:.4}")),
        report.cell_count
    );
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let gt = read_masks(&a.gt).config()?;
    let pred = read_masks(&a.pred).config()?;
    let report = evaluate(&gt, &pred).stage("eval")?;
    write_json(&a.out, &report).stage("writing report")?;
    let csv = format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row("pred"));
    write_text(&with_ext(&a.out, "csv"), &csv).stage("writing table")?;
    println!("AJI+ {:.4}, PQ {:.4}", report.aji_plus, report.pq.pq);
    Ok(())
}

#[derive(Args)]
pub struct W2sArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    pseudo: PathBuf,
    #[arg(long)]
    student: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long, default_value_t = DEFAULT_KNN)]
    k_nn: usize,
    #[arg(long)]
    out: PathBuf,
    /// Per-nucleus features and labels [default: <out>.features.csv].
    #[arg(long)]
    features: Option<PathBuf>,
}

pub fn w2s(a: W2sArgs) -> CmdResult {
    let image = read_raster(&a.images).config()?;
    let gt = read_masks(&a.gt).config()?;
    let pseudo = read_masks(&a.pseudo).config()?;
    let student = read_masks(&a.student).config()?;
    let frame = W2sFrame {
        image: &image,
        gt: &gt,
        pseudo: &pseudo,
        student: &student,
    };
    let (report, records) = build_w2s_report(&[frame], a.k_nn).stage("w2s")?;
    write_json(&a.out, &report).stage("writing report")?;
    write_text(&with_ext(&a.out, "csv"), &layout::summary_csv(&report)).stage("writing summary")?;
    let features = a.features.unwrap_or_else(|| with_ext(&a.out, "features.csv"));
    write_text(&features, &features_csv(&records)).stage("writing features")?;
    println!(
        "alpha {:.3}, err(f,pseudo) {:.3}, err(f,gt) {:.3}, bound {:.3}",
        report.alpha, report.err_student_vs_pseudo, report.err_student_vs_gt, report.bound
    );
    Ok(())
}

#[derive(Args)]
pub struct MergeArgs {
    /// Directory of tile mask files.
    #[arg(long)]
    masks: PathBuf,
    /// Tile layout written by `tile` (grid.json).
    #[arg(long)]
    grid: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DEDUP_IOU)]
    dedup_iou: f64,
    #[arg(long)]
    out: PathBuf,
}

pub fn merge(a: MergeArgs) -> CmdResult {
    let grid = read_grid(&a.grid).config()?;
    let sets = read_tile_masks(&a.masks).config()?;
    let mut per_tile = Vec::with_capacity(sets.len());
    for set in sets {
        let t = grid
            .iter()
            .find(|t| t.tile_id == set.tile_id)
            .ok_or_else(|| config_err(format!("{} is not in the grid", set.tile_id)))?;
        per_tile.push((t.clone(), set));
    }
    let merged = merge_tiles(&per_tile, a.dedup_iou).stage("merge")?;
    write_masks(&a.out, &merged).stage("writing merged masks")?;
    println!("{} instances merged from {} tiles", merged.len(), per_tile.len());
    Ok(())
}

#[derive(Args)]
pub struct RunArgs {
    /// TOML configuration.
    #[arg(long, required_unless_present = "from_manifest")]
    config: Option<PathBuf>,
    /// Reuse the configuration recorded in a previous run's manifest.
    #[arg(long, conflicts_with = "config")]
    from_manifest: Option<PathBuf>,
    /// Override a config value, e.g. `--set filter.beta1=0.9`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run only these stages.
    #[arg(long, value_delimiter = ',')]
    stages: Vec<String>,
    /// Print diagnostics and exit without running.
    #[arg(long)]
    check: bool,
}

pub fn run(a: RunArgs, workers: usize) -> CmdResult {
    let mut cfg = match (&a.config, &a.from_manifest) {
        (Some(path), _) => PipelineConfig::load(path, &a.overrides).config()?,
        (None, Some(m)) => {
            let manifest = Manifest::read(m).config()?;
            let text = manifest.config.to_toml();
            PipelineConfig::from_toml(&text, &a.overrides, Path::new("")).config()?
        }
        (None, None) => return Err(config_err("either --config or --from-manifest is required")),
    };
    if !a.stages.is_empty() {
        let names: Vec<&str> = a.stages.iter().map(String::as_str).collect();
        cfg.stages = Stages::only(&names).config()?;
    }
    if workers > 0 {
        cfg.workers = workers;
    }
    let diags = validate_config(&cfg);
    if !diags.is_empty() {
        for d in &diags {
            eprintln!("config: {d}");
        }
        return Err(config_err(format!("{} configuration problem(s)", diags.len())));
    }
    if a.check {
        println!("configuration ok");
        return Ok(());
    }
    match run_pipeline(&cfg) {
        Ok(m) => {
            for s in &m.stages {
                println!("{:<8} {:>10.1} ms", s.name, s.duration_ms);
            }
            println!(
                "manifest: {}",
                cfg.paths.output.join(wsqa_core::pipeline::MANIFEST_FILE).display()
            );
            Ok(())
        }
        Err(e) => Err(Failure {
            code: if e.stage == "config" { EXIT_CONFIG } else { EXIT_STAGE },
            error: anyhow::Error::new(e),
        }),
    }
}

#[derive(Args)]
pub struct LossesArgs {
    /// Run the gradient-check suite.
    #[arg(long)]
    selftest: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

pub fn losses(a: LossesArgs) -> CmdResult {
    if !a.selftest {
        return Err(config_err("nothing to do; pass --selftest"));
    }
    let checks = run_selftest(a.seed).stage("gradient checks")?;
    println!("{:<40} {:>6} {:>12}  result", "kernel", "params", "max rel err");
    let mut csv = String::from("kernel,parameters,max_rel_err,pass\n");
    for c in &checks {
        println!(
            "{:<40} {:>6} {:>12.3e}  {}",
            c.name,
            c.parameters,
            c.max_rel_err,
            if c.pass { "PASS" } else { "FAIL" }
        );
        csv.push_str(&format!("{},{},{},{}\n", c.name, c.parameters, c.max_rel_err, c.pass));
    }
    if let Some(p) = &a.csv {
        write_text(p, &csv).stage("writing table")?;
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    if failed > 0 {
        return Err(Failure {
            code: EXIT_STAGE,
            error: anyhow!("{failed} gradient check(s) above {GRADCHECK_TOLERANCE:e}"),
        });
    }
    println!("all {} checks below {GRADCHECK_TOLERANCE:e}", checks.len());
    Ok(())
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1024)]
    width: u32,
    #[arg(long, default_value_t = 1024)]
    height: u32,
    #[arg(long, default_value_t = 240)]
    nuclei: usize,
    #[arg(long, default_value_t = 12)]
    unions: usize,
    #[arg(long, default_value_t = 12)]
    duplicates: usize,
    #[arg(long, default_value_t = 12)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    overlapping_pairs: usize,
    /// Share of true nuclei the teacher segments badly.
    #[arg(long, default_value_t = 0.15)]
    teacher_error: f64,
    /// Share of nuclei the student segments badly.
    #[arg(long, default_value_t = 0.05)]
    student_error: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

pub fn synth(a: SynthArgs) -> CmdResult {
    let p = SynthParams {
        width: a.width,
        height: a.height,
        nuclei: a.nuclei,
        unions: a.unions,
        duplicates: a.duplicates,
        dim: a.dim,
        overlapping_pairs: a.overlapping_pairs,
        seed: a.seed,
        ..SynthParams::default()
    };
    let slide = synth_slide(&p).config()?;
    let student = botch_some(&slide.gt, a.student_error, a.seed ^ 0x5717).config()?;
    // planted errors stay intact; only the true nuclei are degraded
    let mut teacher = botch_some(&slide.gt, a.teacher_error, a.seed ^ 0x7eac)
        .config()?
        .into_instances();
    teacher.extend(
        slide
            .teacher
            .instances()
            .iter()
            .filter(|m| slide.gt.get(m.id()).is_none())
            .cloned(),
    );
    let teacher = slide.teacher.with_instances(Stage::Raw, teacher).config()?;
    fs::create_dir_all(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))
        .map_err(|e| Failure {
            code: EXIT_STAGE,
            error: e,
        })?;
    let o = &a.out;
    write_tiff_stack(&o.join("slide.tif"), &slide.image).stage("writing slide")?;
    write_masks(&o.join("teacher.json"), &teacher).stage("writing masks")?;
    write_masks(&o.join("gt.json"), &slide.gt).stage("writing masks")?;
    write_masks(&o.join("student.json"), &student).stage("writing masks")?;
    write_json(&o.join("planted.json"), &slide.planted).stage("writing planted ids")?;
    write_json(&o.join("synth.json"), &p).stage("writing parameters")?;
    let cfg = PipelineConfig {
        paths: wsqa_core::pipeline::Paths {
            images: "slide.tif".into(),
            teacher_masks: "teacher.json".into(),
            gt: Some("gt.json".into()),
            student: Some("student.json".into()),
            output: "run".into(),
        },
        ..PipelineConfig::default()
    };
    write_text(&o.join("config.toml"), &cfg.to_toml()).stage("writing config")?;
    println!(
        "{}x{} slide, {} nuclei, {} planted errors written to {}",
        a.width,
        a.height,
        slide.gt.len(),
        slide.planted.all().len(),
        o.display()
    );
    Ok(())
}
