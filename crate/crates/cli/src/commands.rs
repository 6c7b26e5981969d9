use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use dcd_core::data::{generate_synthetic, load_features, synthetic_projections};
use dcd_core::eval::{evaluate_retrieval, separability_trace, LatentOracle};
use dcd_core::experiment::{
    ablate as run_ablation, ablation_table, seed_list, sweep_mm as run_sweep, sweep_table,
    PAPER_MM_GRID,
};
use dcd_core::gradcheck::{run_gradchecks, GradCheckOptions};
use dcd_core::kv::KvDoc;
use dcd_core::model::load_checkpoint;
use dcd_core::train::{
    train_student, train_teacher as run_teacher, FrozenTeacher, RunOptions, TrainedModel,
};
use dcd_core::{DatasetManifest, Error, Result, ScorerParams, TrainConfig};

use crate::spec::ExperimentSpec;
use crate::{Common, ManifestFlags, TrainFlags, EXIT_GRADCHECK};

pub const SUMMARY_FILE: &str = "summary.json";

fn out_dir(root: &Path, common: &Common, command: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| root.join(command))
}

fn path_value(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// A run directory stands for its best checkpoint.
fn checkpoint_dir(path: &Path) -> PathBuf {
    let best = path.join("best");
    if best.join("manifest.txt").exists() {
        best
    } else {
        path.to_path_buf()
    }
}

fn load_scorer(path: &Path) -> Result<ScorerParams> {
    load_checkpoint(&checkpoint_dir(path))
}

pub fn gen_data(root: &Path, common: Common, flags: ManifestFlags) -> Result<u8> {
    let out = out_dir(root, &common, "gen-data");
    // Defaults, then the config file, then flags.
    let mut doc = DatasetManifest::default().to_kv();
    if let Some(path) = &common.config {
        for (k, v) in KvDoc::read(path)?.entries() {
            match k {
                "format" | "n_images" | "command" => {}
                _ if doc.get(k).is_some() => doc.set(k, v),
                _ => return Err(Error::Config(format!("unknown manifest setting {k:?}"))),
            }
        }
    }
    let overrides: [(&str, Option<String>); 9] = [
        (
            "captions_per_image",
            flags.captions_per_image.map(|v| v.to_string()),
        ),
        ("image_dim", flags.image_dim.map(|v| v.to_string())),
        ("text_dim", flags.text_dim.map(|v| v.to_string())),
        ("latent_dim", flags.latent_dim.map(|v| v.to_string())),
        ("noise_sigma", flags.noise_sigma.map(|v| v.to_string())),
        ("train_images", flags.train_images.map(|v| v.to_string())),
        ("val_images", flags.val_images.map(|v| v.to_string())),
        ("test_images", flags.test_images.map(|v| v.to_string())),
        ("seed", flags.seed.map(|v| v.to_string())),
    ];
    for (k, v) in overrides {
        if let Some(v) = v {
            doc.set(k, v);
        }
    }
    doc.set("n_images", {
        let n = |k| {
            doc.get(k)
                .and_then(|v: &str| v.parse::<usize>().ok())
                .unwrap_or(0)
        };
        n("train_images") + n("val_images") + n("test_images")
    });
    let manifest = DatasetManifest::from_kv(&doc, Path::new("<flags>")).map_err(|e| match e {
        Error::Format { message, .. } => Error::Config(message),
        e => e,
    })?;
    // The manifest written with the dataset is its snapshot.
    let dataset = generate_synthetic(&manifest, &out)?;
    let oracle = LatentOracle::new(&synthetic_projections(&manifest))?;
    let check = evaluate_retrieval(&oracle, &dataset.val)?;
    println!("dataset written to {}", out.display());
    println!(
        "train {} / val {} / test {} images, {} captions each",
        manifest.train_images,
        manifest.val_images,
        manifest.test_images,
        manifest.captions_per_image
    );
    println!(
        "latent oracle on val: text R@1 {:.2}, image R@1 {:.2}",
        check.text_r1, check.image_r1
    );
    Ok(0)
}

fn run_summary(
    model: &TrainedModel,
    test: Option<dcd_core::RetrievalMetrics>,
) -> serde_json::Value {
    let r = &model.record;
    json!({
        "epochs": r.epochs.len(),
        "best_epoch": r.best_epoch,
        "best_val": r.best_val,
        "test": test,
        "wall_seconds": r.wall_seconds,
        "checkpoint": r.checkpoint,
    })
}

fn report_run(out: &Path, model: &TrainedModel, dataset: &dcd_core::Dataset) -> Result<()> {
    let test = evaluate_retrieval(&model.best, &dataset.test)?;
    write_json(&out.join(SUMMARY_FILE), &run_summary(model, Some(test)))?;
    let r = &model.record;
    if let (Some(e), Some(v)) = (r.best_epoch, r.best_val) {
        println!("best epoch {e}: val mean R@1 {:.2}", v.mean_r1());
    }
    println!(
        "test: text R@1/5/10 {:.2}/{:.2}/{:.2}, image R@1/5/10 {:.2}/{:.2}/{:.2}",
        test.text_r1, test.text_r5, test.text_r10, test.image_r1, test.image_r5, test.image_r10
    );
    println!("{:.1}s, outputs in {}", r.wall_seconds, out.display());
    Ok(())
}

fn flag_value(set: bool) -> Option<String> {
    set.then(|| "true".to_string())
}

fn train_overrides(
    data: Option<PathBuf>,
    teacher: Option<PathBuf>,
    keep_epochs: bool,
    train: &TrainFlags,
) -> Vec<(&'static str, Option<String>)> {
    let mut v = vec![
        ("data", path_value(data)),
        ("teacher", path_value(teacher)),
        ("keep_epochs", flag_value(keep_epochs)),
    ];
    v.extend(train.pairs());
    v
}

pub fn train_teacher(
    root: &Path,
    common: Common,
    data: Option<PathBuf>,
    resume: bool,
    keep_epochs: bool,
    train: TrainFlags,
) -> Result<u8> {
    let out = out_dir(root, &common, "train-teacher");
    let overrides = train_overrides(data, None, keep_epochs, &train);
    let mut spec = ExperimentSpec::resolve(
        "train-teacher",
        common.config.as_deref(),
        &overrides,
        out.clone(),
    )?;
    let config = spec.train_config("teacher")?;
    let data = spec.path("data")?;
    let opts = RunOptions {
        out_dir: Some(out.clone()),
        resume,
        keep_epoch_checkpoints: spec.parse_or("keep_epochs", false)?,
    };
    spec.snapshot(Some(&config))?;
    let dataset = load_features(&data)?;
    let model = run_teacher(&dataset, &config, &opts)?;
    report_run(&out, &model, &dataset)?;
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
pub fn distill(
    root: &Path,
    common: Common,
    data: Option<PathBuf>,
    teacher: Option<PathBuf>,
    resume: bool,
    keep_epochs: bool,
    train: TrainFlags,
) -> Result<u8> {
    let out = out_dir(root, &common, "distill");
    let overrides = train_overrides(data, teacher, keep_epochs, &train);
    let mut spec =
        ExperimentSpec::resolve("distill", common.config.as_deref(), &overrides, out.clone())?;
    let config = spec.train_config("student")?;
    let data = spec.path("data")?;
    let teacher = spec.path("teacher")?;
    let opts = RunOptions {
        out_dir: Some(out.clone()),
        resume,
        keep_epoch_checkpoints: spec.parse_or("keep_epochs", false)?,
    };
    spec.snapshot(Some(&config))?;
    let dataset = load_features(&data)?;
    let teacher = FrozenTeacher::new(load_scorer(&teacher)?);
    let model = train_student(&dataset, &teacher, &config, &opts)?;
    report_run(&out, &model, &dataset)?;
    Ok(0)
}

pub fn evaluate(
    root: &Path,
    common: Common,
    data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    split: Option<String>,
) -> Result<u8> {
    let out = out_dir(root, &common, "evaluate");
    let overrides = [
        ("data", path_value(data)),
        ("checkpoint", path_value(checkpoint)),
        ("split", split),
    ];
    let mut spec = ExperimentSpec::resolve(
        "evaluate",
        common.config.as_deref(),
        &overrides,
        out.clone(),
    )?;
    let data = spec.path("data")?;
    let checkpoint = spec.path("checkpoint")?;
    let split = spec.get("split").unwrap_or("test").to_string();
    spec.doc.set("split", &split);
    spec.snapshot(None)?;
    let dataset = load_features(&data)?;
    let scorer = load_scorer(&checkpoint)?;
    let metrics = evaluate_retrieval(&scorer, dataset.split(&split)?)?;
    write_json(&out.join(SUMMARY_FILE), &metrics)?;
    print!("{}", metrics.to_kv());
    Ok(0)
}

/// Expands run directories into their per-epoch checkpoints.
fn trace_checkpoints(list: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let epochs = Path::new(item).join("epochs");
        if epochs.is_dir() {
            let mut dirs: Vec<PathBuf> = std::fs::read_dir(&epochs)
                .map_err(|e| Error::Io {
                    path: epochs.clone(),
                    source: e,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            dirs.sort();
            out.extend(dirs);
        } else {
            out.push(checkpoint_dir(Path::new(item)));
        }
    }
    Ok(out)
}

pub fn trace(
    root: &Path,
    common: Common,
    data: Option<PathBuf>,
    checkpoint: Option<String>,
    split: Option<String>,
) -> Result<u8> {
    let out = out_dir(root, &common, "trace");
    let overrides = [
        ("data", path_value(data)),
        ("checkpoint", checkpoint),
        ("split", split),
    ];
    let mut spec =
        ExperimentSpec::resolve("trace", common.config.as_deref(), &overrides, out.clone())?;
    let data = spec.path("data")?;
    let checkpoints = trace_checkpoints(spec.require("checkpoint")?)?;
    let split = spec.get("split").unwrap_or("test").to_string();
    spec.doc.set("split", &split);
    spec.snapshot(None)?;
    let dataset = load_features(&data)?;
    let trace = separability_trace(&checkpoints, dataset.split(&split)?)?;
    let tsv = trace.to_tsv();
    write_text(&out.join("trace.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(0)
}

fn parse_grid(raw: &str) -> Result<Vec<(usize, usize)>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|cell| {
            let (m, mp) = cell
                .split_once(['x', ':'])
                .ok_or_else(|| Error::Config(format!("grid cell {cell:?} is not MxM'")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad grid cell {cell:?}")))
            };
            Ok((parse(m)?, parse(mp)?))
        })
        .collect()
}

fn format_grid(grid: &[(usize, usize)]) -> String {
    grid.iter()
        .map(|(m, mp)| format!("{m}x{mp}"))
        .collect::<Vec<_>>()
        .join(",")
}

struct GridSetup {
    spec: ExperimentSpec,
    config: TrainConfig,
    seeds: Vec<u64>,
    jobs: usize,
}

fn grid_setup(
    command: &str,
    common: &Common,
    out: PathBuf,
    mut overrides: Vec<(&'static str, Option<String>)>,
    seeds: Option<usize>,
    jobs: Option<usize>,
    default_seeds: usize,
) -> Result<GridSetup> {
    overrides.push(("seeds", seeds.map(|s| s.to_string())));
    overrides.push(("jobs", jobs.map(|j| j.to_string())));
    let mut spec = ExperimentSpec::resolve(command, common.config.as_deref(), &overrides, out)?;
    let config = spec.train_config("student")?;
    let count: usize = spec.parse_or("seeds", default_seeds)?;
    let jobs: usize = spec.parse_or("jobs", 1)?;
    if count == 0 || jobs == 0 {
        return Err(Error::Config("seeds and jobs must be positive".into()));
    }
    spec.doc.set("seeds", count);
    spec.doc.set("jobs", jobs);
    Ok(GridSetup {
        seeds: seed_list(config.seed, count),
        spec,
        config,
        jobs,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn sweep_mm(
    root: &Path,
    common: Common,
    data: Option<PathBuf>,
    teacher: Option<PathBuf>,
    grid: Option<String>,
    seeds: Option<usize>,
    jobs: Option<usize>,
    train: TrainFlags,
) -> Result<u8> {
    let out = out_dir(root, &common, "sweep-mm");
    let mut overrides = train_overrides(data, teacher, false, &train);
    overrides.push(("grid", grid));
    let mut g = grid_setup("sweep-mm", &common, out.clone(), overrides, seeds, jobs, 1)?;
    let grid = match g.spec.get("grid") {
        Some(raw) => parse_grid(raw)?,
        None => PAPER_MM_GRID.to_vec(),
    };
    if grid.is_empty() {
        return Err(Error::Config("empty (M, M') grid".into()));
    }
    g.spec.doc.set("grid", format_grid(&grid));
    let data = g.spec.path("data")?;
    let teacher = g.spec.path("teacher")?;
    g.spec.snapshot(Some(&g.config))?;
    let dataset = load_features(&data)?;
    let teacher = FrozenTeacher::new(load_scorer(&teacher)?);
    let rows = run_sweep(
        &dataset,
        &teacher,
        &g.config,
        &grid,
        &g.seeds,
        g.jobs,
        Some(&out),
    )?;
    let table = sweep_table(&rows);
    write_text(&out.join("sweep.tsv"), &table)?;
    write_json(&out.join(SUMMARY_FILE), &rows)?;
    print!("{table}");
    report_failures(rows.iter().flat_map(|r| &r.cells));
    Ok(0)
}

pub fn ablate(
    root: &Path,
    common: Common,
    data: Option<PathBuf>,
    teacher: Option<PathBuf>,
    seeds: Option<usize>,
    jobs: Option<usize>,
    train: TrainFlags,
) -> Result<u8> {
    let out = out_dir(root, &common, "ablate");
    let overrides = train_overrides(data, teacher, false, &train);
    let g = grid_setup("ablate", &common, out.clone(), overrides, seeds, jobs, 5)?;
    let (mut spec, config) = (g.spec, g.config);
    let data = spec.path("data")?;
    let teacher = spec.path("teacher")?;
    spec.snapshot(Some(&config))?;
    let dataset = load_features(&data)?;
    let teacher = FrozenTeacher::new(load_scorer(&teacher)?);
    let rows = run_ablation(&dataset, &teacher, &config, &g.seeds, g.jobs, Some(&out))?;
    let table = ablation_table(&rows);
    write_text(&out.join("ablation.tsv"), &table)?;
    write_json(&out.join(SUMMARY_FILE), &rows)?;
    print!("{table}");
    report_failures(rows.iter().flat_map(|r| &r.cells));
    Ok(0)
}

fn report_failures<'a>(cells: impl Iterator<Item = &'a dcd_core::experiment::CellOutcome>) {
    for c in cells {
        if let Some(e) = &c.error {
            eprintln!("cell {} seed {} failed: {e}", c.label, c.seed);
        }
    }
}

pub fn gradcheck(
    root: &Path,
    common: Common,
    instances: Option<usize>,
    seed: Option<u64>,
    tolerance: Option<f64>,
    corrupt: Option<String>,
) -> Result<u8> {
    let out = out_dir(root, &common, "gradcheck");
    let overrides = [
        ("instances", instances.map(|v| v.to_string())),
        ("seed", seed.map(|v| v.to_string())),
        ("tolerance", tolerance.map(|v| v.to_string())),
    ];
    let mut spec = ExperimentSpec::resolve(
        "gradcheck",
        common.config.as_deref(),
        &overrides,
        out.clone(),
    )?;
    let defaults = GradCheckOptions::default();
    let opts = GradCheckOptions {
        instances: spec.parse_or("instances", defaults.instances)?,
        seed: spec.parse_or("seed", defaults.seed)?,
        tolerance: spec.parse_or("tolerance", defaults.tolerance)?,
        corrupt,
    };
    spec.doc.set("instances", opts.instances);
    spec.doc.set("seed", opts.seed);
    spec.doc.set("tolerance", opts.tolerance);
    spec.snapshot(None)?;
    let report = run_gradchecks(&opts)?;
    let text = report.to_text();
    write_text(&out.join("report.txt"), &text)?;
    write_json(&out.join(SUMMARY_FILE), &report)?;
    print!("{text}");
    if report.passed() {
        Ok(0)
    } else {
        eprintln!("gradient check failed: {}", report.failures().join(", "));
        Ok(EXIT_GRADCHECK)
    }
}
