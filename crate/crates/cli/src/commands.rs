//! The five subcommands. Each takes a validated [`RunConfig`] and writes
//! human-readable output to `out`.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use reweight_core::aggregator::{self, EstimateReport, CONFIDENCE_THRESHOLD};
use reweight_core::colorlib::{self, Illuminant};
use reweight_core::datagen::{self, LabeledImage, Patch};
use reweight_core::network::{self, Mode, NetworkWeights};
use reweight_core::trainer;
use serde::Serialize;

use crate::config::{EvalPatches, RunConfig};
use crate::error::{CliError, Result};
use crate::manifest::{self, ManifestRecord};
use crate::report::{self, EvalRow, MetricsRow, ReportJson, ScatterRow, SummaryRow};
use crate::{imageio, weights};

/// Shades-of-Gray norm order used for the baseline row.
pub const SHADES_OF_GRAY_P: f64 = 6.0;

/// Refuses to touch any existing path unless `force` is set.
pub fn check_writable(paths: &[PathBuf], force: bool) -> Result<()> {
    match paths.iter().find(|p| p.exists()) {
        Some(p) if !force => Err(CliError::WouldOverwrite(p.clone())),
        _ => Ok(()),
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let fail = |e: csv::Error| CliError::Output(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(fail)?;
    for r in rows {
        w.serialize(r).map_err(fail)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn console(e: std::io::Error) -> CliError {
    CliError::io("<stdout>", e)
}

fn require_out(cfg: &RunConfig) -> Result<&Path> {
    cfg.out
        .as_deref()
        .ok_or_else(|| CliError::Config("an output directory is required (--out)".into()))
}

fn require_weights(path: Option<&Path>) -> Result<&Path> {
    path.ok_or_else(|| CliError::Config("a weight file is required (--weights)".into()))
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Config(format!("workers: {e}")))
}

/// Writes `gen_count` synthetic scenes as 16-bit PPM plus `manifest.csv`.
pub fn gen(cfg: &RunConfig, force: bool, out: &mut dyn Write) -> Result<()> {
    let dir = require_out(cfg)?;
    let images = dir.join("images");
    let manifest_path = dir.join("manifest.csv");
    check_writable(&[manifest_path.clone(), images.clone()], force)?;
    let data = datagen::generate_dataset(&cfg.dataset_config(cfg.gen_width, cfg.gen_height), cfg.seed, cfg.gen_count)?;
    create_dir(&images)?;
    let mut records = Vec::with_capacity(data.len());
    for (i, img) in data.iter().enumerate() {
        let name = format!("images/{i:05}.ppm");
        imageio::write_ppm16(&dir.join(&name), &img.pixels)?;
        records.push(ManifestRecord::new(name, &img.illuminant));
    }
    manifest::write_manifest(&manifest_path, &records)?;
    writeln!(out, "wrote {} images to {}", data.len(), dir.display()).map_err(console)
}

/// Training and validation sets: from manifests when configured, otherwise
/// one synthetic draw split into its first `training_count` and last
/// `validation_count` images.
pub fn training_data(cfg: &RunConfig) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    let ccm = cfg.ccm()?;
    match &cfg.manifest {
        Some(m) => {
            let train = manifest::load_dataset(m, ccm.as_ref())?;
            let val = match &cfg.validation_manifest {
                Some(v) => manifest::load_dataset(v, ccm.as_ref())?,
                None => Vec::new(),
            };
            Ok((train, val))
        }
        None => {
            let mut all = datagen::generate_dataset(
                &cfg.dataset_config(cfg.gen_width, cfg.gen_height),
                cfg.seed,
                cfg.training_count + cfg.validation_count,
            )?;
            let val = all.split_off(cfg.training_count);
            Ok((all, val))
        }
    }
}

/// Naive phase, then the confidence phase when `confidence` is on. Writes
/// the weights (to `weights_path` or `<out>/weights.rwcc`) and
/// `<out>/metrics.csv`.
pub fn train(cfg: &RunConfig, weights_path: Option<&Path>, force: bool, out: &mut dyn Write) -> Result<()> {
    let dir = require_out(cfg)?;
    let wpath = weights_path.map_or_else(|| dir.join("weights.rwcc"), Path::to_path_buf);
    let mpath = dir.join("metrics.csv");
    check_writable(&[wpath.clone(), mpath.clone()], force)?;
    let (train, val) = training_data(cfg)?;
    let mut spec = cfg.spec()?;
    spec.with_confidence_branch = false;
    let tc = cfg.train_config();
    let naive = trainer::train_naive(&spec, &train, &val, &tc)?;
    let mut metrics = naive.metrics;
    let mut weights = naive.weights;
    if cfg.confidence {
        let start = trainer::attach_confidence_branch(&weights, cfg.seed)?;
        let conf = trainer::train_confidence(start, &train, &val, &tc)?;
        metrics.extend(conf.metrics);
        weights = conf.weights;
    }
    create_dir(dir)?;
    if let Some(parent) = wpath.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    weights::save_weights(&weights, &wpath)?;
    let rows: Vec<MetricsRow> = metrics.iter().map(MetricsRow::from).collect();
    write_csv(&mpath, &rows)?;
    let last = metrics.last().expect("at least one epoch");
    write!(out, "trained {} epochs, final loss {:.4e}", metrics.len(), last.loss).map_err(console)?;
    if let Some(v) = last.validation {
        write!(out, ", validation median {:.2}", v.median).map_err(console)?;
    }
    writeln!(out, "\nweights: {}", wpath.display()).map_err(console)
}

fn load_model(cfg: &RunConfig, path: Option<&Path>) -> Result<NetworkWeights> {
    let mut w = weights::load_weights(require_weights(path)?)?;
    w.set_spec_input_size(cfg.input_size);
    Ok(w)
}

/// Network input patches for one image.
pub fn patches(img: &LabeledImage, mode: EvalPatches, size: usize) -> Result<Vec<Patch>> {
    match mode {
        EvalPatches::Grid => Ok(datagen::grid_patches(img, size)?),
        EvalPatches::Whole => Ok(vec![Patch {
            pixels: datagen::resize_bilinear(&img.pixels, size, size)?,
            parent: img.source_id.clone(),
            grid_index: Some(0),
            illuminant: img.illuminant,
        }]),
    }
}

/// Per-patch forward passes followed by aggregation.
pub fn estimate(
    weights: &NetworkWeights,
    img: &LabeledImage,
    mode: EvalPatches,
    truth: Option<&Illuminant>,
) -> Result<EstimateReport> {
    let ps = patches(img, mode, weights.spec().input_size)?;
    let mut locals = Vec::with_capacity(ps.len());
    let mut confs = Vec::with_capacity(ps.len());
    for p in &ps {
        let e = network::forward(weights, &p.pixels, Mode::Eval)?;
        locals.push(Illuminant::from_rgb(e.illuminant)?);
        confs.extend(e.confidence);
    }
    let confidences = weights.spec().with_confidence_branch.then_some(confs.as_slice());
    Ok(aggregator::aggregate(&locals, confidences, CONFIDENCE_THRESHOLD, truth)?)
}

fn eval_image(weights: &NetworkWeights, img: &LabeledImage, mode: EvalPatches) -> Result<EvalRow> {
    let truth = img.illuminant.rgb();
    let report = estimate(weights, img, mode, Some(&img.illuminant))?;
    let err = |l: Illuminant| colorlib::angular_error(l.rgb(), truth);
    Ok(EvalRow {
        source: img.source_id.clone(),
        network: report.angular_error.expect("truth supplied"),
        method_used: report.method_used.as_str(),
        gray_world: err(colorlib::baseline_gray_world(&img.pixels)?)?,
        white_patch: err(colorlib::baseline_white_patch(&img.pixels)?)?,
        shades_of_gray: err(colorlib::baseline_shades_of_gray(&img.pixels, SHADES_OF_GRAY_P)?)?,
    })
}

/// Evaluates every image of a manifest; returns per-image rows and the
/// summary table.
pub fn evaluate(cfg: &RunConfig, weights: &NetworkWeights, data: &[LabeledImage]) -> Result<(Vec<EvalRow>, Vec<SummaryRow>)> {
    if data.is_empty() {
        return Err(reweight_core::Error::EmptyDataset.into());
    }
    let rows = thread_pool(cfg.workers)?.install(|| {
        data.par_iter()
            .map(|img| eval_image(weights, img, cfg.eval_patches))
            .collect::<Result<Vec<_>>>()
    })?;
    let column = |f: fn(&EvalRow) -> f64| -> Result<colorlib::ErrorStats> {
        Ok(colorlib::error_stats(&rows.iter().map(f).collect::<Vec<_>>())?)
    };
    let summary = vec![
        SummaryRow::new("network", &column(|r| r.network)?),
        SummaryRow::new("gray-world", &column(|r| r.gray_world)?),
        SummaryRow::new("white-patch", &column(|r| r.white_patch)?),
        SummaryRow::new("shades-of-gray", &column(|r| r.shades_of_gray)?),
    ];
    Ok((rows, summary))
}

/// Prints the statistics table; with `--out`, also writes `eval.csv` and
/// `summary.csv` there.
pub fn eval(cfg: &RunConfig, weights_path: Option<&Path>, force: bool, out: &mut dyn Write) -> Result<()> {
    let m = cfg
        .manifest
        .as_deref()
        .ok_or_else(|| CliError::Config("a manifest is required (--manifest)".into()))?;
    let files = cfg
        .out
        .as_deref()
        .map(|d| [d.join("eval.csv"), d.join("summary.csv")]);
    if let Some(f) = &files {
        check_writable(f, force)?;
    }
    let w = load_model(cfg, weights_path)?;
    let data = manifest::load_dataset(m, cfg.ccm()?.as_ref())?;
    let (rows, summary) = evaluate(cfg, &w, &data)?;
    report::write_table(out, &summary).map_err(console)?;
    if let (Some(dir), Some([per_image, table])) = (cfg.out.as_deref(), files) {
        create_dir(dir)?;
        write_csv(&per_image, &rows)?;
        write_csv(&table, &summary)?;
    }
    Ok(())
}

fn unlabeled(path: &Path) -> Result<LabeledImage> {
    Ok(LabeledImage {
        pixels: imageio::read_image(path)?,
        illuminant: Illuminant::NEUTRAL,
        source_id: path.display().to_string(),
        mask: None,
    })
}

/// Estimate for one image as JSON, on stdout or in `<out>/estimate.json`.
/// `corrected` receives the white-balanced image as 16-bit PPM.
pub fn infer(
    cfg: &RunConfig,
    weights_path: Option<&Path>,
    image: &Path,
    corrected: Option<&Path>,
    force: bool,
    out: &mut dyn Write,
) -> Result<()> {
    let json_path = cfg.out.as_deref().map(|d| d.join("estimate.json"));
    let targets: Vec<PathBuf> = json_path.iter().cloned().chain(corrected.map(Path::to_path_buf)).collect();
    check_writable(&targets, force)?;
    let w = load_model(cfg, weights_path)?;
    let img = unlabeled(image)?;
    let report = estimate(&w, &img, cfg.eval_patches, None)?;
    let json = serde_json::to_string_pretty(&ReportJson::new(img.source_id.clone(), &report))
        .map_err(|e| CliError::Output(e.to_string()))?;
    match (&json_path, cfg.out.as_deref()) {
        (Some(p), Some(d)) => {
            create_dir(d)?;
            std::fs::write(p, json + "\n").map_err(|e| CliError::io(p, e))?;
        }
        _ => writeln!(out, "{json}").map_err(console)?,
    }
    if let Some(c) = corrected {
        imageio::write_ppm16(c, &colorlib::white_balance(&img.pixels, &report.global)?)?;
    }
    Ok(())
}

/// Reweighting maps of `image` as `rewu<level>.png`, and, given a manifest
/// and a network with a confidence branch, `scatter.csv` pairing each
/// patch's confidence with its angular error.
pub fn inspect(
    cfg: &RunConfig,
    weights_path: Option<&Path>,
    image: Option<&Path>,
    force: bool,
    out: &mut dyn Write,
) -> Result<()> {
    let dir = require_out(cfg)?;
    if image.is_none() && cfg.manifest.is_none() {
        return Err(CliError::Config("inspect needs an image, a manifest, or both".into()));
    }
    let w = load_model(cfg, weights_path)?;
    let levels = w.spec().hierarchy + 1;
    let mut targets: Vec<PathBuf> = Vec::new();
    if image.is_some() {
        targets.extend((0..levels).map(|l| dir.join(format!("rewu{l}.png"))));
    }
    if cfg.manifest.is_some() {
        if !w.spec().with_confidence_branch {
            return Err(CliError::Config("the scatter file needs a network with a confidence branch".into()));
        }
        targets.push(dir.join("scatter.csv"));
    }
    check_writable(&targets, force)?;
    create_dir(dir)?;
    if let Some(path) = image {
        let img = imageio::read_image(path)?;
        let size = w.spec().input_size;
        let input = datagen::resize_bilinear(&img, size, size)?;
        for (level, map) in network::reweight_maps(&w, &input)?.iter().enumerate() {
            imageio::write_gray_png(&dir.join(format!("rewu{level}.png")), map)?;
        }
        writeln!(out, "wrote {levels} reweighting maps to {}", dir.display()).map_err(console)?;
    }
    if let Some(m) = &cfg.manifest {
        let data = manifest::load_dataset(m, cfg.ccm()?.as_ref())?;
        let rows = thread_pool(cfg.workers)?.install(|| {
            data.par_iter()
                .map(|img| scatter_rows(&w, img, cfg.eval_patches))
                .collect::<Result<Vec<_>>>()
        })?;
        let rows: Vec<ScatterRow> = rows.into_iter().flatten().collect();
        write_csv(&dir.join("scatter.csv"), &rows)?;
        writeln!(out, "wrote {} scatter points", rows.len()).map_err(console)?;
    }
    Ok(())
}

fn scatter_rows(w: &NetworkWeights, img: &LabeledImage, mode: EvalPatches) -> Result<Vec<ScatterRow>> {
    let report = estimate(w, img, mode, None)?;
    report
        .per_patch
        .iter()
        .map(|p| {
            Ok(ScatterRow {
                source: img.source_id.clone(),
                grid_index: p.grid_index,
                confidence: p.confidence.expect("confidence branch present"),
                angular_error: colorlib::angular_error(p.illuminant.rgb(), img.illuminant.rgb())?,
            })
        })
        .collect()
}
