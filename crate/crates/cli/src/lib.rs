//! Command implementations behind the `ssc` binary.

pub mod gradsuite;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ssc_core::config::RunConfig;
use ssc_core::eval::{
    ablation_table, derive_seed, evaluate, prepare_split, run_ablation, train_model, AblationLabel, MetricsReport,
    Model, Phase, TrainLog,
};
use ssc_core::export::{export_voxels, ExportFormat};
use ssc_core::geometry::{
    generate_scene, read_scene, read_scene_index, write_scene, write_scene_index, SceneConfig, SceneSample,
};
use ssc_core::tensor::{read_checkpoint, write_checkpoint};
use ssc_core::{Error, Result};

/// Training log written next to the checkpoint.
pub const TRAIN_LOG: &str = "train.log";

/// 0 success, 1 contract violation, 2 I/O or file format, 3 numerical.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Contract(_) | Error::EmptyMask => 1,
        Error::Io { .. } | Error::Format { .. } => 2,
        Error::Numerical(_) => 3,
    }
}

fn emit(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Generator seed of the `i`-th scene of a run.
pub fn scene_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, &format!("scene/{i}")) & 0xffff_ffff
}

fn remove_scene_files(dir: &Path, id: &str) {
    let prefix = format!("{id}.");
    if let Ok(entries) = fs::read_dir(dir) {
        for e in entries.flatten() {
            if e.file_name().to_string_lossy().starts_with(&prefix) {
                let _ = fs::remove_file(e.path());
            }
        }
    }
}

/// Writes `count` validated scenes and the index. On failure every file
/// written by this call is removed.
pub fn cmd_gen_scenes(cfg: &SceneConfig, count: usize, seed: u64, dir: &Path, out: &mut dyn Write) -> Result<Vec<String>> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written: Vec<String> = Vec::new();
    let result = (|| {
        for i in 0..count {
            let scene = generate_scene(cfg, scene_seed(seed, i))?;
            scene.validate()?;
            if written.contains(&scene.scene_id) {
                return Err(Error::contract(format!("duplicate scene id {}", scene.scene_id)));
            }
            written.push(scene.scene_id.clone());
            write_scene(dir, &scene)?;
            emit(out, &format!("wrote {}", scene.scene_id))?;
        }
        write_scene_index(dir, &written)
    })();
    if result.is_err() {
        for id in &written {
            remove_scene_files(dir, id);
        }
        if count > 0 || !written.is_empty() {
            let _ = fs::remove_file(dir.join(ssc_core::geometry::SCENE_INDEX));
        }
    }
    result?;
    emit(out, &format!("{} scenes in {}", written.len(), dir.display()))?;
    Ok(written)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    read_scene_index(dir)?.iter().map(|id| read_scene(dir, id)).collect()
}

/// Prints one line per block; returns whether all passed.
pub fn cmd_grad_check(seed: u64, fault: Option<&str>, out: &mut dyn Write) -> Result<bool> {
    let mut io = Ok(());
    let results = gradsuite::run_suite(seed, fault, |r| {
        let line = format!(
            "{:<18} max rel error {:.3e} over {} coordinates ({} at kinks) {}",
            r.block,
            r.report.max_rel_error,
            r.report.checked,
            r.report.skipped_kinks,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if io.is_ok() {
            io = emit(out, &line);
        }
    })?;
    io?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.block).collect();
    if failed.is_empty() {
        emit(out, &format!("all {} blocks below {:e}", results.len(), gradsuite::TOLERANCE))?;
    } else {
        emit(out, &format!("failed blocks: {}", failed.join(", ")))?;
    }
    Ok(failed.is_empty())
}

fn step_line(phase: Phase, step: usize, loss: f64) -> String {
    match phase {
        Phase::Pretrain => format!("pretrain step {step} loss {loss}"),
        Phase::EndToEnd => format!("step {step} loss {loss}"),
    }
}

fn check_dataset(cfg: &RunConfig) -> Result<Vec<SceneSample>> {
    let dir = &cfg.paths.dataset;
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory does not exist"),
        ));
    }
    let data = load_dataset(dir)?;
    for s in &data {
        if s.grid_gt.spec != cfg.scene.grid_spec() {
            return Err(Error::contract(format!(
                "scene {} has grid {:?}, configuration expects {:?}",
                s.scene_id,
                s.grid_gt.spec.dims,
                cfg.scene.grid_dims
            )));
        }
    }
    Ok(data)
}

/// Trains on the train split, writes the checkpoint and `train.log`.
pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<TrainLog> {
    let data = check_dataset(cfg)?;
    let (train, _) = prepare_split(&data, &cfg.schedule)?;
    let mut lines = String::new();
    let mut io = Ok(());
    let (model, log) = train_model(&train, &cfg.network, &cfg.ablation, &cfg.schedule, cfg.seed, &mut |p, s, l| {
        let line = step_line(p, s, l);
        lines.push_str(&line);
        lines.push('\n');
        if io.is_ok() {
            io = emit(out, &line);
        }
    })?;
    io?;
    write_checkpoint(&cfg.paths.checkpoint, &model.params())?;
    write_file(&cfg.paths.checkpoint.join(TRAIN_LOG), &lines)?;
    emit(out, &format!("checkpoint written to {}", cfg.paths.checkpoint.display()))?;
    Ok(log)
}

fn load_model(cfg: &RunConfig) -> Result<Model> {
    let stored = read_checkpoint(&cfg.paths.checkpoint)?;
    let mut model = Model::new(&cfg.network, &cfg.ablation, cfg.seed)?;
    model.load_params(&stored)?;
    Ok(model)
}

fn report_paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("txt"), base.with_extension("json"))
}

/// Evaluates the checkpoint on the test split and writes the report.
pub fn cmd_eval(cfg: &RunConfig, out: &mut dyn Write) -> Result<MetricsReport> {
    let data = check_dataset(cfg)?;
    let model = load_model(cfg)?;
    let (_, test) = prepare_split(&data, &cfg.schedule)?;
    let report = evaluate(&model, &test, cfg.ablation.guidance_source, cfg.ablation.label.row_name())?;
    let (txt, json) = report_paths(&cfg.paths.report);
    write_file(&txt, &report.to_text())?;
    write_file(&json, &report.to_json())?;
    emit(out, report.to_text().trim_end())?;
    Ok(report)
}

/// All five configurations with the run seed; one table row each.
pub fn cmd_ablate(cfg: &RunConfig, out: &mut dyn Write) -> Result<Vec<MetricsReport>> {
    let data = check_dataset(cfg)?;
    let mut io = Ok(());
    let rows = run_ablation(&data, &cfg.network, &AblationLabel::ALL, &cfg.schedule, cfg.seed, &mut |label, p, s, l| {
        if io.is_ok() && (s == 1 || s % 50 == 0) {
            io = emit(out, &format!("[{label}] {}", step_line(p, s, l)));
        }
    })?;
    io?;
    let reports: Vec<MetricsReport> = rows.into_iter().map(|r| r.report).collect();
    let table = ablation_table(&reports);
    let (txt, json) = report_paths(&cfg.paths.report);
    write_file(&txt, &table)?;
    write_file(
        &json,
        &serde_json::to_string_pretty(&reports).expect("reports serialize"),
    )?;
    emit(out, table.trim_end())?;
    Ok(reports)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeSource {
    GroundTruth,
    Prediction,
}

/// Writes the ground-truth or predicted labels of one dataset scene.
pub fn cmd_export_voxels(
    cfg: &RunConfig,
    scene_id: &str,
    source: VolumeSource,
    format: ExportFormat,
    path: &Path,
    out: &mut dyn Write,
) -> Result<usize> {
    let scene = read_scene(&cfg.paths.dataset, scene_id)?;
    let grid = match source {
        VolumeSource::GroundTruth => scene.grid_gt.clone(),
        VolumeSource::Prediction => {
            let model = load_model(cfg)?;
            let prepared = ssc_core::eval::PreparedScene::new(&scene, cfg.schedule.include_free_in_loss)?;
            model.predict(&prepared, cfg.ablation.guidance_source)?
        }
    };
    let n = export_voxels(&grid, path, format)?;
    let what = match format {
        ExportFormat::SurfaceMesh => "faces",
        ExportFormat::PointList => "voxels",
    };
    emit(out, &format!("{n} {what} written to {}", path.display()))?;
    Ok(n)
}
