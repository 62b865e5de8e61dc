//! Acceptance suite: one test per criterion, each printing a single
//! PASS/FAIL line to the terminal regardless of output capture.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ssc_cli::{cmd_ablate, cmd_eval, cmd_gen_scenes, cmd_grad_check, cmd_train, load_dataset};
use ssc_core::config::RunConfig;
use ssc_core::eval::{run_ablation, AblationLabel, NetworkConfig, TrainSchedule};
use ssc_core::geometry::SceneConfig;
use ssc_core::tensor::{read_checkpoint, write_checkpoint};

use support::checks::{self, Check};

fn report(n: usize, name: &str, result: &Check) {
    let line = match result {
        Ok(s) => format!("criterion {n} ({name}): PASS: {s}\n"),
        Err(e) => format!("criterion {n} ({name}): FAIL: {e}\n"),
    };
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn conclude(n: usize, name: &str, result: Check) {
    report(n, name, &result);
    if let Err(e) = result {
        panic!("criterion {n} failed: {e}");
    }
}

fn all(parts: Vec<(&str, Check)>) -> Check {
    let mut ok = Vec::new();
    for (name, r) in parts {
        match r {
            Ok(s) => ok.push(format!("{name} [{s}]")),
            Err(e) => return Err(format!("{name}: {e}")),
        }
    }
    Ok(ok.join("; "))
}

fn sink() -> Vec<u8> {
    Vec::new()
}

fn err(e: ssc_core::Error) -> String {
    e.to_string()
}

#[test]
fn criterion_1_gradient_gate() {
    let t = Instant::now();
    let mut out = sink();
    let result = cmd_grad_check(0, None, &mut out).map_err(err).and_then(|ok| {
        let text = String::from_utf8_lossy(&out).into_owned();
        let blocks = text.lines().filter(|l| l.ends_with(" ok") || l.ends_with(" FAIL")).count();
        let secs = t.elapsed().as_secs_f64();
        if !ok {
            Err(format!("blocks above 1e-4:\n{text}"))
        } else if blocks < 8 {
            Err(format!("only {blocks} blocks reported"))
        } else if secs >= 300.0 {
            Err(format!("took {secs:.0} s"))
        } else {
            Ok(format!("{blocks} blocks below 1e-4 in {secs:.1} s"))
        }
    });
    conclude(1, "gradient gate", result);
}

#[test]
fn criterion_2_oracle_equivalence() {
    let result = all(vec![
        ("convolution", checks::convolution(101)),
        ("pooling", checks::pooling(102)),
        ("one-hot boxes", checks::roi_boxes(103)),
        ("scatter/gather", checks::scatter_gather(104)),
        ("SC/SSC metrics", checks::metrics(105)),
        ("cross-entropy", checks::cross_entropy(106)),
    ]);
    conclude(2, "oracle equivalence", result);
}

#[test]
fn criterion_3_structural_identities() {
    let result = all(vec![
        ("residual identity", checks::residual_identity(201)),
        ("softmax", checks::softmax_normalization(202)),
        ("attention bounds", checks::attention_bounds(203)),
        ("adjointness", checks::projection_adjointness(204)),
        ("DDR vs dense", checks::ddr_separable(205)),
    ]);
    conclude(3, "structural identities", result);
}

fn tiny(root: &Path, seed: u64) -> RunConfig {
    let mut c = RunConfig::with_seed(seed);
    c.paths.dataset = root.join("scenes");
    c.paths.checkpoint = root.join("ckpt");
    c.paths.report = root.join("report");
    c.network = checks::small_network();
    c.schedule.pretrain_steps = 3;
    c.schedule.steps = 4;
    c
}

fn ablate_rows() -> Check {
    let t = tempfile::tempdir().map_err(|e| e.to_string())?;
    let c = tiny(t.path(), 301);
    cmd_gen_scenes(&c.scene, 5, c.seed, &c.paths.dataset, &mut sink()).map_err(err)?;
    let reports = cmd_ablate(&c, &mut sink()).map_err(err)?;
    let got: Vec<&str> = reports.iter().map(|r| r.label.as_str()).collect();
    let want: Vec<&str> = AblationLabel::ALL.iter().map(|l| l.row_name()).collect();
    let table = fs::read_to_string(c.paths.report.with_extension("txt")).map_err(|e| e.to_string())?;
    let rows = table.lines().filter(|l| want.iter().any(|w| l.split("  ").next() == Some(*w))).count();
    if got != want || rows != 5 {
        return Err(format!("rows {got:?}, {rows} table lines"));
    }
    Ok(format!("table rows {}", want.join(" | ")))
}

#[test]
fn criterion_4_ablation_wiring() {
    let result = all(vec![
        ("operation traces", checks::ablation_wiring(401)),
        ("ablate output", ablate_rows()),
    ]);
    conclude(4, "ablation wiring", result);
}

const SWEEP_SEEDS: [u64; 3] = [1, 2, 3];
const SUITE_SCENES: usize = 40;

#[test]
fn criterion_5_directional_learning() {
    let t0 = Instant::now();
    let result = (|| -> Check {
        let schedule = TrainSchedule::default();
        let network = NetworkConfig::default();
        let mut avg: HashMap<AblationLabel, f64> = HashMap::new();
        let mut lines = Vec::new();
        for seed in SWEEP_SEEDS {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            cmd_gen_scenes(&SceneConfig::default(), SUITE_SCENES, seed, dir.path(), &mut sink()).map_err(err)?;
            let data = load_dataset(dir.path()).map_err(err)?;
            let rows = run_ablation(&data, &network, &AblationLabel::ALL, &schedule, seed, &mut |_, _, _, _| {})
                .map_err(err)?;
            for r in &rows {
                let l = &r.log.end_to_end;
                let (first, last) = (l[0], l[schedule.steps - 1]);
                if last >= first {
                    return Err(format!("seed {seed} {}: loss {first:.3} at step 1, {last:.3} at step {}", r.label, schedule.steps));
                }
                let v = r.report.ssc_avg.ok_or(format!("seed {seed} {}: no ssc_avg", r.label))?;
                *avg.entry(r.label).or_default() += v / SWEEP_SEEDS.len() as f64;
                lines.push(format!("seed {seed} {} {:.1}", r.label, 100.0 * v));
            }
        }
        let secs = t0.elapsed().as_secs_f64();
        let (full, basic, gt) = (avg[&AblationLabel::Full], avg[&AblationLabel::Basic], avg[&AblationLabel::SegGt]);
        let summary = AblationLabel::ALL
            .iter()
            .map(|l| format!("{l} {:.1}", 100.0 * avg[l]))
            .collect::<Vec<_>>()
            .join(", ");
        let _ = std::io::stderr().write_all(format!("  per seed: {}\n", lines.join(", ")).as_bytes());
        if full < basic {
            Err(format!("full < basic on mean ssc_avg ({summary})"))
        } else if gt < full {
            Err(format!("Seg-GT < full on mean ssc_avg ({summary})"))
        } else if secs >= 1800.0 {
            Err(format!("sweep took {secs:.0} s ({summary})"))
        } else {
            Ok(format!("losses decrease in every run; mean ssc_avg {summary}; {secs:.0} s"))
        }
    })();
    conclude(5, "directional learning", result);
}

fn snapshot(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).map_err(|e| e.to_string())?.flatten() {
        let p = e.path();
        out.insert(
            e.file_name().to_string_lossy().into_owned(),
            fs::read(&p).map_err(|e| e.to_string())?,
        );
    }
    Ok(out)
}

#[test]
fn criterion_6_determinism_and_persistence() {
    let result = (|| -> Check {
        let t = tempfile::tempdir().map_err(|e| e.to_string())?;
        let runs: Vec<RunConfig> = ["a", "b"].iter().map(|r| tiny(&t.path().join(r), 601)).collect();
        for c in &runs {
            cmd_gen_scenes(&c.scene, 6, c.seed, &c.paths.dataset, &mut sink()).map_err(err)?;
            cmd_train(c, &mut sink()).map_err(err)?;
            cmd_eval(c, &mut sink()).map_err(err)?;
        }
        let (a, b) = (&runs[0], &runs[1]);
        if snapshot(&a.paths.dataset)? != snapshot(&b.paths.dataset)? {
            return Err("scene files differ".into());
        }
        if snapshot(&a.paths.checkpoint)? != snapshot(&b.paths.checkpoint)? {
            return Err("checkpoints differ".into());
        }
        for ext in ["txt", "json"] {
            let read = |c: &RunConfig| fs::read(c.paths.report.with_extension(ext)).map_err(|e| e.to_string());
            if read(a)? != read(b)? {
                return Err(format!("{ext} reports differ"));
            }
        }
        let stored = read_checkpoint(&a.paths.checkpoint).map_err(err)?;
        let copy = t.path().join("copy");
        write_checkpoint(&copy, &stored).map_err(err)?;
        let (orig, again) = (snapshot(&a.paths.checkpoint)?, snapshot(&copy)?);
        let exact = again.iter().all(|(k, v)| orig.get(k) == Some(v));
        if !exact || again.is_empty() {
            return Err("checkpoint round trip changed bytes".into());
        }
        let reread = read_checkpoint(&copy).map_err(err)?;
        if reread.tensors() != stored.tensors() || reread.names() != stored.names() {
            return Err("reloaded parameters differ".into());
        }
        Ok(format!(
            "scenes, checkpoint ({} tensors) and reports byte-identical across runs; round trip exact",
            stored.len()
        ))
    })();
    conclude(6, "determinism and persistence", result);
}
