//! Summary tables and per-dataset boxplots across finished runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use capsprom_core::model::ModelKind;
use capsprom_core::train::{read_metrics_csv, MetricsRow, RunManifest, RUN_MANIFEST_FILE};
use plotters::prelude::*;
use serde::Serialize;

use crate::commands::METRIC_NAMES;
use crate::error::{io_error, CliError};

const SEARCH_DEPTH: usize = 4;

/// One complete run: its manifest and the per-fold metric rows.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub folds: Vec<MetricsRow>,
    pub summary: MetricsRow,
}

fn find_manifests(dir: &Path, depth: usize, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let candidate = dir.join(RUN_MANIFEST_FILE);
    if candidate.is_file() {
        out.push(candidate);
        return Ok(());
    }
    if depth == 0 {
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| io_error(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for e in entries {
        find_manifests(&e, depth - 1, out)?;
    }
    Ok(())
}

fn load_run(manifest_path: &Path) -> Result<LoadedRun, String> {
    let dir = manifest_path.parent().expect("manifest inside a directory").to_path_buf();
    let manifest = RunManifest::load(manifest_path).map_err(|e| e.to_string())?;
    let rows = read_metrics_csv(&dir.join("metrics.csv")).map_err(|e| e.to_string())?;
    let (summary, folds): (Vec<MetricsRow>, Vec<MetricsRow>) = rows.into_iter().partition(MetricsRow::is_summary);
    let summary = summary.into_iter().next().ok_or("metrics.csv has no summary row")?;
    let present: BTreeSet<usize> = folds.iter().filter_map(MetricsRow::fold_index).collect();
    let missing: Vec<usize> = (0..manifest.k)
        .filter(|f| !present.contains(f) || !dir.join(format!("predictions/fold_{f}.csv")).is_file())
        .collect();
    if !missing.is_empty() {
        return Err(format!("missing fold(s) {missing:?} of {}", manifest.k));
    }
    Ok(LoadedRun {
        dir,
        manifest,
        folds,
        summary,
    })
}

/// Every complete run under `root`. Incomplete or unreadable runs are
/// skipped with a warning.
pub fn collect_runs(root: &Path) -> Result<Vec<LoadedRun>, CliError> {
    if !root.is_dir() {
        return Err(CliError::data(format!("{}: no such runs directory", root.display())));
    }
    let mut manifests = Vec::new();
    find_manifests(root, SEARCH_DEPTH, &mut manifests)?;
    let mut runs = Vec::new();
    for m in manifests {
        match load_run(&m) {
            Ok(r) => runs.push(r),
            Err(e) => log::warn!("excluding run {}: {e}", m.parent().unwrap_or(root).display()),
        }
    }
    if runs.is_empty() {
        return Err(CliError::data(format!("no completed runs found under {}", root.display())));
    }
    Ok(runs)
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    dataset: &'a str,
    model: &'a str,
    seed: u64,
    folds: usize,
    metric: &'a str,
    mean: f64,
    sd: f64,
}

fn display_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::CapsProm => "CapsProm",
        ModelKind::CnnProm => "CNNProm",
    }
}

fn model_color(kind: ModelKind) -> RGBColor {
    match kind {
        ModelKind::CapsProm => RED,
        ModelKind::CnnProm => BLUE,
    }
}

fn sorted_runs(runs: &[LoadedRun]) -> Vec<&LoadedRun> {
    let mut v: Vec<&LoadedRun> = runs.iter().collect();
    v.sort_by(|a, b| {
        (&a.manifest.dataset, a.manifest.model, a.manifest.seed, &a.dir).cmp(&(
            &b.manifest.dataset,
            b.manifest.model,
            b.manifest.seed,
            &b.dir,
        ))
    });
    v
}

/// Human-readable `mean ± sd` table, one row per run.
pub fn summary_table(runs: &[LoadedRun]) -> String {
    let mut s = format!("{:<22} {:<9} {:>6} {:>5}", "dataset", "model", "seed", "folds");
    for m in METRIC_NAMES {
        write!(s, " {m:>15}").unwrap();
    }
    s.push('\n');
    for r in sorted_runs(runs) {
        write!(
            s,
            "{:<22} {:<9} {:>6} {:>5}",
            r.manifest.dataset,
            display_name(r.manifest.model),
            r.manifest.seed,
            r.folds.len()
        )
        .unwrap();
        let sd = [
            r.summary.prec_sd,
            r.summary.sn_sd,
            r.summary.f1_sd,
            r.summary.sp_sd,
            r.summary.acc_sd,
            r.summary.mcc_sd,
        ];
        for (mean, sd) in r.summary.values().iter().zip(sd) {
            write!(s, " {:>15}", format!("{mean:.3} ± {:.3}", sd.unwrap_or(0.0))).unwrap();
        }
        s.push('\n');
    }
    s
}

fn summary_csv(runs: &[LoadedRun]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::runtime(e.to_string());
    for r in sorted_runs(runs) {
        let sd = [
            r.summary.prec_sd,
            r.summary.sn_sd,
            r.summary.f1_sd,
            r.summary.sp_sd,
            r.summary.acc_sd,
            r.summary.mcc_sd,
        ];
        for ((metric, mean), sd) in METRIC_NAMES.iter().zip(r.summary.values()).zip(sd) {
            w.serialize(SummaryRow {
                dataset: &r.manifest.dataset,
                model: r.manifest.model.as_str(),
                seed: r.manifest.seed,
                folds: r.folds.len(),
                metric,
                mean,
                sd: sd.unwrap_or(0.0),
            })
            .map_err(err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| CliError::runtime(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8 csv"))
}

/// Per-fold values of each metric, pooled over runs of the same model.
fn fold_values(runs: &[&LoadedRun]) -> BTreeMap<ModelKind, [Vec<f64>; 6]> {
    let mut out: BTreeMap<ModelKind, [Vec<f64>; 6]> = BTreeMap::new();
    for r in runs {
        let slot = out.entry(r.manifest.model).or_default();
        for f in &r.folds {
            for (i, v) in f.values().into_iter().enumerate() {
                slot[i].push(v);
            }
        }
    }
    out
}

fn plot_err(e: impl std::fmt::Display) -> CliError {
    CliError::runtime(format!("plot: {e}"))
}

/// One SVG per dataset: a panel per metric, a box per model over folds.
pub fn draw_boxplots(dataset: &str, runs: &[&LoadedRun], path: &Path) -> Result<(), CliError> {
    let values = fold_values(runs);
    let models: Vec<ModelKind> = values.keys().copied().collect();
    let root = SVGBackend::new(path, (1200, 760)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let root = root.titled(dataset, ("sans-serif", 26)).map_err(plot_err)?;
    let panels = root.split_evenly((2, 3));
    for (m, panel) in panels.iter().enumerate() {
        let all: Vec<f64> = values.values().flat_map(|v| v[m].iter().copied()).collect();
        let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = ((hi - lo) * 0.1).max(0.02);
        let (lo, hi) = ((lo - pad) as f32, (hi + pad) as f32);
        let mut chart = ChartBuilder::on(panel)
            .caption(METRIC_NAMES[m], ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(30)
            .y_label_area_size(48)
            .build_cartesian_2d((0..models.len() as i32).into_segmented(), lo..hi)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_label_formatter(&|v| match v {
                SegmentValue::CenterOf(i) | SegmentValue::Exact(i) => {
                    models.get(*i as usize).map_or(String::new(), |k| display_name(*k).to_string())
                }
                SegmentValue::Last => String::new(),
            })
            .draw()
            .map_err(plot_err)?;
        for (i, kind) in models.iter().enumerate() {
            let v = &values[kind][m];
            if v.is_empty() {
                continue;
            }
            let q = Quartiles::new(v);
            chart
                .draw_series(std::iter::once(
                    Boxplot::new_vertical(SegmentValue::CenterOf(i as i32), &q)
                        .width(40)
                        .whisker_width(0.5)
                        .style(model_color(*kind)),
                ))
                .map_err(plot_err)?;
        }
    }
    root.present().map_err(plot_err)
}

#[derive(Debug, Clone)]
pub struct ReportOutput {
    pub runs: usize,
    pub table: String,
    pub plots: Vec<PathBuf>,
}

pub fn report(runs_dir: &Path, out: &Path) -> Result<ReportOutput, CliError> {
    let runs = collect_runs(runs_dir)?;
    std::fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let table = summary_table(&runs);
    std::fs::write(out.join("summary.txt"), &table).map_err(|e| io_error(out, e))?;
    let csv_path = out.join("summary.csv");
    std::fs::write(&csv_path, summary_csv(&runs)?).map_err(|e| io_error(&csv_path, e))?;
    let mut by_dataset: BTreeMap<&str, Vec<&LoadedRun>> = BTreeMap::new();
    for r in &runs {
        by_dataset.entry(r.manifest.dataset.as_str()).or_default().push(r);
    }
    let mut plots = Vec::new();
    for (ds, rs) in by_dataset {
        let p = out.join(format!("boxplots_{ds}.svg"));
        draw_boxplots(ds, &rs, &p)?;
        plots.push(p);
    }
    Ok(ReportOutput {
        runs: runs.len(),
        table,
        plots,
    })
}
