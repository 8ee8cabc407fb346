//! Rendering run histories into plots and summary tables.
//!
//! A "run" is any directory containing metrics.csv plus config.resolved.toml.
//! Runs group by (dataset, noise model, noise rate); each group gets an
//! accuracy-vs-epoch overlay and, where available, a label-accuracy
//! overlay. Summaries come out as markdown and CSV. Rendering only reads
//! the CSVs, so it can re-run any time and is idempotent.

use plotters::prelude::*;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::{Method, RunConfig};
use crate::data::NoiseModel;
use crate::error::{Error, Result};
use crate::metrics::{read_metrics_csv, MetricsRecord};

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub method: Method,
    pub dataset: String,
    pub noise_model: NoiseModel,
    pub noise_rate: f64,
    pub seed: u64,
    pub epochs: usize,
    pub final_test_acc: Option<f64>,
    pub best_test_acc: Option<f64>,
    pub final_acc_label: Option<f64>,
    pub records: Vec<MetricsRecord>,
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Cocorrecting => "co-correcting",
        Method::Standard => "standard",
    }
}

fn noise_name(m: NoiseModel) -> &'static str {
    match m {
        NoiseModel::None => "clean",
        NoiseModel::Symmetric => "symmetric",
        NoiseModel::Pairflip => "pairflip",
    }
}

/// Test accuracy of the reported network per epoch (the better network at
/// the final epoch, consistent with the trainer's reporting rule).
fn report_curve(records: &[MetricsRecord]) -> Vec<(usize, f64)> {
    let last = match records.last() {
        Some(l) => l,
        None => return Vec::new(),
    };
    let use_net2 = match (last.acc_val_net1, last.acc_val_net2) {
        (Some(a), Some(b)) => b > a,
        _ => last.acc_test_net2.unwrap_or(0.0) > last.acc_test_net1.unwrap_or(0.0),
    };
    records
        .iter()
        .filter_map(|r| {
            let v = if use_net2 { r.acc_test_net2 } else { r.acc_test_net1 };
            v.map(|v| (r.epoch, v))
        })
        .collect()
}

/// Load one run directory; returns None when it is not a run.
pub fn load_run(dir: &Path) -> Option<Result<RunSummary>> {
    let metrics = dir.join("metrics.csv");
    let config = dir.join("config.resolved.toml");
    if !metrics.is_file() || !config.is_file() {
        return None;
    }
    Some((|| {
        let cfg = RunConfig::from_file(&config)?;
        let records = read_metrics_csv(&metrics)?;
        let curve = report_curve(&records);
        let final_test_acc = curve.last().map(|&(_, v)| v);
        let best_test_acc = curve
            .iter()
            .map(|&(_, v)| v)
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
        Ok(RunSummary {
            dir: dir.to_path_buf(),
            method: cfg.method,
            dataset: cfg.dataset.name.clone(),
            noise_model: cfg.noise.model,
            noise_rate: cfg.noise.rate,
            seed: cfg.seed,
            epochs: records.len(),
            final_test_acc,
            best_test_acc,
            final_acc_label: records.last().and_then(|r| r.acc_label),
            records,
        })
    })())
}

/// Collect run directories directly under `root` (and `root` itself).
pub fn collect_runs(root: &Path) -> Result<Vec<RunSummary>> {
    let mut runs = Vec::new();
    if let Some(r) = load_run(root) {
        runs.push(r?);
    }
    if root.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(root)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        entries.sort();
        for dir in entries {
            if let Some(r) = load_run(&dir) {
                runs.push(r?);
            }
        }
    }
    Ok(runs)
}

fn group_key(r: &RunSummary) -> String {
    format!(
        "{}-{}-{}",
        r.dataset,
        noise_name(r.noise_model),
        format!("{:.2}", r.noise_rate).replace('.', "p")
    )
}

/// Render plots and summaries for every run found under `root`.
/// Returns the paths written.
pub fn render_report(root: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let runs = collect_runs(root)?;
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    if runs.is_empty() {
        let p = out_dir.join("summary.md");
        std::fs::write(&p, "# Report\n\nNo run directories with metrics found.\n")?;
        written.push(p);
        return Ok(written);
    }

    let mut groups: BTreeMap<String, Vec<&RunSummary>> = BTreeMap::new();
    for r in &runs {
        groups.entry(group_key(r)).or_default().push(r);
    }

    for (key, members) in &groups {
        let acc_path = out_dir.join(format!("acc_class_{key}.svg"));
        plot_accuracy(&acc_path, key, members, false)?;
        written.push(acc_path);
        if members.iter().any(|r| r.records.iter().any(|m| m.acc_label.is_some())) {
            let label_path = out_dir.join(format!("acc_label_{key}.svg"));
            plot_accuracy(&label_path, key, members, true)?;
            written.push(label_path);
        } else {
            log::info!("group {key}: no label-accuracy data, curve omitted");
        }
    }

    // summary table: markdown + csv
    let md_path = out_dir.join("summary.md");
    let csv_path = out_dir.join("summary.csv");
    {
        let mut md = std::io::BufWriter::new(std::fs::File::create(&md_path)?);
        let mut csv = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
        writeln!(md, "# Run summary\n")?;
        writeln!(
            md,
            "| run | method | dataset | noise | rate | seed | epochs | final acc | best acc | final label acc |"
        )?;
        writeln!(md, "|---|---|---|---|---|---|---|---|---|---|")?;
        writeln!(
            csv,
            "run,method,dataset,noise,rate,seed,epochs,final_acc,best_acc,final_acc_label"
        )?;
        for r in &runs {
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
            let name = r
                .dir
                .file_name()
                .map(|n| n.to_string_lossy().to_string())
                .unwrap_or_default();
            writeln!(
                md,
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
                name,
                method_name(r.method),
                r.dataset,
                noise_name(r.noise_model),
                r.noise_rate,
                r.seed,
                r.epochs,
                fmt(r.final_test_acc),
                fmt(r.best_test_acc),
                fmt(r.final_acc_label),
            )?;
            writeln!(
                csv,
                "{},{},{},{},{},{},{},{},{},{}",
                name,
                method_name(r.method),
                r.dataset,
                noise_name(r.noise_model),
                r.noise_rate,
                r.seed,
                r.epochs,
                fmt(r.final_test_acc),
                fmt(r.best_test_acc),
                fmt(r.final_acc_label),
            )?;
        }
    }
    written.push(md_path);
    written.push(csv_path);
    Ok(written)
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn plot_accuracy(
    path: &Path,
    title: &str,
    members: &[&RunSummary],
    label_accuracy: bool,
) -> Result<()> {
    let max_epoch = members
        .iter()
        .flat_map(|r| r.records.last().map(|m| m.epoch))
        .max()
        .unwrap_or(0)
        .max(1);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE)
        .map_err(|e| Error::Runtime(format!("plot: {e}")))?;
    let what = if label_accuracy { "label accuracy" } else { "test accuracy" };
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{what} — {title}"), ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0usize..max_epoch, 0.0f64..1.0f64)
        .map_err(|e| Error::Runtime(format!("plot: {e}")))?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc(what)
        .draw()
        .map_err(|e| Error::Runtime(format!("plot: {e}")))?;

    for (i, r) in members.iter().enumerate() {
        let series: Vec<(usize, f64)> = if label_accuracy {
            r.records
                .iter()
                .filter_map(|m| m.acc_label.map(|v| (m.epoch, v)))
                .collect()
        } else {
            report_curve(&r.records)
        };
        if series.is_empty() {
            continue;
        }
        let color = PALETTE[i % PALETTE.len()];
        let label = format!("{} (seed {})", method_name(r.method), r.seed);
        chart
            .draw_series(LineSeries::new(series, color.stroke_width(2)))
            .map_err(|e| Error::Runtime(format!("plot: {e}")))?
            .label(label)
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2))
            });
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.85))
        .draw()
        .map_err(|e| Error::Runtime(format!("plot: {e}")))?;
    root.present()
        .map_err(|e| Error::Runtime(format!("plot: {e}")))?;
    Ok(())
}
