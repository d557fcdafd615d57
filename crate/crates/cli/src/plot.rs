//! SVG charts from bench and train CSVs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use plotters::prelude::*;
use serde::de::DeserializeOwned;

use crate::schema::{BenchRow, TrainRow, BENCH_COLUMNS, BENCH_SCHEMA, STATUS_OK, TRAIN_COLUMNS, TRAIN_SCHEMA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    /// Median step time against width, one line per (optimizer, depth).
    #[value(name = "step_time_vs_width")]
    StepTimeVsWidth,
    /// Median step time against depth, one line per (optimizer, width).
    #[value(name = "step_time_vs_depth")]
    StepTimeVsDepth,
    /// Loss against step, one line per (task, optimizer).
    #[value(name = "loss_curve")]
    LossCurve,
}

#[derive(Args, Debug, Clone)]
pub struct PlotArgs {
    /// Input CSV written by `bench` or `train`.
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub kind: PlotKind,
    /// Output SVG path.
    #[arg(long)]
    pub out: PathBuf,
}

type Series = BTreeMap<String, Vec<(f64, f64)>>;

fn read_rows<T: DeserializeOwned>(
    path: &Path,
    schema: &str,
    columns: &[&str],
    version_of: impl Fn(&T) -> &str,
) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        bail!("{} is empty", path.display());
    }
    if headers.get(0) != Some("schema_version") {
        bail!("{} has no schema_version column", path.display());
    }
    if !headers.iter().eq(columns.iter().copied()) {
        bail!("{}: columns do not match schema {schema}", path.display());
    }
    let mut rows = Vec::new();
    for (i, record) in reader.deserialize::<T>().enumerate() {
        let row = record.with_context(|| format!("{}: row {} does not match schema {schema}", path.display(), i + 1))?;
        let version = version_of(&row);
        if version != schema {
            bail!("{}: unsupported schema version `{version}` (expected `{schema}`)", path.display());
        }
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("{} has no data rows", path.display());
    }
    Ok(rows)
}

/// Groups the CSV into named (x, y) series for `kind`.
pub fn series(path: &Path, kind: PlotKind) -> Result<Series> {
    let mut out = Series::new();
    match kind {
        PlotKind::StepTimeVsWidth | PlotKind::StepTimeVsDepth => {
            let rows: Vec<BenchRow> = read_rows(path, BENCH_SCHEMA, &BENCH_COLUMNS, |r: &BenchRow| &r.schema_version)?;
            for r in rows.iter().filter(|r| r.status == STATUS_OK) {
                let Some(ms) = r.median_ms else { continue };
                let (label, x) = match kind {
                    PlotKind::StepTimeVsWidth => (format!("{} depth {}", r.optimizer, r.depth), r.width),
                    _ => (format!("{} width {}", r.optimizer, r.width), r.depth),
                };
                out.entry(label).or_default().push((x as f64, ms));
            }
        }
        PlotKind::LossCurve => {
            let rows: Vec<TrainRow> = read_rows(path, TRAIN_SCHEMA, &TRAIN_COLUMNS, |r: &TrainRow| &r.schema_version)?;
            for r in rows.iter().filter(|r| r.loss.is_finite()) {
                out.entry(format!("{} {}", r.task, r.optimizer))
                    .or_default()
                    .push((r.step as f64, r.loss));
            }
        }
    }
    if out.is_empty() {
        bail!("{} has no plottable rows", path.display());
    }
    for points in out.values_mut() {
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    Ok(out)
}

fn padded(lo: f64, hi: f64) -> std::ops::Range<f64> {
    let pad = if hi > lo { 0.05 * (hi - lo) } else { lo.abs().max(1.0) * 0.05 };
    (lo - pad)..(hi + pad)
}

pub fn render(series: &Series, kind: PlotKind, out: &Path) -> Result<()> {
    let points = series.values().flatten();
    let (xmin, xmax) = points.clone().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (ymin, ymax) = points.fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let (caption, xlabel, ylabel) = match kind {
        PlotKind::StepTimeVsWidth => ("Optimizer step time vs width", "width", "median step time (ms)"),
        PlotKind::StepTimeVsDepth => ("Optimizer step time vs depth", "depth", "median step time (ms)"),
        PlotKind::LossCurve => ("Training loss", "step", "loss"),
    };

    let root = SVGBackend::new(out, (900, 560)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(caption, ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(64)
        .build_cartesian_2d(padded(xmin, xmax), padded(ymin.min(0.0), ymax))?;
    chart.configure_mesh().x_desc(xlabel).y_desc(ylabel).draw()?;
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()?;
    root.present()?;
    Ok(())
}

pub fn run(args: &PlotArgs) -> Result<()> {
    let series = series(&args.input, args.kind)?;
    render(&series, args.kind, &args.out)?;
    eprintln!("wrote {} ({} series)", args.out.display(), series.len());
    Ok(())
}
