//! SVG line plots of sweep results.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::results::{BaselinePoint, ResultRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Psnr,
    /// MS-SSIM in dB, `-10 log10(1 - d)`.
    MsSsimDb,
}

impl Metric {
    fn label(self) -> &'static str {
        match self {
            Metric::Psnr => "PSNR (dB)",
            Metric::MsSsimDb => "MS-SSIM (dB)",
        }
    }

    fn of_row(self, r: &ResultRow) -> f64 {
        match self {
            Metric::Psnr => r.psnr_db,
            Metric::MsSsimDb => r.ms_ssim_db,
        }
    }

    fn of_baseline(self, b: &BaselinePoint) -> f64 {
        match self {
            Metric::Psnr => b.psnr_db,
            Metric::MsSsimDb => mdvsc_core::metrics::ms_ssim_db(b.ms_ssim),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Cbr,
    Snr,
}

/// A named polyline.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub baseline: bool,
}

fn key(v: f64) -> u64 {
    v.to_bits()
}

/// Mean metric per x value, one series per value of the other axis.
pub fn aggregate(rows: &[ResultRow], metric: Metric, x: Axis) -> Vec<Series> {
    let mut groups: BTreeMap<u64, BTreeMap<u64, (f64, usize)>> = BTreeMap::new();
    for r in rows {
        let (xv, gv) = match x {
            Axis::Cbr => (r.cbr, r.snr_db),
            Axis::Snr => (r.snr_db, r.cbr),
        };
        let y = metric.of_row(r);
        if !(y.is_finite() && xv.is_finite()) {
            continue;
        }
        let cell = groups.entry(key(gv)).or_default().entry(key(xv)).or_insert((0.0, 0));
        cell.0 += y;
        cell.1 += 1;
    }
    let mut out: Vec<Series> = groups
        .into_iter()
        .map(|(g, cells)| {
            let g = f64::from_bits(g);
            let name = match x {
                Axis::Cbr => format!("SNR {g} dB"),
                Axis::Snr => format!("CBR {g:.4}"),
            };
            let mut points: Vec<(f64, f64)> = cells.into_iter().map(|(xv, (s, n))| (f64::from_bits(xv), s / n as f64)).collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { name, points, baseline: false }
        })
        .collect();
    out.sort_by(|a, b| a.points.first().map(|p| p.0).partial_cmp(&b.points.first().map(|p| p.0)).unwrap_or(std::cmp::Ordering::Equal));
    out
}

/// Baseline curves at one fixed value of the other axis; bandwidth ratios
/// match within 1% so achieved ratios line up with nominal ones.
pub fn baseline_series(points: &[BaselinePoint], metric: Metric, x: Axis, fixed: f64) -> Vec<Series> {
    let mut by_label: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for p in points {
        let (xv, gv) = match x {
            Axis::Cbr => (p.cbr, p.snr_db),
            Axis::Snr => (p.snr_db, p.cbr),
        };
        let y = metric.of_baseline(p);
        let tol = match x {
            Axis::Cbr => 1e-9 * fixed.abs().max(1.0),
            Axis::Snr => 0.01 * fixed.abs(),
        };
        if (gv - fixed).abs() <= tol && y.is_finite() {
            by_label.entry(&p.label).or_default().push((xv, y));
        }
    }
    by_label
        .into_iter()
        .map(|(label, mut pts)| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { name: label.to_string(), points: pts, baseline: true }
        })
        .collect()
}

pub fn draw(path: &Path, title: &str, x: Axis, metric: Metric, series: &[Series]) -> Result<()> {
    let fail = |e: String| Error::Plot { path: path.into(), message: e };
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(xv, yv) in pts {
        x0 = x0.min(xv);
        x1 = x1.max(xv);
        y0 = y0.min(yv);
        y1 = y1.max(yv);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let xpad = ((x1 - x0) * 0.05).max(1e-3);
    let ypad = ((y1 - y0) * 0.1).max(0.5);
    let root = SVGBackend::new(path, (800, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| fail(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(48)
        .y_label_area_size(64)
        .build_cartesian_2d((x0 - xpad)..(x1 + xpad), (y0 - ypad)..(y1 + ypad))
        .map_err(|e| fail(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc(match x {
            Axis::Cbr => "channel bandwidth ratio",
            Axis::Snr => "SNR (dB)",
        })
        .y_desc(metric.label())
        .draw()
        .map_err(|e| fail(e.to_string()))?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let style = ShapeStyle { color, filled: !s.baseline, stroke_width: 2 };
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), style))
            .map_err(|e| fail(e.to_string()))?
            .label(s.name.clone())
            .legend(move |(lx, ly)| PathElement::new(vec![(lx, ly), (lx + 18, ly)], color));
        chart
            .draw_series(s.points.iter().map(|&p| {
                if s.baseline {
                    Cross::new(p, 5, style).into_dyn()
                } else {
                    Circle::new(p, 4, style).into_dyn()
                }
            }))
            .map_err(|e| fail(e.to_string()))?;
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(|e| fail(e.to_string()))?;
    root.present().map_err(|e| fail(e.to_string()))
}

/// Writes the four standard plots into `dir`: each metric against CBR (one
/// line per SNR) and against SNR (one line per CBR), with baselines at the
/// matching fixed value overlaid.
pub fn plot_results(dir: &Path, rows: &[ResultRow], baselines: &[BaselinePoint]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut written = Vec::new();
    for metric in [Metric::Psnr, Metric::MsSsimDb] {
        let tag = match metric {
            Metric::Psnr => "psnr",
            Metric::MsSsimDb => "ms_ssim_db",
        };
        for x in [Axis::Cbr, Axis::Snr] {
            let mut series = aggregate(rows, metric, x);
            let mut fixed: Vec<f64> = rows
                .iter()
                .map(|r| match x {
                    Axis::Cbr => r.snr_db,
                    Axis::Snr => r.cbr,
                })
                .collect();
            fixed.sort_by(f64::total_cmp);
            fixed.dedup();
            for f in fixed {
                series.extend(baseline_series(baselines, metric, x, f));
            }
            let (name, title) = match x {
                Axis::Cbr => (format!("{tag}_vs_cbr.svg"), format!("{} versus bandwidth ratio", metric.label())),
                Axis::Snr => (format!("{tag}_vs_snr.svg"), format!("{} versus channel SNR", metric.label())),
            };
            let path = dir.join(name);
            draw(&path, &title, x, metric, &series)?;
            written.push(path);
        }
    }
    Ok(written)
}
