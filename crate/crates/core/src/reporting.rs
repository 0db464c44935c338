//! Figure rendering and summary tables.
//!
//! Curves are drawn as self-contained SVG, one panel per file: mean line
//! plus a +/-1 standard-deviation band per configuration, compute on a
//! log10 x-axis, loss on a log10 y-axis, accuracy on a linear [0, 1] axis.
//! Rendering is a pure function of its inputs, byte for byte.

use std::fmt::Write as _;

use thiserror::Error;

use crate::sweeps::{AggregateCurve, AggregatePoint, MeanStd};

/// Values at or below zero cannot sit on a log axis; they are clamped here.
pub const LOG_FLOOR: f64 = 1e-8;

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 560.0;
const MARGIN_LEFT: f64 = 72.0;
const MARGIN_RIGHT: f64 = 230.0;
const MARGIN_TOP: f64 = 48.0;
const MARGIN_BOTTOM: f64 = 56.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("no curves to plot")]
    EmptySeries,
    #[error("curve {0} has no finite points for this panel")]
    NoFinitePoints(String),
}

/// The four panels of a training-dynamics figure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Panel {
    TrainLoss,
    TrainAccuracy,
    TestLoss,
    TestAccuracy,
}

impl Panel {
    pub const ALL: [Panel; 4] =
        [Panel::TrainLoss, Panel::TrainAccuracy, Panel::TestLoss, Panel::TestAccuracy];

    pub fn slug(&self) -> &'static str {
        match self {
            Panel::TrainLoss => "train_loss",
            Panel::TrainAccuracy => "train_acc",
            Panel::TestLoss => "test_loss",
            Panel::TestAccuracy => "test_acc",
        }
    }

    pub fn axis_label(&self) -> &'static str {
        match self {
            Panel::TrainLoss => "train loss",
            Panel::TrainAccuracy => "train accuracy",
            Panel::TestLoss => "test loss",
            Panel::TestAccuracy => "test accuracy",
        }
    }

    fn is_loss(&self) -> bool {
        matches!(self, Panel::TrainLoss | Panel::TestLoss)
    }

    fn metric(&self, point: &AggregatePoint) -> MeanStd {
        match self {
            Panel::TrainLoss => point.train_loss,
            Panel::TrainAccuracy => point.train_acc,
            Panel::TestLoss => point.test_loss,
            Panel::TestAccuracy => point.test_acc,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlotSpec {
    pub panel: Panel,
    pub title: String,
}

impl PlotSpec {
    pub fn new(panel: Panel, title: impl Into<String>) -> Self {
        Self { panel, title: title.into() }
    }
}

fn fmt2(x: f64) -> String {
    format!("{x:.2}")
}

/// Tick label like `1e12` for a decade exponent.
fn decade_label(exp: i32) -> String {
    format!("1e{exp}")
}

struct Series {
    label: String,
    color: &'static str,
    // (x = log10 flops, mean, lo, hi) in axis units.
    points: Vec<(f64, f64, f64, f64)>,
}

/// Renders one panel for a set of aggregate curves as a complete SVG
/// document.
pub fn render_figure(curves: &[AggregateCurve], spec: &PlotSpec) -> Result<String, ReportError> {
    if curves.is_empty() {
        return Err(ReportError::EmptySeries);
    }
    let log_y = spec.panel.is_loss();
    let mut series = Vec::new();
    for (index, curve) in curves.iter().enumerate() {
        let mut points = Vec::new();
        for point in &curve.points {
            let value = spec.panel.metric(point);
            if !value.mean.is_finite() || point.cum_flops == 0 {
                continue;
            }
            let x = (point.cum_flops as f64).log10();
            let (mean, lo, hi) = if log_y {
                let clamp = |v: f64| v.max(LOG_FLOOR).log10();
                (clamp(value.mean), clamp(value.mean - value.std), clamp(value.mean + value.std))
            } else {
                (value.mean, value.mean - value.std, value.mean + value.std)
            };
            points.push((x, mean, lo, hi));
        }
        if points.is_empty() {
            return Err(ReportError::NoFinitePoints(curve.label.clone()));
        }
        series.push(Series {
            label: curve.label.clone(),
            color: PALETTE[index % PALETTE.len()],
            points,
        });
    }

    // Axis ranges: x spans whole decades around the data; y likewise for
    // losses, fixed [0, 1] for accuracies.
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let x_max_raw = xs.clone().fold(f64::MIN, f64::max);
    let x_min_raw = xs.fold(f64::MAX, f64::min);
    let x_min = x_min_raw.floor();
    let x_max = x_max_raw.ceil().max(x_min + 1.0);
    let (y_min, y_max) = if log_y {
        let ys = series.iter().flat_map(|s| s.points.iter().flat_map(|p| [p.1, p.2, p.3]));
        let max_raw = ys.clone().fold(f64::MIN, f64::max);
        let min_raw = ys.fold(f64::MAX, f64::min);
        let min = min_raw.floor();
        (min, max_raw.ceil().max(min + 1.0))
    } else {
        (0.0, 1.0)
    };

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let to_px = |x: f64, y: f64| -> (f64, f64) {
        let px = MARGIN_LEFT + (x - x_min) / (x_max - x_min) * plot_w;
        let py = MARGIN_TOP + (y_max - y) / (y_max - y_min) * plot_h;
        (px, py)
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(svg, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"26\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>",
        fmt2(MARGIN_LEFT + plot_w / 2.0),
        xml_escape(&spec.title)
    );

    // Gridlines and tick labels.
    let mut exp = x_min as i32;
    while exp <= x_max as i32 {
        let (px, _) = to_px(exp as f64, y_min);
        let _ = writeln!(
            svg,
            "<line x1=\"{x}\" y1=\"{y1}\" x2=\"{x}\" y2=\"{y2}\" stroke=\"#dddddd\" stroke-width=\"1\"/>",
            x = fmt2(px),
            y1 = fmt2(MARGIN_TOP),
            y2 = fmt2(MARGIN_TOP + plot_h)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{x}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{label}</text>",
            x = fmt2(px),
            y = fmt2(MARGIN_TOP + plot_h + 18.0),
            label = decade_label(exp)
        );
        exp += 1;
    }
    if log_y {
        let mut exp = y_min as i32;
        while exp as f64 <= y_max {
            let (_, py) = to_px(x_min, exp as f64);
            let _ = writeln!(
                svg,
                "<line x1=\"{x1}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"#dddddd\" stroke-width=\"1\"/>",
                x1 = fmt2(MARGIN_LEFT),
                x2 = fmt2(MARGIN_LEFT + plot_w),
                y = fmt2(py)
            );
            let _ = writeln!(
                svg,
                "<text x=\"{x}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{label}</text>",
                x = fmt2(MARGIN_LEFT - 6.0),
                y = fmt2(py + 4.0),
                label = decade_label(exp)
            );
            exp += 1;
        }
    } else {
        for i in 0..=4 {
            let y = i as f64 * 0.25;
            let (_, py) = to_px(x_min, y);
            let _ = writeln!(
                svg,
                "<line x1=\"{x1}\" y1=\"{py}\" x2=\"{x2}\" y2=\"{py}\" stroke=\"#dddddd\" stroke-width=\"1\"/>",
                x1 = fmt2(MARGIN_LEFT),
                x2 = fmt2(MARGIN_LEFT + plot_w),
                py = fmt2(py)
            );
            let _ = writeln!(
                svg,
                "<text x=\"{x}\" y=\"{yl}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{y:.2}</text>",
                x = fmt2(MARGIN_LEFT - 6.0),
                yl = fmt2(py + 4.0)
            );
        }
    }

    // Bands first so mean lines draw on top of them.
    for s in &series {
        let mut band = String::new();
        for &(x, _, _, hi) in &s.points {
            let (px, py) = to_px(x, hi);
            let _ = write!(band, "{},{} ", fmt2(px), fmt2(py));
        }
        for &(x, _, lo, _) in s.points.iter().rev() {
            let (px, py) = to_px(x, lo);
            let _ = write!(band, "{},{} ", fmt2(px), fmt2(py));
        }
        let _ = writeln!(
            svg,
            "<polygon points=\"{}\" fill=\"{}\" fill-opacity=\"0.18\" stroke=\"none\"/>",
            band.trim_end(),
            s.color
        );
    }
    for s in &series {
        let mut line = String::new();
        for &(x, mean, _, _) in &s.points {
            let (px, py) = to_px(x, mean);
            let _ = write!(line, "{},{} ", fmt2(px), fmt2(py));
        }
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.8\"/>",
            line.trim_end(),
            s.color
        );
    }

    // Axis frame, labels, legend.
    let _ = writeln!(
        svg,
        "<rect x=\"{x}\" y=\"{y}\" width=\"{w}\" height=\"{h}\" fill=\"none\" stroke=\"#333333\" stroke-width=\"1\"/>",
        x = fmt2(MARGIN_LEFT),
        y = fmt2(MARGIN_TOP),
        w = fmt2(plot_w),
        h = fmt2(plot_h)
    );
    let _ = writeln!(
        svg,
        "<text x=\"{x}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">training FLOPs</text>",
        x = fmt2(MARGIN_LEFT + plot_w / 2.0),
        y = fmt2(HEIGHT - 14.0)
    );
    let _ = writeln!(
        svg,
        "<text x=\"18\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 18 {y})\">{label}</text>",
        y = fmt2(MARGIN_TOP + plot_h / 2.0),
        label = spec.panel.axis_label()
    );
    for (i, s) in series.iter().enumerate() {
        let ly = MARGIN_TOP + 10.0 + i as f64 * 20.0;
        let lx = MARGIN_LEFT + plot_w + 12.0;
        let _ = writeln!(
            svg,
            "<line x1=\"{x1}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"{color}\" stroke-width=\"3\"/>",
            x1 = fmt2(lx),
            x2 = fmt2(lx + 22.0),
            y = fmt2(ly),
            color = s.color
        );
        let _ = writeln!(
            svg,
            "<text x=\"{x}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"12\">{label}</text>",
            x = fmt2(lx + 28.0),
            y = fmt2(ly + 4.0),
            label = xml_escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes the four panels for one sweep as
/// `{sweep_id}_{family}_{panel}.svg`, returning the file paths.
pub fn write_figure_set(
    curves: &[AggregateCurve],
    sweep_id: &str,
    family_slug: &str,
    out_dir: &std::path::Path,
) -> Result<Vec<std::path::PathBuf>, FigureError> {
    std::fs::create_dir_all(out_dir).map_err(FigureError::Io)?;
    let mut paths = Vec::new();
    for panel in Panel::ALL {
        let title = format!("{} vs training compute", panel.axis_label());
        let svg = render_figure(curves, &PlotSpec::new(panel, title))
            .map_err(FigureError::Report)?;
        let path = out_dir.join(format!("{sweep_id}_{family_slug}_{}.svg", panel.slug()));
        std::fs::write(&path, svg).map_err(FigureError::Io)?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Error)]
pub enum FigureError {
    #[error(transparent)]
    Report(ReportError),
    #[error(transparent)]
    Io(std::io::Error),
}

/// Final-point summary: one CSV row per configuration, sorted by digest.
pub fn summary_table(curves: &[AggregateCurve]) -> String {
    let mut rows: Vec<String> = curves
        .iter()
        .filter_map(|curve| {
            let last = curve.points.last()?;
            Some(format!(
                "{},{},{},{},{},{},{},{}",
                curve.config_digest,
                escape_csv(&curve.label),
                curve.seeds,
                last.cum_flops,
                last.test_acc.mean,
                last.test_acc.std,
                last.test_loss.mean,
                last.test_loss.std
            ))
        })
        .collect();
    rows.sort();
    let mut out = String::from(
        "config_digest,label,seeds,final_cum_flops,test_acc_mean,test_acc_std,test_loss_mean,test_loss_std\n",
    );
    for row in rows {
        out.push_str(&row);
        out.push('\n');
    }
    out
}

fn escape_csv(field: &str) -> String {
    if field.contains(',') || field.contains('"') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sweeps::aggregate_group;
    use crate::training::MetricRecord;

    fn record(epoch: u64, flops: u64, loss: f64, acc: f64) -> MetricRecord {
        MetricRecord {
            epoch,
            cum_flops: flops,
            train_loss: loss,
            train_acc: acc,
            test_loss: loss * 1.5,
            test_acc: acc * 0.9,
            test_acc_y: acc,
            test_acc_n: acc,
            seconds: 0.0,
            seed: 0,
            config_digest: "d".into(),
        }
    }

    fn sample_curves() -> Vec<AggregateCurve> {
        let a = vec![record(1, 1_000_000, 2.0, 0.5), record(50, 50_000_000, 0.5, 0.8)];
        let b = vec![record(1, 1_000_000, 1.8, 0.6), record(50, 50_000_000, 0.4, 1.0)];
        vec![aggregate_group("abc", "grid n=10 k=2 d_emb=8", &[a, b]).unwrap()]
    }

    #[test]
    fn rendering_is_deterministic() {
        let curves = sample_curves();
        let spec = PlotSpec::new(Panel::TestAccuracy, "test accuracy vs training compute");
        let one = render_figure(&curves, &spec).unwrap();
        let two = render_figure(&curves, &spec).unwrap();
        assert_eq!(one, two);
        assert!(one.starts_with("<svg"));
        assert!(one.contains("polyline"));
        assert!(one.contains("grid n=10 k=2 d_emb=8"));
    }

    #[test]
    fn zero_std_band_collapses_onto_the_line() {
        let run = vec![record(1, 1_000_000, 1.0, 0.5), record(2, 2_000_000, 0.8, 0.6)];
        let curve = aggregate_group("d", "single", &[run]).unwrap();
        let svg =
            render_figure(&[curve], &PlotSpec::new(Panel::TrainLoss, "loss")).unwrap();
        // With one seed the band polygon's upper edge equals its lower edge:
        // the first and last coordinate pairs coincide.
        let band = svg.lines().find(|l| l.starts_with("<polygon")).unwrap();
        let points: Vec<&str> = band
            .split("points=\"")
            .nth(1)
            .unwrap()
            .split('"')
            .next()
            .unwrap()
            .split_whitespace()
            .collect();
        assert_eq!(points.first(), points.last());
    }

    #[test]
    fn zero_loss_is_clamped_to_the_floor() {
        let run = vec![record(1, 1_000_000, 0.0, 0.5), record(2, 2_000_000, 0.0, 0.5)];
        let curve = aggregate_group("d", "zeros", &[run]).unwrap();
        let svg = render_figure(&[curve], &PlotSpec::new(Panel::TrainLoss, "loss")).unwrap();
        // The floor decade shows up on the y-axis.
        assert!(svg.contains("1e-8"), "expected the log floor tick, got:\n{svg}");
    }

    #[test]
    fn empty_input_is_an_error() {
        let err = render_figure(&[], &PlotSpec::new(Panel::TestLoss, "t")).unwrap_err();
        assert_eq!(err, ReportError::EmptySeries);
    }

    #[test]
    fn every_series_appears_in_the_legend() {
        let a = vec![record(1, 1_000_000, 1.0, 0.4)];
        let b = vec![record(1, 1_000_000, 0.9, 0.5)];
        let curves = vec![
            aggregate_group("d1", "alpha", &[a]).unwrap(),
            aggregate_group("d2", "beta", &[b]).unwrap(),
        ];
        let svg =
            render_figure(&curves, &PlotSpec::new(Panel::TrainAccuracy, "acc")).unwrap();
        assert!(svg.contains("alpha") && svg.contains("beta"));
    }

    #[test]
    fn figure_set_writes_four_panels() {
        let dir = std::env::temp_dir().join(format!("reachlab-figs-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let paths = write_figure_set(&sample_curves(), "demo", "model_scaling", &dir).unwrap();
        assert_eq!(paths.len(), 4);
        let names: Vec<String> =
            paths.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert!(names.contains(&"demo_model_scaling_train_loss.svg".to_string()));
        assert!(names.contains(&"demo_model_scaling_test_acc.svg".to_string()));
        for path in &paths {
            assert!(path.exists());
        }
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn summary_table_is_sorted_and_complete() {
        let a = vec![record(1, 1_000, 1.0, 0.4), record(2, 2_000, 0.5, 0.9)];
        let b = vec![record(1, 1_000, 1.1, 0.3), record(2, 2_000, 0.6, 0.7)];
        let curves = vec![
            aggregate_group("zzz", "last", &[a]).unwrap(),
            aggregate_group("aaa", "first", &[b]).unwrap(),
        ];
        let table = summary_table(&curves);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("config_digest,label"));
        assert!(lines[1].starts_with("aaa,"));
        assert!(lines[2].starts_with("zzz,"));
        // Single seed: std columns are exactly zero.
        assert!(lines[1].ends_with(",0") || lines[1].contains(",0,"));
    }
}
