//! SVG line charts of the training CSVs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::train::{Manifest, EVAL_CSV, MANIFEST, METRICS_CSV};
use super::HarnessError;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Figure {
    pub name: &'static str,
    pub title: &'static str,
    pub series: Vec<Series>,
    /// Vertical dashed markers at these x positions.
    pub markers: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlotReport {
    pub images: Vec<PathBuf>,
    pub tables: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

/// Trailing moving average; window 1 returns the input unchanged.
pub fn smooth(points: &[(f64, f64)], window: usize) -> Vec<(f64, f64)> {
    let w = window.max(1);
    if w == 1 {
        return points.to_vec();
    }
    let mut sum = 0.0;
    let mut out = Vec::with_capacity(points.len());
    for (i, &(x, y)) in points.iter().enumerate() {
        sum += y;
        if i >= w {
            sum -= points[i - w].1;
        }
        out.push((x, sum / (i + 1).min(w) as f64));
    }
    out
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<Option<Table>, HarnessError> {
    if !path.exists() {
        return Ok(None);
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    let header = r.headers().map_err(|e| HarnessError::Runtime(e.to_string()))?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(|e| HarnessError::Runtime(e.to_string()))?.iter().map(str::to_string).collect());
    }
    Ok(Some(Table { header, rows }))
}

impl Table {
    fn column(&self, x: &str, y: &str) -> Option<Vec<(f64, f64)>> {
        let xi = self.header.iter().position(|h| h == x)?;
        let yi = self.header.iter().position(|h| h == y)?;
        Some(
            self.rows
                .iter()
                .filter_map(|r| Some((r.get(xi)?.parse().ok()?, r.get(yi)?.parse().ok()?)))
                .filter(|(_, v): &(f64, f64)| v.is_finite())
                .collect(),
        )
    }
}

pub fn render_svg(fig: &Figure) -> String {
    let (w, h) = (720.0, 420.0);
    let (l, r, t, b) = (70.0, 160.0, 40.0, 50.0);
    let pts = fig.series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    for &m in &fig.markers {
        x0 = x0.min(m);
        x1 = x1.max(m);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let px = |x: f64| l + (x - x0) / (x1 - x0) * (w - l - r);
    let py = |y: f64| h - b - (y - y0) / (y1 - y0) * (h - t - b);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="24" font-family="sans-serif" font-size="16">{}</text>"#, l, fig.title).unwrap();
    writeln!(
        s,
        r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - l - r,
        h - t - b
    )
    .unwrap();
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#, px(fx), h - b + 16.0, tick(fx)).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#, l - 6.0, py(fy) + 4.0, tick(fy)).unwrap();
    }
    writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle">step</text>"#, (l + w - r) / 2.0, h - 10.0).unwrap();
    for &m in &fig.markers {
        writeln!(
            s,
            r#"<line class="marker" x1="{0:.2}" y1="{1}" x2="{0:.2}" y2="{2}" stroke="gray" stroke-dasharray="6,4"/>"#,
            px(m),
            t,
            h - b
        )
        .unwrap();
    }
    for (k, series) in fig.series.iter().enumerate() {
        let c = colors[k % colors.len()];
        let path: Vec<String> = series.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{}"/>"#, path.join(" ")).unwrap();
        let ly = t + 16.0 + 18.0 * k as f64;
        writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{c}" stroke-width="2"/>"#, w - r + 10.0, w - r + 30.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">{}</text>"#, w - r + 36.0, ly + 4.0, series.name).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

fn write_smoothed(path: &Path, fig: &Figure) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    w.write_record(["series", "step", "value"]).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    for s in &fig.series {
        for (x, y) in &s.points {
            w.write_record([s.name.clone(), x.to_string(), y.to_string()])
                .map_err(|e| HarnessError::Runtime(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| HarnessError::Runtime(e.to_string()))
}

/// Builds the figures of a run directory without writing anything.
pub fn figures(run_dir: &Path, window: usize, warnings: &mut Vec<String>) -> Result<Vec<Figure>, HarnessError> {
    let Some(metrics) = read_table(&run_dir.join(METRICS_CSV))? else {
        warnings.push(format!("{} not found; nothing to plot", run_dir.join(METRICS_CSV).display()));
        return Ok(Vec::new());
    };
    if metrics.rows.is_empty() {
        warnings.push(format!("{} has no rows; nothing to plot", run_dir.join(METRICS_CSV).display()));
        return Ok(Vec::new());
    }
    let eval = read_table(&run_dir.join(EVAL_CSV))?;
    let horizon = std::fs::read_to_string(run_dir.join(MANIFEST))
        .ok()
        .and_then(|t| serde_json::from_str::<Manifest>(&t).ok())
        .filter(|m| m.config.guidance.vmr_enabled || m.config.guidance.awag_enabled)
        .map(|m| m.config.guidance.resolved_horizon(m.config.total_steps) as f64);

    let specs: [(&'static str, &'static str, &[&str], bool); 4] = [
        ("returns", "Episode return and route meters", &["episode_return", "eval_return", "route_m"], false),
        ("losses", "Critic and actor losses", &["critic_loss", "actor_loss"], false),
        ("aux_losses", "Guidance losses", &["vmr_loss", "awag_loss"], true),
        ("feedback", "Feedback availability and buffer margin", &["availability", "buffer_margin", "margin"], false),
    ];
    let mut out = Vec::new();
    for (name, title, cols, marker) in specs {
        let mut series = Vec::new();
        for col in cols {
            let raw = if *col == "eval_return" {
                eval.as_ref().and_then(|e| e.column("step", "mean_return"))
            } else {
                metrics.column("step", col)
            };
            match raw {
                None => warnings.push(format!("{name}: column `{col}` missing, skipped")),
                Some(p) if p.is_empty() => {}
                Some(p) => series.push(Series { name: col.to_string(), points: smooth(&p, window) }),
            }
        }
        if series.is_empty() {
            warnings.push(format!("{name}: no data, figure skipped"));
            continue;
        }
        let markers = if marker { horizon.into_iter().collect() } else { Vec::new() };
        out.push(Figure { name, title, series, markers });
    }
    Ok(out)
}

/// Writes `plots/<figure>.svg` and `plots/<figure>.csv` for a run directory.
pub fn plot(run_dir: &Path, window: usize) -> Result<PlotReport, HarnessError> {
    let mut report = PlotReport::default();
    let figs = figures(run_dir, window, &mut report.warnings)?;
    if !figs.is_empty() {
        let dir = run_dir.join("plots");
        std::fs::create_dir_all(&dir).map_err(|e| HarnessError::Runtime(e.to_string()))?;
        for f in &figs {
            let svg = dir.join(format!("{}.svg", f.name));
            std::fs::write(&svg, render_svg(f)).map_err(|e| HarnessError::Runtime(e.to_string()))?;
            let csv = dir.join(format!("{}.csv", f.name));
            write_smoothed(&csv, f)?;
            report.images.push(svg);
            report.tables.push(csv);
        }
    }
    for w in &report.warnings {
        log::warn!("{w}");
    }
    Ok(report)
}
