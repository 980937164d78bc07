//! Learning curves as a standalone SVG. Output depends only on the input
//! rows, so identical inputs give byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use ncdpo::metrics::{MetricsRow, METRICS_HEADER};

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Read a metrics CSV. Errors name the offending line.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let header = reader
        .headers()
        .map_err(|e| anyhow!("{}:1: {e}", path.display()))?
        .clone();
    if header.iter().ne(METRICS_HEADER.iter().copied()) {
        bail!(
            "{}:1: header does not match the metrics columns {}",
            path.display(),
            METRICS_HEADER.join(",")
        );
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            anyhow!("{}:{line}: {e}", path.display())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let fields: Vec<&str> = rec.iter().collect();
        rows.push(
            MetricsRow::from_record(&fields)
                .map_err(|e| anyhow!("{}:{line}: {e}", path.display()))?,
        );
    }
    Ok(rows)
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record(r.to_record())?;
    }
    w.flush()?;
    Ok(())
}

fn column(row: &MetricsRow, metric: &str) -> Result<f64> {
    Ok(match metric {
        "mean_return" => row.mean_return,
        "success_rate" => row.success_rate,
        "actor_loss" => row.actor_loss,
        "value_loss" => row.value_loss,
        "bc_loss" => row.bc_loss,
        "mean_ratio" => row.mean_ratio,
        "clip_fraction" => row.clip_fraction,
        "entropy" => row.entropy,
        "wall_time_s" => row.wall_time_s,
        other => bail!("cannot plot column {other:?}"),
    })
}

/// Mean and population standard deviation across runs at each row index,
/// over the finite values present. Truncated to the shortest run.
pub struct Curve {
    pub label: String,
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn aggregate(label: &str, runs: &[Vec<MetricsRow>], metric: &str) -> Result<Curve> {
    let len = runs.iter().map(Vec::len).min().unwrap_or(0);
    let mut curve = Curve {
        label: label.to_string(),
        x: Vec::new(),
        mean: Vec::new(),
        std: Vec::new(),
    };
    for i in 0..len {
        let mut vals = Vec::with_capacity(runs.len());
        for run in runs {
            let v = column(&run[i], metric)?;
            if v.is_finite() {
                vals.push(v);
            }
        }
        if vals.is_empty() {
            continue;
        }
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        curve.x.push(runs[0][i].env_steps as f64);
        curve.mean.push(m);
        curve.std.push(var.sqrt());
    }
    Ok(curve)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 1.0, hi + 1.0);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

pub fn render_svg(curves: &[Curve], metric: &str) -> String {
    let (x0, x1) = range(curves.iter().flat_map(|c| c.x.iter().copied()));
    let (y0, y1) = range(
        curves
            .iter()
            .flat_map(|c| c.mean.iter().zip(&c.std).flat_map(|(m, s)| [m - s, m + s])),
    );
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black" stroke-width="1"/>"#
    );
    for i in 0..=5 {
        let t = i as f64 / 5.0;
        let xv = x0 + t * (x1 - x0);
        let yv = y0 + t * (y1 - y0);
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            s,
            r#"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            TOP + ph,
            TOP + ph + 5.0,
            TOP + ph + 20.0,
            tick_label(xv)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{py:.2}" x2="{LEFT}" y2="{py:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 5.0,
            LEFT - 8.0,
            py + 4.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">env_steps</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="{:.2}" text-anchor="middle" transform="rotate(-90 20 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(metric)
    );
    for (ci, c) in curves.iter().enumerate() {
        let color = COLORS[ci % COLORS.len()];
        if !c.x.is_empty() {
            let upper =
                c.x.iter()
                    .zip(c.mean.iter().zip(&c.std))
                    .map(|(x, (m, d))| (sx(*x), sy(m + d)));
            let lower =
                c.x.iter()
                    .zip(c.mean.iter().zip(&c.std))
                    .rev()
                    .map(|(x, (m, d))| (sx(*x), sy(m - d)));
            let band: Vec<String> = upper
                .chain(lower)
                .map(|(x, y)| format!("{x:.2},{y:.2}"))
                .collect();
            let _ = writeln!(
                s,
                r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                band.join(" ")
            );
            let line: Vec<String> =
                c.x.iter()
                    .zip(&c.mean)
                    .map(|(x, m)| format!("{:.2},{:.2}", sx(*x), sy(*m)))
                    .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                line.join(" ")
            );
        }
        let ly = TOP + 10.0 + 20.0 * ci as f64;
        let lx = WIDTH - RIGHT + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{:.2}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&c.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn tick_label(v: f64) -> String {
    if v.abs() >= 1e4 {
        format!("{v:.3e}")
    } else {
        format!("{v:.2}")
    }
}
