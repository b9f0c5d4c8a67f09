//! Deterministic SVG line charts from step-indexed csv files.

use std::fmt::Write as _;

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_Y: f64 = 40.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Header columns of a csv text.
pub fn csv_header(text: &str) -> Vec<String> {
    text.lines().next().unwrap_or("").split(',').map(|s| s.trim().to_string()).collect()
}

/// Reads `column` (default: the second column) against the first column.
pub fn series_from_csv(name: &str, text: &str, column: Option<&str>) -> Result<Series> {
    let header = csv_header(text);
    if header.len() < 2 {
        return Err(Error::Parse { location: format!("{name}: line 1"), message: "need a step column and a value column".into() });
    }
    let col = match column {
        Some(c) => header.iter().position(|h| h == c).ok_or_else(|| Error::Parse {
            location: format!("{name}: line 1"),
            message: format!("no column {c:?} (have {})", header.join(",")),
        })?,
        None => 1,
    };
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let bad = |m: String| Error::Parse { location: format!("{name}: line {}", n + 1), message: m };
        if fields.len() != header.len() {
            return Err(bad(format!("{} fields, header has {}", fields.len(), header.len())));
        }
        let x: f64 = fields[0].trim().parse().map_err(|_| bad(format!("bad step {:?}", fields[0])))?;
        let y: f64 = fields[col].trim().parse().map_err(|_| bad(format!("bad value {:?}", fields[col])))?;
        points.push((x, y));
    }
    Ok(Series { name: name.to_string(), points })
}

/// Parses several csvs that must share one header.
pub fn load_series(files: &[(String, String)], column: Option<&str>) -> Result<Vec<Series>> {
    let first = files.first().map(|f| csv_header(&f.1)).unwrap_or_default();
    files
        .iter()
        .map(|(name, text)| {
            let h = csv_header(text);
            if h != first {
                return Err(Error::Parse {
                    location: format!("{name}: line 1"),
                    message: format!("columns {} differ from {}", h.join(","), first.join(",")),
                });
            }
            series_from_csv(name, text, column)
        })
        .collect()
}

fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    (0..=4).map(|i| lo + (hi - lo) * i as f64 / 4.0).collect()
}

fn fmt_tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-2..1e5).contains(&a) {
        format!("{v:.2e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// One polyline per series, shared axes, legend on the right.
pub fn render_svg(series: &[Series], title: &str, x_label: &str, y_label: &str) -> Result<String> {
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
    if series.is_empty() || pts.is_empty() {
        return Err(Error::Parse { location: "plot".into(), message: "nothing to plot".into() });
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let pw = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let ph = HEIGHT - 2.0 * MARGIN_Y;
    let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| MARGIN_Y + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="13">{}</text>"#, MARGIN_LEFT + pw / 2.0, escape(title)).unwrap();
    writeln!(
        s,
        r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_Y}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    for t in nice_ticks(x0, x1) {
        let x = sx(t);
        writeln!(s, r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#, MARGIN_Y + ph, MARGIN_Y + ph + 4.0).unwrap();
        writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, MARGIN_Y + ph + 16.0, fmt_tick(t)).unwrap();
    }
    for t in nice_ticks(y0, y1) {
        let y = sy(t);
        writeln!(s, r#"<line x1="{:.2}" y1="{y:.2}" x2="{MARGIN_LEFT}" y2="{y:.2}" stroke="black"/>"#, MARGIN_LEFT - 4.0).unwrap();
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, MARGIN_LEFT - 6.0, y + 4.0, fmt_tick(t)).unwrap();
    }
    writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, MARGIN_LEFT + pw / 2.0, HEIGHT - 6.0, escape(x_label)).unwrap();
    writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        MARGIN_Y + ph / 2.0,
        MARGIN_Y + ph / 2.0,
        escape(y_label)
    )
    .unwrap();
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, coords.join(" ")).unwrap();
        let ly = MARGIN_Y + 14.0 + 18.0 * i as f64;
        let lx = WIDTH - MARGIN_RIGHT + 10.0;
        writeln!(s, r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&ser.name)).unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}
