use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::{io_failure, CmdResult, Failure};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// `records_flip0.5.csv` -> `0.5`
fn flip_from_name(path: &Path) -> Option<String> {
    let stem = path.file_stem()?.to_str()?;
    let rho = stem.rsplit_once("flip")?.1;
    rho.parse::<f64>().ok().map(|_| rho.to_string())
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize, Failure> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Failure::Input(format!("{}: no column `{name}`", path.display())))
}

type Series = BTreeMap<String, Vec<(f64, f64)>>;

fn read_series(files: &[PathBuf], x: &str, y: &str, group_by: Option<&str>) -> Result<Series, Failure> {
    let mut series = Series::new();
    for path in files {
        let mut reader =
            csv::Reader::from_path(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?
            .clone();
        let (xi, yi) = (column(&headers, x, path)?, column(&headers, y, path)?);
        let fixed_group = match group_by {
            Some("flip_prob") if !headers.iter().any(|h| h == "flip_prob") => Some(format!(
                "flip_prob={}",
                flip_from_name(path).ok_or_else(|| Failure::Input(format!(
                    "{}: cannot read a flip probability from the file name",
                    path.display()
                )))?
            )),
            Some(_) => None,
            None if files.len() > 1 => Some(path.display().to_string()),
            None => Some(y.to_string()),
        };
        let gi = match (&fixed_group, group_by) {
            (None, Some(g)) => Some(column(&headers, g, path)?),
            _ => None,
        };
        for (line, row) in reader.records().enumerate() {
            let row = row.map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
            let parse = |i: usize| -> Result<Option<f64>, Failure> {
                let cell = row.get(i).unwrap_or("").trim();
                if cell.is_empty() {
                    return Ok(None);
                }
                cell.parse().map(Some).map_err(|_| {
                    Failure::Input(format!(
                        "{}: row {}: `{cell}` is not a number",
                        path.display(),
                        line + 2
                    ))
                })
            };
            let (Some(xv), Some(yv)) = (parse(xi)?, parse(yi)?) else {
                continue;
            };
            let key = match (&fixed_group, gi) {
                (Some(k), _) => k.clone(),
                (None, Some(i)) => format!("{}={}", group_by.unwrap_or(""), row.get(i).unwrap_or("")),
                (None, None) => unreachable!("group column resolved above"),
            };
            series.entry(key).or_default().push((xv, yv));
        }
    }
    if series.values().all(Vec::is_empty) {
        return Err(Failure::Input("no data rows to plot".into()));
    }
    Ok(series)
}

/// Mean of `y` at each distinct `x`, in ascending `x`.
fn aggregate(points: &mut [(f64, f64)]) -> Vec<(f64, f64)> {
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64, usize)> = Vec::new();
    for &(x, y) in points.iter() {
        match out.last_mut() {
            Some(last) if last.0 == x => {
                last.1 += y;
                last.2 += 1;
            }
            _ => out.push((x, y, 1)),
        }
    }
    out.into_iter().map(|(x, s, n)| (x, s / n as f64)).collect()
}

fn label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-3) {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render_svg(series: &BTreeMap<String, Vec<(f64, f64)>>, x: &str, y: &str, log_y: bool) -> String {
    let all: Vec<(f64, f64)> = series.values().flatten().copied().collect();
    let span = |vals: Vec<f64>| {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, hi + 0.5)
        }
    };
    let (x0, x1) = span(all.iter().map(|p| p.0).collect());
    let (y0, y1) = span(all.iter().map(|p| p.1).collect());
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let sx = |v: f64| LEFT + (v - x0) / (x1 - x0) * pw;
    let sy = |v: f64| TOP + (1.0 - (v - y0) / (y1 - y0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let ylab = if log_y { format!("1e{}", label(yv)) } else { label(yv) };
        let _ = writeln!(
            svg,
            r##"<line x1="{px:.1}" y1="{TOP}" x2="{px:.1}" y2="{b:.1}" stroke="#ddd"/><text x="{px:.1}" y="{t:.1}" text-anchor="middle">{xl}</text>"##,
            px = sx(xv),
            b = TOP + ph,
            t = TOP + ph + 18.0,
            xl = label(xv)
        );
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{py:.1}" x2="{r:.1}" y2="{py:.1}" stroke="#ddd"/><text x="{t:.1}" y="{ty:.1}" text-anchor="end">{ylab}</text>"##,
            py = sy(yv),
            r = LEFT + pw,
            t = LEFT - 6.0,
            ty = sy(yv) + 4.0
        );
    }
    let ytitle = if log_y { format!("log10 {y}") } else { y.to_string() };
    let _ = writeln!(
        svg,
        r#"<text x="{cx:.1}" y="{by:.1}" text-anchor="middle">{}</text>"#,
        escape(x),
        cx = LEFT + pw / 2.0,
        by = HEIGHT - 15.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="20" y="{cy:.1}" text-anchor="middle" transform="rotate(-90 20 {cy:.1})">{}</text>"#,
        escape(&ytitle),
        cy = TOP + ph / 2.0
    );
    for (i, (name, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = points
            .iter()
            .map(|&(a, b)| format!("{:.2},{:.2}", sx(a), sy(b)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            coords.join(" ")
        );
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{x2}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{tx}" y="{ty}">{}</text>"#,
            escape(name),
            x2 = lx + 20.0,
            tx = lx + 26.0,
            ty = ly + 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn cmd_plot(files: &[PathBuf], x: &str, y: &str, group_by: Option<&str>, log_y: bool, out: &Path) -> CmdResult {
    let series = read_series(files, x, y, group_by)?;
    let mut lines = BTreeMap::new();
    for (name, mut points) in series {
        let mut agg = aggregate(&mut points);
        if log_y {
            let before = agg.len();
            agg.retain(|p| p.1 > 0.0);
            if agg.len() < before {
                eprintln!(
                    "warning: {name}: dropped {} non-positive point(s) on the log axis",
                    before - agg.len()
                );
            }
            agg.iter_mut().for_each(|p| p.1 = p.1.log10());
        }
        if !agg.is_empty() {
            lines.insert(name, agg);
        }
    }
    if lines.is_empty() {
        return Err(Failure::Input("nothing left to plot".into()));
    }
    std::fs::write(out, render_svg(&lines, x, y, log_y)).map_err(|e| io_failure(out, e))
}
