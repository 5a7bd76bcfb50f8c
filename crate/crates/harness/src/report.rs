//! CSV and SVG output for sweep results.

use std::fmt::Write as _;
use std::path::Path;

use maprps::metrics::DpCurvePoint;

use crate::sweep::SweepResult;
use crate::HarnessError;

pub const CSV_HEADER: &str = "t0,distortion_mean,distortion_stderr,w2,w2_stderr,n_trials";

/// 17 significant digits, enough to round-trip any `f64`.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), num)
}

pub fn csv_string(points: &[DpCurvePoint]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            p.t0,
            num(p.distortion_mean),
            opt(p.distortion_stderr),
            num(p.w2),
            opt(p.w2_stderr),
            p.n_trials
        );
    }
    out
}

fn write_file(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn emit_csv(r: &SweepResult, path: &Path) -> Result<(), HarnessError> {
    if r.points.is_empty() {
        return Err(HarnessError::Report("empty sweep result".into()));
    }
    write_file(path, &csv_string(&r.points))
}

pub fn parse_csv(text: &str) -> Result<Vec<DpCurvePoint>, HarnessError> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(HarnessError::Report("unexpected CSV header".into()));
    }
    let bad = |line: usize, what: &str| HarnessError::Report(format!("CSV line {}: bad {what}", line + 2));
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad(i, "field count"));
            }
            let float = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(i, what));
            let optional = |s: &str, what: &str| if s == "NA" { Ok(None) } else { float(s, what).map(Some) };
            Ok(DpCurvePoint {
                t0: f[0].parse().map_err(|_| bad(i, "t0"))?,
                distortion_mean: float(f[1], "distortion_mean")?,
                distortion_stderr: optional(f[2], "distortion_stderr")?,
                w2: float(f[3], "w2")?,
                w2_stderr: optional(f[4], "w2_stderr")?,
                n_trials: f[5].parse().map_err(|_| bad(i, "n_trials"))?,
            })
        })
        .collect()
}

pub fn read_csv(path: &Path) -> Result<Vec<DpCurvePoint>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_csv(&text)
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;

/// Scatter of `(W2, sqrt(distortion))` per point with the ideal curve
/// `sqrt(D(P))` drawn as one path.
pub fn svg_string(points: &[DpCurvePoint], ideal: &[(f64, f64)]) -> String {
    let xs = points.iter().map(|p| p.w2).chain(ideal.iter().map(|c| c.0));
    let ys = points
        .iter()
        .map(|p| p.distortion_mean.max(0.0).sqrt())
        .chain(ideal.iter().map(|c| c.1.max(0.0).sqrt()));
    let x_max = xs.fold(0.0, f64::max).max(1e-12) * 1.05;
    let y_max = ys.fold(0.0, f64::max).max(1e-12) * 1.05;
    let px = |x: f64| MARGIN + x / x_max * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - y / y_max * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (x0, y0) = (px(0.0), py(0.0));
    let _ = writeln!(s, r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{:.2}" y2="{y0:.2}" stroke="black"/>"#, px(x_max));
    let _ = writeln!(s, r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x0:.2}" y2="{:.2}" stroke="black"/>"#, py(y_max));
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="14">perception W2</text>"#,
        WIDTH / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.2}" text-anchor="middle" font-size="14" transform="rotate(-90 18 {:.2})">sqrt distortion</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    for (v, anchor) in [(0.0, "start"), (x_max, "end")] {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="{anchor}" font-size="11">{v:.3}</text>"#, px(v), y0 + 16.0);
    }
    for v in [0.0, y_max] {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="11">{v:.3}</text>"#, x0 - 6.0, py(v) + 4.0);
    }
    if !ideal.is_empty() {
        let d: Vec<String> = ideal
            .iter()
            .enumerate()
            .map(|(i, (p, dp))| format!("{}{:.2},{:.2}", if i == 0 { "M" } else { "L" }, px(*p), py(dp.max(0.0).sqrt())))
            .collect();
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="gray" stroke-dasharray="6 4"/>"#, d.join(" "));
    }
    for p in points {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="steelblue"><title>t0={}</title></circle>"#,
            px(p.w2),
            py(p.distortion_mean.max(0.0).sqrt()),
            p.t0
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn emit_svg(r: &SweepResult, path: &Path) -> Result<(), HarnessError> {
    if r.points.is_empty() {
        return Err(HarnessError::Report("empty sweep result".into()));
    }
    write_file(path, &svg_string(&r.points, &r.ideal_curve))
}
