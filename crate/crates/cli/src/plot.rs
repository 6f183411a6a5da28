//! Minimal deterministic SVG line charts of the metrics log.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use tvts::trainer::MetricsRecord;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;

/// Parses `metrics.jsonl`; blank lines are skipped, an empty log is an error.
pub fn parse_log(text: &str) -> Result<Vec<MetricsRecord>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", n + 1))?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err("metrics log holds no records".into());
    }
    Ok(out)
}

/// `(name, points)` for every metric present in the log.
pub fn series(records: &[MetricsRecord]) -> Vec<(&'static str, Vec<(f64, f64)>)> {
    let pick = |f: &dyn Fn(&MetricsRecord) -> Option<f64>| -> Vec<(f64, f64)> {
        records
            .iter()
            .filter_map(|r| f(r).filter(|v| v.is_finite()).map(|v| (r.step as f64, v)))
            .collect()
    };
    let all = [
        ("L_total", pick(&|r| Some(r.l_total))),
        ("L_align", pick(&|r| Some(r.l_align))),
        ("L_sort", pick(&|r| Some(r.l_sort))),
        ("sort_acc", pick(&|r| r.sort_acc)),
    ];
    all.into_iter().filter(|(_, p)| !p.is_empty()).collect()
}

fn range(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

pub fn render_svg(name: &str, points: &[(f64, f64)]) -> String {
    let (x0, x1) = range(points.iter().map(|p| p.0));
    let (y0, y1) = range(points.iter().map(|p| p.1));
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(s, r#"<path d="M{l} {t}V{b}H{r}" fill="none" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="28" text-anchor="middle" font-family="sans-serif" font-size="16">{name}</text>"#, WIDTH / 2.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">step</text>"#, WIDTH / 2.0, HEIGHT - 14.0);
    for (y, v) in [(b, y0), (t, y1)] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.4}</text>"#, l - 6.0, y + 4.0);
    }
    for (x, v) in [(l, x0), (r, x1)] {
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{v}</text>"#, b + 16.0);
    }
    let path: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
    let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#1f5fbf" stroke-width="1.5"/>"##, path.join(" "));
    s.push_str("</svg>\n");
    s
}

/// Writes `<metric>.svg` for every metric into `dir`.
pub fn write_plots(records: &[MetricsRecord], dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (name, points) in series(records) {
        let path = dir.join(format!("{name}.svg"));
        fs::write(&path, render_svg(name, &points))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(n: u64, acc: bool) -> String {
        (1..=n)
            .map(|s| {
                let r = MetricsRecord {
                    step: s,
                    l_align: 6.0 - s as f64 * 0.01,
                    l_sort: 1.4,
                    l_total: 8.8,
                    sort_acc: acc.then_some(0.25),
                    wallclock_ms: s * 10,
                };
                serde_json::to_string(&r).unwrap() + "\n"
            })
            .collect()
    }

    #[test]
    fn one_series_per_metric() {
        let r = parse_log(&log(100, true)).unwrap();
        let names: Vec<_> = series(&r).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["L_total", "L_align", "L_sort", "sort_acc"]);
        let r = parse_log(&log(10, false)).unwrap();
        assert_eq!(series(&r).len(), 3);
    }

    #[test]
    fn empty_or_garbled_log_is_rejected() {
        assert!(parse_log("").is_err());
        assert!(parse_log("\n\n").is_err());
        assert!(parse_log("{\"step\": 1}\n").is_err());
    }

    #[test]
    fn constant_series_renders_finite_coordinates() {
        let svg = render_svg("L_sort", &[(1.0, 1.4), (2.0, 1.4)]);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }
}
