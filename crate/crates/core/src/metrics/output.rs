use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::report::{SetMetrics, StylizedFactsReport};
use super::MetricChannel;
use crate::Result;

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

/// Writes `pdf_<channel>.csv`, `acf_<channel>.csv`, `intraday_<channel>.csv`
/// and `crosscorr.csv` into `dir`.
pub fn write_report_tables(report: &StylizedFactsReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let sets = [&report.real, &report.synthetic];
    for ch in MetricChannel::ALL {
        let name = ch.name();
        if sets.iter().any(|s| s.pdf(ch).is_some()) {
            let mut w = csv::Writer::from_path(dir.join(format!("pdf_{name}.csv")))?;
            w.write_record(["set", "center_sigma", "density", "log_density", "count", "unreliable"])?;
            for s in sets {
                if let Some(t) = s.pdf(ch) {
                    for (i, c) in t.centers.iter().enumerate() {
                        w.write_record([
                            s.id.clone(),
                            format!("{c}"),
                            format!("{}", t.density[i]),
                            opt(t.log_density()[i]),
                            t.counts[i].to_string(),
                            t.unreliable[i].to_string(),
                        ])?;
                    }
                }
            }
            w.flush()?;
        }
        let pair = |f: &dyn Fn(&SetMetrics) -> Option<Vec<f64>>| sets.map(f);
        let acfs = pair(&|s| s.acf(ch).map(|t| t.values.clone()));
        if acfs.iter().any(Option::is_some) {
            write_two_columns(&dir.join(format!("acf_{name}.csv")), "lag", 1, &sets, &acfs)?;
        }
        let profiles = pair(&|s| s.intraday(ch).map(|t| t.means.clone()));
        if profiles.iter().any(Option::is_some) {
            write_two_columns(&dir.join(format!("intraday_{name}.csv")), "minute", 0, &sets, &profiles)?;
        }
    }
    let mut w = csv::Writer::from_path(dir.join("crosscorr.csv"))?;
    w.write_record(["set", "row", "column", "correlation"])?;
    for s in sets {
        if let Some(cc) = &s.cross_correlation {
            for (i, a) in cc.channels.iter().enumerate() {
                for (j, b) in cc.channels.iter().enumerate() {
                    w.write_record([s.id.as_str(), a.name(), b.name(), &format!("{}", cc.matrix[i][j])])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn write_two_columns(
    path: &Path,
    index: &str,
    first: usize,
    sets: &[&SetMetrics; 2],
    cols: &[Option<Vec<f64>>; 2],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([index, sets[0].id.as_str(), sets[1].id.as_str()])?;
    let len = cols.iter().flatten().map(Vec::len).max().unwrap_or(0);
    for i in 0..len {
        let cell = |c: &Option<Vec<f64>>| opt(c.as_ref().and_then(|v| v.get(i).copied()));
        w.write_record([(i + first).to_string(), cell(&cols[0]), cell(&cols[1])])?;
    }
    w.flush()?;
    Ok(())
}

/// Minimal polyline chart with one series per entry.
fn svg_chart(title: &str, series: &[(&str, &str, Vec<(f64, f64)>)]) -> String {
    let (w, h, m) = (640.0, 360.0, 40.0);
    let pts = series.iter().flat_map(|s| s.2.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !(x1 > x0) {
        x1 = x0 + 1.0;
    }
    if !(y1 > y0) {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{m}" y="20">{title}</text>"#);
    let _ = writeln!(
        out,
        r#"<text x="{m}" y="{}">x {x0:.3} .. {x1:.3}, y {y0:.3} .. {y1:.3}</text>"#,
        h - 10.0
    );
    let _ = writeln!(
        out,
        r##"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="#999"/>"##,
        w - 2.0 * m,
        h - 2.0 * m
    );
    for (i, (label, color, data)) in series.iter().enumerate() {
        let path: Vec<String> = data.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{color}">{label}</text>"#,
            w - 200.0,
            m + 16.0 * (i as f64 + 1.0)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Writes one SVG per table next to the CSV files.
pub fn write_svg_charts(report: &StylizedFactsReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let sets = [(&report.real, "#1f77b4"), (&report.synthetic, "#d62728")];
    for ch in MetricChannel::ALL {
        let name = ch.name();
        let pdf: Vec<_> = sets
            .iter()
            .filter_map(|(s, col)| {
                s.pdf(ch).map(|t| {
                    let pts = t
                        .centers
                        .iter()
                        .zip(t.log_density())
                        .filter_map(|(c, l)| l.map(|l| (*c, l)))
                        .collect();
                    (s.id.as_str(), *col, pts)
                })
            })
            .collect();
        if !pdf.is_empty() {
            fs::write(dir.join(format!("pdf_{name}.svg")), svg_chart(&format!("log density: {name}"), &pdf))?;
        }
        let acf: Vec<_> = sets
            .iter()
            .filter_map(|(s, col)| {
                s.acf(ch).map(|t| {
                    let pts = t.values.iter().enumerate().map(|(k, v)| ((k + 1) as f64, *v)).collect();
                    (s.id.as_str(), *col, pts)
                })
            })
            .collect();
        if !acf.is_empty() {
            fs::write(dir.join(format!("acf_{name}.svg")), svg_chart(&format!("autocorrelation: {name}"), &acf))?;
        }
        let prof: Vec<_> = sets
            .iter()
            .filter_map(|(s, col)| {
                s.intraday(ch).map(|t| {
                    let pts = t.means.iter().enumerate().map(|(m, v)| (m as f64, *v)).collect();
                    (s.id.as_str(), *col, pts)
                })
            })
            .collect();
        if !prof.is_empty() {
            fs::write(
                dir.join(format!("intraday_{name}.svg")),
                svg_chart(&format!("intraday mean: {name}"), &prof),
            )?;
        }
    }
    Ok(())
}
