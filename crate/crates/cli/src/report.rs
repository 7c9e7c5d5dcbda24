//! Timeline plots and the run comparison table.

use std::fmt::Write;
use std::path::Path;

use serde::Serialize;

use seld::spatial::FrameLabels;
use seld::store::MetricsRow;
use seld::training::{AudioFormat, ClipInference, Regime, FRAME_RATE};
use seld::{Error, Result};

const PALETTE: [&str; 11] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf", "#393b79",
];

const WIDTH: f64 = 960.0;
const LEFT: f64 = 110.0;
const RIGHT: f64 = 20.0;
const ROW: f64 = 18.0;
const AZ_HEIGHT: f64 = 220.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub run_id: String,
    pub regime: String,
    pub format: String,
    pub er: f64,
    pub f: f64,
    pub map: Option<f64>,
    pub doa_deg: Option<f64>,
    pub frame_recall: f64,
}

impl ComparisonRow {
    pub fn new(run_id: &str, regime: Regime, format: AudioFormat, m: &MetricsRow) -> Self {
        Self {
            run_id: run_id.to_string(),
            regime: regime.to_string(),
            format: format.as_str().to_string(),
            er: m.er,
            f: m.f,
            map: m.map,
            doa_deg: m.doa_deg,
            frame_recall: m.frame_recall,
        }
    }
}

pub fn write_comparison(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", dir.display())))?;
    }
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    if rows.is_empty() {
        w.write_record([
            "run_id",
            "regime",
            "format",
            "er",
            "f",
            "map",
            "doa_deg",
            "frame_recall",
        ])
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    w.flush()
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Runs of consecutive true values as `(start, len)`.
fn runs(on: impl Iterator<Item = bool>) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    let mut n = 0;
    for (t, v) in on.enumerate() {
        match (v, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push((s, t - s));
                start = None;
            }
            _ => {}
        }
        n = t + 1;
    }
    if let Some(s) = start {
        out.push((s, n - s));
    }
    out
}

/// Two-panel SVG: activity strips (reference over prediction, per class) and azimuth tracks.
pub fn timeline_svg(
    title: &str,
    pred: &ClipInference,
    labels: &FrameLabels,
    classes: &[String],
) -> String {
    let n = pred.n_classes;
    let frames = pred.n_frames.min(labels.n_frames()).max(1);
    let plot_w = WIDTH - LEFT - RIGHT;
    let x = |t: usize| LEFT + plot_w * t as f64 / frames as f64;
    let sed_top = 40.0;
    let sed_h = ROW * n as f64;
    let az_top = sed_top + sed_h + 60.0;
    let height = az_top + AZ_HEIGHT + 40.0;
    let y_az = |deg: f64| az_top + AZ_HEIGHT * (180.0 - deg) / 360.0;
    let color = |c: usize| PALETTE[c % PALETTE.len()];

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH:.0}" height="{height:.0}" viewBox="0 0 {WIDTH:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{LEFT:.0}" y="20" font-size="14">{}</text>"#,
        escape(title)
    );

    let _ = writeln!(s, r#"<g id="sed-panel">"#);
    let _ = writeln!(
        s,
        r#"<text x="{LEFT:.0}" y="{:.1}">activity: reference (top half), prediction (bottom half)</text>"#,
        sed_top - 6.0
    );
    for c in 0..n {
        let y = sed_top + ROW * c as f64;
        let name = classes
            .get(c)
            .map_or_else(|| format!("class {c}"), |n| escape(n));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{name}</text>"#,
            LEFT - 6.0,
            y + ROW * 0.7
        );
        let _ = writeln!(
            s,
            r##"<rect x="{LEFT:.1}" y="{y:.1}" width="{plot_w:.1}" height="{ROW:.1}" fill="none" stroke="#ddd"/>"##
        );
        let reference = runs((0..frames).map(|t| labels.is_active(t, c)));
        let predicted = runs((0..frames).map(|t| pred.active[t * n + c]));
        for (rows, dy, opacity) in [(reference, 1.0, 1.0), (predicted, ROW / 2.0, 0.55)] {
            for (t0, len) in rows {
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}" fill-opacity="{opacity}"/>"#,
                    x(t0),
                    y + dy,
                    x(t0 + len) - x(t0),
                    ROW / 2.0 - 1.0,
                    color(c)
                );
            }
        }
    }
    let _ = writeln!(s, "</g>");

    let _ = writeln!(s, r#"<g id="azimuth-panel">"#);
    let _ = writeln!(
        s,
        r#"<text x="{LEFT:.0}" y="{:.1}">azimuth (deg): reference dots, prediction lines</text>"#,
        az_top - 6.0
    );
    let _ = writeln!(
        s,
        r##"<rect x="{LEFT:.1}" y="{az_top:.1}" width="{plot_w:.1}" height="{AZ_HEIGHT:.1}" fill="none" stroke="#999"/>"##
    );
    for deg in [-180, -90, 0, 90, 180] {
        let y = y_az(deg as f64);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{deg}</text>"#,
            LEFT - 6.0,
            y + 4.0
        );
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#eee"/>"##,
            LEFT + plot_w
        );
    }
    let ref_doa = labels.doa();
    for c in 0..n {
        // subsample the reference so long events stay light
        for t in (0..frames).step_by(5).filter(|&t| labels.is_active(t, c)) {
            let az = (ref_doa[(t * n + c) * 2] as f64).to_degrees();
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="1.6" fill="{}"/>"#,
                x(t),
                y_az(az),
                color(c)
            );
        }
        for (t0, len) in runs((0..frames).map(|t| pred.active[t * n + c])) {
            let mut pts = String::new();
            for t in t0..t0 + len {
                let az = (pred.doa[(t * n + c) * 2] as f64).to_degrees();
                let _ = write!(pts, "{:.2},{:.2} ", x(t), y_az(az));
            }
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.2"/>"#,
                pts.trim_end(),
                color(c)
            );
        }
    }
    let seconds = frames as f64 / FRAME_RATE;
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{seconds:.1} s</text>"#,
        LEFT + plot_w,
        az_top + AZ_HEIGHT + 16.0
    );
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::runs;

    #[test]
    fn runs_of_activity() {
        let v = [false, true, true, false, true];
        assert_eq!(runs(v.into_iter()), vec![(1, 2), (4, 1)]);
        assert!(runs([false; 3].into_iter()).is_empty());
    }
}
