//! CSV, JSON and SVG output for evaluation reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::csv_error;

use super::metrics::{LayerMetrics, MetricsReport};
use super::EvalKind;

pub const LONG_CSV: &str = "report.csv";
pub const GEOMETRY_CSV: &str = "geometry.csv";
pub const REPORT_JSON: &str = "report.json";
pub const GEOMETRY_HEADER: [&str; 5] = ["layer", "L_ali", "L_uni", "L_ali_n", "D"];

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `(layer, metric, value)` rows: geometry first, then accuracies.
pub fn long_rows(report: &MetricsReport) -> Vec<(usize, &'static str, f64)> {
    let mut rows = Vec::new();
    for m in &report.layers {
        rows.push((m.layer, "L_ali", m.alignment));
        rows.push((m.layer, "L_uni", m.uniformity));
        rows.push((m.layer, "L_ali_n", m.negative_alignment));
        rows.push((m.layer, "D", m.d));
    }
    for (name, acc) in [("knn_acc", &report.knn), ("linear_acc", &report.linear)] {
        if let Some(acc) = acc {
            rows.extend(acc.iter().enumerate().map(|(l, &v)| (l + 1, name, v)));
        }
    }
    rows
}

pub fn write_long_csv(report: &MetricsReport, path: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> = long_rows(report)
        .into_iter()
        .map(|(l, m, v)| vec![l.to_string(), m.to_string(), v.to_string()])
        .collect();
    write_rows(path, &["layer", "metric", "value"], &rows)
}

pub fn write_geometry_csv(layers: &[LayerMetrics], path: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> = layers
        .iter()
        .map(|m| {
            vec![
                m.layer.to_string(),
                m.alignment.to_string(),
                m.uniformity.to_string(),
                m.negative_alignment.to_string(),
                m.d.to_string(),
            ]
        })
        .collect();
    write_rows(path, &GEOMETRY_HEADER, &rows)
}

/// Accuracy of one evaluation kind at the listed layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub label: String,
    pub kind: EvalKind,
    pub layers: Vec<usize>,
    pub accuracy: Vec<f64>,
}

impl AccuracyReport {
    /// Every layer, `1..=acc.len()`.
    pub fn multi_exit(label: impl Into<String>, kind: EvalKind, accuracy: Vec<f64>) -> Self {
        Self {
            label: label.into(),
            kind,
            layers: (1..=accuracy.len()).collect(),
            accuracy,
        }
    }
}

/// One `(layer, accuracy)` row per evaluated layer.
pub fn write_accuracy_csv(report: &AccuracyReport, path: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> = report
        .layers
        .iter()
        .zip(&report.accuracy)
        .map(|(l, v)| vec![l.to_string(), v.to_string()])
        .collect();
    write_rows(path, &["layer", "accuracy"], &rows)
}

/// `<stem>.csv`, `<stem>.json` and `<stem>.svg`.
pub fn write_accuracy(report: &AccuracyReport, stem: &str, dir: &Path) -> Result<Vec<PathBuf>> {
    let files = [
        dir.join(format!("{stem}.csv")),
        dir.join(format!("{stem}.json")),
        dir.join(format!("{stem}.svg")),
    ];
    write_accuracy_csv(report, &files[0])?;
    write_json(report, &files[1])?;
    LineChart {
        title: format!("{} accuracy", report.kind.as_str()),
        y_label: "accuracy".into(),
        first_layer: report.layers.first().copied().unwrap_or(1),
        series: vec![Series {
            name: report.label.clone(),
            values: report.accuracy.clone(),
        }],
    }
    .write(&files[2])?;
    Ok(files.to_vec())
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    /// Value at layer `first_layer + i`.
    pub values: Vec<f64>,
}

/// Per-layer line chart.
#[derive(Clone, Debug, PartialEq)]
pub struct LineChart {
    pub title: String,
    pub y_label: String,
    pub first_layer: usize,
    pub series: Vec<Series>,
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

impl LineChart {
    pub fn render(&self) -> String {
        let (w, h) = (480.0, 320.0);
        let (left, right, top, bottom) = (60.0, 20.0, 30.0, 60.0);
        let pw = w - left - right;
        let ph = h - top - bottom;
        let n = self
            .series
            .iter()
            .map(|s| s.values.len())
            .max()
            .unwrap_or(0)
            .max(1);
        let finite = self
            .series
            .iter()
            .flat_map(|s| s.values.iter().copied())
            .filter(|v| v.is_finite());
        let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        let x = |i: usize| {
            left + if n == 1 {
                pw / 2.0
            } else {
                pw * i as f64 / (n - 1) as f64
            }
        };
        let y = |v: f64| top + ph * (hi - v) / (hi - lo);

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#,
            w / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<path d="M{left} {top} V{} H{}" fill="none" stroke="black"/>"#,
            top + ph,
            left + pw
        );
        for k in 0..=4 {
            let v = lo + (hi - lo) * k as f64 / 4.0;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
                left - 6.0,
                y(v) + 4.0,
                format_tick(v)
            );
        }
        for i in 0..n {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
                x(i),
                top + ph + 16.0,
                self.first_layer + i
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">layer</text>"#,
            left + pw / 2.0,
            h - 28.0
        );
        let _ = writeln!(
            s,
            r#"<text x="14" y="{0}" text-anchor="middle" transform="rotate(-90 14 {0})">{1}</text>"#,
            top + ph / 2.0,
            escape(&self.y_label)
        );
        for (k, series) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let pts: Vec<String> = series
                .values
                .iter()
                .enumerate()
                .filter(|(_, v)| v.is_finite())
                .map(|(i, &v)| format!("{:.2},{:.2}", x(i), y(v)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                pts.join(" ")
            );
            for p in &pts {
                let (px, py) = p.split_once(',').unwrap();
                let _ = writeln!(s, r#"<circle cx="{px}" cy="{py}" r="3" fill="{color}"/>"#);
            }
            let ly = h - 10.0;
            let lx = left + 110.0 * k as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{lx}" y="{}" width="10" height="10" fill="{color}"/>"#,
                ly - 9.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{ly}">{}</text>"#,
                lx + 14.0,
                escape(&series.name)
            );
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}

fn format_tick(v: f64) -> String {
    if v == 0.0 || (1e-2..1e4).contains(&v.abs()) {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

/// Charts shared by a set of reports, one series per report. Uniformity is
/// stored as is and negated only here.
pub fn charts(reports: &[MetricsReport]) -> Vec<(&'static str, LineChart)> {
    let chart = |title: &str, y_label: &str, f: &dyn Fn(&MetricsReport) -> Option<Vec<f64>>| {
        let series: Vec<Series> = reports
            .iter()
            .filter_map(|r| {
                f(r).filter(|v| !v.is_empty()).map(|values| Series {
                    name: r.label.clone(),
                    values,
                })
            })
            .collect();
        (!series.is_empty()).then(|| LineChart {
            title: title.into(),
            y_label: y_label.into(),
            first_layer: 1,
            series,
        })
    };
    let geo = |g: fn(&LayerMetrics) -> f64| {
        move |r: &MetricsReport| Some(r.layers.iter().map(g).collect())
    };
    let mut out = Vec::new();
    let items: [(&str, Option<LineChart>); 5] = [
        (
            "knn_accuracy.svg",
            chart("k-NN accuracy", "accuracy", &|r| r.knn.clone()),
        ),
        (
            "linear_accuracy.svg",
            chart("linear probe accuracy", "accuracy", &|r| r.linear.clone()),
        ),
        (
            "neg_uniformity.svg",
            chart("-L_uni", "-L_uni", &geo(|m| -m.uniformity)),
        ),
        (
            "alignment.svg",
            chart("L_ali", "L_ali", &geo(|m| m.alignment)),
        ),
        (
            "alignment_difference.svg",
            chart("D = L_ali_n - L_ali", "D", &geo(|m| m.d)),
        ),
    ];
    for (name, c) in items {
        if let Some(c) = c {
            out.push((name, c));
        }
    }
    out
}

pub fn write_charts(reports: &[MetricsReport], dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (name, chart) in charts(reports) {
        let path = dir.join(name);
        chart.write(&path)?;
        written.push(path);
    }
    Ok(written)
}

/// Long CSV, geometry CSV (when present), JSON and charts for one report.
pub fn write_report(report: &MetricsReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = vec![dir.join(LONG_CSV), dir.join(REPORT_JSON)];
    write_long_csv(report, &written[0])?;
    write_json(report, &written[1])?;
    if !report.layers.is_empty() {
        let p = dir.join(GEOMETRY_CSV);
        write_geometry_csv(&report.layers, &p)?;
        written.push(p);
    }
    written.extend(write_charts(std::slice::from_ref(report), dir)?);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> MetricsReport {
        MetricsReport {
            label: "sd <a&b>".into(),
            layers: (1..=3)
                .map(|l| LayerMetrics {
                    layer: l,
                    alignment: 0.1 * l as f64,
                    uniformity: -(l as f64),
                    negative_alignment: 1.0,
                    d: 1.0 - 0.1 * l as f64,
                })
                .collect(),
            knn: Some(vec![0.2, 0.3, 0.4]),
            linear: None,
        }
    }

    #[test]
    fn files_and_schemas() {
        let dir = tempfile::tempdir().unwrap();
        let files = write_report(&report(), dir.path()).unwrap();
        let names: Vec<String> = files
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert!(names.contains(&"knn_accuracy.svg".to_string()));
        assert!(!names.contains(&"linear_accuracy.svg".to_string()));
        let geo = fs::read_to_string(dir.path().join(GEOMETRY_CSV)).unwrap();
        assert_eq!(geo.lines().next().unwrap(), "layer,L_ali,L_uni,L_ali_n,D");
        assert_eq!(geo.lines().count(), 4);
        let long = fs::read_to_string(dir.path().join(LONG_CSV)).unwrap();
        assert_eq!(long.lines().count(), 1 + 12 + 3);
        // the stored value is L_uni; only the chart negates it
        assert!(long.contains("2,L_uni,-2\n"));
        let back: MetricsReport =
            serde_json::from_str(&fs::read_to_string(dir.path().join(REPORT_JSON)).unwrap())
                .unwrap();
        assert_eq!(back, report());
        let svg = fs::read_to_string(dir.path().join("neg_uniformity.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("sd &lt;a&amp;b&gt;"));
    }

    #[test]
    fn chart_negates_uniformity() {
        let c = charts(&[report()]);
        let (_, uni) = c.iter().find(|(n, _)| *n == "neg_uniformity.svg").unwrap();
        assert_eq!(uni.series[0].values, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn multiexit_rows() {
        let dir = tempfile::tempdir().unwrap();
        let r = AccuracyReport::multi_exit("a", EvalKind::Knn, vec![0.1; 6]);
        let files = write_accuracy(&r, "multiexit_knn", dir.path()).unwrap();
        assert_eq!(fs::read_to_string(&files[0]).unwrap().lines().count(), 7);
        let back: AccuracyReport =
            serde_json::from_str(&fs::read_to_string(&files[1]).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
