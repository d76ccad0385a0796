//! Minimal SVG line charts for simulation histories.

use std::fmt::Write as _;

use crate::sim::{EpochMetrics, HistoryEvent, ThresholdRecord};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 36.0;
const MARGIN_BOTTOM: f64 = 48.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn bounds(series: &[Series]) -> Option<(f64, f64, f64, f64)> {
    let mut pts = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let &(x0, y0) = pts.next()?;
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (x0, x0, y0, y0);
    for &(x, y) in pts {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    if xmax == xmin {
        xmax = xmin + 1.0;
    }
    if ymax == ymin {
        ymin -= 0.5;
        ymax += 0.5;
    }
    let pad = (ymax - ymin) * 0.05;
    Some((xmin, xmax, ymin - pad, ymax + pad))
}

/// Renders `series` as polylines on shared axes. Non-finite points are skipped.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let bottom = MARGIN_TOP + plot_h;
    let _ = writeln!(
        out,
        r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        escape(y_label)
    );

    let Some((xmin, xmax, ymin, ymax)) = bounds(series) else {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">no data</text>"#,
            MARGIN_LEFT + plot_w / 2.0,
            MARGIN_TOP + plot_h / 2.0
        );
        out.push_str("</svg>\n");
        return out;
    };
    let sx = |x: f64| MARGIN_LEFT + (x - xmin) / (xmax - xmin) * plot_w;
    let sy = |y: f64| bottom - (y - ymin) / (ymax - ymin) * plot_h;

    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = xmin + f * (xmax - xmin);
        let yv = ymin + f * (ymax - ymin);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(xv),
            bottom + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            MARGIN_LEFT - 6.0,
            sy(yv) + 4.0,
            tick(yv)
        );
        let _ = writeln!(
            out,
            r##"<line x1="{MARGIN_LEFT}" y1="{0:.1}" x2="{1}" y2="{0:.1}" stroke="#ddd"/>"##,
            sy(yv),
            MARGIN_LEFT + plot_w
        );
    }

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if !pts.is_empty() {
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                pts.join(" ")
            );
        }
        let ly = MARGIN_TOP + 10.0 + 18.0 * i as f64;
        let lx = WIDTH - MARGIN_RIGHT + 12.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&s.name));
    }
    out.push_str("</svg>\n");
    out
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Per-class threshold against training step.
pub fn threshold_trajectories(records: &[ThresholdRecord]) -> String {
    let mut series: Vec<Series> = Vec::new();
    for r in records {
        for c in &r.classes {
            let idx = match series.iter().position(|s| s.name == format!("class {}", c.class)) {
                Some(i) => i,
                None => {
                    series.push(Series {
                        name: format!("class {}", c.class),
                        points: Vec::new(),
                    });
                    series.len() - 1
                }
            };
            series[idx].points.push((r.step as f64, c.tau));
        }
    }
    line_chart("OOD threshold per class", "iteration", "threshold", &series)
}

/// ID retention and OOD leakage of the gate per epoch.
pub fn retention_curves(epochs: &[EpochMetrics]) -> String {
    let pick = |f: fn(&EpochMetrics) -> Option<f64>| -> Vec<(f64, f64)> {
        epochs.iter().filter_map(|m| f(m).map(|v| (m.epoch as f64, v))).collect()
    };
    let series = [
        Series {
            name: "ID retention".into(),
            points: pick(|m| m.id_retention),
        },
        Series {
            name: "OOD leakage".into(),
            points: pick(|m| m.ood_leakage),
        },
        Series {
            name: "teacher accuracy".into(),
            points: pick(|m| m.teacher_accuracy),
        },
    ];
    line_chart("Retention per epoch", "epoch", "rate", &series)
}

/// Splits a history into the two plots.
pub fn history_plots(events: &[HistoryEvent]) -> (String, String) {
    let mut thresholds = Vec::new();
    let mut epochs = Vec::new();
    for e in events {
        match e {
            HistoryEvent::Threshold(t) => thresholds.push(t.clone()),
            HistoryEvent::Epoch(m) => epochs.push(m.clone()),
            _ => {}
        }
    }
    (threshold_trajectories(&thresholds), retention_curves(&epochs))
}
