//! CSV tables and SVG line charts for reports, sweeps and traces.

use std::fmt::Write as _;
use std::path::Path;

use lpb_core::harness::{EpisodeTrace, Method, SuccessReport, SweepAxis, SweepRow};

use crate::artifact::write_atomic;
use crate::codec::init_mode_name;
use crate::error::{Error, Result};

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory CSV");
    for r in rows {
        w.write_record(&r).expect("in-memory CSV");
    }
    w.into_inner().expect("in-memory CSV")
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes).map_err(|e| Error::io(path, e))
}

/// One row per evaluated checkpoint.
pub fn report_csv(r: &SuccessReport) -> Vec<u8> {
    let rows = r
        .per_checkpoint
        .iter()
        .map(|c| {
            vec![
                r.method.name().to_string(),
                init_mode_name(r.init_mode).to_string(),
                r.perturb_prob.to_string(),
                c.epoch.to_string(),
                c.rate.to_string(),
                r.mean.to_string(),
                r.std.to_string(),
                r.episodes.to_string(),
                r.seed_base.to_string(),
            ]
        })
        .collect();
    csv_bytes(
        &["method", "init_mode", "perturb_p", "epoch", "rate", "mean", "std", "episodes", "seed_base"],
        rows,
    )
}

/// One row per `(value, method)` cell; failed cells carry the error text.
pub fn sweep_csv(axis: SweepAxis, rows: &[SweepRow]) -> Vec<u8> {
    let out = rows
        .iter()
        .map(|r| match &r.outcome {
            Ok(rep) => vec![
                axis.name().to_string(),
                r.value.to_string(),
                r.method.name().to_string(),
                rep.mean.to_string(),
                rep.std.to_string(),
                rep.episodes.to_string(),
                rep.seed_base.to_string(),
                String::new(),
            ],
            Err(e) => vec![
                axis.name().to_string(),
                r.value.to_string(),
                r.method.name().to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                e.to_string(),
            ],
        })
        .collect();
    csv_bytes(
        &["axis", "value", "method", "mean", "std", "episodes", "seed_base", "error"],
        out,
    )
}

pub fn trace_csv(t: &EpisodeTrace) -> Vec<u8> {
    let rows = t
        .records
        .iter()
        .zip(&t.frames)
        .map(|(r, f)| {
            vec![
                r.t.to_string(),
                r.delta.to_string(),
                t.tau.to_string(),
                (r.active as u8).to_string(),
                r.nearest.to_string(),
                r.pred_delta_pre.map_or(String::new(), |d| d.to_string()),
                r.pred_delta_post.to_string(),
                r.fallbacks.to_string(),
                f.agent[0].to_string(),
                f.agent[1].to_string(),
                f.block[0].to_string(),
                f.block[1].to_string(),
                f.angle.to_string(),
            ]
        })
        .collect();
    csv_bytes(
        &[
            "t",
            "delta",
            "tau",
            "active",
            "nearest_expert",
            "pred_delta_pre",
            "pred_delta_post",
            "fallbacks",
            "agent_x",
            "agent_y",
            "block_x",
            "block_y",
            "block_angle",
        ],
        rows,
    )
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// A plain line chart. `hline` draws a dashed horizontal reference.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], hline: Option<f64>) -> String {
    let (w, h) = (640.0, 400.0);
    let (l, r, t, b) = (60.0, 150.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|s| s.points.iter().copied());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if let Some(v) = hline.filter(|v| v.is_finite()) {
        y0 = y0.min(v);
        y1 = y1.max(v);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    y0 = y0.min(0.0);
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| l + (x - x0) / (x1 - x0) * (w - l - r);
    let sy = |y: f64| h - b - (y - y0) / (y1 - y0) * (h - t - b);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, esc(title));
    let _ = writeln!(
        s,
        r#"<line x1="{l}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{l}" y1="{t}" x2="{l}" y2="{}" stroke="black"/>"#,
        h - b,
        w - r,
        h - b,
        h - b
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, sx(fx), h - b + 16.0, tick(fx));
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, l - 6.0, sy(fy) + 4.0, tick(fy));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (l + w - r) / 2.0, h - 12.0, esc(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (t + h - b) / 2.0,
        (t + h - b) / 2.0,
        esc(y_label)
    );
    if let Some(v) = hline.filter(|v| v.is_finite()) {
        let _ = writeln!(
            s,
            r#"<line x1="{l}" y1="{:.1}" x2="{}" y2="{:.1}" stroke="gray" stroke-dasharray="6 4"/>"#,
            sy(v),
            w - r,
            sy(v)
        );
    }
    for (i, ser) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#, path.join(" "));
        let ly = t + 16.0 * i as f64 + 8.0;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{c}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            w - r + 10.0,
            w - r + 30.0,
            w - r + 36.0,
            ly + 4.0,
            esc(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn sweep_chart(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let mut methods: Vec<Method> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    let series: Vec<Series> = methods
        .iter()
        .map(|&m| {
            let (xs, ys) = lpb_core::harness::series(rows, m);
            Series {
                label: m.name().into(),
                points: xs.into_iter().zip(ys).collect(),
            }
        })
        .collect();
    line_chart(&format!("success rate vs {}", axis.name()), axis.name(), "success rate", &series, None)
}

pub fn trace_chart(t: &EpisodeTrace) -> String {
    let pts = t.records.iter().map(|r| (r.t as f64, r.delta as f64)).collect();
    line_chart(
        &format!("latent OOD score, seed {}", t.seed),
        "timestep",
        "delta (squared latent distance)",
        &[Series {
            label: "delta".into(),
            points: pts,
        }],
        Some(t.tau as f64),
    )
}

pub fn write_report_csv(path: &Path, r: &SuccessReport) -> Result<()> {
    write(path, &report_csv(r))
}

pub fn write_sweep(dir: &Path, axis: SweepAxis, rows: &[SweepRow]) -> Result<()> {
    write(&dir.join("sweep.csv"), &sweep_csv(axis, rows))?;
    write(&dir.join("sweep.svg"), sweep_chart(axis, rows).as_bytes())
}

pub fn write_trace(dir: &Path, t: &EpisodeTrace) -> Result<()> {
    write(&dir.join(format!("trace-{}.csv", t.seed)), &trace_csv(t))?;
    write(&dir.join(format!("trace-{}.svg", t.seed)), trace_chart(t).as_bytes())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write(path, text.as_bytes())
}
