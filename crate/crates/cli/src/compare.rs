use std::fmt::Write as _;

use citseg::pipeline::ResultsReport;
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct TaskDelta {
    pub task_index: usize,
    pub base_delta: Option<f64>,
    pub new_delta: Option<f64>,
    pub all_delta: Option<f64>,
}

/// Differences `a - b`; `None` wherever either side is undefined.
#[derive(Debug, Serialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub dataset_digest: String,
    pub tasks: Vec<TaskDelta>,
    pub base_final_delta: Option<f64>,
    pub new_final_delta: Option<f64>,
    pub all_final_delta: Option<f64>,
    pub forgetting_drop_a: Option<f64>,
    pub forgetting_drop_b: Option<f64>,
    pub forgetting_drop_delta: Option<f64>,
}

fn diff(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    a.zip(b).map(|(x, y)| x - y)
}

fn label(r: &ResultsReport) -> String {
    format!("{:?}/{:?}", r.config.train.pipeline_mode, r.config.train.label_mode).to_lowercase()
}

pub fn compare(a: &ResultsReport, b: &ResultsReport) -> Comparison {
    let tasks = a
        .tasks
        .iter()
        .zip(&b.tasks)
        .map(|(x, y)| TaskDelta {
            task_index: x.metrics.task_index,
            base_delta: diff(x.metrics.base, y.metrics.base),
            new_delta: diff(x.metrics.new, y.metrics.new),
            all_delta: diff(x.metrics.all, y.metrics.all),
        })
        .collect();
    let (fa, fb) = (a.final_metrics(), b.final_metrics());
    let pick = |f: fn(&citseg::eval::GroupMetrics) -> Option<f64>| diff(fa.and_then(f), fb.and_then(f));
    let drop_a = a.forgetting.as_ref().and_then(|f| f.drop);
    let drop_b = b.forgetting.as_ref().and_then(|f| f.drop);
    Comparison {
        a: label(a),
        b: label(b),
        dataset_digest: a.dataset_digest.clone(),
        tasks,
        base_final_delta: pick(|m| m.base),
        new_final_delta: pick(|m| m.new),
        all_final_delta: pick(|m| m.all),
        forgetting_drop_a: drop_a,
        forgetting_drop_b: drop_b,
        forgetting_drop_delta: diff(drop_a, drop_b),
    }
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;

/// Line chart of base-group mIoU per task for both runs, with the plotted
/// values repeated in a comment.
pub fn base_curve_svg(a: &ResultsReport, b: &ResultsReport) -> String {
    let series = [(label(a), a, "#1f77b4"), (label(b), b, "#d62728")];
    let n = a.tasks.len().max(b.tasks.len()).max(2);
    let values: Vec<f64> = series
        .iter()
        .flat_map(|(_, r, _)| r.tasks.iter().filter_map(|t| t.metrics.base))
        .collect();
    let lo = values.iter().copied().fold(1.0f64, f64::min).clamp(0.0, 0.9);
    let lo = (lo * 10.0).floor() / 10.0;
    let x = |t: usize| PAD + (W - 2.0 * PAD) * t as f64 / (n - 1) as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / (1.0 - lo).max(1e-9);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    svg.push_str("<!-- data\nrun,task_index,base_miou\n");
    for (name, r, _) in &series {
        for t in &r.tasks {
            let v = t.metrics.base.map_or("null".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(svg, "{name},{},{v}", t.metrics.task_index);
        }
    }
    svg.push_str("-->\n");
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    for t in 0..n {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{t}</text>"#,
            x(t),
            H - PAD + 16.0
        );
    }
    for v in [lo, (lo + 1.0) / 2.0, 1.0] {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{:.2}</text>"#,
            PAD - 6.0,
            y(v) + 4.0,
            v
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">task</text>"#,
        W / 2.0,
        H - 8.0
    );
    for (i, (name, r, color)) in series.iter().enumerate() {
        let points: Vec<String> = r
            .tasks
            .iter()
            .filter_map(|t| {
                t.metrics
                    .base
                    .map(|v| format!("{:.1},{:.1}", x(t.metrics.task_index), y(v)))
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="12" fill="{color}">{name}</text>"#,
            PAD + 8.0,
            PAD - 24.0 + 14.0 * i as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}
