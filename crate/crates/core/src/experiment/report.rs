//! Text artifacts of a holdout run: curve and confusion CSVs, the phase
//! report, and an SVG plot of the mean curve.

use std::fmt::Write;

use super::{HoldoutResult, PhaseReport, QType, TypeRatio};
use crate::scenario::Scenario;

fn header(seed: u64, fingerprint: &str) -> String {
    format!("# seed={seed} fingerprint={fingerprint}\n")
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// `epoch,trial,acc_type_i,acc_type_ii,acc_type_iii`; trial is the trial
/// index or `mean`. Absent accuracies are empty fields.
pub fn curves_csv(result: &HoldoutResult, base_seed: u64, fingerprint: &str) -> String {
    let mut out = header(base_seed, fingerprint);
    out.push_str("epoch,trial,acc_type_i,acc_type_ii,acc_type_iii\n");
    let curve = &result.curve;
    for (t, rows) in curve.trials.iter().enumerate() {
        for (epoch, acc) in curve.epochs.iter().zip(rows) {
            let _ = writeln!(out, "{epoch},{t},{},{},{}", cell(acc[0]), cell(acc[1]), cell(acc[2]));
        }
    }
    for (epoch, acc) in curve.epochs.iter().zip(&curve.mean) {
        let _ = writeln!(out, "{epoch},mean,{},{},{}", cell(acc[0]), cell(acc[1]), cell(acc[2]));
    }
    out
}

/// `epoch,qtype,predicted_token,count,proportion`, pooled over trials;
/// proportion is relative to all questions of that type.
pub fn confusion_csv(scenario: &Scenario, result: &HoldoutResult, base_seed: u64) -> String {
    let mut out = header(base_seed, scenario.fingerprint());
    out.push_str("epoch,qtype,predicted_token,count,proportion\n");
    for (epoch, rec) in result.pooled_confusion() {
        for q in QType::ALL {
            let total = rec.total(q);
            for (&id, &n) in &rec.counts[q.index()] {
                let token = scenario.vocab().token(id).unwrap_or("?");
                let _ = writeln!(out, "{epoch},{q},{token},{n},{:.6}", n as f64 / total as f64);
            }
        }
    }
    out
}

/// Phase report plus the measured question-type ratio, as TOML.
pub fn phase_report_toml(
    report: &PhaseReport,
    ratio: Option<&TypeRatio>,
    base_seed: u64,
    fingerprint: &str,
) -> Result<String, toml::ser::Error> {
    #[derive(serde::Serialize)]
    struct Doc<'a> {
        seed: u64,
        fingerprint: &'a str,
        #[serde(skip_serializing_if = "Option::is_none")]
        question_type_counts: Option<[usize; 3]>,
        #[serde(skip_serializing_if = "Option::is_none")]
        question_type_ratio: Option<[f64; 3]>,
        phase_one_epoch: Option<usize>,
        u_shape: bool,
        final_epoch: usize,
        final_accuracy: Vec<f64>,
        thresholds: super::PhaseThresholds,
        #[serde(skip_serializing_if = "Option::is_none")]
        u_shape_detail: Option<super::UShape>,
    }
    let doc = Doc {
        seed: base_seed,
        fingerprint,
        question_type_counts: ratio.map(|r| r.counts),
        question_type_ratio: ratio.map(|r| r.normalized().map(|v| (v * 1000.0).round() / 1000.0)),
        phase_one_epoch: report.phase_one_epoch,
        u_shape: report.u_shape.is_some(),
        final_epoch: report.final_epoch,
        final_accuracy: report.final_accuracy.iter().map(|a| a.unwrap_or(f64::NAN)).collect(),
        thresholds: report.thresholds,
        u_shape_detail: report.u_shape,
    };
    toml::to_string(&doc)
}

const SERIES: [(&str, &str); 3] = [("type i", "#d62728"), ("type ii", "#1f77b4"), ("type iii", "#2ca02c")];

/// Mean accuracy per question type against a log₂ epoch axis.
pub fn svg_plot(points: &[(usize, [Option<f64>; 3])], title: &str) -> String {
    let (w, h) = (720.0, 420.0);
    let (left, right, top, bottom) = (60.0, 150.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let max_log = points
        .iter()
        .map(|p| (p.0.max(1) as f64).log2())
        .fold(1.0, f64::max);
    let x = |epoch: usize| left + pw * (epoch.max(1) as f64).log2() / max_log;
    let y = |acc: f64| top + ph * (1.0 - acc);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, escape(title));
    for i in 0..=5 {
        let acc = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{0:.1}" x2="{1:.1}" y2="{0:.1}" stroke="#ddd"/><text x="{2}" y="{3:.1}" text-anchor="end">{acc:.1}</text>"##,
            y(acc),
            left + pw,
            left - 6.0,
            y(acc) + 4.0
        );
    }
    for &(epoch, _) in points {
        if epoch.is_power_of_two() {
            let _ = writeln!(
                s,
                r##"<line x1="{0:.1}" y1="{top}" x2="{0:.1}" y2="{1:.1}" stroke="#eee"/><text x="{0:.1}" y="{2:.1}" text-anchor="middle">{epoch}</text>"##,
                x(epoch),
                top + ph,
                top + ph + 16.0
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">epoch (log scale)</text>"#, left + pw / 2.0, h - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">correct response rate</text>"#,
        top + ph / 2.0
    );
    for (q, (label, color)) in SERIES.iter().enumerate() {
        let coords: Vec<String> = points
            .iter()
            .filter_map(|&(e, acc)| acc[q].map(|a| format!("{:.1},{:.1}", x(e), y(a))))
            .collect();
        let id = label.replace(' ', "-");
        let _ = writeln!(s, r#"<g id="series-{id}" data-label="{label}">"#);
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            coords.join(" ")
        );
        for c in &coords {
            let (cx, cy) = c.split_once(',').unwrap();
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
        }
        let ly = top + 20.0 + 22.0 * q as f64;
        let lx = left + pw + 16.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{label}</text>"#,
            lx + 24.0,
            lx + 30.0,
            ly + 4.0
        );
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
