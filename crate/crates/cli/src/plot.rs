//! Standalone SVG charts for run reports.

use std::fmt::Write as _;

use agseg_core::train::{FoldReport, TrainRunReport};
use agseg_core::ConfusionMatrix;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#, W / 2.0, escape(title));
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(s: &mut String, x_label: &str, y_label: &str, y_min: f64, y_max: f64) {
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN / 2.0, MARGIN);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, H - 14.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
    for i in 0..=4 {
        let v = y_min + (y_max - y_min) * i as f64 / 4.0;
        let y = y0 - (y0 - y1) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, x0 - 4.0, y + 4.0);
        let _ = writeln!(s, r##"<line x1="{x0}" y1="{y:.1}" x2="{x1}" y2="{y:.1}" stroke="#ddd"/>"##);
    }
}

/// Train (solid) and validation (dashed) loss per epoch, one colour per fold.
pub fn loss_curves(report: &TrainRunReport) -> String {
    let mut s = header("Loss per epoch");
    let values: Vec<f64> = report
        .folds
        .iter()
        .flat_map(|f| f.epochs.iter().flat_map(|e| [e.train_loss, e.val_loss]))
        .collect();
    let y_max = values.iter().cloned().fold(0.0f64, f64::max).max(1e-9) * 1.05;
    let epochs = report.folds.iter().map(|f| f.epochs.len()).max().unwrap_or(1).max(2);
    axes(&mut s, "epoch", "loss", 0.0, y_max);
    let px = |e: usize| MARGIN + (W - 1.5 * MARGIN) * e as f64 / (epochs - 1) as f64;
    let py = |v: f64| (H - MARGIN) - (H - 2.0 * MARGIN) * v / y_max;
    for (i, f) in report.folds.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        for (dash, pick) in [("", 0usize), (r#" stroke-dasharray="6 4""#, 1)] {
            let pts: Vec<String> = f
                .epochs
                .iter()
                .map(|e| {
                    let v = if pick == 0 { e.train_loss } else { e.val_loss };
                    format!("{:.2},{:.2}", px(e.epoch), py(v))
                })
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"{dash}/>"#,
                pts.join(" ")
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{colour}">fold {}</text>"#,
            W - MARGIN * 1.5,
            MARGIN + 14.0 * i as f64,
            f.fold
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Grouped bars of the overlap metrics, one group per fold plus the
/// aggregate.
pub fn metric_bars(report: &TrainRunReport) -> String {
    let mut s = header("Test metrics per fold");
    axes(&mut s, "fold", "score", 0.0, 1.0);
    let names = ["iou", "accuracy", "precision", "recall", "f1"];
    let mut groups: Vec<(String, [f64; 5])> = report
        .folds
        .iter()
        .map(|f| {
            let m = f.metrics;
            (format!("{}", f.fold), [m.iou, m.accuracy, m.precision, m.recall, m.f1])
        })
        .collect();
    let a = report.aggregate;
    groups.push(("all".into(), [a.iou, a.accuracy, a.precision, a.recall, a.f1]));
    let span = (W - 1.5 * MARGIN) / groups.len() as f64;
    let bar = span * 0.8 / names.len() as f64;
    for (g, (label, vals)) in groups.iter().enumerate() {
        let gx = MARGIN + span * g as f64 + span * 0.1;
        for (j, v) in vals.iter().enumerate() {
            let h = (H - 2.0 * MARGIN) * v.clamp(0.0, 1.0);
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"><title>{} {v:.4}</title></rect>"#,
                gx + bar * j as f64,
                H - MARGIN - h,
                bar,
                h,
                PALETTE[j],
                names[j]
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{label}</text>"#,
            gx + span * 0.4,
            H - MARGIN + 16.0
        );
    }
    for (j, n) in names.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{}">{n}</text>"#, W - MARGIN * 1.8, MARGIN + 14.0 * j as f64, PALETTE[j]);
    }
    s.push_str("</svg>\n");
    s
}

/// 2×2 heatmap; cell shading is the fraction of its actual-class row.
pub fn confusion_heatmap(title: &str, cm: &ConfusionMatrix) -> String {
    let mut s = header(title);
    let cells = [[cm.tn, cm.fp], [cm.fn_, cm.tp]];
    let size = 120.0;
    let (ox, oy) = (W / 2.0 - size, H / 2.0 - size + 20.0);
    for (r, row) in cells.iter().enumerate() {
        let total = (row[0] + row[1]).max(1) as f64;
        for (c, &count) in row.iter().enumerate() {
            let frac = count as f64 / total;
            let shade = (255.0 * (1.0 - frac)).round() as u8;
            let (x, y) = (ox + size * c as f64, oy + size * r as f64);
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{size}" height="{size}" fill="rgb({shade},{shade},255)" stroke="black"/>"#
            );
            let text = if frac > 0.5 { "white" } else { "black" };
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{text}">{count}</text>"#,
                x + size / 2.0,
                y + size / 2.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{text}">{:.1}%</text>"#,
                x + size / 2.0,
                y + size / 2.0 + 16.0,
                100.0 * frac
            );
        }
    }
    for (i, label) in ["negative", "positive"].iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{label}</text>"#, ox + size * (i as f64 + 0.5), oy - 8.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{label}</text>"#, ox - 8.0, oy + size * (i as f64 + 0.5));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">predicted</text>"#, W / 2.0, oy - 26.0);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" transform="rotate(-90 {} {})">actual</text>"#,
        ox - 76.0,
        H / 2.0 + 20.0,
        ox - 76.0,
        H / 2.0 + 20.0
    );
    s.push_str("</svg>\n");
    s
}

pub fn fold_heatmap(f: &FoldReport) -> String {
    confusion_heatmap(&format!("Confusion matrix, fold {}", f.fold), &f.confusion)
}
