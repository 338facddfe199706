//! Hand-written SVG charts. Coordinates are printed with fixed precision so
//! the markup is byte-stable.

use std::fmt::Write;

use chrono::{Datelike, NaiveDate};
use renalseq_core::{ConfusionMatrix, Window};

const BLUE: &str = "#1f77b4";
const ORANGE: &str = "#ff7f0e";
const GREY: &str = "#c7c7c7";
const RED: &str = "#d62728";

/// Gaps between laboratory dates longer than this are drawn as missing data.
pub const GAP_DAYS: i64 = 90;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn open(width: u32, height: u32, title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        width / 2,
        escape(title)
    )
}

/// Square unit-box plot area: maps [0,1]² into pixels.
struct UnitFrame {
    left: f64,
    top: f64,
    size: f64,
}

impl UnitFrame {
    fn x(&self, v: f64) -> f64 {
        self.left + v * self.size
    }

    fn y(&self, v: f64) -> f64 {
        self.top + (1.0 - v) * self.size
    }

    fn axes(&self, svg: &mut String, x_label: &str, y_label: &str) {
        let (l, t, s) = (self.left, self.top, self.size);
        let _ = writeln!(
            svg,
            "<rect x=\"{l:.2}\" y=\"{t:.2}\" width=\"{s:.2}\" height=\"{s:.2}\" fill=\"none\" stroke=\"black\"/>"
        );
        for i in 0..=4 {
            let v = f64::from(i) / 4.0;
            let _ = writeln!(
                svg,
                "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{v:.2}</text>",
                self.x(v),
                t + s + 16.0
            );
            let _ = writeln!(
                svg,
                "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{v:.2}</text>",
                l - 6.0,
                self.y(v) + 4.0
            );
        }
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            l + s / 2.0,
            t + s + 34.0,
            escape(x_label)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 {:.2} {:.2})\">{}</text>",
            l - 40.0,
            t + s / 2.0,
            l - 40.0,
            t + s / 2.0,
            escape(y_label)
        );
    }
}

/// ROC curve with one polyline vertex per `(fpr, tpr)` point, plus the chance
/// diagonal.
pub fn roc(points: &[(f64, f64)], auc: f64, ci: (f64, f64)) -> String {
    let f = UnitFrame {
        left: 70.0,
        top: 40.0,
        size: 360.0,
    };
    let mut svg = open(
        480,
        480,
        &format!(
            "ROC (test set): AUC {auc:.3} [95% CI {:.3}, {:.3}]",
            ci.0, ci.1
        ),
    );
    f.axes(&mut svg, "False positive rate", "True positive rate");
    let _ = writeln!(
        svg,
        "<line class=\"diagonal\" x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{GREY}\" stroke-dasharray=\"4 4\"/>",
        f.x(0.0),
        f.y(0.0),
        f.x(1.0),
        f.y(1.0)
    );
    let coords: Vec<String> = points
        .iter()
        .map(|&(fpr, tpr)| format!("{:.2},{:.2}", f.x(fpr), f.y(tpr)))
        .collect();
    let _ = writeln!(
        svg,
        "<polyline class=\"roc\" points=\"{}\" fill=\"none\" stroke=\"{BLUE}\" stroke-width=\"2\"/>",
        coords.join(" ")
    );
    svg.push_str("</svg>\n");
    svg
}

/// 2×2 grid: rows are the true class, columns the predicted class.
pub fn confusion(cm: &ConfusionMatrix) -> String {
    let mut svg = open(
        420,
        380,
        &format!("Confusion matrix at threshold {}", cm.threshold),
    );
    let cells = [
        ("tn", "True 0 / Pred 0", cm.tn, cm.ci.tn, 0, 0),
        ("fp", "True 0 / Pred 1", cm.fp, cm.ci.fp, 0, 1),
        ("fn", "True 1 / Pred 0", cm.fn_, cm.ci.fn_, 1, 0),
        ("tp", "True 1 / Pred 1", cm.tp, cm.ci.tp, 1, 1),
    ];
    let max = cells.iter().map(|c| c.2).max().unwrap_or(0).max(1) as f64;
    let (left, top, size) = (90.0, 60.0, 140.0);
    for (id, caption, count, ci, row, col) in cells {
        let x = left + f64::from(col) * size;
        let y = top + f64::from(row) * size;
        let shade = 0.15 + 0.6 * count as f64 / max;
        let _ = writeln!(
            svg,
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{size:.2}\" height=\"{size:.2}\" fill=\"{BLUE}\" fill-opacity=\"{shade:.3}\" stroke=\"black\"/>"
        );
        let cx = x + size / 2.0;
        let _ = writeln!(
            svg,
            "<text x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"11\">{caption}</text>",
            y + 24.0
        );
        let _ = writeln!(
            svg,
            "<text class=\"count\" data-cell=\"{id}\" x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"22\">{count}</text>",
            y + size / 2.0 + 8.0
        );
        let _ = writeln!(
            svg,
            "<text class=\"ci\" data-cell=\"{id}\" x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"middle\">[{}, {}]</text>",
            y + size / 2.0 + 32.0,
            ci.lo,
            ci.hi
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">Predicted label</text>",
        left + size,
        top + 2.0 * size + 24.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"30\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 30 {:.2})\">True label</text>",
        top + size,
        top + size
    );
    svg.push_str("</svg>\n");
    svg
}

/// Scatter of 2-D embeddings coloured by label (0 blue, 1 red).
pub fn tsne(points: &[(f64, f64, u8)]) -> String {
    let f = UnitFrame {
        left: 40.0,
        top: 40.0,
        size: 400.0,
    };
    let mut svg = open(480, 500, "t-SNE of test-set GRU embeddings");
    let span = |sel: fn(&(f64, f64, u8)) -> f64| {
        let lo = points.iter().map(sel).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(sel).fold(f64::NEG_INFINITY, f64::max);
        (lo, (hi - lo).max(1e-12))
    };
    let (x0, xs) = span(|p| p.0);
    let (y0, ys) = span(|p| p.1);
    let _ = writeln!(
        svg,
        "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"black\"/>",
        f.left - 10.0,
        f.top - 10.0,
        f.size + 20.0,
        f.size + 20.0
    );
    for &(x, y, label) in points {
        let colour = if label == 1 { RED } else { BLUE };
        let _ = writeln!(
            svg,
            "<circle class=\"point\" data-label=\"{label}\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{colour}\" fill-opacity=\"0.7\"/>",
            f.x((x - x0) / xs),
            f.y((y - y0) / ys)
        );
    }
    let legend_y = f.top + f.size + 40.0;
    for (i, (colour, text)) in [(BLUE, "label 0"), (RED, "label 1")].iter().enumerate() {
        let x = f.left + 120.0 * i as f64;
        let _ = writeln!(
            svg,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"5\" fill=\"{colour}\"/><text x=\"{:.2}\" y=\"{:.2}\">{text}</text>",
            x,
            legend_y - 4.0,
            x + 10.0,
            legend_y
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub struct TimelineRow {
    pub patient_id: String,
    pub label: u8,
    /// Distinct laboratory dates, ascending.
    pub lab_dates: Vec<NaiveDate>,
    pub window: Window,
}

/// Calendar-time follow-up bars: pre-window history in blue, gaps longer
/// than [`GAP_DAYS`] in grey, the prediction window in orange.
pub fn timeline(rows: &[TimelineRow]) -> String {
    let row_h = 26.0;
    let (left, top, width) = (110.0, 50.0, 660.0);
    let height = top + row_h * rows.len() as f64 + 50.0;
    let mut svg = open(800, height.ceil() as u32, "Follow-up timelines");
    let first = rows
        .iter()
        .filter_map(|r| r.lab_dates.first().copied())
        .chain(rows.iter().map(|r| r.window.start))
        .min();
    let last = rows.iter().map(|r| r.window.end).max();
    let (Some(first), Some(last)) = (first, last) else {
        svg.push_str("</svg>\n");
        return svg;
    };
    let days = ((last - first).num_days().max(1)) as f64;
    let x = |d: NaiveDate| left + width * (d - first).num_days() as f64 / days;

    for year in first.year() + 1..=last.year() {
        let jan1 = NaiveDate::from_ymd_opt(year, 1, 1).expect("valid date");
        let _ = writeln!(
            svg,
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{GREY}\"/><text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{year}</text>",
            x(jan1),
            top - 8.0,
            x(jan1),
            top + row_h * rows.len() as f64,
            x(jan1),
            top + row_h * rows.len() as f64 + 18.0
        );
    }
    for (i, row) in rows.iter().enumerate() {
        let y = top + row_h * i as f64;
        let mid = y + row_h / 2.0;
        let _ = writeln!(
            svg,
            "<g class=\"patient\" data-id=\"{}\" data-label=\"{}\">",
            escape(&row.patient_id),
            row.label
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>",
            left - 8.0,
            mid + 4.0,
            escape(&row.patient_id)
        );
        let history: Vec<NaiveDate> = row
            .lab_dates
            .iter()
            .copied()
            .filter(|&d| d < row.window.start)
            .chain([row.window.start])
            .collect();
        // consecutive segments of one colour are drawn as a single bar
        let mut runs: Vec<(NaiveDate, NaiveDate, &str)> = Vec::new();
        for w in history.windows(2) {
            let colour = if (w[1] - w[0]).num_days() > GAP_DAYS {
                GREY
            } else {
                BLUE
            };
            match runs.last_mut() {
                Some(run) if run.2 == colour => run.1 = w[1],
                _ => runs.push((w[0], w[1], colour)),
            }
        }
        for (from, to, colour) in runs {
            let _ = writeln!(
                svg,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"10\" fill=\"{colour}\"/>",
                x(from),
                mid - 5.0,
                (x(to) - x(from)).max(0.5)
            );
        }
        let _ = writeln!(
            svg,
            "<rect class=\"window\" x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"14\" fill=\"{ORANGE}\"/>",
            x(row.window.start),
            mid - 7.0,
            (x(row.window.end) - x(row.window.start)).max(1.0)
        );
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    svg
}
