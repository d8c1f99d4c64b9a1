//! Human-readable tables and SVG plots for reports and training logs.

use std::fmt::Write as _;

use super::MetricReport;
use crate::training::LogEntry;

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

pub fn metric_table(r: &MetricReport) -> String {
    let rows = [
        ("Accuracy", r.accuracy),
        ("Judge", r.judge),
        ("BLEU", r.bleu),
        ("ROUGE_L", r.rouge_l),
        ("CIDEr", r.cider),
        ("Language", r.lang_score),
        ("Match (tags)", r.match_accuracy),
        ("Match", r.match_score),
        ("Final", r.final_score),
    ];
    let mut s = String::new();
    let _ = writeln!(s, "| Metric       | Value  |");
    let _ = writeln!(s, "|--------------|--------|");
    for (name, v) in rows {
        let _ = writeln!(s, "| {name:<12} | {:>6} |", cell(v));
    }
    let _ = writeln!(
        s,
        "\n{} records ({} closed, {} open), judge: {}, CoT: {}",
        r.records, r.closed, r.open, r.judge_provenance, if r.cot { "on" } else { "off" }
    );
    s
}

const W: f64 = 640.0;
const H: f64 = 320.0;
const PAD: f64 = 40.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Bar chart of the report's 0-100 metrics.
pub fn metric_bars_svg(r: &MetricReport) -> String {
    let bars = [("Acc", r.accuracy), ("Judge", r.judge), ("Lang", r.lang_score), ("Match", r.match_score), ("Final", r.final_score)];
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n");
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let slot = (W - 2.0 * PAD) / bars.len() as f64;
    let plot_h = H - 2.0 * PAD;
    for (i, (name, v)) in bars.iter().enumerate() {
        let x = PAD + i as f64 * slot + slot * 0.15;
        let val = v.unwrap_or(0.0).clamp(0.0, 100.0);
        let h = plot_h * val / 100.0;
        let _ = writeln!(s, "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"#4878a8\"/>", H - PAD - h, slot * 0.7);
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">{}</text>", x + slot * 0.35, H - PAD + 16.0, escape(name));
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{}</text>", x + slot * 0.35, H - PAD - h - 4.0, cell(*v));
    }
    let _ = writeln!(s, "<line x1=\"{PAD}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>", H - PAD, W - PAD, H - PAD);
    s.push_str("</svg>\n");
    s
}

/// Polyline plot of text and total loss per step.
pub fn loss_curve_svg(log: &[LogEntry]) -> String {
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n");
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    if !log.is_empty() {
        let max_y = log.iter().map(|e| e.total.max(e.l_txt)).fold(f64::MIN_POSITIVE, f64::max);
        let n = (log.len() - 1).max(1) as f64;
        let pt = |i: usize, y: f64| (PAD + (W - 2.0 * PAD) * i as f64 / n, H - PAD - (H - 2.0 * PAD) * (y / max_y).clamp(0.0, 1.0));
        for (series, colour, label) in [(0, "#c44e52", "total"), (1, "#4878a8", "l_txt")] {
            let pts: Vec<String> = log
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    let (x, y) = pt(i, if series == 0 { e.total } else { e.l_txt });
                    format!("{x:.1},{y:.1}")
                })
                .collect();
            let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\" points=\"{}\"/>", pts.join(" "));
            let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" fill=\"{colour}\">{label}</text>", W - PAD - 60.0, PAD + 14.0 * (series as f64 + 1.0));
        }
        let _ = writeln!(s, "<text x=\"{PAD}\" y=\"{:.1}\" font-size=\"11\">max {max_y:.3}, {} steps</text>", PAD - 10.0, log.len());
    }
    let _ = writeln!(s, "<line x1=\"{PAD}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>", H - PAD, W - PAD, H - PAD);
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_and_svgs_render() {
        let r = MetricReport { accuracy: Some(75.0), final_score: None, judge_provenance: "fallback".into(), ..MetricReport::default() };
        let t = metric_table(&r);
        assert!(t.contains("| Accuracy     |  75.00 |") && t.contains("| Final        |      - |"));
        assert!(metric_bars_svg(&r).starts_with("<svg") && metric_bars_svg(&r).trim_end().ends_with("</svg>"));
        let log = vec![
            LogEntry { step: 0, lr: 0.0, l_txt: 2.0, l_det: 0.0, l_mot: 0.0, l_plan: 0.0, l_e2e: 0.0, total: 2.0, lambda: 0.0, token_acc: 0.1 },
            LogEntry { step: 1, lr: 0.1, l_txt: 1.0, l_det: 0.0, l_mot: 0.0, l_plan: 0.0, l_e2e: 0.0, total: 1.0, lambda: 0.0, token_acc: 0.2 },
        ];
        assert_eq!(loss_curve_svg(&log).matches("<polyline").count(), 2);
    }
}
