//! Text renderings of evaluation results.

use std::fmt::Write;

use ucloudnet_core::metrics::{EvalReport, PrPoint};

/// `key=value` lines, one per metric.
pub fn eval_report(run: &str, part: &str, r: &EvalReport) -> String {
    let c = &r.confusion;
    let mut s = String::new();
    let _ = writeln!(s, "run={run}");
    let _ = writeln!(s, "split={part}");
    let _ = writeln!(s, "samples={}", r.samples);
    let _ = writeln!(s, "threshold={}", r.threshold);
    let _ = writeln!(s, "tp={}\nfp={}\nfn={}\ntn={}", c.tp, c.fp, c.fn_, c.tn);
    let _ = writeln!(s, "precision={:.6}", r.precision);
    let _ = writeln!(s, "recall={:.6}", r.recall);
    let _ = writeln!(s, "f_measure={:.6}", r.f_score);
    let _ = writeln!(s, "error_rate={:.6}", r.error_rate);
    let _ = writeln!(s, "auc_pr={:.6}", r.auc_pr);
    s
}

pub fn pr_curve_csv(points: &[PrPoint]) -> String {
    let mut s = String::from("threshold,precision,recall\n");
    for p in points {
        let _ = writeln!(s, "{:.6},{:.6},{:.6}", p.threshold, p.precision, p.recall);
    }
    s
}

/// Parses `key=value` lines back into pairs.
pub fn parse_kv(text: &str) -> Vec<(String, String)> {
    text.lines().filter_map(|l| l.split_once('=')).map(|(k, v)| (k.trim().to_string(), v.trim().to_string())).collect()
}
