//! Trace-file analysis: per-loop metrics, message and violation counts,
//! SoC extrema, the energy ledger, and the feedback-delay law check. The
//! summary renders as `key=value` lines, one record per line.

use std::collections::BTreeMap;
use std::io::Write;

use crate::control::{loop_metrics, LoopMetrics};
use crate::error::{Error, Result};
use crate::trace::{fmt_f64, ParsedTrace, RowKind};

#[derive(Debug, Clone, PartialEq)]
pub struct LoopReport {
    pub node: String,
    pub metrics: LoopMetrics,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub scenario: String,
    pub seed: String,
    pub ticks: u64,
    pub loops: Vec<LoopReport>,
    pub messages_by_kind: BTreeMap<String, u64>,
    pub routing_violations: u64,
    pub authority_violations: u64,
    pub transitions: u64,
    pub soc_min: Option<f64>,
    pub soc_max: Option<f64>,
    pub soc_end: Option<f64>,
    /// Relative error of the SoC ledger reconciliation, when the trace
    /// carries the power world's rows.
    pub energy_residual_rel: Option<f64>,
    pub feedback_law_checked: u64,
    pub feedback_law_violations: u64,
}

/// Quantization-aware equality for values that went through 9-significant-
/// digit printing.
fn quantized_eq(lhs: f64, rhs: f64, scale: f64) -> bool {
    (lhs - rhs).abs() <= 2e-8 * scale.max(1.0)
}

/// Check `e_r(k) + f_p(k-1) = r(k)` on every control-loop row after the
/// first, per node. Returns (checked, violations).
pub fn check_feedback_law(trace: &ParsedTrace) -> (u64, u64) {
    let mut prev_f: BTreeMap<&str, f64> = BTreeMap::new();
    let mut checked = 0;
    let mut violations = 0;
    for row in trace.rows_of(RowKind::Signal) {
        if row.name != "loop" {
            continue;
        }
        let (Some(r), Some(e), Some(f)) = (row.f64("r"), row.f64("e_r"), row.f64("f_p")) else {
            continue;
        };
        if let Some(f_prev) = prev_f.get(row.node.as_str()) {
            checked += 1;
            let scale = r.abs().max(f_prev.abs());
            if !quantized_eq(e + f_prev, r, scale) {
                violations += 1;
            }
        }
        prev_f.insert(row.node.as_str(), f);
    }
    (checked, violations)
}

pub fn analyze(trace: &ParsedTrace) -> Result<Report> {
    let mut report = Report {
        scenario: trace.meta.get("scenario").cloned().unwrap_or_default(),
        seed: trace.meta.get("seed").cloned().unwrap_or_default(),
        ticks: trace
            .meta
            .get("ticks")
            .and_then(|v| v.parse().ok())
            .unwrap_or(0),
        ..Report::default()
    };

    // Per-loop error series.
    let mut errors: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for row in trace.rows_of(RowKind::Signal) {
        if row.name == "loop" {
            if let Some(e) = row.f64("e_r") {
                errors.entry(row.node.clone()).or_default().push(e);
            }
        }
    }
    for (node, errs) in &errors {
        let bound = trace
            .meta_f64(&format!("settled_bound:{node}"))
            .unwrap_or(0.05);
        report.loops.push(LoopReport {
            node: node.clone(),
            metrics: loop_metrics(errs, bound, None)?,
            rows: errs.len(),
        });
    }

    for row in trace.rows_of(RowKind::Message) {
        *report.messages_by_kind.entry(row.name.clone()).or_default() += 1;
    }
    for row in trace.rows_of(RowKind::Event) {
        match row.name.as_str() {
            "routing_violation" => report.routing_violations += 1,
            "authority_violation" => report.authority_violations += 1,
            _ => {}
        }
    }
    report.transitions = trace.rows_of(RowKind::Transition).count() as u64;

    // SoC extrema and the energy ledger from the environment rows.
    let mut ledger_sum = 0.0;
    let mut residuals = 0.0;
    let mut have_power_rows = false;
    let dt = trace.meta_f64("dt").unwrap_or(1.0);
    let capacity = trace.meta_f64("capacity_as");
    for row in trace.rows_of(RowKind::Signal) {
        if row.name != "env" {
            continue;
        }
        let Some(soc) = row.f64("soc") else { continue };
        have_power_rows = true;
        report.soc_min = Some(report.soc_min.map_or(soc, |m: f64| m.min(soc)));
        report.soc_max = Some(report.soc_max.map_or(soc, |m: f64| m.max(soc)));
        report.soc_end = Some(soc);
        if let (Some(ic), Some(il), Some(cap)) =
            (row.f64("i_circuit"), row.f64("i_load"), capacity)
        {
            ledger_sum += (ic - il) * dt / cap;
        }
    }
    for row in trace.rows_of(RowKind::Event) {
        if row.name == "soc_clamp" {
            if let Some(r) = row.f64("residual") {
                residuals += r;
            }
        }
    }
    if have_power_rows {
        if let (Some(soc_initial), Some(soc_end)) = (trace.meta_f64("soc_initial"), report.soc_end)
        {
            let lhs = soc_end - soc_initial + residuals;
            let denom = ledger_sum.abs().max(1e-9);
            report.energy_residual_rel = Some((lhs - ledger_sum).abs() / denom);
        }
    }

    let (checked, violations) = check_feedback_law(trace);
    report.feedback_law_checked = checked;
    report.feedback_law_violations = violations;

    Ok(report)
}

pub fn write_summary(report: &Report, mut sink: impl Write) -> Result<()> {
    writeln!(sink, "# loopstack summary v1")?;
    writeln!(
        sink,
        "run scenario={} seed={} ticks={}",
        report.scenario, report.seed, report.ticks
    )?;
    for l in &report.loops {
        let settle = l
            .metrics
            .settle_tick
            .map(|t| t.to_string())
            .unwrap_or_else(|| "none".into());
        writeln!(
            sink,
            "loop node={} rows={} max_abs_error={} settled_bound={} settle_tick={settle}",
            l.node,
            l.rows,
            fmt_f64(l.metrics.max_abs_error),
            fmt_f64(l.metrics.settled_bound),
        )?;
    }
    let total: u64 = report.messages_by_kind.values().sum();
    let mut msg_line = format!("messages total={total}");
    for (kind, n) in &report.messages_by_kind {
        msg_line.push_str(&format!(" {kind}={n}"));
    }
    writeln!(sink, "{msg_line}")?;
    writeln!(
        sink,
        "violations routing={} authority={}",
        report.routing_violations, report.authority_violations
    )?;
    writeln!(sink, "transitions total={}", report.transitions)?;
    if let (Some(mi), Some(ma), Some(end)) = (report.soc_min, report.soc_max, report.soc_end) {
        writeln!(
            sink,
            "soc min={} max={} end={}",
            fmt_f64(mi),
            fmt_f64(ma),
            fmt_f64(end)
        )?;
    }
    if let Some(res) = report.energy_residual_rel {
        writeln!(sink, "energy residual_rel={}", fmt_f64(res))?;
    }
    writeln!(
        sink,
        "feedback_law checked={} violations={}",
        report.feedback_law_checked, report.feedback_law_violations
    )?;
    Ok(())
}

/// Parse a trace file and produce its report.
pub fn report_from_path(path: &std::path::Path) -> Result<Report> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Usage(format!("cannot open trace {}: {e}", path.display())))?;
    let trace = crate::trace::parse(std::io::BufReader::new(file))?;
    analyze(&trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{parse, TraceWriter};

    fn tiny_trace() -> ParsedTrace {
        let mut buf = Vec::new();
        {
            let mut w = TraceWriter::new(&mut buf).unwrap();
            w.meta(&[
                ("scenario", "t".into()),
                ("seed", "1".into()),
                ("ticks", "3".into()),
                ("dt", fmt_f64(1.0)),
                ("settled_bound:a", fmt_f64(0.1)),
            ])
            .unwrap();
            // r = 1.0 throughout; e_r(k) = 1 - f_p(k-1).
            let fs = [0.5, 0.75, 0.875];
            let mut prev = 0.0;
            for (k, f) in fs.iter().enumerate() {
                w.row(
                    k as u64,
                    5,
                    RowKind::Signal,
                    "a",
                    "loop",
                    &[
                        ("r", fmt_f64(1.0)),
                        ("e_r", fmt_f64(1.0 - prev)),
                        ("u", fmt_f64(0.0)),
                        ("y", fmt_f64(*f)),
                        ("d_p", fmt_f64(0.0)),
                        ("s_p", fmt_f64(*f)),
                        ("f_p", fmt_f64(*f)),
                    ],
                )
                .unwrap();
                prev = *f;
            }
        }
        parse(&buf[..]).unwrap()
    }

    #[test]
    fn feedback_law_holds_on_consistent_trace() {
        let trace = tiny_trace();
        let (checked, violations) = check_feedback_law(&trace);
        assert_eq!(checked, 2);
        assert_eq!(violations, 0);
    }

    #[test]
    fn feedback_law_catches_corruption() {
        let mut trace = tiny_trace();
        // Corrupt e_r on the last row.
        let row = trace.rows.iter_mut().last().unwrap();
        for (k, v) in row.fields.iter_mut() {
            if k == "e_r" {
                *v = fmt_f64(0.9);
            }
        }
        let (_, violations) = check_feedback_law(&trace);
        assert_eq!(violations, 1);
    }

    #[test]
    fn analyze_reads_bounds_from_meta() {
        let report = analyze(&tiny_trace()).unwrap();
        assert_eq!(report.loops.len(), 1);
        assert_eq!(report.loops[0].metrics.settled_bound, 0.1);
        assert_eq!(report.feedback_law_violations, 0);
    }

    #[test]
    fn summary_renders() {
        let report = analyze(&tiny_trace()).unwrap();
        let mut out = Vec::new();
        write_summary(&report, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.contains("feedback_law checked=2 violations=0"));
    }
}
