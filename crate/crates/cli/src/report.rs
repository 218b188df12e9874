//! Human-readable output on stdout, machine-readable CSV files.

use std::path::Path;

use serde::Serialize;
use tandem_core::calibrator::theoretical_bound;
use tandem_core::harness::{RunSummary, SweepCell, SweepRow};
use tandem_core::rules::DominanceReport;
use tandem_core::runlog::ReplayReport;

use crate::Fatal;

fn rate(r: Option<f64>) -> String {
    r.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

pub fn summary(s: &RunSummary) {
    let bound = |target: f64| theoretical_bound(target, s.eta, s.days).unwrap_or(f64::NAN);
    let cap = 1.0 + s.eta;
    println!("days         {}", s.days);
    println!(
        "harm         avg {:.4}  target {:.2}  bound {:.4}",
        s.final_avg_ch,
        s.epsilon,
        bound(s.epsilon)
    );
    println!(
        "complement   avg {:.4}  target {:.2}  bound {:.4}",
        s.final_avg_comp,
        s.delta,
        bound(s.delta)
    );
    println!(
        "thresholds   tau {:.4} (max {:.4})  lambda {:.4} (max {:.4})  cap {cap:.4}",
        s.final_tau, s.max_tau, s.final_lambda, s.max_lambda
    );
    println!(
        "outcomes     gt_loss {}  gt_gain {}  rounds/day {:.2}  ai set {:.2}",
        rate(s.gt_loss_rate),
        rate(s.gt_gain_rate),
        s.mean_rounds,
        s.mean_ai_set_size
    );
    println!(
        "bound audit  {}  ({} failing prefixes)",
        verdict(s.audit_pass),
        s.audit_failures
    );
    println!("trajectory   {}", verdict(s.trajectory_ok));
}

pub fn replay(r: &ReplayReport) {
    match &r.divergence {
        None => println!("replay       PASS  ({} days match)", r.days_checked),
        Some(d) => println!(
            "replay       FAIL  first divergence at day {} (line {}): {} logged {} recomputed {}",
            d.day_index, d.position, d.field, d.logged, d.recomputed
        ),
    }
}

pub fn dominance(r: &DominanceReport, labels: usize, rounds: usize, max_set: usize) {
    println!(
        "{}  {}  ({} transcripts, {labels} labels, up to {rounds} rounds, sets of at most {max_set})",
        verdict(r.holds),
        r.rule,
        r.transcripts_checked
    );
    if let Some(c) = r.counterexamples.first() {
        let transcript: Vec<String> = c
            .transcript
            .iter()
            .map(|h| format!("{{{}}}", h.join(",")))
            .collect();
        println!(
            "  counterexample: label {} round {} transcript [{}]: rule {} but online activation {}",
            c.label,
            c.round,
            transcript.join(" "),
            c.rule_value,
            c.activation_value
        );
        if r.counterexamples.len() > 1 {
            println!("  ({} counterexamples in total)", r.counterexamples.len());
        }
    }
}

pub fn sweep_table(rows: &[SweepRow], shape: &str) {
    println!("sweep: {shape}");
    println!(
        "{:>8} {:>8} {:>6} {:>10} {:>10} {:>8} {:>8} {:>6}",
        "epsilon", "delta", "seeds", "avg_ch", "avg_comp", "gt_loss", "gt_gain", "audit"
    );
    for r in rows {
        println!(
            "{:>8.3} {:>8.3} {:>6} {:>10.4} {:>10.4} {:>8.4} {:>8.4} {:>6}",
            r.epsilon,
            r.delta,
            r.seeds,
            r.mean_avg_ch,
            r.mean_avg_comp,
            r.mean_gt_loss_rate,
            r.mean_gt_gain_rate,
            verdict(r.all_audits_pass)
        );
    }
}

#[derive(Serialize)]
struct CellRecord {
    epsilon: f64,
    delta: f64,
    seed: u64,
    days: u64,
    final_avg_ch: f64,
    final_avg_comp: f64,
    final_tau: f64,
    final_lambda: f64,
    max_tau: f64,
    max_lambda: f64,
    gt_loss_rate: Option<f64>,
    gt_gain_rate: Option<f64>,
    audit_pass: bool,
    trajectory_ok: bool,
}

pub fn write_cells(path: &Path, cells: &[SweepCell]) -> Result<(), Fatal> {
    let mut w = csv::Writer::from_path(path)?;
    for c in cells {
        let s = &c.summary;
        w.serialize(CellRecord {
            epsilon: c.epsilon,
            delta: c.delta,
            seed: c.seed,
            days: s.days,
            final_avg_ch: s.final_avg_ch,
            final_avg_comp: s.final_avg_comp,
            final_tau: s.final_tau,
            final_lambda: s.final_lambda,
            max_tau: s.max_tau,
            max_lambda: s.max_lambda,
            gt_loss_rate: s.gt_loss_rate,
            gt_gain_rate: s.gt_gain_rate,
            audit_pass: s.audit_pass,
            trajectory_ok: s.trajectory_ok,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rows(path: &Path, rows: &[SweepRow]) -> Result<(), Fatal> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
