//! Artifact writers: search-history JSONL, timing-ledger CSV, and the
//! aggregate report tables. Every file starts with the provenance of the
//! run that produced it (manifest hash plus seed), so artifacts can always
//! be traced back to their exact configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planner::{NodeTuneReport, RunDetail};
use crate::runtime::LedgerEntry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub manifest_hash: String,
    pub seed: u64,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// JSON-lines history: the provenance record first, then one line per
/// item.
pub fn write_jsonl<T: Serialize>(path: &Path, provenance: &Provenance, items: &[T]) -> Result<()> {
    let mut text = String::new();
    let head = serde_json::to_string(provenance).map_err(|e| Error::malformed("provenance", e))?;
    text.push_str(&head);
    text.push('\n');
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| Error::malformed("history record", e))?;
        text.push_str(&line);
        text.push('\n');
    }
    write_text(path, &text)
}

fn csv_header(provenance: &Provenance, columns: &str) -> String {
    format!(
        "# manifest_hash={},seed={}\n{columns}\n",
        provenance.manifest_hash, provenance.seed
    )
}

/// Per-node execution timings, in plan order.
pub fn write_ledger_csv(path: &Path, provenance: &Provenance, ledger: &[LedgerEntry]) -> Result<()> {
    let mut text = csv_header(provenance, "node_id,op_kind,source,runtime_ms");
    for entry in ledger {
        let _ = writeln!(
            text,
            "{},{},{},{}",
            entry.node_id,
            entry.op_kind,
            entry.source.name(),
            entry.runtime_ms
        );
    }
    write_text(path, &text)
}

/// Speedup of the selected implementation over the reference kernel, per
/// tuned operator. Selection is an argmin over candidates that always
/// include the reference, so the ratio is at least 1.
pub fn write_per_op_speedup_csv(
    path: &Path,
    provenance: &Provenance,
    tuned: &[NodeTuneReport],
) -> Result<()> {
    let mut text =
        csv_header(provenance, "node_id,op_kind,reference_ms,selected_ms,selected_source,speedup");
    for report in tuned {
        let speedup = report.reference_ms / report.selected.runtime_ms;
        let _ = writeln!(
            text,
            "{},{},{},{},{},{}",
            report.node_id,
            report.op_kind,
            report.reference_ms,
            report.selected.runtime_ms,
            report.selected.source.name(),
            speedup
        );
    }
    write_text(path, &text)
}

/// Best runtime and evaluation spend per (node, strategy) pair.
pub fn write_strategy_comparison_csv(
    path: &Path,
    provenance: &Provenance,
    tuned: &[NodeTuneReport],
) -> Result<()> {
    let mut text =
        csv_header(provenance, "node_id,op_kind,strategy,best_ms,evaluations,from_cache");
    for report in tuned {
        for (strategy, outcome) in &report.outcome.per_strategy {
            let _ = writeln!(
                text,
                "{},{},{},{},{},{}",
                report.node_id,
                report.op_kind,
                strategy.name(),
                outcome.runtime_ms,
                outcome.evaluations,
                outcome.from_cache
            );
        }
    }
    write_text(path, &text)
}

/// Search-trajectory files for one tuned node, one JSONL per strategy that
/// actually ran (cache hits have no trajectory). Returns the files
/// written.
pub fn write_node_histories(
    dir: &Path,
    provenance: &Provenance,
    report: &NodeTuneReport,
) -> Result<Vec<std::path::PathBuf>> {
    let mut written = Vec::new();
    for (strategy, outcome) in &report.outcome.per_strategy {
        let Some(detail) = &outcome.detail else { continue };
        let path = dir.join(format!("{}.{}.jsonl", report.node_id, strategy.name()));
        match detail {
            RunDetail::Genetic(out) => write_jsonl(&path, provenance, &out.history)?,
            RunDetail::Rl(out) => write_jsonl(&path, provenance, &out.curve)?,
            RunDetail::Random(out) => write_jsonl(&path, provenance, &out.history)?,
        }
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::SyntheticEvaluator;
    use crate::graph::OperatorSpec;
    use crate::planner::{
        tune_operator, SearchStrategy, Selection, StrategySource, TuneOptions,
    };
    use crate::schedule::ScheduleTemplate;

    fn provenance() -> Provenance {
        Provenance { manifest_hash: "abc123".into(), seed: 7 }
    }

    fn tuned_report() -> NodeTuneReport {
        let template = ScheduleTemplate::conv_default();
        let eval = SyntheticEvaluator::new("Conv2D(report)", &template, 3, 0.0).unwrap();
        let outcome = tune_operator(
            &OperatorSpec::MatMul,
            &template,
            &[SearchStrategy::Genetic, SearchStrategy::Random],
            &eval,
            None,
            &TuneOptions { budget: Some(30), seed: 2 },
        )
        .unwrap();
        let best = outcome.per_strategy[&SearchStrategy::Genetic].clone();
        NodeTuneReport {
            node_id: "c1".into(),
            op_kind: "Conv2D".into(),
            reference_ms: best.runtime_ms * 2.0,
            selected: Selection {
                source: StrategySource::GeneratedGenetic,
                runtime_ms: best.runtime_ms,
                config: Some(best.config),
            },
            outcome,
        }
    }

    #[test]
    fn jsonl_leads_with_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.jsonl");
        write_jsonl(&path, &provenance(), &[1u32, 2, 3]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        let head: Provenance = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(head, provenance());
        assert_eq!(lines[1], "1");
    }

    #[test]
    fn ledger_csv_has_provenance_comment_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.csv");
        let ledger = vec![LedgerEntry {
            node_id: "c".into(),
            op_kind: "Conv2D".into(),
            source: StrategySource::GeneratedGenetic,
            runtime_ms: 0.5,
        }];
        write_ledger_csv(&path, &provenance(), &ledger).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# manifest_hash=abc123,seed=7");
        assert_eq!(lines[1], "node_id,op_kind,source,runtime_ms");
        assert_eq!(lines[2], "c,Conv2D,genetic,0.5");
    }

    #[test]
    fn speedup_rows_stay_at_least_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("speedup.csv");
        write_per_op_speedup_csv(&path, &provenance(), &[tuned_report()]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let row = text.lines().nth(2).unwrap();
        let speedup: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!(speedup >= 1.0);
        assert!(row.starts_with("c1,Conv2D,"));
    }

    #[test]
    fn strategy_comparison_lists_every_strategy() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cmp.csv");
        write_strategy_comparison_csv(&path, &provenance(), &[tuned_report()]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("c1,Conv2D,genetic,"));
        assert!(text.contains("c1,Conv2D,random,"));
    }

    #[test]
    fn histories_cover_ran_strategies_only() {
        let dir = tempfile::tempdir().unwrap();
        let report = tuned_report();
        let written = write_node_histories(dir.path(), &provenance(), &report).unwrap();
        assert_eq!(written.len(), 2);
        assert!(dir.path().join("c1.genetic.jsonl").exists());
        assert!(dir.path().join("c1.random.jsonl").exists());

        let mut cached = report.clone();
        for outcome in cached.outcome.per_strategy.values_mut() {
            outcome.detail = None;
            outcome.from_cache = true;
        }
        let none = write_node_histories(dir.path(), &provenance(), &cached).unwrap();
        assert!(none.is_empty());
    }
}
