use super::eval::MetricsReport;
use super::experiment::{save_edited, ExperimentResult};
use crate::error::{Result, WiseError};
use crate::model::TinyTransformer;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const CSV_HEADER: &str = "T,rel,gen,loc,avg,ppl_loc,wall_time";

pub fn metrics_csv(metrics: &[MetricsReport]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for m in metrics {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            m.t_edits, m.rel, m.gen, m.loc, m.avg, m.ppl_loc, m.wall_time
        );
    }
    s
}

pub fn summary_text(metrics: &[MetricsReport]) -> String {
    let mut s = String::new();
    for m in metrics {
        let _ = writeln!(
            s,
            "T={:<4} Rel {:.3}  Gen {:.3} ({} paraphrases)  Loc {:.3}  Avg {:.3}  PPL(loc) {:.3}  token-Rel {:.3}  {:.2}s",
            m.t_edits, m.rel, m.gen, m.gen_count, m.loc, m.avg, m.ppl_loc, m.rel_token, m.wall_time
        );
    }
    s
}

/// Writes the table to `path` and a plain-text summary next to it with a
/// `.txt` extension.
pub fn report(metrics: &[MetricsReport], path: impl AsRef<Path>) -> Result<PathBuf> {
    if metrics.is_empty() {
        return Err(WiseError::Input("no metrics to report".into()));
    }
    let path = path.as_ref();
    fs::write(path, metrics_csv(metrics))?;
    let summary = path.with_extension("txt");
    fs::write(&summary, summary_text(metrics))?;
    Ok(summary)
}

pub fn histogram_csv(rows: &[(String, f64)]) -> String {
    let mut s = String::from("query_kind,delta\n");
    for (kind, d) in rows {
        let _ = writeln!(s, "{kind},{d}");
    }
    s
}

/// `report.csv`, `report.txt`, `histogram.csv`, `edits.jsonl`,
/// `merges.jsonl` and `edited.ckpt` under `dir`.
pub fn write_artifacts(result: &ExperimentResult, model: &TinyTransformer<f64>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let rows = &result.reports;
    let mut summary = summary_text(rows);
    if let Some(b) = &result.baseline {
        summary.push_str("fine-tuning baseline:\n");
        summary.push_str(&summary_text(std::slice::from_ref(b)));
        fs::write(dir.join("baseline.csv"), metrics_csv(std::slice::from_ref(b)))?;
    }
    report(rows, dir.join("report.csv"))?;
    fs::write(dir.join("report.txt"), summary)?;
    fs::write(dir.join("histogram.csv"), histogram_csv(&result.histogram))?;
    let jsonl = |items: Vec<String>| items.into_iter().map(|l| l + "\n").collect::<String>();
    fs::write(
        dir.join("edits.jsonl"),
        jsonl(result.records.iter().map(|r| serde_json::to_string(r).expect("record")).collect()),
    )?;
    fs::write(
        dir.join("merges.jsonl"),
        jsonl(result.merge_events.iter().map(|e| serde_json::to_string(e).expect("event")).collect()),
    )?;
    save_edited(dir.join("edited.ckpt"), model, &result.memories, result.aggregation)
}
