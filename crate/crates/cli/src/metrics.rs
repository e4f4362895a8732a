//! Metrics files: a wide per-run training CSV and a long append-only CSV
//! shared across runs.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use sessrec_core::data::ScenarioSet;
use sessrec_core::train::StepMetrics;
use sessrec_core::{Error, Result};

/// Long-format row, one metric value per line.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub experiment: String,
    /// Optimizer step or incremental phase day.
    pub step: i64,
    pub scenario: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

pub const METRICS_HEADER: &str = "experiment,step,scenario,metric,value,seed";

/// Append rows, writing the header only when the file is new. A header
/// mismatch on an existing file is an error rather than silent corruption.
pub fn emit_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let existing_header = match std::fs::File::open(path) {
        Ok(f) => BufReader::new(f).lines().next().transpose()?,
        Err(_) => None,
    };
    if let Some(h) = &existing_header {
        if h != METRICS_HEADER {
            return Err(Error::data(format!(
                "metrics header mismatch in {}: {:?}",
                path.display(),
                h
            )));
        }
    }
    let mut out = String::new();
    if existing_header.is_none() {
        out.push_str(METRICS_HEADER);
        out.push('\n');
    }
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.experiment, r.step, r.scenario, r.metric, r.value, r.seed
        );
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

pub const TRAIN_HEADER: &str = "step,scenario,loss_nce,loss_click,loss_pay,loss_msp,loss_total";

/// Wide training CSV: one row per (step, scenario) plus an overall row per
/// step carrying the aggregated total.
pub fn train_metrics_csv(series: &[StepMetrics], scenarios: &ScenarioSet) -> String {
    let mut out = String::from(TRAIN_HEADER);
    out.push('\n');
    for m in series {
        for (sc, l) in &m.breakdown.scenarios {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                m.step,
                scenarios.name(*sc),
                l.nce,
                l.click,
                l.pay,
                l.msp,
                l.nce + l.click + l.pay + l.msp,
            );
        }
        let _ = writeln!(
            out,
            "{},overall,,,,,{}",
            m.step, m.breakdown.total
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn row(exp: &str, metric: &str, v: f64) -> MetricsRow {
        MetricsRow {
            experiment: exp.into(),
            step: 1,
            scenario: "overall".into(),
            metric: metric.into(),
            value: v,
            seed: 42,
        }
    }

    #[test]
    fn two_appends_share_one_header() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        emit_metrics(&p, &[row("a", "hr@100", 0.1)]).unwrap();
        emit_metrics(&p, &[row("b", "hr@100", 0.2)]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], METRICS_HEADER);
        assert!(lines[1].starts_with("a,"));
        assert!(lines[2].starts_with("b,"));
    }

    #[test]
    fn header_mismatch_is_an_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        std::fs::write(&p, "something,else\n").unwrap();
        assert!(emit_metrics(&p, &[row("a", "hr@100", 0.1)]).is_err());
    }
}
