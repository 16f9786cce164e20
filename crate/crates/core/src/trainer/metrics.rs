use std::path::Path;

use super::StepRecord;
use crate::error::Result;

/// One line of the training log. `q` and `map50` are filled on the last
/// step of an outer iteration only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub record: StepRecord,
    pub q: Option<f64>,
    pub map50: Option<f64>,
}

pub const METRICS_HEADER: [&str; 9] = [
    "step",
    "loss_total",
    "loss_cls",
    "loss_bi_scc",
    "loss_norm",
    "loss_guide",
    "loss_cas",
    "q",
    "map50",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Writes the full log, header first.
pub fn write_metrics(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        let l = &r.record.losses;
        w.write_record([
            r.record.step.to_string(),
            format!("{:.9}", l.total),
            format!("{:.9}", l.cls),
            format!("{:.9}", l.bi_scc),
            format!("{:.9}", l.norm),
            format!("{:.9}", l.guide),
            format!("{:.9}", l.cas),
            opt(r.q),
            opt(r.map50),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossBreakdown;

    #[test]
    fn header_and_blank_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rec = StepRecord {
            step: 3,
            losses: LossBreakdown {
                total: 1.5,
                cls: 1.0,
                ..Default::default()
            },
            original: 1.5,
        };
        let rows = [
            MetricsRow {
                record: rec,
                q: None,
                map50: None,
            },
            MetricsRow {
                record: rec,
                q: Some(0.5),
                map50: Some(0.25),
            },
        ];
        write_metrics(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,loss_total,loss_cls,loss_bi_scc,loss_norm,loss_guide,loss_cas,q,map50");
        assert!(lines[1].ends_with(",,"));
        assert!(lines[2].ends_with(",0.500000,0.250000"));
    }
}
