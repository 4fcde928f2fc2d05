use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use xmc_core::{Error, Result};

/// One line of a metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub seed: String,
    pub strategy: String,
    pub method: String,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(seed: u64, strategy: &str, method: &str, split: &str, metric: &str, value: f64) -> Self {
        Self {
            seed: seed.to_string(),
            strategy: strategy.to_string(),
            method: method.to_string(),
            split: split.to_string(),
            metric: metric.to_string(),
            value,
        }
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Data {
        line: e.position().map_or(0, |p| p.line() as usize),
        msg: format!("{}: {e}", path.display()),
    }
}

pub fn write_rows(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

/// Mean and sample standard deviation per (strategy, method, split,
/// metric) over seeds, as rows with seed `mean` and `std`.
pub fn aggregate(rows: &[MetricRow]) -> Vec<MetricRow> {
    let mut groups: BTreeMap<(String, String, String, String), Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.seed != "mean" && r.seed != "std") {
        groups
            .entry((r.strategy.clone(), r.method.clone(), r.split.clone(), r.metric.clone()))
            .or_default()
            .push(r.value);
    }
    let mut out = Vec::new();
    for ((strategy, method, split, metric), v) in groups {
        let (mean, std) = mean_std(&v);
        for (seed, value) in [("mean", mean), ("std", std)] {
            out.push(MetricRow {
                seed: seed.into(),
                strategy: strategy.clone(),
                method: method.clone(),
                split: split.clone(),
                metric: metric.clone(),
                value,
            });
        }
    }
    out
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_and_aggregate() {
        let rows = vec![
            MetricRow::new(1, "baseline", "attention", "test", "f1", 0.5),
            MetricRow::new(2, "baseline", "attention", "test", "f1", 0.7),
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_rows(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("seed,strategy,method,split,metric,value\n"));
        assert_eq!(read_rows(&p).unwrap(), rows);
        let agg = aggregate(&rows);
        assert_eq!(agg[0].seed, "mean");
        assert!((agg[0].value - 0.6).abs() < 1e-15);
        assert!((agg[1].value - 0.02f64.sqrt()).abs() < 1e-15);
    }
}
