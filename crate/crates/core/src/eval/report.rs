use std::fmt::Write as _;
use std::path::Path;

use crate::scene::io::write_atomic;

use super::EvalError;

/// One metric value for a scene and view.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub scene: String,
    pub view: String,
}

/// Metric table plus aggregate summary entries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub rows: Vec<MetricRow>,
    pub summary: Vec<(String, f64)>,
}

impl Report {
    pub fn push(&mut self, metric: &str, value: f64, scene: impl ToString, view: impl ToString) {
        self.rows.push(MetricRow {
            metric: metric.to_string(),
            value,
            scene: scene.to_string(),
            view: view.to_string(),
        });
    }

    pub fn set_summary(&mut self, key: &str, value: f64) {
        match self.summary.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.summary.push((key.to_string(), value)),
        }
    }

    pub fn summary_value(&self, key: &str) -> Option<f64> {
        self.summary.iter().find(|(k, _)| k == key).map(|e| e.1)
    }

    /// Mean of `metric` over all rows, if any.
    pub fn mean(&self, metric: &str) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.metric == metric).map(|r| r.value).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// `metric value scene view` lines.
    pub fn table(&self) -> String {
        let mut s = String::from("metric value scene view\n");
        for r in &self.rows {
            let _ = writeln!(s, "{} {:.6} {} {}", r.metric, r.value, r.scene, r.view);
        }
        s
    }

    /// `key = value` lines.
    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.summary {
            let _ = writeln!(s, "{k} = {v:.6}");
        }
        s
    }

    /// Write `metrics.txt` and `summary.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("metrics.txt"), self.table().as_bytes())?;
        write_atomic(&dir.join("summary.txt"), self.summary_text().as_bytes())?;
        Ok(())
    }
}
