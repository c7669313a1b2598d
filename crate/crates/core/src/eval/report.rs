//! Evaluation reports and their JSON, table and CSV renderings.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, balanced_accuracy, per_class_recall, Confusion};
use crate::error::{config_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    /// `null` for classes absent from the evaluated split.
    pub per_class_recall: Vec<Option<f64>>,
    pub confusion: Confusion,
    pub class_names: Vec<String>,
    pub split_sizes: SplitSizes,
    /// Epoch whose parameters were kept (0 = before any update).
    pub best_epoch: usize,
    pub val_balanced_accuracy: f64,
}

impl EvalReport {
    pub fn from_confusion(
        confusion: Confusion,
        class_names: Vec<String>,
        split_sizes: SplitSizes,
        best_epoch: usize,
        val_balanced_accuracy: f64,
    ) -> Result<Self> {
        if class_names.len() != confusion.classes() {
            return config_err(format!(
                "{} class names for a {}-class confusion matrix",
                class_names.len(),
                confusion.classes()
            ));
        }
        Ok(Self {
            accuracy: accuracy(&confusion)?,
            balanced_accuracy: balanced_accuracy(&confusion)?,
            per_class_recall: per_class_recall(&confusion),
            confusion,
            class_names,
            split_sizes,
            best_epoch,
            val_balanced_accuracy,
        })
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "accuracy           {:.4}", self.accuracy);
        let _ = writeln!(s, "balanced accuracy  {:.4}", self.balanced_accuracy);
        let _ = writeln!(
            s,
            "splits             train {} / val {} / test {}",
            self.split_sizes.train, self.split_sizes.val, self.split_sizes.test
        );
        let _ = writeln!(s, "{:<16} {:>8} {:>8}", "class", "support", "recall");
        for (k, name) in self.class_names.iter().enumerate() {
            let recall = self.per_class_recall[k].map_or("-".to_string(), |r| format!("{r:.4}"));
            let _ = writeln!(s, "{:<16} {:>8} {:>8}", name, self.confusion.support(k), recall);
        }
        s
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Header `true\pred,<class names>`, one row per true class.
    pub fn confusion_csv(&self) -> String {
        let mut s = format!("true\\pred,{}\n", self.class_names.join(","));
        for (name, row) in self.class_names.iter().zip(self.confusion.counts()) {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            let _ = writeln!(s, "{name},{}", cells.join(","));
        }
        s
    }

    /// `class,support,recall` with an empty recall cell for absent classes.
    pub fn recall_csv(&self) -> String {
        let mut s = String::from("class,support,recall\n");
        for (k, name) in self.class_names.iter().enumerate() {
            let r = self.per_class_recall[k].map_or(String::new(), |r| r.to_string());
            let _ = writeln!(s, "{name},{},{r}", self.confusion.support(k));
        }
        s
    }
}

/// Side-by-side summary of several labelled reports.
pub fn comparison_table(reports: &[(&str, &EvalReport)]) -> String {
    let mut s = format!("{:<20} {:>10} {:>18}\n", "model", "accuracy", "balanced accuracy");
    for (name, r) in reports {
        let _ = writeln!(s, "{:<20} {:>10.4} {:>18.4}", name, r.accuracy, r.balanced_accuracy);
    }
    s
}

/// `class,<model names>` with per-class recall of every report in columns.
pub fn recall_comparison_csv(reports: &[(&str, &EvalReport)]) -> Result<String> {
    let Some((_, first)) = reports.first() else {
        return config_err("no reports to compare");
    };
    if reports.iter().any(|(_, r)| r.class_names != first.class_names) {
        return config_err("reports cover different class sets");
    }
    let names: Vec<&str> = reports.iter().map(|(n, _)| *n).collect();
    let mut s = format!("class,{}\n", names.join(","));
    for (k, class) in first.class_names.iter().enumerate() {
        let cells: Vec<String> = reports
            .iter()
            .map(|(_, r)| r.per_class_recall[k].map_or(String::new(), |v| v.to_string()))
            .collect();
        let _ = writeln!(s, "{class},{}", cells.join(","));
    }
    Ok(s)
}
