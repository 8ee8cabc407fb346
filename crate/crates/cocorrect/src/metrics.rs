//! Per-epoch metrics, the run CSV, and accuracy computations.
//!
//! metrics.csv columns, in order:
//! epoch,stage,acc_test_net1,acc_test_net2,acc_val_net1,acc_val_net2,
//! acc_label,l_c,l_o,l_e,r_t,unlocked,dirty,seconds
//!
//! Fields that do not apply to a run (second network of the baseline,
//! label accuracy without a store, validation without a split) are left
//! empty rather than filled with sentinels.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "epoch,stage,acc_test_net1,acc_test_net2,acc_val_net1,acc_val_net2,acc_label,l_c,l_o,l_e,r_t,unlocked,dirty,seconds";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// 1 = warm-up, 3 = correction, 4 = fine-tune (2 is the one-shot
    /// curriculum computation and emits no rows).
    pub stage: u8,
    pub acc_test_net1: Option<f64>,
    pub acc_test_net2: Option<f64>,
    pub acc_val_net1: Option<f64>,
    pub acc_val_net2: Option<f64>,
    pub acc_label: Option<f64>,
    pub l_c: Option<f64>,
    pub l_o: Option<f64>,
    pub l_e: Option<f64>,
    pub r_t: Option<f64>,
    pub unlocked: Option<usize>,
    pub dirty: Option<usize>,
    pub seconds: f64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn fmt_opt_usize(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(field: &str) -> Option<f64> {
    if field.is_empty() {
        None
    } else {
        field.parse().ok()
    }
}

impl MetricsRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{:.3}",
            self.epoch,
            self.stage,
            fmt_opt(self.acc_test_net1),
            fmt_opt(self.acc_test_net2),
            fmt_opt(self.acc_val_net1),
            fmt_opt(self.acc_val_net2),
            fmt_opt(self.acc_label),
            fmt_opt(self.l_c),
            fmt_opt(self.l_o),
            fmt_opt(self.l_e),
            fmt_opt(self.r_t),
            fmt_opt_usize(self.unlocked),
            fmt_opt_usize(self.dirty),
            self.seconds
        )
    }

    pub fn from_csv_row(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 14 {
            return Err(Error::Runtime(format!(
                "metrics row has {} fields, expected 14: {line}",
                fields.len()
            )));
        }
        Ok(MetricsRecord {
            epoch: fields[0]
                .parse()
                .map_err(|e| Error::Runtime(format!("bad epoch: {e}")))?,
            stage: fields[1]
                .parse()
                .map_err(|e| Error::Runtime(format!("bad stage: {e}")))?,
            acc_test_net1: parse_opt(fields[2]),
            acc_test_net2: parse_opt(fields[3]),
            acc_val_net1: parse_opt(fields[4]),
            acc_val_net2: parse_opt(fields[5]),
            acc_label: parse_opt(fields[6]),
            l_c: parse_opt(fields[7]),
            l_o: parse_opt(fields[8]),
            l_e: parse_opt(fields[9]),
            r_t: parse_opt(fields[10]),
            unlocked: fields[11].parse().ok(),
            dirty: fields[12].parse().ok(),
            seconds: fields[13].parse().unwrap_or(0.0),
        })
    }
}

/// Fraction of predictions equal to the reference labels.
pub fn acc_class(predictions: &[u16], clean_labels: &[u16]) -> Result<f64> {
    if predictions.len() != clean_labels.len() {
        return Err(Error::Shape(format!(
            "acc_class: {} predictions vs {} labels",
            predictions.len(),
            clean_labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Shape("acc_class: empty inputs".to_string()));
    }
    let hits = predictions
        .iter()
        .zip(clean_labels)
        .filter(|(p, c)| p == c)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Fraction of binarized store labels matching the clean train labels.
/// Same arithmetic as `acc_class`; a separate name because the reference
/// set differs (train annotations, not test predictions).
pub fn acc_label(store_hard_labels: &[u16], clean_train_labels: &[u16]) -> Result<f64> {
    acc_class(store_hard_labels, clean_train_labels)
}

/// Append-only metrics writer owned by the training loop.
pub struct MetricsWriter {
    file: std::io::BufWriter<std::fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "{CSV_HEADER}")?;
        Ok(MetricsWriter { file })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        writeln!(self.file, "{}", record.to_csv_row())?;
        self.file.flush()?;
        Ok(())
    }
}

/// Read a metrics CSV written by `MetricsWriter`.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(h)) if h == CSV_HEADER => {}
        Some(Ok(h)) => {
            return Err(Error::Runtime(format!(
                "unexpected metrics header in {}: {h}",
                path.display()
            )))
        }
        _ => return Err(Error::Runtime(format!("empty metrics file {}", path.display()))),
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(MetricsRecord::from_csv_row(&line)?);
    }
    Ok(out)
}
