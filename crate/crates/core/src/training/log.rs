//! Per-epoch training log, written as CSV plus a JSON-lines mirror. Each row is written and
//! flushed in one call, so an interrupted run leaves only complete rows behind.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::LossBreakdown;

pub const CSV_COLUMNS: [&str; 8] = [
    "epoch",
    "lr",
    "loss_total",
    "loss_rpn",
    "loss_frcnn",
    "loss_mask",
    "eval_map50",
    "wall_seconds",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Means over the epoch's steps.
    pub loss_total: f64,
    pub loss_rpn: f64,
    pub loss_frcnn: f64,
    pub loss_mask: f64,
    pub eval_map50: Option<f64>,
    pub wall_seconds: f64,
    /// Losses of the epoch's final step.
    pub last_step: LossBreakdown,
    pub steps: usize,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let map = self.eval_map50.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.loss_total,
            self.loss_rpn,
            self.loss_frcnn,
            self.loss_mask,
            map,
            self.wall_seconds
        )
    }
}

/// Appends rows to `train_log.csv` and `train_log.jsonl` in a directory.
pub struct LogWriter {
    csv: PathBuf,
    jsonl: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> super::TrainError + '_ {
    move |source| super::TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl LogWriter {
    pub const CSV_NAME: &'static str = "train_log.csv";
    pub const JSONL_NAME: &'static str = "train_log.jsonl";

    /// Starts the logs afresh, keeping rows for epochs before `keep_before` if files exist.
    pub fn open(dir: &Path, keep_before: usize) -> Result<Self, super::TrainError> {
        let csv = dir.join(Self::CSV_NAME);
        let jsonl = dir.join(Self::JSONL_NAME);
        let kept_csv: Vec<String> = read_lines(&csv)
            .into_iter()
            .skip(1)
            .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e < keep_before))
            .collect();
        let kept_json: Vec<String> = read_lines(&jsonl)
            .into_iter()
            .filter(|l| {
                serde_json::from_str::<EpochLog>(l)
                    .map(|r| r.epoch < keep_before)
                    .unwrap_or(false)
            })
            .collect();
        let mut f = File::create(&csv).map_err(io_err(&csv))?;
        let mut text = CSV_COLUMNS.join(",") + "\n";
        for l in &kept_csv {
            text.push_str(l);
            text.push('\n');
        }
        f.write_all(text.as_bytes()).and_then(|_| f.sync_data()).map_err(io_err(&csv))?;
        let mut f = File::create(&jsonl).map_err(io_err(&jsonl))?;
        let text: String = kept_json.iter().map(|l| format!("{l}\n")).collect();
        f.write_all(text.as_bytes()).and_then(|_| f.sync_data()).map_err(io_err(&jsonl))?;
        Ok(Self { csv, jsonl })
    }

    pub fn append(&self, row: &EpochLog) -> Result<(), super::TrainError> {
        append_line(&self.csv, &row.csv_row())?;
        let line = crate::json::to_sorted_line(row).expect("log rows serialize");
        append_line(&self.jsonl, &line)
    }

    pub fn csv_path(&self) -> &Path {
        &self.csv
    }
}

fn read_lines(path: &Path) -> Vec<String> {
    match File::open(path) {
        Ok(f) => BufReader::new(f).lines().map_while(Result::ok).collect(),
        Err(_) => Vec::new(),
    }
}

fn append_line(path: &Path, line: &str) -> Result<(), super::TrainError> {
    let mut f = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
    f.write_all(format!("{line}\n").as_bytes())
        .and_then(|_| f.sync_data())
        .map_err(io_err(path))
}

/// Parses a training CSV. Missing or empty `eval_map50` cells become `None`.
pub fn read_csv_log(path: &Path) -> Result<Vec<CsvRow>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty log file")?.split(',').map(str::trim).collect();
    let col = |name: &str| header.iter().position(|h| *h == name);
    let required = ["epoch", "lr", "loss_total"];
    for r in required {
        if col(r).is_none() {
            return Err(format!("missing column {r}"));
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != header.len() {
            return Err(format!("row {} has {} cells, header has {}", i + 1, cells.len(), header.len()));
        }
        let num = |name: &str| -> Result<Option<f64>, String> {
            match col(name).map(|c| cells[c]) {
                None | Some("") => Ok(None),
                Some(v) => v.parse::<f64>().map(Some).map_err(|e| format!("row {}: {name}: {e}", i + 1)),
            }
        };
        rows.push(CsvRow {
            epoch: num("epoch")?.ok_or("empty epoch")? as usize,
            lr: num("lr")?.ok_or("empty lr")?,
            loss_total: num("loss_total")?.ok_or("empty loss_total")?,
            loss_rpn: num("loss_rpn")?,
            loss_frcnn: num("loss_frcnn")?,
            loss_mask: num("loss_mask")?,
            eval_map50: num("eval_map50")?,
            has_eval_column: col("eval_map50").is_some(),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_rpn: Option<f64>,
    pub loss_frcnn: Option<f64>,
    pub loss_mask: Option<f64>,
    pub eval_map50: Option<f64>,
    pub has_eval_column: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize) -> EpochLog {
        let b = LossBreakdown::new(0.5, 0.25, 0.125);
        EpochLog {
            epoch,
            lr: 0.004,
            loss_total: b.total,
            loss_rpn: b.l_rpn,
            loss_frcnn: b.l_faster_rcnn,
            loss_mask: b.l_mask,
            eval_map50: if epoch == 0 { None } else { Some(0.75) },
            wall_seconds: 1.5,
            last_step: b,
            steps: 7,
        }
    }

    #[test]
    fn write_read_and_truncate_on_resume() {
        let dir = tempfile::tempdir().unwrap();
        let w = LogWriter::open(dir.path(), 0).unwrap();
        for e in 0..3 {
            w.append(&row(e)).unwrap();
        }
        let rows = read_csv_log(w.csv_path()).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].eval_map50, None);
        assert_eq!(rows[2].eval_map50, Some(0.75));
        assert_eq!(rows[1].loss_total, 0.875);
        let header = std::fs::read_to_string(w.csv_path()).unwrap();
        assert!(header.starts_with("epoch,lr,loss_total,loss_rpn,loss_frcnn,loss_mask,eval_map50,wall_seconds\n"));

        let w = LogWriter::open(dir.path(), 2).unwrap();
        assert_eq!(read_csv_log(w.csv_path()).unwrap().len(), 2);
        let jsonl = std::fs::read_to_string(dir.path().join(LogWriter::JSONL_NAME)).unwrap();
        assert_eq!(jsonl.lines().count(), 2);
    }

    #[test]
    fn malformed_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        std::fs::write(&p, "epoch,lr\n0,0.1\n").unwrap();
        assert!(read_csv_log(&p).is_err());
        std::fs::write(&p, "epoch,lr,loss_total\n0,abc,1\n").unwrap();
        assert!(read_csv_log(&p).is_err());
        std::fs::write(&p, "epoch,lr,loss_total\n0,0.1,1\n").unwrap();
        let rows = read_csv_log(&p).unwrap();
        assert!(!rows[0].has_eval_column);
    }
}
