//! Append-only CSV result files.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::PerturbationKind;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment_id: String,
    pub arch: String,
    pub head: String,
    pub ablation: String,
    pub seed: u64,
    pub perturb_kind: PerturbationKind,
    pub magnitude: f64,
    pub accuracy: f64,
    /// Semicolon-joined per-tap accuracies; empty for fully connected heads.
    pub layer_accuracies: String,
    pub epochs: usize,
    pub config_hash: String,
}

impl ResultRow {
    pub fn join_layers(acc: &[f64]) -> String {
        acc.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(";")
    }

    pub fn layers(&self) -> Vec<f64> {
        self.layer_accuracies
            .split(';')
            .filter(|s| !s.is_empty())
            .filter_map(|s| s.parse().ok())
            .collect()
    }

    /// `arch/head/ablation`.
    pub fn model(&self) -> String {
        format!("{}/{}/{}", self.arch, self.head, self.ablation)
    }
}

/// Drops a partially written final line left by an interrupted run.
fn trim_partial_line(path: &Path) -> Result<()> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    fs::write(path, &bytes[..keep])?;
    Ok(())
}

/// Every row of a CSV file, or nothing if it does not exist.
pub fn read_rows<R: DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    trim_partial_line(path)?;
    let mut reader = csv::Reader::from_path(path)?;
    reader.deserialize().map(|r| r.map_err(Into::into)).collect()
}

/// Appends rows in submission-index order no matter in which order they
/// arrive, so the file is always a prefix of the complete result. Each row
/// is flushed as soon as it is written.
pub struct ResultWriter<R: Serialize> {
    path: PathBuf,
    file: File,
    header_written: bool,
    next: usize,
    pending: BTreeMap<usize, R>,
}

impl<R: Serialize> ResultWriter<R> {
    /// Opens `path` for appending; the header goes in when the first row
    /// lands in an empty file.
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        if path.exists() {
            trim_partial_line(path)?;
        }
        let header_written = path.exists() && fs::metadata(path)?.len() > 0;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(ResultWriter {
            path: path.to_path_buf(),
            file,
            header_written,
            next: 0,
            pending: BTreeMap::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Queues row `index` and writes every row that is now in order.
    pub fn submit(&mut self, index: usize, row: R) -> Result<()> {
        self.pending.insert(index, row);
        while let Some(row) = self.pending.remove(&self.next) {
            self.append(&row)?;
            self.next += 1;
        }
        Ok(())
    }

    fn append(&mut self, row: &R) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(!self.header_written)
            .from_writer(Vec::new());
        w.serialize(row)?;
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        self.file.write_all(&bytes)?;
        self.file.flush()?;
        self.header_written = true;
        Ok(())
    }

    /// Rows still waiting for an earlier index.
    pub fn backlog(&self) -> usize {
        self.pending.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, acc: f64) -> ResultRow {
        ResultRow {
            experiment_id: "e".into(),
            arch: "cnn_small".into(),
            head: "consensus".into(),
            ablation: "cosine/c+1/h".into(),
            seed,
            perturb_kind: PerturbationKind::Translate,
            magnitude: 20.0,
            accuracy: acc,
            layer_accuracies: ResultRow::join_layers(&[0.5, 0.25]),
            epochs: 10,
            config_hash: "abc".into(),
        }
    }

    #[test]
    fn out_of_order_submissions_are_written_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let mut w = ResultWriter::open(&path).unwrap();
        w.submit(1, row(1, 0.1)).unwrap();
        assert_eq!(read_rows::<ResultRow>(&path).unwrap().len(), 0);
        w.submit(0, row(0, 0.2)).unwrap();
        w.submit(2, row(2, 0.3)).unwrap();
        let rows: Vec<ResultRow> = read_rows(&path).unwrap();
        assert_eq!(rows.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(rows[0].layers(), vec![0.5, 0.25]);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "experiment_id,arch,head,ablation,seed,perturb_kind,magnitude,accuracy,layer_accuracies,epochs,config_hash\n"
        ));
    }

    #[test]
    fn reopening_appends_without_a_second_header_and_drops_partial_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        ResultWriter::open(&path).unwrap().submit(0, row(0, 0.5)).unwrap();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"e,cnn_small,cons").unwrap();
        ResultWriter::open(&path).unwrap().submit(0, row(1, 0.5)).unwrap();
        let rows: Vec<ResultRow> = read_rows(&path).unwrap();
        assert_eq!(rows, vec![row(0, 0.5), row(1, 0.5)]);
    }
}
