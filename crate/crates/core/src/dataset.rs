//! Multi-subject time-series datasets and their on-disk layout.
//!
//! A dataset directory holds `labels.csv` (columns `node,network`, one row
//! per node, defining node order) and one `sub_<id>.csv` per subject whose
//! header lists the node names and whose rows are time points.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernelstats::{SampleVector, MIN_TEST_SAMPLES};

/// One subject's recording, stored column-wise (one vector per node).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    columns: Vec<Vec<f64>>,
}

impl Subject {
    pub fn new(id: impl Into<String>, columns: Vec<Vec<f64>>) -> Self {
        Subject { id: id.into(), columns }
    }

    pub fn n_samples(&self) -> usize {
        self.columns.first().map_or(0, |c| c.len())
    }

    pub fn column(&self, node: usize) -> &[f64] {
        &self.columns[node]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }
}

/// Per-subject matrices sharing one node ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectDataset {
    nodes: Vec<String>,
    networks: Vec<String>,
    subjects: Vec<Subject>,
}

impl SubjectDataset {
    /// Validate and assemble. Every subject needs one column per node, at
    /// least [`MIN_TEST_SAMPLES`] rows and only finite values.
    pub fn new(nodes: Vec<String>, networks: Vec<String>, subjects: Vec<Subject>) -> Result<Self> {
        if nodes.len() != networks.len() {
            return Err(Error::DimensionMismatch {
                expected: nodes.len(),
                got: networks.len(),
            });
        }
        let mut seen = std::collections::HashSet::new();
        for n in &nodes {
            if !seen.insert(n) {
                return Err(Error::InvalidArgument(format!("duplicate node `{n}`")));
            }
        }
        for s in &subjects {
            let file = PathBuf::from(format!("sub_{}.csv", s.id));
            if s.columns.len() != nodes.len() {
                return Err(Error::NodeMismatch {
                    file,
                    detail: format!("{} columns for {} nodes", s.columns.len(), nodes.len()),
                });
            }
            let n = s.n_samples();
            if n < MIN_TEST_SAMPLES || s.columns.iter().any(|c| c.len() != n) {
                return Err(Error::MalformedData {
                    file,
                    detail: format!("need ≥ {MIN_TEST_SAMPLES} rows of equal length"),
                });
            }
            for (j, col) in s.columns.iter().enumerate() {
                if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteData {
                        file,
                        row,
                        column: nodes[j].clone(),
                    });
                }
            }
        }
        Ok(SubjectDataset {
            nodes,
            networks,
            subjects,
        })
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn networks(&self) -> &[String] {
        &self.networks
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Total rows across subjects.
    pub fn n_rows(&self) -> usize {
        self.subjects.iter().map(Subject::n_samples).sum()
    }

    pub fn node_index(&self, name: &str) -> Result<usize> {
        self.nodes
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    /// Nodes assigned to `network`, in dataset order.
    pub fn nodes_in_network(&self, network: &str) -> Vec<String> {
        self.nodes
            .iter()
            .zip(&self.networks)
            .filter(|(_, net)| net.as_str() == network)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn series(&self, subject: usize, node: &str) -> Result<&[f64]> {
        let j = self.node_index(node)?;
        Ok(self.subjects[subject].column(j))
    }

    pub fn sample_vector(&self, subject: usize, node: &str) -> Result<SampleVector> {
        SampleVector::new(self.series(subject, node)?.to_vec())
    }

    /// All subjects' rows for `node`, concatenated in subject order.
    pub fn pooled(&self, node: &str) -> Result<Vec<f64>> {
        let j = self.node_index(node)?;
        Ok(self.subjects.iter().flat_map(|s| s.column(j).iter().copied()).collect())
    }

    /// Subject index of every pooled row.
    pub fn row_subjects(&self) -> Vec<usize> {
        self.subjects
            .iter()
            .enumerate()
            .flat_map(|(j, s)| std::iter::repeat_n(j, s.n_samples()))
            .collect()
    }

    /// Keep only `nodes`, in the given order.
    pub fn restrict(&self, nodes: &[String]) -> Result<SubjectDataset> {
        let idx: Vec<usize> = nodes.iter().map(|n| self.node_index(n)).collect::<Result<_>>()?;
        let subjects = self
            .subjects
            .iter()
            .map(|s| Subject::new(s.id.clone(), idx.iter().map(|&j| s.columns[j].clone()).collect()))
            .collect();
        Ok(SubjectDataset {
            nodes: nodes.to_vec(),
            networks: idx.iter().map(|&j| self.networks[j].clone()).collect(),
            subjects,
        })
    }
}

fn subject_sort_key(id: &str) -> (u8, u64, String) {
    match id.parse::<u64>() {
        Ok(v) => (0, v, id.to_string()),
        Err(_) => (1, 0, id.to_string()),
    }
}

/// Read a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<SubjectDataset> {
    let labels_path = dir.join("labels.csv");
    if !labels_path.is_file() {
        return Err(Error::MissingLabels(dir.to_path_buf()));
    }
    let mut nodes = Vec::new();
    let mut networks = Vec::new();
    let mut rdr = csv::Reader::from_path(&labels_path)?;
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 || &headers[0] != "node" || &headers[1] != "network" {
        return Err(Error::MalformedData {
            file: labels_path,
            detail: "expected header `node,network`".into(),
        });
    }
    for rec in rdr.records() {
        let rec = rec?;
        nodes.push(rec[0].trim().to_string());
        networks.push(rec[1].trim().to_string());
    }

    let mut files: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("");
        if let Some(id) = name.strip_prefix("sub_").and_then(|s| s.strip_suffix(".csv")) {
            files.push((id.to_string(), path.clone()));
        }
    }
    files.sort_by_key(|(id, _)| subject_sort_key(id));

    let mut subjects = Vec::with_capacity(files.len());
    for (id, path) in files {
        subjects.push(read_subject(&path, id, &nodes)?);
    }
    SubjectDataset::new(nodes, networks, subjects)
}

fn read_subject(path: &Path, id: String, nodes: &[String]) -> Result<Subject> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header != nodes {
        return Err(Error::NodeMismatch {
            file: path.to_path_buf(),
            detail: format!("header {:?}", header),
        });
    }
    let mut columns = vec![Vec::new(); nodes.len()];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != nodes.len() {
            return Err(Error::MalformedData {
                file: path.to_path_buf(),
                detail: format!("row {row} has {} fields", rec.len()),
            });
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::MalformedData {
                file: path.to_path_buf(),
                detail: format!("row {row}, column `{}`: `{field}` is not a number", nodes[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFiniteData {
                    file: path.to_path_buf(),
                    row,
                    column: nodes[j].clone(),
                });
            }
            columns[j].push(v);
        }
    }
    Ok(Subject::new(id, columns))
}

/// Write a dataset in the layout [`load_dataset`] reads. Values are written
/// with Rust's shortest round-trip float formatting, so a reload is exact.
pub fn write_dataset(ds: &SubjectDataset, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let labels = dir.join("labels.csv");
    let mut w = csv::Writer::from_path(&labels)?;
    w.write_record(["node", "network"])?;
    for (n, net) in ds.nodes.iter().zip(&ds.networks) {
        w.write_record([n, net])?;
    }
    w.flush().map_err(|e| Error::io(&labels, e))?;
    written.push(labels);
    for s in &ds.subjects {
        let path = dir.join(format!("sub_{}.csv", s.id));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(&ds.nodes)?;
        for t in 0..s.n_samples() {
            w.write_record(s.columns.iter().map(|c| c[t].to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Node → network lookup.
pub fn network_map(ds: &SubjectDataset) -> BTreeMap<String, String> {
    ds.nodes.iter().cloned().zip(ds.networks.iter().cloned()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SubjectDataset {
        let cols = |o: f64| {
            vec![
                (0..8).map(|i| i as f64 + o).collect(),
                (0..8).map(|i| (i * i) as f64 - o).collect(),
            ]
        };
        SubjectDataset::new(
            vec!["a".into(), "b".into()],
            vec!["net".into(), "ext".into()],
            vec![Subject::new("2", cols(0.5)), Subject::new("10", cols(-1.25))],
        )
        .unwrap()
    }

    #[test]
    fn empty_directory_is_missing_labels() {
        let d = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(d.path()), Err(Error::MissingLabels(_))));
    }

    #[test]
    fn write_then_load_round_trips() {
        let d = tempfile::tempdir().unwrap();
        let ds = tiny();
        write_dataset(&ds, d.path()).unwrap();
        let back = load_dataset(d.path()).unwrap();
        // numeric ids sort numerically: 2 before 10
        assert_eq!(back, ds);
    }

    #[test]
    fn nan_cell_is_located() {
        let d = tempfile::tempdir().unwrap();
        write_dataset(&tiny(), d.path()).unwrap();
        let p = d.path().join("sub_2.csv");
        let text = fs::read_to_string(&p).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[3] = "NaN,1".into();
        fs::write(&p, lines.join("\n")).unwrap();
        match load_dataset(d.path()) {
            Err(Error::NonFiniteData { row, column, file }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "a");
                assert!(file.ends_with("sub_2.csv"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn column_mismatch_detected() {
        let d = tempfile::tempdir().unwrap();
        write_dataset(&tiny(), d.path()).unwrap();
        let p = d.path().join("sub_10.csv");
        let text = fs::read_to_string(&p).unwrap().replacen("a,b", "b,a", 1);
        fs::write(&p, text).unwrap();
        assert!(matches!(load_dataset(d.path()), Err(Error::NodeMismatch { .. })));
    }

    #[test]
    fn restrict_and_pool() {
        let ds = tiny();
        let r = ds.restrict(&["b".to_string()]).unwrap();
        assert_eq!(r.nodes(), ["b"]);
        assert_eq!(r.pooled("b").unwrap().len(), 16);
        assert_eq!(ds.nodes_in_network("ext"), vec!["b".to_string()]);
        assert_eq!(ds.row_subjects()[8], 1);
        assert!(matches!(ds.node_index("zz"), Err(Error::UnknownNode(_))));
    }
}
