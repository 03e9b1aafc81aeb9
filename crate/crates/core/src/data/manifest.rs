use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER: [&str; 3] = ["subject_id", "image", "mask"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub subject_id: String,
    /// Relative to the manifest's directory.
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

/// Subject-tagged image/mask pairs. Paths in `records` are relative to `root`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<SampleRecord>) -> Self {
        Manifest {
            root: root.into(),
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_path(&self, record: &SampleRecord) -> PathBuf {
        self.root.join(&record.image_path)
    }

    pub fn mask_path(&self, record: &SampleRecord) -> PathBuf {
        self.root.join(&record.mask_path)
    }

    /// Distinct subject ids in sorted order.
    pub fn subjects(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| r.subject_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Sub-manifest with the given record indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Manifest {
        Manifest {
            root: self.root.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// Parses and validates a manifest CSV; the root is the file's directory.
    pub fn load(path: &Path) -> Result<Manifest> {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let err = |row: usize, message: String| Error::Manifest {
            path: path.to_path_buf(),
            row,
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| err(0, format!("unreadable header: {e}")))?;
        if header.iter().collect::<Vec<_>>() != HEADER {
            return Err(err(0, format!("header must be `{}`", HEADER.join(","))));
        }
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, row) in reader.records().enumerate() {
            let row_no = i + 1;
            let row = row.map_err(|e| err(row_no, e.to_string()))?;
            if row.len() != HEADER.len() {
                return Err(err(row_no, format!("expected {} fields, found {}", HEADER.len(), row.len())));
            }
            for (field, value) in HEADER.iter().zip(row.iter()) {
                if value.trim().is_empty() {
                    return Err(err(row_no, format!("field `{field}` is empty")));
                }
            }
            let record = SampleRecord {
                subject_id: row[0].to_string(),
                image_path: PathBuf::from(&row[1]),
                mask_path: PathBuf::from(&row[2]),
            };
            for (field, p) in [("image", &record.image_path), ("mask", &record.mask_path)] {
                if !root.join(p).is_file() {
                    return Err(err(row_no, format!("{field} file `{}` not found", p.display())));
                }
            }
            if !seen.insert((record.image_path.clone(), record.mask_path.clone())) {
                return Err(err(row_no, "duplicate image/mask pair".to_string()));
            }
            records.push(record);
        }
        Ok(Manifest { root, records })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Data {
            path: self.root.clone(),
            message: e.to_string(),
        };
        w.write_record(HEADER).map_err(csv_err)?;
        for r in &self.records {
            w.write_record([
                r.subject_id.as_str(),
                &r.image_path.to_string_lossy(),
                &r.mask_path.to_string_lossy(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data {
            path: self.root.clone(),
            message: e.to_string(),
        })?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}
