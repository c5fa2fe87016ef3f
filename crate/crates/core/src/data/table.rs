//! Per-class split counts of the clinical dataset, kept as a bookkeeping
//! fixture. The images themselves are not distributed.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::manifest::{DatasetManifest, Record, Source, Split};
use super::taxonomy;
use crate::error::{Error, Result};

/// The shipped fixture (`class,train,val,test`, 21 class rows then `All`).
pub const CLINICAL_SPLIT_CSV: &str = include_str!("../../fixtures/table1.csv");

#[derive(Debug, Deserialize)]
struct Row {
    class: String,
    train: usize,
    val: usize,
    test: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitTable {
    /// `(abbreviation, [train, val, test])` in taxonomy order.
    pub rows: Vec<(String, [usize; 3])>,
    /// The table's own `All` row, if present.
    pub declared_totals: Option<[usize; 3]>,
}

impl SplitTable {
    /// Parse and check class order against the taxonomy and the `All` row
    /// (when present) against the column sums.
    pub fn parse(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut rows = Vec::new();
        let mut declared_totals = None;
        for row in reader.deserialize::<Row>() {
            let row = row.map_err(|e| Error::Parse(format!("split table: {e}")))?;
            if row.class == "All" {
                declared_totals = Some([row.train, row.val, row.test]);
            } else {
                rows.push((row.class, [row.train, row.val, row.test]));
            }
        }
        let names: Vec<&str> = rows.iter().map(|r| r.0.as_str()).collect();
        let expected: Vec<&str> = taxonomy::CLASSES.iter().map(|c| c.0).collect();
        if names != expected {
            return Err(Error::Data(format!("split table classes {names:?} do not follow the taxonomy")));
        }
        let table = SplitTable { rows, declared_totals };
        if let Some(declared) = declared_totals {
            if declared != table.totals() {
                return Err(Error::Data(format!(
                    "split table All row {declared:?} disagrees with column sums {:?}",
                    table.totals()
                )));
            }
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn shipped() -> Self {
        Self::parse(CLINICAL_SPLIT_CSV).expect("shipped fixture is valid")
    }

    /// Column sums `[train, val, test]`.
    pub fn totals(&self) -> [usize; 3] {
        self.rows.iter().fold([0; 3], |a, (_, c)| [a[0] + c[0], a[1] + c[1], a[2] + c[2]])
    }

    /// Manifest with one placeholder record per counted image.
    pub fn to_manifest(&self) -> DatasetManifest {
        let mut records = Vec::new();
        for (label, (abbr, counts)) in self.rows.iter().enumerate() {
            for split in Split::ALL {
                for i in 0..counts[split.index()] {
                    records.push(Record {
                        path: PathBuf::from(format!("{abbr}/{}_{i:04}", split.name())),
                        label,
                        split: Some(split),
                    });
                }
            }
        }
        DatasetManifest {
            source: Source::Fixture,
            root: PathBuf::from("."),
            classes: self.rows.iter().map(|r| r.0.clone()).collect(),
            unknown_directories: Vec::new(),
            records,
        }
    }
}
