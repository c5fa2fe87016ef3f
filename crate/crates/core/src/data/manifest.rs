//! Dataset manifests: folder scanning, stratified splitting, JSONL storage.
//!
//! A manifest file is line-delimited JSON. The first line is a header
//! object with `format`, `version`, `source`, `root`, `classes` and
//! `unknown_directories`. Every following line is one record with fields in
//! the order `path`, `label`, `split`; `path` is relative to `root`, and a
//! relative `root` is resolved against the directory holding the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::taxonomy;
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "fpdanet-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split {other:?} (train, val, test)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Folder,
    Synthetic,
    /// Counts-only manifest reconstructed from a published split table.
    Fixture,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub path: PathBuf,
    pub label: usize,
    /// `None` until [`split_manifest`] assigns one.
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    source: Source,
    root: PathBuf,
    classes: Vec<String>,
    unknown_directories: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub source: Source,
    /// Directory that record paths are relative to.
    pub root: PathBuf,
    /// Class abbreviations in label order.
    pub classes: Vec<String>,
    pub unknown_directories: Vec<String>,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn resolve(&self, record: &Record) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == Some(split))
    }

    pub fn is_split(&self) -> bool {
        self.records.iter().all(|r| r.split.is_some())
    }

    /// `counts[class][split]`.
    pub fn split_counts(&self) -> Vec<[usize; 3]> {
        let mut counts = vec![[0usize; 3]; self.num_classes()];
        for r in &self.records {
            if let Some(s) = r.split {
                counts[r.label][s.index()] += 1;
            }
        }
        counts
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes()];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }

    /// Records per split summed over classes: `[train, val, test]`.
    pub fn split_totals(&self) -> [usize; 3] {
        self.split_counts().iter().fold([0; 3], |acc, c| [acc[0] + c[0], acc[1] + c[1], acc[2] + c[2]])
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for r in &self.records {
            if r.label >= self.num_classes() {
                return Err(Error::Data(format!("{}: label {} out of range", r.path.display(), r.label)));
            }
            if let Some(prev) = seen.insert(&r.path, r.split) {
                if prev != r.split {
                    return Err(Error::Data(format!("{} appears in two splits", r.path.display())));
                }
                return Err(Error::Data(format!("{} listed twice", r.path.display())));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let header = Header {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            source: self.source,
            root: self.root.clone(),
            classes: self.classes.clone(),
            unknown_directories: self.unknown_directories.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| Error::Parse("manifest is empty".into()))?;
        let header: Header = serde_json::from_str(first).map_err(|e| Error::Parse(format!("manifest header: {e}")))?;
        if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
            return Err(Error::Parse(format!(
                "manifest format {} v{} not supported",
                header.format, header.version
            )));
        }
        let records = lines
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse(format!("manifest line {}: {e}", i + 1))))
            .collect::<Result<Vec<Record>>>()?;
        let m = DatasetManifest {
            source: header.source,
            root: header.root,
            classes: header.classes,
            unknown_directories: header.unknown_directories,
            records,
        };
        m.validate()?;
        Ok(m)
    }

    /// Write to `path`. The stored root is relative to the manifest
    /// directory when it lies inside it and absolute otherwise.
    pub fn write(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut copy = self.clone();
        if let (Ok(root), Ok(base)) = (fs::canonicalize(&self.root), fs::canonicalize(dir)) {
            copy.root = match root.strip_prefix(&base) {
                Ok(rel) if rel.as_os_str().is_empty() => PathBuf::from("."),
                Ok(rel) => rel.to_path_buf(),
                Err(_) => root,
            };
        }
        fs::write(path, copy.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::from_jsonl(&text)?;
        if m.root.is_relative() {
            let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            m.root = dir.join(&m.root);
        }
        Ok(m)
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Index `<root>/<ABBREV>/*.{png,jpg,jpeg}` in taxonomy order.
///
/// Files whose header cannot be decoded are skipped with a warning.
/// Subdirectories that are not class abbreviations are reported in
/// `unknown_directories` and not indexed.
pub fn scan_dataset(root: &Path) -> Result<DatasetManifest> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut unknown = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if taxonomy::label_of(&name).is_none() {
                unknown.push(name);
            }
        }
    }
    unknown.sort();
    for name in &unknown {
        log::warn!("unknown class directory {name:?} ignored");
    }
    let mut records = Vec::new();
    for (label, (abbr, _)) in taxonomy::CLASSES.iter().enumerate() {
        let dir = root.join(abbr);
        if !dir.is_dir() {
            log::warn!("class directory {abbr} missing; class left empty");
            continue;
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        files.sort();
        for file in files {
            let readable = image::ImageReader::open(&file)
                .and_then(|r| r.with_guessed_format())
                .ok()
                .and_then(|r| r.into_dimensions().ok())
                .is_some();
            if !readable {
                log::warn!("{}: not a decodable image, skipped", file.display());
                continue;
            }
            let rel = file.strip_prefix(root).expect("file under root").to_path_buf();
            records.push(Record { path: rel, label, split: None });
        }
    }
    if records.is_empty() {
        return Err(Error::Data(format!("no images found under {}", root.display())));
    }
    Ok(DatasetManifest {
        source: Source::Folder,
        root: root.to_path_buf(),
        classes: taxonomy::abbreviations(taxonomy::NUM_CLASSES),
        unknown_directories: unknown,
        records,
    })
}

/// Largest-remainder apportionment of `n` items to `ratios`.
///
/// Each share starts at `floor(n·r / R)`; leftover items go to the largest
/// remainders, lower index first on ties.
pub fn apportion(n: usize, ratios: &[u32]) -> Vec<usize> {
    let total: u64 = ratios.iter().map(|&r| r as u64).sum();
    assert!(total > 0, "ratios must not all be zero");
    let mut shares: Vec<usize> = ratios.iter().map(|&r| (n as u64 * r as u64 / total) as usize).collect();
    let mut order: Vec<(u64, usize)> =
        ratios.iter().enumerate().map(|(i, &r)| (n as u64 * r as u64 % total, i)).collect();
    order.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let leftover = n - shares.iter().sum::<usize>();
    for &(_, i) in order.iter().take(leftover) {
        shares[i] += 1;
    }
    shares
}

/// Stratified split: each class is shuffled with its own seeded stream and
/// apportioned by [`apportion`]. Existing assignments are overwritten.
pub fn split_manifest(m: &DatasetManifest, ratios: [u32; 3], seed: u64) -> Result<DatasetManifest> {
    if ratios.iter().any(|&r| r == 0) {
        return Err(Error::Config(format!("split ratios {ratios:?} must be positive")));
    }
    let mut out = m.clone();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); m.num_classes()];
    for (i, r) in m.records.iter().enumerate() {
        by_class[r.label].push(i);
    }
    for (label, mut idx) in by_class.into_iter().enumerate() {
        idx.sort_by(|&a, &b| m.records[a].path.cmp(&m.records[b].path));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(label as u64);
        idx.shuffle(&mut rng);
        let shares = apportion(idx.len(), &ratios);
        if !idx.is_empty() && shares.contains(&0) {
            log::warn!(
                "class {} has {} images; split sizes {:?} leave a split empty",
                m.classes[label],
                idx.len(),
                shares
            );
        }
        let mut it = idx.into_iter();
        for (split, &share) in Split::ALL.iter().zip(&shares) {
            for i in it.by_ref().take(share) {
                out.records[i].split = Some(*split);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apportion_examples() {
        assert_eq!(apportion(10, &[7, 2, 1]), vec![7, 2, 1]);
        assert_eq!(apportion(0, &[7, 2, 1]), vec![0, 0, 0]);
        assert_eq!(apportion(1, &[7, 2, 1]), vec![1, 0, 0]);
        // equal remainders: lower index first
        assert_eq!(apportion(1, &[1, 1]), vec![1, 0]);
    }

    #[test]
    fn split_names_parse() {
        for s in Split::ALL {
            assert_eq!(s.name().parse::<Split>().unwrap(), s);
        }
        assert!("validation".parse::<Split>().is_err());
    }

    #[test]
    fn duplicate_paths_rejected() {
        let rec = Record { path: "a.png".into(), label: 0, split: Some(Split::Train) };
        let m = DatasetManifest {
            source: Source::Folder,
            root: ".".into(),
            classes: vec!["A".into()],
            unknown_directories: vec![],
            records: vec![rec.clone(), Record { split: Some(Split::Val), ..rec }],
        };
        assert!(m.validate().unwrap_err().to_string().contains("two splits"));
    }
}
