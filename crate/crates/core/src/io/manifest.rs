use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use super::{save_xyz, Dataset};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path relative to the manifest root.
    pub path: String,
    pub label: String,
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// Sorted by path.
    pub entries: Vec<ManifestEntry>,
    pub class_index: BTreeMap<String, usize>,
}

impl DatasetManifest {
    /// Entries tagged with `split`; class indices are kept so labels stay
    /// comparable across splits.
    pub fn split(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            root: self.root.clone(),
            entries: self.entries.iter().filter(|e| e.split == Some(split)).cloned().collect(),
            class_index: self.class_index.clone(),
        }
    }
}

/// Read `root/manifest.csv` (`path,label[,split]` rows, optional header) or,
/// without one, treat every subdirectory as a class of `.xyz` files.
pub fn manifest_load(root: &Path) -> Result<DatasetManifest> {
    let file = root.join(MANIFEST_FILE);
    let mut entries = if file.is_file() {
        read_manifest(&file)?
    } else {
        scan_directories(root)?
    };
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    if let Some(w) = entries.windows(2).find(|w| w[0].path == w[1].path) {
        return Err(Error::DuplicatePath(w[0].path.clone()));
    }
    for e in &entries {
        let full = root.join(&e.path);
        if !full.is_file() {
            return Err(Error::io(
                &full,
                std::io::Error::new(std::io::ErrorKind::NotFound, "listed in the manifest but missing"),
            ));
        }
    }
    let labels: BTreeSet<&str> = entries.iter().map(|e| e.label.as_str()).collect();
    let class_index = labels.into_iter().enumerate().map(|(i, l)| (l.to_string(), i)).collect();
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        entries,
        class_index,
    })
}

fn read_manifest(file: &Path) -> Result<Vec<ManifestEntry>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(file)
        .map_err(|e| csv_error(file, e))?;
    let mut entries = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(file, e))?;
        let line = record.position().map_or(i + 1, |p| p.line() as usize);
        if i == 0 && record.get(0) == Some("path") && record.get(1) == Some("label") {
            continue;
        }
        let fail = |message: String| Error::Parse {
            path: file.to_path_buf(),
            line,
            message,
        };
        if record.len() < 2 || record.len() > 3 || record[0].is_empty() || record[1].is_empty() {
            return Err(fail("expected `path,label[,split]`".into()));
        }
        let split = match record.get(2) {
            Some(s) if !s.is_empty() => Some(s.parse().map_err(|e: Error| fail(e.to_string()))?),
            _ => None,
        };
        entries.push(ManifestEntry {
            path: record[0].to_string(),
            label: record[1].to_string(),
            split,
        });
    }
    Ok(entries)
}

fn csv_error(file: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        path: file.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

fn scan_directories(root: &Path) -> Result<Vec<ManifestEntry>> {
    let read = |dir: &Path| std::fs::read_dir(dir).map_err(|e| Error::io(dir, e));
    let mut entries = Vec::new();
    for class in read(root)? {
        let class = class.map_err(|e| Error::io(root, e))?;
        let class_path = class.path();
        if !class_path.is_dir() {
            continue;
        }
        let label = class.file_name().to_string_lossy().into_owned();
        for file in read(&class_path)? {
            let file = file.map_err(|e| Error::io(&class_path, e))?;
            let path = file.path();
            if path.is_file() && path.extension().is_some_and(|x| x == "xyz") {
                entries.push(ManifestEntry {
                    path: format!("{label}/{}", file.file_name().to_string_lossy()),
                    label: label.clone(),
                    split: None,
                });
            }
        }
    }
    Ok(entries)
}

/// Write every cloud under `dir` at its name plus a manifest listing them;
/// `splits` optionally tags each entry.
pub fn write_dataset(dir: &Path, data: &Dataset, splits: Option<&[Split]>) -> Result<()> {
    let mut rows = String::from("path,label,split\n");
    for (i, cloud) in data.clouds.iter().enumerate() {
        let path = dir.join(&data.names[i]);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        save_xyz(&path, cloud)?;
        let split = match splits.map(|s| s[i]) {
            Some(Split::Train) => "train",
            Some(Split::Test) => "test",
            None => "",
        };
        rows.push_str(&format!("{},{},{split}\n", data.names[i], data.classes[data.labels[i]]));
    }
    let file = dir.join(MANIFEST_FILE);
    std::fs::write(&file, rows).map_err(|e| Error::io(&file, e))
}
