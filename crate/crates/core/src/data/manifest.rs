//! TSV manifests (`path<TAB>identity<TAB>camera<TAB>split`) and split loading.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::format::read_cloud;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub identity: i64,
    pub camera: i64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Config(format!("manifest line {}: {msg}", n + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(bad(&format!("expected 4 tab-separated fields, got {}", fields.len())));
            }
            let identity: i64 = fields[1].parse().map_err(|_| bad("bad identity"))?;
            let camera: i64 = fields[2].parse().map_err(|_| bad("bad camera"))?;
            if identity < 0 || camera < 0 {
                return Err(bad("identity and camera must be >= 0"));
            }
            records.push(SampleRecord {
                path: PathBuf::from(fields[0]),
                identity,
                camera,
                split: fields[3].parse().map_err(|e: Error| bad(&e.to_string()))?,
            });
        }
        Ok(Self {
            base_dir: base_dir.to_path_buf(),
            records,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_text(&self) -> String {
        self.records
            .iter()
            .map(|r| format!("{}\t{}\t{}\t{}\n", r.path.display(), r.identity, r.camera, r.split))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn resolve(&self, record: &SampleRecord) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.base_dir.join(&record.path)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// Bijection from raw identities to contiguous class labels `0..K`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelMap {
    to_label: BTreeMap<i64, usize>,
}

impl LabelMap {
    /// Labels follow ascending identity order.
    pub fn from_identities(ids: impl IntoIterator<Item = i64>) -> Self {
        let mut unique: Vec<i64> = ids.into_iter().collect();
        unique.sort_unstable();
        unique.dedup();
        Self {
            to_label: unique.into_iter().enumerate().map(|(l, id)| (id, l)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.to_label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.to_label.is_empty()
    }

    pub fn label(&self, identity: i64) -> Option<usize> {
        self.to_label.get(&identity).copied()
    }

    pub fn identity(&self, label: usize) -> Option<i64> {
        self.to_label.iter().find(|(_, &l)| l == label).map(|(&id, _)| id)
    }

    /// `identity<TAB>label` lines.
    pub fn to_text(&self) -> String {
        self.to_label.iter().map(|(id, l)| format!("{id}\t{l}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut to_label = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (id, label) = line
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("bad label map line {line:?}")))?;
            let id: i64 = id.trim().parse().map_err(|_| Error::Config(format!("bad identity {id:?}")))?;
            let label: usize = label.trim().parse().map_err(|_| Error::Config(format!("bad label {label:?}")))?;
            to_label.insert(id, label);
        }
        let mut labels: Vec<usize> = to_label.values().copied().collect();
        labels.sort_unstable();
        if labels.iter().enumerate().any(|(i, &l)| i != l) {
            return Err(Error::Config("label map is not a bijection onto 0..K".into()));
        }
        Ok(Self { to_label })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSample {
    pub cloud: PointCloud,
    pub identity: i64,
    pub camera: i64,
    /// Contiguous class label, set for the train split.
    pub label: Option<usize>,
}

/// Loads every record of `split` in manifest order. Train labels come from
/// `labels` when given, else from a fresh map over the split's identities;
/// the map used is returned.
pub fn load_split(manifest: &Manifest, split: Split, labels: Option<&LabelMap>) -> Result<(Vec<LoadedSample>, LabelMap)> {
    let records: Vec<&SampleRecord> = manifest.split(split).collect();
    if records.is_empty() {
        return Err(Error::Load {
            msg: format!("manifest has no {split} records"),
            offenders: Vec::new(),
        });
    }
    let missing: Vec<PathBuf> = records
        .iter()
        .map(|r| manifest.resolve(r))
        .filter(|p| !p.is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Load {
            msg: format!("{} {split} files missing", missing.len()),
            offenders: missing,
        });
    }
    let map = match labels {
        Some(m) => m.clone(),
        None => LabelMap::from_identities(records.iter().map(|r| r.identity)),
    };
    let mut out = Vec::with_capacity(records.len());
    let mut unknown = Vec::new();
    for r in records {
        let path = manifest.resolve(r);
        let cloud = read_cloud(&path).map_err(|e| Error::Load {
            msg: format!("{}: {e}", path.display()),
            offenders: vec![path.clone()],
        })?;
        let label = if split == Split::Train {
            let l = map.label(r.identity);
            if l.is_none() {
                unknown.push(path);
            }
            l
        } else {
            None
        };
        out.push(LoadedSample {
            cloud,
            identity: r.identity,
            camera: r.camera,
            label,
        });
    }
    if !unknown.is_empty() {
        return Err(Error::Load {
            msg: "identities absent from the label map".into(),
            offenders: unknown,
        });
    }
    Ok((out, map))
}
