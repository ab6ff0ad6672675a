//! Sample records and JSONL manifests.

use std::collections::HashSet;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Synthetic,
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One (image, mask, caption) triple. Backgrounds carry no mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmokeSample {
    pub id: String,
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    pub caption: String,
    pub source: Source,
    pub split: Split,
}

impl SmokeSample {
    /// A sample counts as positive when it has a smoke mask.
    pub fn is_positive(&self) -> bool {
        self.mask_path.is_some() && self.source != Source::Background
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<SmokeSample>,
    pub schema_version: u32,
}

impl Default for Manifest {
    fn default() -> Self {
        Self::new(Vec::new())
    }
}

impl FromIterator<SmokeSample> for Manifest {
    fn from_iter<I: IntoIterator<Item = SmokeSample>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

impl Manifest {
    pub fn new(records: Vec<SmokeSample>) -> Self {
        Self {
            records,
            schema_version: MANIFEST_SCHEMA_VERSION,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&SmokeSample> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: SmokeSample = serde_json::from_str(line)
                .map_err(|e| Error::invalid(format!("manifest line {}: {e}", lineno + 1)))?;
            records.push(rec);
        }
        Ok(Self::new(records))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SmokeSample = serde_json::from_str(&line)
                .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
            records.push(rec);
        }
        Ok(Self::new(records))
    }

    /// Writes the whole manifest atomically (temp file, then rename).
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl()?.as_bytes())
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Append-only JSONL writer. Each record is flushed and synced before
/// `append` returns.
pub struct JsonlAppender {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlAppender {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record)?;
        let path = &self.path;
        self.out
            .write_all(line.as_bytes())
            .and_then(|_| self.out.write_all(b"\n"))
            .and_then(|_| self.out.flush())
            .and_then(|_| self.out.get_ref().sync_data())
            .map_err(|e| Error::io(path, e))
    }
}

/// Reads every line of a JSONL file; a missing file reads as empty.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DuplicateId(String),
    EmptyCaption(String),
    MissingFile {
        id: String,
        path: PathBuf,
    },
    UnreadableFile {
        id: String,
        path: PathBuf,
        reason: String,
    },
    DimensionMismatch {
        id: String,
        image: (u32, u32),
        mask: (u32, u32),
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId(id) => write!(f, "duplicate id {id}"),
            Violation::EmptyCaption(id) => write!(f, "{id}: empty caption"),
            Violation::MissingFile { id, path } => {
                write!(f, "{id}: missing file {}", path.display())
            }
            Violation::UnreadableFile { id, path, reason } => {
                write!(f, "{id}: cannot read {}: {reason}", path.display())
            }
            Violation::DimensionMismatch { id, image, mask } => write!(
                f,
                "{id}: image is {}x{} but mask is {}x{}",
                image.0, image.1, mask.0, mask.1
            ),
        }
    }
}

/// Resolves a manifest path against the manifest's base directory.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Lists every invariant violation. Relative paths resolve against `base`.
pub fn validate_manifest(m: &Manifest, base: &Path) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for r in &m.records {
        if !seen.insert(r.id.as_str()) {
            out.push(Violation::DuplicateId(r.id.clone()));
        }
        if r.caption.trim().is_empty() {
            out.push(Violation::EmptyCaption(r.id.clone()));
        }
        let image_dims = check_file(&r.id, &resolve(base, &r.image_path), &mut out);
        let mask_dims = r
            .mask_path
            .as_ref()
            .and_then(|p| check_file(&r.id, &resolve(base, p), &mut out));
        if let (Some(image), Some(mask)) = (image_dims, mask_dims) {
            if image != mask {
                out.push(Violation::DimensionMismatch {
                    id: r.id.clone(),
                    image,
                    mask,
                });
            }
        }
    }
    out
}

fn check_file(id: &str, path: &Path, out: &mut Vec<Violation>) -> Option<(u32, u32)> {
    if !path.is_file() {
        out.push(Violation::MissingFile {
            id: id.to_string(),
            path: path.to_path_buf(),
        });
        return None;
    }
    match image::image_dimensions(path) {
        Ok(d) => Some(d),
        Err(e) => {
            out.push(Violation::UnreadableFile {
                id: id.to_string(),
                path: path.to_path_buf(),
                reason: e.to_string(),
            });
            None
        }
    }
}
