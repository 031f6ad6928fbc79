//! Initial contents of memory components: a file or a repeated fill byte.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ContentSource {
    File(String),
    Fill(u8),
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("invalid content source {0:?}: expected file:PATH or fill:0xNN")]
pub struct BadContentSource(pub String);

impl FromStr for ContentSource {
    type Err = BadContentSource;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(path) = s.strip_prefix("file:") {
            if path.is_empty() {
                return Err(BadContentSource(s.into()));
            }
            return Ok(ContentSource::File(path.into()));
        }
        if let Some(hex) = s.strip_prefix("fill:0x").or_else(|| s.strip_prefix("fill:0X")) {
            return u8::from_str_radix(hex, 16).map(ContentSource::Fill).map_err(|_| BadContentSource(s.into()));
        }
        Err(BadContentSource(s.into()))
    }
}

impl TryFrom<String> for ContentSource {
    type Error = BadContentSource;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ContentSource> for String {
    fn from(c: ContentSource) -> String {
        c.to_string()
    }
}

impl fmt::Display for ContentSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContentSource::File(p) => write!(f, "file:{p}"),
            ContentSource::Fill(b) => write!(f, "fill:{b:#04x}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum ContentError {
    #[error("cannot read content file {path}: {source}")]
    Unreadable {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("content file {path} has {len} bytes but the component holds only {size}")]
    TooLarge { path: String, len: usize, size: u64 },
}

/// Resolves content sources to bytes. Relative file paths are taken
/// relative to `base_dir`; in-memory overrides shadow the file system, which
/// lets generated artifacts (page tables) and synthetic programs flow
/// through the same path as on-disk files.
#[derive(Clone, Debug, Default)]
pub struct ContentResolver {
    base_dir: PathBuf,
    overrides: BTreeMap<String, Vec<u8>>,
}

impl ContentResolver {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        Self { base_dir: base_dir.into(), overrides: BTreeMap::new() }
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn insert(&mut self, path: impl Into<String>, bytes: Vec<u8>) {
        self.overrides.insert(path.into(), bytes);
    }

    pub fn overrides(&self) -> impl Iterator<Item = (&str, &[u8])> {
        self.overrides.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn resolve_path(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Raw bytes of a file source, without padding.
    pub fn file_bytes(&self, path: &str) -> Result<Vec<u8>, ContentError> {
        if let Some(bytes) = self.overrides.get(path) {
            return Ok(bytes.clone());
        }
        std::fs::read(self.resolve_path(path)).map_err(|source| ContentError::Unreadable { path: path.into(), source })
    }

    /// Contents of a component of `size` bytes: file bytes zero-padded to
    /// `size`, or the fill byte repeated.
    pub fn load(&self, source: &ContentSource, size: u64) -> Result<Vec<u8>, ContentError> {
        match source {
            ContentSource::Fill(b) => Ok(vec![*b; size as usize]),
            ContentSource::File(path) => {
                let mut bytes = self.file_bytes(path)?;
                if bytes.len() as u64 > size {
                    return Err(ContentError::TooLarge { path: path.clone(), len: bytes.len(), size });
                }
                bytes.resize(size as usize, 0);
                Ok(bytes)
            }
        }
    }
}
