//! Output-root layout, atomic writes and content manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use denn_core::generality::XTenths;
use sha2::{Digest, Sha256};

use crate::config::RunId;

const MANIFEST_MAGIC: &str = "DENN-MANIFEST";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("manifest line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("{0} is not listed in the {1} manifest")]
    Unlisted(String, String),
    #[error("{0} does not match the hash recorded in the {1} manifest")]
    HashMismatch(String, String),
    #[error("no {0} manifest under {1}; run that stage first")]
    NoManifest(String, PathBuf),
}

impl StoreError {
    fn io(path: &Path, source: io::Error) -> Self {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a temporary file in the same directory and renames it into
/// place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| StoreError::io(dir, e))?;
    let mut tmp = tempfile::Builder::new()
        .prefix(".denn-")
        .suffix(".tmp")
        .tempfile_in(dir)
        .map_err(|e| StoreError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| StoreError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| StoreError::io(path, e))?;
    tmp.persist(path).map_err(|e| StoreError::io(path, e.error))?;
    Ok(())
}

/// Like [`write_atomic`] but leaves an identical file untouched.
pub fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    match fs::read(path) {
        Ok(old) if old == bytes => Ok(()),
        _ => write_atomic(path, bytes),
    }
}

pub fn read(path: &Path) -> Result<Vec<u8>, StoreError> {
    fs::read(path).map_err(|e| StoreError::io(path, e))
}

/// Hashes of the artifact files a stage produced, keyed by path relative to
/// the output root with `/` separators.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub stage: String,
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(stage: &str) -> Self {
        Manifest {
            stage: stage.to_string(),
            files: BTreeMap::new(),
        }
    }

    /// Hashes `rel` under `root` and records it.
    pub fn add(&mut self, root: &Path, rel: &str) -> Result<(), StoreError> {
        let bytes = read(&root.join(rel))?;
        self.files.insert(rel.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    /// Records every regular file below `root/dir`, skipping dot files.
    pub fn add_tree(&mut self, root: &Path, dir: &str) -> Result<(), StoreError> {
        let mut stack = vec![root.join(dir)];
        while let Some(d) = stack.pop() {
            let entries = match fs::read_dir(&d) {
                Ok(e) => e,
                Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
                Err(e) => return Err(StoreError::io(&d, e)),
            };
            for entry in entries {
                let entry = entry.map_err(|e| StoreError::io(&d, e))?;
                let path = entry.path();
                if entry.file_name().to_string_lossy().starts_with('.') {
                    continue;
                }
                let kind = entry.file_type().map_err(|e| StoreError::io(&path, e))?;
                if kind.is_dir() {
                    stack.push(path);
                } else if kind.is_file() {
                    let rel = path.strip_prefix(root).expect("below root");
                    let rel: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
                    self.add(root, &rel.join("/"))?;
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MANIFEST_MAGIC}\nversion=1\nstage={}\nfiles {}\n", self.stage, self.files.len());
        for (path, hash) in &self.files {
            out.push_str(&format!("{hash} {path}\n"));
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self, StoreError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| StoreError::Malformed {
                line: 0,
                message: format!("truncated before {what}"),
            })
        };
        let bad = |line: usize, message: String| StoreError::Malformed { line, message };
        let (n, l) = next("header")?;
        if l != MANIFEST_MAGIC {
            return Err(bad(n, format!("expected `{MANIFEST_MAGIC}`")));
        }
        let (n, l) = next("version")?;
        if l != "version=1" {
            return Err(bad(n, format!("unsupported version line `{l}`")));
        }
        let (n, l) = next("stage")?;
        let stage = l.strip_prefix("stage=").ok_or_else(|| bad(n, "expected stage=<name>".into()))?;
        if stage.is_empty() || !stage.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(bad(n, format!("bad stage name `{stage}`")));
        }
        let (n, l) = next("file count")?;
        let count: usize = l
            .strip_prefix("files ")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| bad(n, "expected files <count>".into()))?;
        let mut files = BTreeMap::new();
        for _ in 0..count {
            let (n, l) = next("file entry")?;
            let (hash, path) = l.split_once(' ').ok_or_else(|| bad(n, "expected `<sha256> <path>`".into()))?;
            if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
                return Err(bad(n, format!("bad hash `{hash}`")));
            }
            if !is_relative_path(path) {
                return Err(bad(n, format!("path `{path}` must be relative and stay below the root")));
            }
            if files.insert(path.to_string(), hash.to_string()).is_some() {
                return Err(bad(n, format!("duplicate entry `{path}`")));
            }
        }
        let (n, l) = next("end")?;
        if l != "end" {
            return Err(bad(n, "expected `end`".into()));
        }
        if let Some((n, _)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(bad(n, "content after `end`".into()));
        }
        Ok(Manifest {
            stage: stage.to_string(),
            files,
        })
    }

    pub fn path(root: &Path, stage: &str) -> PathBuf {
        root.join("manifests").join(format!("{stage}.txt"))
    }

    pub fn load(root: &Path, stage: &str) -> Result<Self, StoreError> {
        let path = Self::path(root, stage);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StoreError::NoManifest(stage.into(), root.into())),
            Err(e) => return Err(StoreError::io(&path, e)),
        };
        Self::parse(&text)
    }

    pub fn save(&self, root: &Path) -> Result<(), StoreError> {
        write_if_changed(&Self::path(root, &self.stage), self.to_text().as_bytes())
    }

    pub fn contains(&self, rel: &str) -> bool {
        self.files.contains_key(rel)
    }

    /// Reads a listed file and checks its hash.
    pub fn require(&self, root: &Path, rel: &str) -> Result<Vec<u8>, StoreError> {
        let hash = self
            .files
            .get(rel)
            .ok_or_else(|| StoreError::Unlisted(rel.to_string(), self.stage.clone()))?;
        let bytes = read(&root.join(rel))?;
        if &sha256_hex(&bytes) != hash {
            return Err(StoreError::HashMismatch(rel.to_string(), self.stage.clone()));
        }
        Ok(bytes)
    }

    pub fn require_text(&self, root: &Path, rel: &str) -> Result<String, StoreError> {
        let bytes = self.require(root, rel)?;
        String::from_utf8(bytes).map_err(|_| StoreError::Malformed {
            line: 0,
            message: format!("{rel} is not UTF-8"),
        })
    }
}

fn is_relative_path(path: &str) -> bool {
    !path.is_empty()
        && !path.starts_with('/')
        && !path.contains('\\')
        && path.split('/').all(|part| !part.is_empty() && part != "." && part != "..")
}

pub fn run_dir(run: &RunId) -> String {
    format!("runs/{}/{}/{}", run.width, run.x, run.seed)
}

pub fn analysis_dir(width: usize) -> String {
    format!("analysis/{width}")
}

pub fn oracle_dir(x: XTenths) -> String {
    format!("oracle/{x}")
}

pub fn transfer_dir(width: usize) -> String {
    format!("transfer/{width}")
}

pub const CHECKPOINT: &str = "checkpoint.txt";
pub const RECORD: &str = "record.txt";
pub const TIMING: &str = "timing.txt";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips() {
        let mut m = Manifest::new("train");
        m.files.insert("runs/8/0.0/0/record.txt".into(), sha256_hex(b"abc"));
        m.files.insert("runs/8/0.0/0/checkpoint.txt".into(), sha256_hex(b""));
        let back = Manifest::parse(&m.to_text()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn parse_rejects_escaping_paths() {
        let hash = sha256_hex(b"");
        for path in ["../x", "/etc/passwd", "a//b", "a/./b"] {
            let text = format!("{MANIFEST_MAGIC}\nversion=1\nstage=s\nfiles 1\n{hash} {path}\nend\n");
            assert!(Manifest::parse(&text).is_err(), "{path}");
        }
    }

    #[test]
    fn parse_rejects_truncation_and_trailing() {
        let mut m = Manifest::new("s");
        m.files.insert("a".into(), sha256_hex(b"a"));
        let text = m.to_text();
        for cut in 0..text.len() - 1 {
            assert!(Manifest::parse(&text[..cut]).is_err(), "cut at {cut}");
        }
        assert!(Manifest::parse(&format!("{text}extra\n")).is_err());
    }

    #[test]
    fn require_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        write_atomic(&dir.path().join("a/b.txt"), b"hello").unwrap();
        let mut m = Manifest::new("s");
        m.add(dir.path(), "a/b.txt").unwrap();
        assert_eq!(m.require(dir.path(), "a/b.txt").unwrap(), b"hello");
        fs::write(dir.path().join("a/b.txt"), b"hellO").unwrap();
        assert!(matches!(m.require(dir.path(), "a/b.txt"), Err(StoreError::HashMismatch(..))));
        assert!(matches!(m.require(dir.path(), "a/c.txt"), Err(StoreError::Unlisted(..))));
    }

    #[test]
    fn add_tree_skips_dot_files() {
        let dir = tempfile::tempdir().unwrap();
        write_atomic(&dir.path().join("s/x/1.txt"), b"1").unwrap();
        write_atomic(&dir.path().join("s/2.txt"), b"2").unwrap();
        fs::write(dir.path().join("s/.partial"), b"?").unwrap();
        let mut m = Manifest::new("s");
        m.add_tree(dir.path(), "s").unwrap();
        let keys: Vec<&str> = m.files.keys().map(String::as_str).collect();
        assert_eq!(keys, ["s/2.txt", "s/x/1.txt"]);
    }
}
