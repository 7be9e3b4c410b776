//! Data file descriptors, checksums and deterministic tar archives shared by
//! the agent and the run store.

use std::io::Read;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    Power,
    Container,
    Requests,
    Meta,
}

/// One data file of a run or monitoring session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub kind: FileKind,
    pub bytes: u64,
    /// Data rows, excluding any header.
    pub rows: u64,
    pub sha256: String,
}

impl FileEntry {
    pub fn describe(path: impl Into<String>, kind: FileKind, contents: &[u8]) -> Self {
        let rows = match kind {
            FileKind::Meta => 0,
            _ => csv_rows(contents),
        };
        FileEntry { path: path.into(), kind, bytes: contents.len() as u64, rows, sha256: sha256_hex(contents) }
    }

    pub fn matches(&self, contents: &[u8]) -> bool {
        self.bytes == contents.len() as u64 && self.sha256 == sha256_hex(contents)
    }
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

fn csv_rows(contents: &[u8]) -> u64 {
    contents.split(|&b| b == b'\n').skip(1).filter(|l| !l.is_empty()).count() as u64
}

/// Packs files into a tar archive whose bytes depend only on names and
/// contents: entries sorted by name, zero timestamps and owners, mode 0644.
pub fn pack_tar(files: &[(String, Vec<u8>)]) -> std::io::Result<Vec<u8>> {
    let mut sorted: Vec<&(String, Vec<u8>)> = files.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut builder = tar::Builder::new(Vec::new());
    for (name, data) in sorted {
        let mut header = tar::Header::new_ustar();
        header.set_size(data.len() as u64);
        header.set_mode(0o644);
        header.set_mtime(0);
        header.set_uid(0);
        header.set_gid(0);
        header.set_entry_type(tar::EntryType::Regular);
        builder.append_data(&mut header, name, data.as_slice())?;
    }
    builder.into_inner()
}

pub fn unpack_tar(archive: &[u8]) -> std::io::Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut ar = tar::Archive::new(archive);
    for entry in ar.entries()? {
        let mut entry = entry?;
        let name = entry.path()?.to_string_lossy().into_owned();
        let mut data = Vec::new();
        entry.read_to_end(&mut data)?;
        out.push((name, data));
    }
    Ok(out)
}

/// Checks that `files` are exactly the manifest entries, byte for byte.
pub fn verify_files(files: &[(String, Vec<u8>)], manifest: &[FileEntry]) -> Result<(), String> {
    if files.len() != manifest.len() {
        return Err(format!("{} files for {} manifest entries", files.len(), manifest.len()));
    }
    for entry in manifest {
        let Some((_, data)) = files.iter().find(|(n, _)| *n == entry.path) else {
            return Err(format!("{} missing", entry.path));
        };
        if !entry.matches(data) {
            return Err(format!("{} does not match its checksum", entry.path));
        }
    }
    Ok(())
}
