// SPDX-License-Identifier: Apache-2.0

//! Content hashes in the style of git objects, over SHA-256.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::formats::read_file;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

/// `sha256("blob <len>\0" ‖ content)`.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex(&h.finalize())
}

/// Hash of named blobs: `sha256("tree <n>\0" ‖ Σ "<blob hash> <name>\n")`
/// with entries sorted by name.
pub fn tree_hash(entries: &[(String, String)]) -> String {
    let mut sorted: Vec<&(String, String)> = entries.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut h = Sha256::new();
    h.update(format!("tree {}\0", sorted.len()).as_bytes());
    for (name, blob) in sorted {
        h.update(format!("{blob} {name}\n").as_bytes());
    }
    hex(&h.finalize())
}

/// Tree hash over the listed files, relative to `dir`.
pub fn files_hash(dir: &Path, files: &[String]) -> Result<String> {
    let entries = files
        .iter()
        .map(|f| Ok((f.clone(), blob_hash(&read_file(&dir.join(f))?))))
        .collect::<Result<Vec<_>>>()?;
    Ok(tree_hash(&entries))
}
