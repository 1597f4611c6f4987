// SPDX-License-Identifier: Apache-2.0

//! On-disk datasets: a manifest CSV plus one image file and one or more
//! label files per example.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use probseg_core::{Image, SegMap};

use crate::error::{LabError, Result};
use crate::formats::{read_image, read_seg, write_image, write_seg};

pub const MANIFEST: &str = "manifest.csv";
pub const MANIFEST_COLUMNS: [&str; 5] = ["id", "image_path", "label_paths", "split", "ambiguous"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// First id of the split. Ranges never overlap for splits below one
    /// million examples.
    pub fn first_id(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1_000_000,
            Split::Test => 2_000_000,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Split, String> {
        Split::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| format!("unknown split `{s}`"))
    }
}

/// One image with every label map that belongs to it: the unflipped base
/// map for flip scenes, the grader masks for lesions.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: u64,
    pub split: Split,
    pub image: Image,
    pub labels: Vec<SegMap>,
    pub ambiguous: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: u64,
    pub image_path: String,
    pub label_paths: Vec<String>,
    pub split: Split,
    pub ambiguous: bool,
}

fn csv_err(path: &Path, e: csv::Error) -> LabError {
    match e.position() {
        Some(pos) => LabError::Parse { path: path.into(), offset: pos.byte(), detail: e.to_string() },
        None => LabError::data(path, e.to_string()),
    }
}

/// Write every example below `dir` and return the manifest rows, which are
/// also written to `dir/manifest.csv`.
pub fn write_dataset(examples: &[Example], dir: &Path) -> Result<Vec<ManifestRow>> {
    let mut rows = Vec::with_capacity(examples.len());
    for ex in examples {
        let image_path = format!("images/{:07}.img", ex.id);
        write_image(&dir.join(&image_path), &ex.image)?;
        let mut label_paths = Vec::with_capacity(ex.labels.len());
        for (k, map) in ex.labels.iter().enumerate() {
            let p = if ex.labels.len() == 1 {
                format!("labels/{:07}.seg", ex.id)
            } else {
                format!("labels/{:07}_{k}.seg", ex.id)
            };
            write_seg(&dir.join(&p), map)?;
            label_paths.push(p);
        }
        rows.push(ManifestRow { id: ex.id, image_path, label_paths, split: ex.split, ambiguous: ex.ambiguous });
    }
    write_manifest(&dir.join(MANIFEST), &rows)?;
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(MANIFEST_COLUMNS).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.id.to_string(),
            r.image_path.clone(),
            r.label_paths.join(";"),
            r.split.to_string(),
            u8::from(r.ambiguous).to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => LabError::data(path, format!("cannot open manifest: {e}")),
        _ => csv_err(path, e),
    })?;
    let headers = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.iter().ne(MANIFEST_COLUMNS) {
        return Err(LabError::Parse { path: path.into(), offset: 0, detail: format!("unexpected header {headers:?}") });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let offset = rec.position().map_or(0, |p| p.byte());
        let bad = |detail: String| LabError::Parse { path: path.into(), offset, detail };
        let id = rec[0].parse().map_err(|_| bad(format!("bad id `{}`", &rec[0])))?;
        let split = rec[3].parse().map_err(bad)?;
        let ambiguous = match &rec[4] {
            "0" => false,
            "1" => true,
            v => return Err(bad(format!("bad ambiguous flag `{v}`"))),
        };
        let label_paths: Vec<String> = rec[2].split(';').filter(|s| !s.is_empty()).map(String::from).collect();
        if label_paths.is_empty() {
            return Err(bad(format!("example {id} has no label files")));
        }
        rows.push(ManifestRow { id, image_path: rec[1].to_string(), label_paths, split, ambiguous });
    }
    Ok(rows)
}

fn resolve(dir: &Path, rel: &str) -> Result<PathBuf> {
    let p = Path::new(rel);
    if p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Err(LabError::data(&dir.join(MANIFEST), format!("path `{rel}` escapes the dataset directory")));
    }
    Ok(dir.join(p))
}

/// Load the examples of `dir`, optionally only one split, in manifest order.
pub fn read_dataset(dir: &Path, split: Option<Split>) -> Result<Vec<Example>> {
    let rows = read_manifest(&dir.join(MANIFEST))?;
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for row in rows {
        if !seen.insert(row.id) {
            return Err(LabError::data(&dir.join(MANIFEST), format!("duplicate id {}", row.id)));
        }
        if split.is_some_and(|s| s != row.split) {
            continue;
        }
        let image = read_image(&resolve(dir, &row.image_path)?)?;
        let labels = row
            .label_paths
            .iter()
            .map(|p| read_seg(&resolve(dir, p)?))
            .collect::<Result<Vec<_>>>()?;
        for (p, l) in row.label_paths.iter().zip(&labels) {
            if [l.height(), l.width()] != [image.height(), image.width()] {
                return Err(LabError::data(&dir.join(p), "label extents differ from the image"));
            }
        }
        out.push(Example { id: row.id, split: row.split, image, labels, ambiguous: row.ambiguous });
    }
    Ok(out)
}

/// Every file the manifest of `dir` refers to, manifest first.
pub fn dataset_files(dir: &Path) -> Result<Vec<String>> {
    let rows = read_manifest(&dir.join(MANIFEST))?;
    let mut files = vec![MANIFEST.to_string()];
    for r in rows {
        files.push(r.image_path);
        files.extend(r.label_paths);
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::quantize;

    fn example(id: u64, graders: usize) -> Example {
        let image = quantize(&Image::new(1, 2, 3, (0..6).map(|v| v as f64 * 0.1 + id as f64).collect()).unwrap());
        let labels = (0..graders).map(|g| SegMap::new(2, 3, 3, vec![0, 1, 2, (g % 3) as u8, 0, 1]).unwrap()).collect();
        Example { id, split: Split::ALL[id as usize % 3], image, labels, ambiguous: id.is_multiple_of(2) }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let examples: Vec<Example> = (0..100).map(|i| example(i, 1 + (i as usize % 2) * 3)).collect();
        let rows = write_dataset(&examples, dir.path()).unwrap();
        assert_eq!(rows.len(), 100);
        assert_eq!(read_manifest(&dir.path().join(MANIFEST)).unwrap(), rows);
        assert_eq!(read_dataset(dir.path(), None).unwrap(), examples);
        let test = read_dataset(dir.path(), Some(Split::Test)).unwrap();
        assert!(test.iter().all(|e| e.split == Split::Test));
        assert_eq!(test.len(), 33);
    }

    #[test]
    fn truncated_label_file_names_file_and_offset() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&[example(4, 1)], dir.path()).unwrap();
        let p = dir.path().join("labels/0000004.seg");
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        let msg = read_dataset(dir.path(), None).unwrap_err().to_string();
        assert!(msg.contains("0000004.seg") && msg.contains("offset 10"), "{msg}");
    }

    #[test]
    fn bad_manifest_rows_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&[example(1, 1)], dir.path()).unwrap();
        let m = dir.path().join(MANIFEST);
        let text = std::fs::read_to_string(&m).unwrap().replace(",val,", ",holdout,");
        std::fs::write(&m, text).unwrap();
        let e = read_dataset(dir.path(), None).unwrap_err();
        assert_eq!(e.exit_code(), 3);
        assert!(e.to_string().contains("holdout"));
        std::fs::write(&m, "id,image_path,label_paths,split,ambiguous\n1,../x.img,a.seg,val,0\n").unwrap();
        assert!(read_dataset(dir.path(), None).unwrap_err().to_string().contains("escapes"));
    }
}
