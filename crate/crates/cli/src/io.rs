//! File helpers and the artifact manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tnf_core::grid::time_stem;
use tnf_core::sde::SnapshotDataset;
use tnf_core::DensityGrid;

use crate::{CliError, Result};

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CliError::File {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let wrap = |source| CliError::File {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(wrap)?;
    }
    fs::write(path, bytes).map_err(wrap)
}

/// Path of the JSON sidecar that accompanies a CSV file.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

/// Loads a dataset CSV and, when present, its sidecar.
pub fn load_dataset(csv: &Path) -> Result<SnapshotDataset> {
    let text = read_text(csv)?;
    let side = sidecar_path(csv);
    let sidecar = if side.exists() { Some(read_text(&side)?) } else { None };
    Ok(SnapshotDataset::from_csv(&text, sidecar.as_deref())?)
}

/// Point samples as CSV with header `t,x1,..,xD`.
pub fn samples_csv(dim: usize, rows: &[(f64, Vec<f64>)]) -> String {
    let mut out = String::from("t");
    for d in 1..=dim {
        write!(out, ",x{d}").unwrap();
    }
    out.push('\n');
    for (t, pts) in rows {
        for p in pts.chunks_exact(dim) {
            write!(out, "{t}").unwrap();
            for v in p {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Every file produced by a run, with content hashes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn get(&self, path: &str) -> Option<&ManifestEntry> {
        self.files.iter().find(|e| e.path == path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&read_text(path)?)?)
    }
}

/// Writes files below a root directory and records each in the manifest.
#[derive(Debug)]
pub struct Artifacts {
    root: PathBuf,
    manifest_name: String,
    entries: BTreeMap<String, ManifestEntry>,
}

impl Artifacts {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self::with_manifest(root, "manifest.json")
    }

    /// Like [`new`](Self::new) with the manifest written to `root/name`.
    /// Entries of an existing manifest there are kept, so several commands
    /// can write into one directory.
    pub fn with_manifest(root: impl Into<PathBuf>, name: &str) -> Self {
        let root = root.into();
        let entries = Manifest::load(&root.join(name))
            .map(|m| m.files.into_iter().map(|e| (e.path.clone(), e)).collect())
            .unwrap_or_default();
        Self {
            root,
            manifest_name: name.into(),
            entries,
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes `bytes` to `root/rel` (forward-slash separated).
    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let bytes = bytes.as_ref();
        let path = self.root.join(rel);
        write_file(&path, bytes)?;
        self.entries.insert(
            rel.to_string(),
            ManifestEntry {
                path: rel.to_string(),
                sha256: hex::encode(Sha256::digest(bytes)),
                bytes: bytes.len() as u64,
            },
        );
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        self.write(rel, serde_json::to_string_pretty(value)? + "\n")
    }

    /// Grid as `dir/t….csv`, its sidecar, and a PGM heatmap scaled to `scale_max`.
    pub fn write_grid(&mut self, dir: &str, grid: &DensityGrid, scale_max: Option<f64>) -> Result<()> {
        let stem = format!("{dir}/{}", time_stem(grid.time));
        self.write(&format!("{stem}.csv"), grid.to_csv())?;
        self.write_json(&format!("{stem}.json"), &grid.sidecar())?;
        self.write(&format!("{stem}.pgm"), tnf_core::eval::to_pgm(grid, scale_max))?;
        Ok(())
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            files: self.entries.values().cloned().collect(),
        }
    }

    /// Writes the manifest (not listed in itself) and returns it.
    pub fn finish(self) -> Result<Manifest> {
        let m = self.manifest();
        write_file(&self.root.join(&self.manifest_name), (serde_json::to_string_pretty(&m)? + "\n").as_bytes())?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn artifacts_hash_and_list_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Artifacts::new(dir.path());
        a.write("b/x.txt", "abc").unwrap();
        a.write("a.txt", "").unwrap();
        let m = a.finish().unwrap();
        assert_eq!(m.files.len(), 2);
        assert_eq!(m.files[0].path, "a.txt");
        assert_eq!(
            m.get("b/x.txt").unwrap().sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let back = Manifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(back, m);
        assert_eq!(fs::read_to_string(dir.path().join("b/x.txt")).unwrap(), "abc");

        let mut again = Artifacts::new(dir.path());
        again.write("a.txt", "abc").unwrap();
        let m2 = again.finish().unwrap();
        assert_eq!(m2.files.len(), 2);
        assert_eq!(m2.get("a.txt").unwrap().sha256, m.get("b/x.txt").unwrap().sha256);
    }

    #[test]
    fn samples_layout() {
        let csv = samples_csv(2, &[(0.5, vec![1.0, 2.0, 3.0, 4.0])]);
        assert_eq!(csv, "t,x1,x2\n0.5,1,2\n0.5,3,4\n");
    }
}
