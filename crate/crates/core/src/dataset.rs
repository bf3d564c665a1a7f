//! On-disk dataset layout: `velodyne/NNNNNN.bin`, `labels/NNNNNN.label` and a
//! `manifest.txt` listing one scan id per line.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pointcloud::{
    load_labels, load_scan, write_labels, write_scan, ClassId, PointCloud, RemapTable,
};
use crate::synthetic::{generate_scene, scene_spec_for, SceneSpec};

pub const MANIFEST: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "# coarse3d dataset v1";

pub type Scene = (PointCloud, Vec<ClassId>);

fn scan_id(i: usize) -> String {
    format!("{i:06}")
}

fn scan_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (
        dir.join("velodyne").join(format!("{id}.bin")),
        dir.join("labels").join(format!("{id}.label")),
    )
}

/// Generate `n` synthetic scenes from `seed`, scene `i` drawn from its own
/// sub-seed so any prefix of the dataset is stable.
pub fn synthetic_scenes(base: &SceneSpec, seed: u64, n: usize) -> Result<Vec<Scene>> {
    (0..n)
        .map(|i| generate_scene(&scene_spec_for(base, seed, i)))
        .collect()
}

pub fn write_dataset(dir: &Path, scenes: &[Scene]) -> Result<()> {
    for sub in ["velodyne", "labels"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for (i, (cloud, labels)) in scenes.iter().enumerate() {
        let id = scan_id(i);
        let (scan, label) = scan_paths(dir, &id);
        write_scan(&scan, cloud)?;
        write_labels(&label, labels)?;
        manifest.push_str(&id);
        manifest.push('\n');
    }
    let p = dir.join(MANIFEST);
    fs::write(&p, manifest).map_err(|e| Error::io(&p, e))
}

/// Scan ids listed in the manifest, in order.
pub fn read_manifest(dir: &Path) -> Result<Vec<String>> {
    let p = dir.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Format {
            path: p,
            msg: format!("missing header {MANIFEST_HEADER:?}"),
        });
    }
    Ok(lines
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn load_dataset(dir: &Path, remap: &RemapTable) -> Result<Vec<Scene>> {
    read_manifest(dir)?
        .iter()
        .map(|id| {
            let (scan, label) = scan_paths(dir, id);
            let cloud = load_scan(&scan)?;
            let labels = load_labels(&label, cloud.len(), remap)?;
            Ok((cloud, labels))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let base = SceneSpec {
            n_classes: 3,
            points_per_class: (50, 60),
            ..Default::default()
        };
        let scenes = synthetic_scenes(&base, 7, 3).unwrap();
        write_dataset(dir.path(), &scenes).unwrap();
        assert_eq!(
            read_manifest(dir.path()).unwrap(),
            vec!["000000", "000001", "000002"]
        );
        let back = load_dataset(dir.path(), &RemapTable::Identity).unwrap();
        assert_eq!(back, scenes);
    }

    #[test]
    fn empty_dataset_has_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &[]).unwrap();
        assert!(read_manifest(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn bad_manifest() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST), "000000\n").unwrap();
        assert!(matches!(
            read_manifest(dir.path()),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            read_manifest(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}
