//! Point clouds and the SemKITTI on-disk formats.
//!
//! Scans are packed little-endian `f32` quadruples `(x, y, z, intensity)`.
//! Label files hold one little-endian `u32` per point; the low 16 bits are the
//! semantic class and the high 16 bits an instance id, which is discarded.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Class id used throughout the crate. [`UNLABELLED`] marks missing labels.
pub type ClassId = u16;

pub const UNLABELLED: ClassId = ClassId::MAX;

const SCAN_RECORD: usize = 16;
const LABEL_RECORD: usize = 4;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub coords: Vec<[f32; 3]>,
    pub intensity: Vec<f32>,
}

impl PointCloud {
    pub fn new(coords: Vec<[f32; 3]>, intensity: Vec<f32>) -> Result<Self> {
        if coords.len() != intensity.len() {
            return Err(Error::Shape(format!(
                "{} coordinates but {} intensities",
                coords.len(),
                intensity.len()
            )));
        }
        if let Some(i) = coords.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Shape(format!(
                "point {i} has non-finite coordinates"
            )));
        }
        if let Some(i) = intensity.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("point {i} has non-finite intensity")));
        }
        Ok(Self { coords, intensity })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn range(&self, i: usize) -> f32 {
        let [x, y, z] = self.coords[i];
        (x * x + y * y + z * z).sqrt()
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Load a `.bin` scan. Intensities are clamped to `[0, 1]`.
pub fn load_scan(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = read(path)?;
    if bytes.len() % SCAN_RECORD != 0 {
        return Err(Error::TruncatedRecord {
            path: path.to_path_buf(),
            offset: bytes.len() - bytes.len() % SCAN_RECORD,
            len: bytes.len(),
            record: SCAN_RECORD,
        });
    }
    let n = bytes.len() / SCAN_RECORD;
    let mut coords = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(SCAN_RECORD) {
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().unwrap());
        coords.push([f(0), f(1), f(2)]);
        intensity.push(f(3).clamp(0.0, 1.0));
    }
    PointCloud::new(coords, intensity).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn write_scan(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(cloud.len() * SCAN_RECORD);
    for (p, &i) in cloud.coords.iter().zip(&cloud.intensity) {
        for v in [p[0], p[1], p[2], i] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Maps raw SemKITTI semantic ids onto training class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RemapTable {
    /// Raw ids are used as class ids directly.
    Identity,
    Table(BTreeMap<u32, ClassId>),
}

impl RemapTable {
    /// Parse `raw_id mapped_id` pairs, one per line. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| Error::RemapSyntax {
                line: lineno + 1,
                msg: msg.to_string(),
            };
            let mut parts = line.split_whitespace();
            let raw: u32 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err("expected raw id"))?;
            let mapped: ClassId = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err("expected mapped id"))?;
            if parts.next().is_some() {
                return Err(err("trailing tokens"));
            }
            if map.insert(raw, mapped).is_some() {
                return Err(err("duplicate raw id"));
            }
        }
        Ok(RemapTable::Table(map))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn map(&self, raw: u32) -> Option<ClassId> {
        match self {
            RemapTable::Identity => ClassId::try_from(raw).ok().filter(|&c| c != UNLABELLED),
            RemapTable::Table(m) => m.get(&raw).copied(),
        }
    }
}

/// Load a `.label` file holding exactly `n_points` records.
pub fn load_labels(
    path: impl AsRef<Path>,
    n_points: usize,
    remap: &RemapTable,
) -> Result<Vec<ClassId>> {
    let path = path.as_ref();
    let bytes = read(path)?;
    if bytes.len() % LABEL_RECORD != 0 {
        return Err(Error::TruncatedRecord {
            path: path.to_path_buf(),
            offset: bytes.len() - bytes.len() % LABEL_RECORD,
            len: bytes.len(),
            record: LABEL_RECORD,
        });
    }
    let found = bytes.len() / LABEL_RECORD;
    if found != n_points {
        return Err(Error::LabelCountMismatch {
            path: path.to_path_buf(),
            expected: n_points,
            found,
        });
    }
    let mut missing = Vec::new();
    let labels = bytes
        .chunks_exact(LABEL_RECORD)
        .map(|rec| {
            let raw = u32::from_le_bytes(rec.try_into().unwrap()) & 0xffff;
            remap.map(raw).unwrap_or_else(|| {
                missing.push(raw);
                UNLABELLED
            })
        })
        .collect();
    if !missing.is_empty() {
        missing.sort_unstable();
        missing.dedup();
        return Err(Error::UnmappedClass(missing));
    }
    Ok(labels)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[ClassId]) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = labels
        .iter()
        .flat_map(|&l| u32::from(l).to_le_bytes())
        .collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn empty_scan() {
        let d = tmp();
        let p = d.path().join("a.bin");
        fs::write(&p, []).unwrap();
        assert!(load_scan(&p).unwrap().is_empty());
    }

    #[test]
    fn single_point_fixture() {
        let d = tmp();
        let p = d.path().join("a.bin");
        // (1.0, 0.0, 0.0, 0.5) as little-endian f32
        let bytes = [
            0x00, 0x00, 0x80, 0x3f, 0, 0, 0, 0, 0, 0, 0, 0, 0x00, 0x00, 0x00, 0x3f,
        ];
        fs::write(&p, bytes).unwrap();
        let c = load_scan(&p).unwrap();
        assert_eq!(c.coords, vec![[1.0, 0.0, 0.0]]);
        assert_eq!(c.intensity, vec![0.5]);
    }

    #[test]
    fn truncated_scan_names_offset() {
        let d = tmp();
        let p = d.path().join("a.bin");
        fs::write(&p, [0u8; 17]).unwrap();
        match load_scan(&p) {
            Err(Error::TruncatedRecord { offset, len, .. }) => {
                assert_eq!(offset, 16);
                assert_eq!(len, 17);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_scan() {
        assert!(matches!(
            load_scan("/nonexistent/scan.bin"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn intensity_is_clamped() {
        let d = tmp();
        let p = d.path().join("a.bin");
        let cloud = PointCloud::new(vec![[1.0, 2.0, 3.0]; 2], vec![1.7, -0.2]).unwrap();
        write_scan(&p, &cloud).unwrap();
        assert_eq!(load_scan(&p).unwrap().intensity, vec![1.0, 0.0]);
    }

    #[test]
    fn label_low_bits_and_remap() {
        let d = tmp();
        let p = d.path().join("a.label");
        fs::write(
            &p,
            [0x00000000u32, 0x00050001].map(u32::to_le_bytes).concat(),
        )
        .unwrap();
        let remap = RemapTable::parse("0 0\n1 1\n").unwrap();
        assert_eq!(load_labels(&p, 2, &remap).unwrap(), vec![0, 1]);
        assert_eq!(
            load_labels(&p, 2, &RemapTable::Identity).unwrap(),
            vec![0, 1]
        );
    }

    #[test]
    fn label_errors() {
        let d = tmp();
        let p = d.path().join("a.label");
        fs::write(&p, [10u32, 11].map(u32::to_le_bytes).concat()).unwrap();
        assert!(matches!(
            load_labels(&p, 3, &RemapTable::Identity),
            Err(Error::LabelCountMismatch {
                expected: 3,
                found: 2,
                ..
            })
        ));
        let remap = RemapTable::parse("10 0 # road").unwrap();
        match load_labels(&p, 2, &remap) {
            Err(Error::UnmappedClass(ids)) => assert_eq!(ids, vec![11]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn remap_syntax_errors() {
        assert!(RemapTable::parse("1").is_err());
        assert!(RemapTable::parse("1 2 3").is_err());
        assert!(RemapTable::parse("1 2\n1 3").is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(PointCloud::new(vec![[f32::NAN, 0.0, 0.0]], vec![0.0]).is_err());
    }
}
