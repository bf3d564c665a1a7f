//! Line-oriented metrics series and plot-ready curve files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &str = "#COARSE3D-METRICS v1";
pub const HEADER: &str =
    "epoch\tsplit\tfocal\tlovasz\tnce\ttotal\tmiou\tlambda_nce\tlabelled_pixels\tvalid_pixels\tanchors";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// One metrics line. Losses are absent on validation rows and mIoU on
/// training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub focal: Option<f64>,
    pub lovasz: Option<f64>,
    pub nce: Option<f64>,
    pub total: Option<f64>,
    pub miou: Option<f64>,
    pub lambda_nce: f64,
    pub labelled_pixels: usize,
    pub valid_pixels: usize,
    pub anchors: usize,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"))
}

fn parse_opt(s: &str) -> std::result::Result<Option<f64>, String> {
    if s == "nan" {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|e| format!("{s:?}: {e}"))
}

impl MetricsRow {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch,
            self.split.as_str(),
            fmt_opt(self.focal),
            fmt_opt(self.lovasz),
            fmt_opt(self.nce),
            fmt_opt(self.total),
            fmt_opt(self.miou),
            self.lambda_nce,
            self.labelled_pixels,
            self.valid_pixels,
            self.anchors
        )
    }

    pub fn parse(line: &str) -> std::result::Result<Self, String> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 11 {
            return Err(format!("expected 11 fields, found {}", f.len()));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| format!("{s:?}: {e}"));
        Ok(Self {
            epoch: int(f[0])?,
            split: match f[1] {
                "train" => Split::Train,
                "val" => Split::Val,
                other => return Err(format!("unknown split {other:?}")),
            },
            focal: parse_opt(f[2])?,
            lovasz: parse_opt(f[3])?,
            nce: parse_opt(f[4])?,
            total: parse_opt(f[5])?,
            miou: parse_opt(f[6])?,
            lambda_nce: f[7].parse().map_err(|e| format!("{:?}: {e}", f[7]))?,
            labelled_pixels: int(f[8])?,
            valid_pixels: int(f[9])?,
            anchors: int(f[10])?,
        })
    }
}

pub fn header_text() -> String {
    format!("{MAGIC}\n{HEADER}\n")
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad(format!("missing {MAGIC:?} line")));
    }
    if lines.next() != Some(HEADER) {
        return Err(bad("unexpected header".into()));
    }
    lines
        .enumerate()
        .map(|(i, l)| MetricsRow::parse(l).map_err(|m| bad(format!("line {}: {m}", i + 3))))
        .collect()
}

/// Write `miou_curve.tsv` (one row per evaluation) and `loss_curve.tsv`
/// (one row per training epoch) into `dir`.
pub fn write_curves(rows: &[MetricsRow], dir: &Path) -> Result<()> {
    let mut miou = String::from("epoch\tmiou\n");
    let mut loss = String::from("epoch\tfocal\tlovasz\tnce\ttotal\n");
    for r in rows {
        match r.split {
            Split::Val => {
                let _ = writeln!(miou, "{}\t{}", r.epoch, fmt_opt(r.miou));
            }
            Split::Train => {
                let _ = writeln!(
                    loss,
                    "{}\t{}\t{}\t{}\t{}",
                    r.epoch,
                    fmt_opt(r.focal),
                    fmt_opt(r.lovasz),
                    fmt_opt(r.nce),
                    fmt_opt(r.total)
                );
            }
        }
    }
    for (name, text) in [("miou_curve.tsv", miou), ("loss_curve.tsv", loss)] {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
