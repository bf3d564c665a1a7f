//! End-to-end run: data, training loop, periodic validation, artifacts.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::data::Dataset;
use super::eval::{evaluate, EvalReport};
use super::metrics::{header_text, MetricsRow, Split};
use super::step::Trainer;
use crate::error::{Error, Result};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const REPORT_FILE: &str = "report.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Debug)]
pub struct RunSummary {
    pub history: Vec<MetricsRow>,
    pub report: EvalReport,
    pub trainer: Trainer,
}

/// Train per `cfg`, writing the effective config, the metrics series, the
/// final validation report and a checkpoint into `run_dir`. Metrics are
/// flushed after each epoch, so a failed run keeps what it logged.
pub fn run_experiment(cfg: &ExperimentConfig, run_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let write = |name: &str, text: &str| {
        let p = run_dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(CONFIG_FILE, &cfg.to_text())?;

    let data = Dataset::build(cfg)?;
    let mut trainer = Trainer::new(cfg, data.focal_weights.clone())?;
    let metrics_path = run_dir.join(METRICS_FILE);
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    metrics
        .write_all(header_text().as_bytes())
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut log = |row: &MetricsRow| {
        writeln!(metrics, "{}", row.to_line())
            .and_then(|_| metrics.flush())
            .map_err(|e| Error::io(&metrics_path, e))
    };

    let val_valid: usize = data.val.iter().map(|f| f.image.n_valid()).sum();
    let mut history = Vec::new();
    let mut report = None;
    for epoch in 0..cfg.epochs {
        let m = trainer.train_epoch(&data.train, epoch)?;
        let row = MetricsRow {
            epoch,
            split: Split::Train,
            focal: Some(m.focal),
            lovasz: Some(m.lovasz),
            nce: Some(m.nce),
            total: Some(m.total),
            miou: None,
            lambda_nce: cfg.lambda_nce,
            labelled_pixels: m.labelled_pixels,
            valid_pixels: m.valid_pixels,
            anchors: m.anchors,
        };
        log(&row)?;
        history.push(row);
        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            let r = evaluate(&trainer.model, &data.val, cfg)?;
            let row = MetricsRow {
                epoch,
                split: Split::Val,
                focal: None,
                lovasz: None,
                nce: None,
                total: None,
                miou: Some(r.miou),
                lambda_nce: cfg.lambda_nce,
                labelled_pixels: 0,
                valid_pixels: val_valid,
                anchors: 0,
            };
            log(&row)?;
            history.push(row);
            report = Some(r);
        }
    }
    let report = match report {
        Some(r) => r,
        None => evaluate(&trainer.model, &data.val, cfg)?,
    };
    write(REPORT_FILE, &report.to_table())?;
    Checkpoint {
        config: cfg.clone(),
        params: trainer.model.params.clone(),
        bank: trainer.bank.clone(),
    }
    .save(&run_dir.join(CHECKPOINT_FILE))?;
    Ok(RunSummary {
        history,
        report,
        trainer,
    })
}
