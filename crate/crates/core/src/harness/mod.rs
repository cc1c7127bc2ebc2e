//! Experiment orchestration: configuration, the two-stage protocol, and
//! file outputs.

pub mod config;
pub mod report;
pub mod train;

use std::fs;
use std::path::Path;

pub use config::{Preset, SimMode, TrainConfig};
pub use train::{
    evaluate_run, load_data, run_ablation, run_stage1, run_stage2, simulate_fplg, train,
    AblationResult, PseudoEpoch, RunRecord, SimCell, TrainOutcome,
};

use crate::error::{Error, Result};

pub const CONFIG_FILE: &str = "config.txt";
pub const MODEL_FILE: &str = "model.ckpt";
pub const STATE_FILE: &str = "pseudo_state.csv";

pub fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))
}

/// Write every artifact of a training run under `dir`.
pub fn write_train_outputs(dir: &Path, cfg: &TrainConfig, out: &TrainOutcome) -> Result<()> {
    write_file(dir, CONFIG_FILE, &cfg.to_text())?;
    write_file(
        dir,
        "metrics.csv",
        &report::metrics_csv(&out.record.reports),
    )?;
    write_file(
        dir,
        "confusion.csv",
        &report::confusion_csv(&out.record.reports),
    )?;
    write_file(dir, "pseudo.csv", &report::pseudo_csv(&out.record.pseudo))?;
    write_file(dir, "losses.csv", &report::losses_csv(&out.record.losses))?;
    write_file(dir, "run.txt", &report::run_summary(&out.record))?;
    write_file(dir, STATE_FILE, &out.state.to_csv())?;
    out.bundle.save(&dir.join(MODEL_FILE))
}
