//! CSV renderings of run artifacts.

use std::fmt::Write as _;

use super::train::{AblationResult, EpochLoss, PseudoEpoch, RunRecord, SimCell};
use crate::error::{Error, Result};
use crate::glpc::Strategy;
use crate::metrics::EvalReport;
use crate::stats::{friedman_avg_ranks, nemenyi_cd, RankTable};

pub fn metrics_csv(reports: &[(Strategy, EvalReport)]) -> String {
    let mut out = String::from("strategy,accuracy,macro_recall,macro_precision,macro_f1\n");
    for (st, r) in reports {
        let _ = writeln!(
            out,
            "{st},{:.6},{:.6},{:.6},{:.6}",
            r.accuracy, r.macro_recall, r.macro_precision, r.macro_f1
        );
    }
    out
}

pub fn confusion_csv(reports: &[(Strategy, EvalReport)]) -> String {
    let mut out = String::from("strategy,truth,counts\n");
    for (st, r) in reports {
        for (y, row) in r.confusion.iter().enumerate() {
            let counts: Vec<String> = row.iter().map(u64::to_string).collect();
            let _ = writeln!(out, "{st},{y},{}", counts.join(" "));
        }
    }
    out
}

fn pseudo_header(c: usize) -> String {
    let mut h = String::from("epoch,policy,theta,GP,RP");
    for j in 0..c {
        let _ = write!(h, ",CP_class{j}");
    }
    h.push('\n');
    h
}

fn pseudo_row(out: &mut String, e: &PseudoEpoch) {
    let _ = write!(
        out,
        "{},{},{},{:.6},{:.6}",
        e.epoch,
        e.policy,
        e.theta,
        e.gp(),
        e.rp()
    );
    for v in e.cp() {
        let _ = write!(out, ",{v:.6}");
    }
    out.push('\n');
}

pub fn pseudo_csv(epochs: &[PseudoEpoch]) -> String {
    let c = epochs.first().map_or(0, |e| e.per_class.len());
    let mut out = pseudo_header(c);
    for e in epochs {
        pseudo_row(&mut out, e);
    }
    out
}

pub fn losses_csv(losses: &[EpochLoss]) -> String {
    let mut out = String::from("stage,epoch,cls_source,cls_target,disc\n");
    for l in losses {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6}",
            l.stage, l.epoch, l.cls_source, l.cls_target, l.disc
        );
    }
    out
}

pub fn run_summary(record: &RunRecord) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "seed = {}", record.seed);
    let _ = writeln!(out, "config_sha256 = {}", record.config_hash);
    for (st, r) in &record.reports {
        let _ = writeln!(out, "accuracy[{st}] = {:.6}", r.accuracy);
    }
    out
}

/// Every epoch of every cell.
pub fn sim_epochs_csv(cells: &[SimCell]) -> String {
    let all: Vec<PseudoEpoch> = cells.iter().flat_map(|c| c.epochs.clone()).collect();
    pseudo_csv(&all)
}

/// One row per cell, pooled over epochs, with class coverage.
pub fn sim_summary_csv(cells: &[SimCell]) -> String {
    let c = cells.first().map_or(0, |x| x.last().per_class.len());
    let mut out = String::from("policy,theta,GP,RP,classes_covered");
    for j in 0..c {
        let _ = write!(out, ",CP_class{j}");
    }
    out.push('\n');
    for cell in cells {
        let p = cell.pooled();
        let _ = write!(
            out,
            "{},{},{:.6},{:.6},{}",
            cell.policy,
            cell.theta,
            p.gp(),
            p.rp(),
            p.classes_covered()
        );
        for v in p.cp() {
            let _ = write!(out, ",{v:.6}");
        }
        out.push('\n');
    }
    out
}

/// Pseudo-label reliability in the `method,setting,accuracy` layout read by
/// the ranking command.
pub fn sim_accuracy_csv(cells: &[SimCell]) -> String {
    let mut out = String::from("method,setting,accuracy\n");
    for cell in cells {
        let _ = writeln!(
            out,
            "{},theta={},{:.6}",
            cell.policy,
            cell.theta,
            cell.pooled().rp()
        );
    }
    out
}

pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut out = String::from("seed");
    for r in AblationResult::RUNGS {
        let _ = write!(out, ",{r}");
    }
    out.push('\n');
    for r in results {
        let _ = write!(out, "{}", r.seed);
        for v in r.values() {
            let _ = write!(out, ",{v:.6}");
        }
        out.push('\n');
    }
    out
}

/// Parse `method,setting,accuracy` rows (header required).
pub fn parse_accuracy_csv(text: &str) -> Result<RankTable> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty accuracy table"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols != ["method", "setting", "accuracy"] {
        return Err(Error::parse(1, "header must be method,setting,accuracy"));
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(Error::parse(
                i + 1,
                format!("expected 3 fields, got {}", f.len()),
            ));
        }
        let acc: f64 = f[2]
            .parse()
            .map_err(|_| Error::parse(i + 1, format!("bad accuracy '{}'", f[2])))?;
        rows.push((f[0].to_string(), f[1].to_string(), acc));
    }
    RankTable::from_long(&rows)
}

/// `method,avg_rank` rows followed by the two critical differences.
pub fn ranks_report(table: &RankTable) -> Result<String> {
    let ranks = friedman_avg_ranks(table);
    let (k, n) = (table.num_methods(), table.num_settings());
    let mut out = String::from("method,avg_rank\n");
    for (m, r) in table.methods.iter().zip(&ranks) {
        let _ = writeln!(out, "{m},{r:.4}");
    }
    let _ = writeln!(out, "CD(alpha=0.05)={:.4}", nemenyi_cd(k, n, 0.05)?);
    let _ = writeln!(out, "CD(alpha=0.10)={:.4}", nemenyi_cd(k, n, 0.10)?);
    Ok(out)
}
