//! Tidy CSV tables from finished run directories.
//!
//! Input is either one run directory or a preset directory whose
//! subdirectories are runs. Only the reports written by
//! [`run_experiment`](crate::experiment::run_experiment) are read.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{CorrelationStats, CorruptionReport, ProbeReport};
use crate::experiment::{
    read_json, ExperimentConfig, CONFIG_FILE, CORRELATION_JSON, CORRELATION_RANDOM_JSON, CORRUPTION_JSON, METRICS_FILE,
    PROBE_JSON,
};
use crate::trainer::StepMetrics;

pub const PLOT_DIR: &str = "plotdata";
pub const ACCURACY_CSV: &str = "accuracy_vs_depth.csv";
pub const VIOLIN_CSV: &str = "violin.csv";
pub const CORRELATION_SUMMARY_CSV: &str = "correlation_summary.csv";
pub const CORRUPTION_CSV: &str = "corruption.csv";
pub const PROBE_LR_CSV: &str = "probe_lr.csv";
pub const LOSS_CSV: &str = "loss_curves.csv";

struct Run {
    variant: String,
    dir: PathBuf,
    config: ExperimentConfig,
}

fn find_runs(root: &Path) -> Result<Vec<Run>> {
    if !root.is_dir() {
        return Err(Error::MissingArtifacts(vec![root.display().to_string()]));
    }
    let mut dirs = Vec::new();
    if root.join(CONFIG_FILE).exists() {
        dirs.push(root.to_path_buf());
    } else {
        let mut entries: Vec<PathBuf> = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(CONFIG_FILE).exists())
            .collect();
        entries.sort();
        dirs = entries;
    }
    if dirs.is_empty() {
        return Err(Error::MissingArtifacts(vec![root
            .join(CONFIG_FILE)
            .display()
            .to_string()]));
    }
    dirs.into_iter()
        .map(|dir| {
            let config = ExperimentConfig::from_file(&dir.join(CONFIG_FILE))?;
            let variant = if config.name.is_empty() {
                dir.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default()
            } else {
                config.name.clone()
            };
            Ok(Run { variant, dir, config })
        })
        .collect()
}

fn required_files(run: &Run) -> Vec<&'static str> {
    let mut files = vec![METRICS_FILE, PROBE_JSON];
    if run.config.diagnostics.enabled {
        files.push(CORRELATION_JSON);
        if run.config.diagnostics.random_baseline {
            files.push(CORRELATION_RANDOM_JSON);
        }
    }
    if run.config.corruption.enabled {
        files.push(CORRUPTION_JSON);
    }
    files
}

fn correlation_rows(variant: &str, model: &str, stats: &CorrelationStats, violin: &mut String, summary: &mut String) {
    for b in &stats.blocks {
        for (term, values) in [("on", &b.on_diagonal), ("off", &b.off_diagonal)] {
            for v in values.iter() {
                let _ = writeln!(violin, "{variant},{model},{},{term},{v}", b.block);
            }
        }
        let _ = writeln!(
            summary,
            "{variant},{model},{},{},{},{}",
            b.block, b.on_mean, b.off_mean, b.off_abs_mean
        );
    }
}

/// Writes the plot tables into `<root>/plotdata/` and returns their paths.
/// Errors list every artifact that is absent.
pub fn emit_plotdata(root: &Path) -> Result<Vec<PathBuf>> {
    let runs = find_runs(root)?;
    let missing: Vec<String> = runs
        .iter()
        .flat_map(|r| {
            required_files(r)
                .into_iter()
                .map(|f| r.dir.join(f))
                .filter(|p| !p.exists())
                .map(|p| p.display().to_string())
        })
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }

    let mut accuracy = String::from("variant,block,top1\n");
    let mut probe_lr = String::from("variant,block,lr,top1\n");
    let mut violin = String::from("variant,model,block,term,value\n");
    let mut corr = String::from("variant,model,block,on_mean,off_mean,off_abs_mean\n");
    let mut corruption = String::from("variant,kind,severity,error\n");
    let mut losses = String::from("variant,step,block,loss,invariance,redundancy,lr\n");
    // block k of the random-frozen curve comes from the run that trained k
    let mut random_frozen: BTreeMap<usize, f64> = BTreeMap::new();
    let mut any_corruption = false;

    for run in &runs {
        let v = &run.variant;
        let probe: ProbeReport = read_json(&run.dir.join(PROBE_JSON))?;
        for e in &probe.entries {
            let _ = writeln!(accuracy, "{v},{},{}", e.block, e.top1);
            for (lr, acc) in &e.grid {
                let _ = writeln!(probe_lr, "{v},{},{lr},{acc}", e.block);
            }
        }
        if let crate::trainer::Regime::RandomFrozen { block } = run.config.training.regime {
            if let Some(e) = probe.entries.iter().find(|e| e.block == block) {
                random_frozen.insert(block, e.top1);
            }
        }
        if run.config.diagnostics.enabled {
            let stats: CorrelationStats = read_json(&run.dir.join(CORRELATION_JSON))?;
            correlation_rows(v, "trained", &stats, &mut violin, &mut corr);
            if run.config.diagnostics.random_baseline {
                let stats: CorrelationStats = read_json(&run.dir.join(CORRELATION_RANDOM_JSON))?;
                correlation_rows(v, "random-init", &stats, &mut violin, &mut corr);
            }
        }
        if run.config.corruption.enabled {
            any_corruption = true;
            let report: CorruptionReport = read_json(&run.dir.join(CORRUPTION_JSON))?;
            let _ = writeln!(corruption, "{v},clean,0,{}", report.clean_error);
            for row in &report.rows {
                for (sev, err) in &row.errors {
                    let _ = writeln!(corruption, "{v},{},{sev},{err}", row.kind.name());
                }
            }
        }
        let text =
            fs::read_to_string(run.dir.join(METRICS_FILE)).map_err(|e| Error::io(run.dir.join(METRICS_FILE), e))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let m: StepMetrics = serde_json::from_str(line)?;
            let _ = writeln!(
                losses,
                "{v},{},{},{},{},{},{}",
                m.step, m.block, m.loss, m.invariance, m.redundancy, m.lr
            );
        }
    }
    for (block, acc) in &random_frozen {
        let _ = writeln!(accuracy, "random-frozen,{block},{acc}");
    }

    let out = root.join(PLOT_DIR);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut tables = vec![
        (ACCURACY_CSV, accuracy),
        (PROBE_LR_CSV, probe_lr),
        (LOSS_CSV, losses),
        (VIOLIN_CSV, violin),
        (CORRELATION_SUMMARY_CSV, corr),
    ];
    if any_corruption {
        tables.push((CORRUPTION_CSV, corruption));
    }
    tables
        .into_iter()
        .map(|(name, body)| {
            let p = out.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
            Ok(p)
        })
        .collect()
}
