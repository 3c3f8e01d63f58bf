//! Config-driven experiment runs.
//!
//! A run directory holds everything needed to regenerate plot data without
//! retraining:
//!
//! | file | content |
//! |------|---------|
//! | `config.json` | the parsed configuration, re-serialized |
//! | `metrics.jsonl` | one line per step and training block |
//! | `checkpoints/final.ckpt` | parameters and batch-norm buffers |
//! | `probe.json`, `probe.csv` | linear-probe accuracy per block prefix |
//! | `correlation.json` | on/off-diagonal feature correlations per block |
//! | `correlation_random.json` | the same for the untrained initialization |
//! | `corruption.json`, `corruption.csv` | error under image corruptions |

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::ViewPipeline;
use crate::data::{load_dataset, Dataset, DatasetDescriptor, Splits};
use crate::error::{Error, Result};
use crate::eval::{
    correlation_diagnostics, corruption_eval, probe_all_blocks, CorrelationStats, CorruptionKind, CorruptionReport,
    LinearClassifier, ProbeConfig, ProbeReport, SEVERITIES,
};
use crate::model::Model;
use crate::nn::checkpoint;
use crate::trainer::{build_model, train_model, RegimePlan, TrainConfig, TrainReport, TrainSinks};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoints/final.ckpt";
pub const PROBE_JSON: &str = "probe.json";
pub const PROBE_CSV: &str = "probe.csv";
pub const CORRELATION_JSON: &str = "correlation.json";
pub const CORRELATION_RANDOM_JSON: &str = "correlation_random.json";
pub const CORRUPTION_JSON: &str = "corruption.json";
pub const CORRUPTION_CSV: &str = "corruption.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub enabled: bool,
    /// Validation images used for the correlation estimate.
    pub samples: usize,
    pub pipeline: ViewPipeline,
    /// Also measure a freshly initialized encoder of the same shape.
    pub random_baseline: bool,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            samples: 512,
            pipeline: ViewPipeline::full(),
            random_baseline: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionConfig {
    pub enabled: bool,
    pub kinds: Vec<CorruptionKind>,
    pub severities: Vec<usize>,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            kinds: CorruptionKind::ALL.to_vec(),
            severities: (1..=SEVERITIES).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetDescriptor,
    pub training: TrainConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub corruption: CorruptionConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::config(format!("invalid experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks every section, including regime resolution, without touching
    /// data.
    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        let plan = RegimePlan::resolve(&self.training)?;
        self.dataset.validate(plan.spec.total_stride())?;
        if self.dataset.dims[0] != plan.spec.in_channels {
            return Err(Error::config(format!(
                "dataset has {} channels, encoder expects {}",
                self.dataset.dims[0], plan.spec.in_channels
            )));
        }
        if self.training.batch_size > self.dataset.train {
            return Err(Error::config(format!(
                "batch size {} exceeds the {} training images",
                self.training.batch_size, self.dataset.train
            )));
        }
        self.probe.validate()?;
        if self.diagnostics.enabled {
            self.diagnostics.pipeline.validate()?;
            if self.diagnostics.samples < 2 {
                return Err(Error::config("diagnostics need at least 2 samples"));
            }
        }
        if let Some(&s) = self.corruption.severities.iter().find(|&&s| s > SEVERITIES) {
            return Err(Error::config(format!(
                "corruption severity {s} outside 0..={SEVERITIES}"
            )));
        }
        Ok(())
    }
}

/// Headline numbers of a finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub regime: String,
    pub steps: usize,
    pub probe: Option<ProbeReport>,
    pub mean_corruption_error: Option<f64>,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)?.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Trains the configured model, writing the config echo, metrics log and
/// checkpoints into `out`.
pub fn run_training(cfg: &ExperimentConfig, splits: &Splits, out: &Path) -> Result<(Model<f32>, TrainReport)> {
    let (mut model, plan) = build_model::<f32>(&cfg.training, &splits.train, cfg.seed)?;
    let metrics_path = out.join(METRICS_FILE);
    let file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut writer = BufWriter::new(file);
    let ckpt_dir = out.join("checkpoints");
    let report = train_model(
        &cfg.training,
        &plan,
        &mut model,
        &splits.train,
        cfg.seed,
        TrainSinks {
            metrics: Some(&mut writer),
            checkpoint_dir: Some(&ckpt_dir),
            observer: None,
        },
    )?;
    writer.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let final_path = out.join(FINAL_CHECKPOINT);
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    checkpoint::save(&model.store, &final_path)?;
    Ok((model, report))
}

/// Rebuilds the configured model and loads every tensor of `ckpt` into it.
pub fn restore_model(cfg: &ExperimentConfig, data: &Dataset, ckpt: &Path) -> Result<Model<f32>> {
    if !ckpt.exists() {
        return Err(Error::MissingArtifacts(vec![ckpt.display().to_string()]));
    }
    let mut training = cfg.training.clone();
    // the pretrained block is already part of the checkpoint
    if let crate::trainer::Regime::FirstBlockPretrained { .. } = training.regime {
        training.regime = crate::trainer::Regime::Simultaneous;
    }
    let (mut model, _) = build_model::<f32>(&training, data, cfg.seed)?;
    let entries = checkpoint::read(ckpt)?;
    let loaded = checkpoint::load_into(&mut model.store, &entries, "")?;
    let expected = model.store.len() + model.store.buffers().len();
    if loaded != expected {
        return Err(Error::config(format!(
            "{} holds {loaded} tensors, the configured model has {expected}",
            ckpt.display()
        )));
    }
    Ok(model)
}

pub fn probe_csv(report: &ProbeReport) -> String {
    let mut s = String::from("block,top1,lr\n");
    for e in &report.entries {
        s += &format!("{},{},{}\n", e.block, e.top1, e.lr);
    }
    s
}

/// Probes every block prefix and writes `probe.json` and `probe.csv`.
pub fn run_probe(
    cfg: &ExperimentConfig,
    model: &Model<f32>,
    splits: &Splits,
    out: &Path,
) -> Result<(ProbeReport, LinearClassifier)> {
    let (report, clf) = probe_all_blocks(model, &splits.train, &splits.val, &cfg.probe, cfg.seed)?;
    write_json(&out.join(PROBE_JSON), &report)?;
    write_file(&out.join(PROBE_CSV), probe_csv(&report).as_bytes())?;
    Ok((report, clf))
}

/// Correlation statistics of the trained model and, if configured, of a
/// fresh initialization.
pub fn run_diagnostics(
    cfg: &ExperimentConfig,
    model: &Model<f32>,
    splits: &Splits,
    out: &Path,
) -> Result<(CorrelationStats, Option<CorrelationStats>)> {
    let n = cfg.diagnostics.samples.min(splits.val.len());
    let rows: Vec<usize> = (0..n).collect();
    let (images, _) = splits.val.batch(&rows)?;
    let blocks = model.encoder.num_blocks();
    let trained = correlation_diagnostics(model, &images, &cfg.diagnostics.pipeline, blocks, cfg.seed)?;
    write_json(&out.join(CORRELATION_JSON), &trained)?;
    let random = if cfg.diagnostics.random_baseline {
        // the encoder init stream does not depend on the regime, so an
        // end-to-end build yields the same untrained weights
        let mut t = cfg.training.clone();
        t.regime = crate::trainer::Regime::EndToEnd;
        let (fresh, _) = build_model::<f32>(&t, &splits.train, cfg.seed)?;
        let stats = correlation_diagnostics(&fresh, &images, &cfg.diagnostics.pipeline, blocks, cfg.seed)?;
        write_json(&out.join(CORRELATION_RANDOM_JSON), &stats)?;
        Some(stats)
    } else {
        None
    };
    Ok((trained, random))
}

pub fn run_corruption(
    cfg: &ExperimentConfig,
    model: &Model<f32>,
    probe: &LinearClassifier,
    val: &Dataset,
    out: &Path,
) -> Result<CorruptionReport> {
    let report = corruption_eval(
        model,
        probe,
        val,
        &cfg.corruption.kinds,
        &cfg.corruption.severities,
        cfg.seed,
    )?;
    write_json(&out.join(CORRUPTION_JSON), &report)?;
    write_file(&out.join(CORRUPTION_CSV), report.to_csv().as_bytes())?;
    Ok(report)
}

/// Loads the configured dataset, resolving relative paths against
/// `data_dir`.
pub fn load_splits(cfg: &ExperimentConfig, data_dir: Option<&Path>) -> Result<Splits> {
    load_dataset(&cfg.dataset, data_dir)
}

/// Full pipeline: validate, train, probe, diagnose and (optionally)
/// corruption-evaluate, writing every artifact into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, data_dir: Option<&Path>) -> Result<RunSummary> {
    cfg.validate()?;
    let splits = load_splits(cfg, data_dir)?;
    run_experiment_on(cfg, &splits, out)
}

/// [`run_experiment`] on already loaded data.
pub fn run_experiment_on(cfg: &ExperimentConfig, splits: &Splits, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_file(&out.join(CONFIG_FILE), cfg.to_json()?.as_bytes())?;
    let (model, report) = run_training(cfg, splits, out)?;
    let (probe, clf) = run_probe(cfg, &model, splits, out)?;
    if cfg.diagnostics.enabled {
        run_diagnostics(cfg, &model, splits, out)?;
    }
    let mce = if cfg.corruption.enabled {
        Some(run_corruption(cfg, &model, &clf, &splits.val, out)?.mean_corruption_error())
    } else {
        None
    };
    let summary = RunSummary {
        name: cfg.name.clone(),
        regime: cfg.training.regime.name(),
        steps: report.steps,
        probe: Some(probe),
        mean_corruption_error: mce,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Directory of variant `name` under a preset output root.
pub fn variant_dir(root: &Path, name: &str) -> PathBuf {
    root.join(name)
}
