//! Named experiment families. Each preset expands to a list of variant
//! configurations that run in order into `<out>/<variant>/`; a variant may
//! depend on an artifact of an earlier one (the pretrained first block).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationSchedule, Transform, ViewPipeline};
use crate::data::DatasetDescriptor;
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::experiment::{CorruptionConfig, DiagnosticsConfig, ExperimentConfig, FINAL_CHECKPOINT};
use crate::losses::DEFAULT_LAMBDA;
use crate::model::HeadConfig;
use crate::nn::EncoderSpec;
use crate::noise::{NoiseConfig, NoiseMode};
use crate::optim::LarsConfig;
use crate::pooling::{PoolingConfig, PoolingKind};
use crate::routing::{RoutingConfig, RoutingScheme};
use crate::trainer::{Regime, TrainConfig};

pub const PRESETS: [&str; 13] = [
    "fig4-main",
    "fig6-firstblock",
    "fig7-pooling",
    "appendixA-invariance-targets",
    "appendixA-lambda",
    "appendixA-adaptive-aug",
    "appendixA-routing",
    "appendixB-projector",
    "appendixB-probe-lr",
    "appendixB-groupconv",
    "appendixB-filter-size",
    "appendixC-corruption",
    "best-model",
];

/// How big a preset run is.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    /// CIFAR-10 subset: 10k train, 2k val, 30 epochs, batch 256.
    #[default]
    Desk,
    /// Synthetic shapes at 32 px, 10 epochs of 1024 images, narrower
    /// heads. One variant trains in about a minute on one core.
    Smoke,
}

fn base(scale: Scale, seed: u64) -> ExperimentConfig {
    let (dataset, epochs, batch, probe_epochs) = match scale {
        Scale::Desk => (DatasetDescriptor::cifar10(10_000, 2_000), 30, 256, 30),
        Scale::Smoke => (DatasetDescriptor::synthetic(1024, 512, 10, 32), 10, 64, 100),
    };
    let mut training = TrainConfig::new(Regime::Simultaneous, epochs);
    training.encoder = EncoderSpec::desk();
    training.batch_size = batch;
    training.optimizer.lars = short_schedule_lars();
    if scale == Scale::Smoke {
        let head = &mut training.heads[0];
        head.projector.hidden = 256;
        head.projector.output = 256;
        head.pooling.expansion = 256;
        training.augment = AugmentationSchedule::Uniform(smoke_pipeline());
    }
    ExperimentConfig {
        name: String::new(),
        seed,
        dataset,
        training,
        probe: ProbeConfig {
            epochs: probe_epochs,
            ..ProbeConfig::default()
        },
        diagnostics: DiagnosticsConfig::default(),
        corruption: CorruptionConfig::default(),
    }
}

/// The full pipeline with crops of at least half the image. Synthetic shapes
/// fill only part of the frame, and smaller crops often miss them entirely.
fn smoke_pipeline() -> ViewPipeline {
    let mut pipeline = ViewPipeline::full();
    for step in &mut pipeline.steps {
        if let Transform::ResizedCrop { scale, .. } = &mut step.transform {
            scale[0] = 0.5;
        }
    }
    pipeline
}

/// LARS tuned for schedules of a few hundred to a few thousand steps. The
/// default trust coefficient barely moves the weights in that budget, and
/// excluded parameters follow the usual bias-to-weight rate ratio.
pub fn short_schedule_lars() -> LarsConfig {
    LarsConfig {
        trust: 0.02,
        excluded_lr_scale: 0.024,
        ..LarsConfig::default()
    }
}

fn variant(base: &ExperimentConfig, name: &str, edit: impl FnOnce(&mut ExperimentConfig)) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.name = name.to_string();
    edit(&mut cfg);
    cfg
}

fn regime(base: &ExperimentConfig, name: &str, r: Regime) -> ExperimentConfig {
    variant(base, name, |c| c.training.regime = r)
}

fn with_pooling(base: &ExperimentConfig, name: &str, pooling: PoolingConfig) -> ExperimentConfig {
    variant(base, name, |c| c.training.heads[0].pooling = pooling)
}

/// Best blockwise setup: simultaneous, CbE with global pooling, and
/// independent noise of std 0.25 at every block input.
fn best(base: &ExperimentConfig, name: &str) -> ExperimentConfig {
    variant(base, name, |c| {
        c.training.regime = Regime::Simultaneous;
        c.training.noise = NoiseConfig::new(0.25, NoiseMode::Independent);
    })
}

/// Variants of preset `name`. `root` is the preset output directory, used
/// to point dependent variants at earlier artifacts.
pub fn preset(name: &str, scale: Scale, seed: u64, root: &Path) -> Result<Vec<ExperimentConfig>> {
    let b = base(scale, seed);
    let blocks = b.training.encoder.num_blocks();
    let variants = match name {
        "fig4-main" => {
            let mut v = vec![
                regime(&b, "end-to-end", Regime::EndToEnd),
                regime(&b, "simultaneous", Regime::Simultaneous),
                regime(&b, "sequential", Regime::Sequential { bn_stats_live: false }),
                regime(&b, "sequential-bn-live", Regime::Sequential { bn_stats_live: true }),
                regime(&b, "supervised-blockwise", Regime::SupervisedBlockwise),
                best(&b, "simultaneous-noise"),
            ];
            v.extend(
                (1..=blocks).map(|k| regime(&b, &format!("random-frozen-{k}"), Regime::RandomFrozen { block: k })),
            );
            v
        }
        "fig6-firstblock" => vec![
            regime(&b, "end-to-end", Regime::EndToEnd),
            regime(&b, "sequential", Regime::Sequential { bn_stats_live: false }),
            regime(&b, "simultaneous", Regime::Simultaneous),
            regime(
                &b,
                "first-block-pretrained",
                Regime::FirstBlockPretrained {
                    checkpoint: root.join("end-to-end").join(FINAL_CHECKPOINT),
                    sequential: true,
                },
            ),
            regime(&b, "merged-first-2", Regime::MergedFirst { blocks: 2 }),
        ],
        "fig7-pooling" => {
            let e = b.training.heads[0].pooling.expansion;
            vec![
                with_pooling(&b, "gsp", PoolingConfig::gsp()),
                // grid sized per block to approach the projector width
                with_pooling(
                    &b,
                    "lsp",
                    PoolingConfig {
                        kind: PoolingKind::Lsp,
                        ..PoolingConfig::gsp()
                    },
                ),
                with_pooling(&b, "cbe-gsp", PoolingConfig::cbe(PoolingKind::CbeGsp, e)),
                with_pooling(&b, "cbe-l2", PoolingConfig::cbe(PoolingKind::CbeL2, e)),
                with_pooling(&b, "cbe-sqrt", PoolingConfig::cbe(PoolingKind::CbeSqrt, e)),
            ]
        }
        "appendixA-invariance-targets" => {
            let targets = [0.6, 0.75, 0.9, 1.0];
            vec![
                variant(&b, "target-1", |_| {}),
                variant(&b, "target-ramp", |c| {
                    let head = c.training.heads[0].clone();
                    c.training.heads = (0..blocks)
                        .map(|k| {
                            let mut h = head.clone();
                            h.loss.target = targets[k.min(targets.len() - 1)];
                            h
                        })
                        .collect();
                }),
            ]
        }
        "appendixA-lambda" => [DEFAULT_LAMBDA, 0.02, 0.1, 0.5, 2.0]
            .iter()
            .map(|&lambda| {
                variant(&b, &format!("lambda-{lambda}"), |c| {
                    // block 1 alone, blocks 2..B as one end-to-end group
                    for spec in c.training.encoder.blocks.iter_mut().take(blocks - 1).skip(1) {
                        spec.merge_with_next = true;
                    }
                    let head = c.training.heads[0].clone();
                    c.training.heads = (0..blocks)
                        .map(|k| {
                            let mut h: HeadConfig = head.clone();
                            if k == 0 {
                                h.loss.lambda = lambda;
                            }
                            h
                        })
                        .collect();
                })
            })
            .collect(),
        "appendixA-adaptive-aug" => vec![
            regime(&b, "sequential-uniform", Regime::Sequential { bn_stats_live: false }),
            variant(&b, "sequential-adaptive", |c| {
                c.training.regime = Regime::Sequential { bn_stats_live: false };
                c.training.augment = AugmentationSchedule::Adaptive;
            }),
        ],
        "appendixA-routing" => {
            let routed = |name: &str, scheme, weight| {
                variant(&b, name, |c| {
                    c.training.routing = RoutingConfig {
                        enabled: true,
                        scheme,
                        weight,
                    }
                })
            };
            vec![
                variant(&b, "no-routing", |_| {}),
                routed("train-all-below", RoutingScheme::TrainAllBelow, 0.0),
                routed("weighted-0.5", RoutingScheme::WeightedOthers, 0.5),
                routed("weighted-0.1", RoutingScheme::WeightedOthers, 0.1),
            ]
        }
        "appendixB-projector" => {
            let h = b.training.heads[0].projector.hidden;
            vec![
                variant(&b, &format!("hidden-{h}"), |_| {}),
                variant(&b, &format!("hidden-{}", 2 * h), |c| {
                    c.training.heads[0].projector.hidden = 2 * h
                }),
            ]
        }
        // one training run; probe.json records every grid rate
        "appendixB-probe-lr" => vec![variant(&b, "simultaneous", |_| {})],
        "appendixB-groupconv" => [1, 2, 4]
            .iter()
            .map(|&g| variant(&b, &format!("groups-{g}"), |c| c.training.heads[0].pooling.groups = g))
            .collect(),
        "appendixB-filter-size" => [1, 3, 7]
            .iter()
            .map(|&f| variant(&b, &format!("filter-{f}"), |c| c.training.heads[0].pooling.filter = f))
            .collect(),
        "appendixC-corruption" => {
            let on = |c: &mut ExperimentConfig| c.corruption.enabled = true;
            vec![
                variant(&regime(&b, "end-to-end", Regime::EndToEnd), "end-to-end", on),
                variant(&best(&b, "best-blockwise"), "best-blockwise", on),
            ]
        }
        "best-model" => vec![best(&b, "best-blockwise")],
        other => {
            return Err(Error::config(format!(
                "unknown preset {other:?}; available: {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(variants)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        let root = Path::new("/tmp/presets");
        for name in PRESETS {
            for scale in [Scale::Desk, Scale::Smoke] {
                let vs = preset(name, scale, 0, root).unwrap();
                assert!(!vs.is_empty());
                let mut names: Vec<&str> = vs.iter().map(|v| v.name.as_str()).collect();
                names.sort();
                names.dedup();
                assert_eq!(names.len(), vs.len(), "{name} has duplicate variant names");
                for v in &vs {
                    v.validate().unwrap_or_else(|e| panic!("{name}/{}: {e}", v.name));
                }
            }
        }
        assert!(preset("fig99", Scale::Smoke, 0, root).is_err());
    }

    #[test]
    fn lambda_preset_isolates_block_one() {
        let vs = preset("appendixA-lambda", Scale::Desk, 0, Path::new("/x")).unwrap();
        assert_eq!(vs[0].training.encoder.training_groups(), vec![0..1, 1..4]);
        assert_eq!(vs[2].training.heads[0].loss.lambda, 0.1);
        assert_eq!(vs[2].training.heads[3].loss.lambda, DEFAULT_LAMBDA);
    }
}
