//! Training loops for every regime.
//!
//! A regime resolves to a partition of the encoder into training groups and
//! a list of phases. Each phase trains some groups while the remaining
//! groups below them run frozen. Every training group owns one head and one
//! LARS optimizer, and a stop-gradient sits at the input of every group
//! after the first, so a group's loss only reaches its own parameters.

use std::collections::HashSet;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, AugmentationSchedule, ViewPipeline};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{per_example_cross_entropy, view_disagreement, LossParts};
use crate::model::{HeadConfig, Model};
use crate::nn::{checkpoint, BlockPass, BnMode, EncoderSpec, ForwardPlan, ParamId, Session};
use crate::noise::NoiseConfig;
use crate::optim::{CosineSchedule, Lars, LarsConfig};
use crate::rng::stream;
use crate::routing::{block_weights, route_examples, RoutingConfig};
use crate::tensor::{Element, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Regime {
    EndToEnd,
    Simultaneous,
    Sequential {
        /// Frozen blocks keep updating their batch-norm running statistics.
        #[serde(default)]
        bn_stats_live: bool,
    },
    SupervisedBlockwise,
    /// Blocks below `block` (1-based) stay at random init; only `block` trains.
    RandomFrozen {
        block: usize,
    },
    /// The first `blocks` encoder blocks train as one group.
    MergedFirst {
        blocks: usize,
    },
    /// Block 1 comes from a checkpoint and stays frozen; the blocks above
    /// train together or one after another.
    FirstBlockPretrained {
        checkpoint: PathBuf,
        #[serde(default)]
        sequential: bool,
    },
}

impl Regime {
    pub fn name(&self) -> String {
        match self {
            Regime::EndToEnd => "end-to-end".into(),
            Regime::Simultaneous => "simultaneous".into(),
            Regime::Sequential { bn_stats_live: false } => "sequential".into(),
            Regime::Sequential { bn_stats_live: true } => "sequential-bn-live".into(),
            Regime::SupervisedBlockwise => "supervised-blockwise".into(),
            Regime::RandomFrozen { block } => format!("random-frozen-{block}"),
            Regime::MergedFirst { blocks } => format!("merged-first-{blocks}"),
            Regime::FirstBlockPretrained { sequential: false, .. } => "first-block-pretrained".into(),
            Regime::FirstBlockPretrained { sequential: true, .. } => "first-block-pretrained-sequential".into(),
        }
    }

    pub fn is_supervised(&self) -> bool {
        matches!(self, Regime::SupervisedBlockwise)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub lars: LarsConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.2,
            warmup_steps: 0,
            lars: LarsConfig::default(),
        }
    }
}

/// Everything the training loop needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    #[serde(default)]
    pub encoder: EncoderSpec,
    /// One entry shared by all blocks, or one per encoder block.
    #[serde(default = "default_heads")]
    pub heads: Vec<HeadConfig>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub augment: AugmentationSchedule,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub routing: RoutingConfig,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Check gradient isolation every this many steps (0 disables).
    #[serde(default)]
    pub audit_every: usize,
    /// Write a checkpoint every this many epochs (0 disables).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// One backward pass over the summed block losses instead of one per
    /// block.
    #[serde(default = "yes")]
    pub combined_backward: bool,
}

fn default_heads() -> Vec<HeadConfig> {
    vec![HeadConfig::default()]
}

fn default_batch() -> usize {
    256
}

fn yes() -> bool {
    true
}

impl TrainConfig {
    pub fn new(regime: Regime, epochs: usize) -> Self {
        Self {
            regime,
            encoder: EncoderSpec::desk(),
            heads: default_heads(),
            optimizer: OptimizerConfig::default(),
            augment: AugmentationSchedule::default(),
            noise: NoiseConfig::default(),
            routing: RoutingConfig::default(),
            epochs,
            batch_size: default_batch(),
            audit_every: 0,
            checkpoint_every: 0,
            combined_backward: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.noise.validate()?;
        self.routing.validate()?;
        self.optimizer.lars.validate()?;
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::config("need at least one epoch and a batch of at least 2"));
        }
        if !(self.optimizer.lr >= 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} is invalid", self.optimizer.lr)));
        }
        let plan = RegimePlan::resolve(self)?;
        self.augment.validate(self.encoder.num_blocks())?;
        for g in &plan.groups {
            crate::model::head_for_block(&self.heads, g.end - 1, self.encoder.num_blocks())?;
        }
        Ok(())
    }
}

/// One stretch of training: which groups learn and how the frozen ones
/// below them behave.
#[derive(Clone, Debug, PartialEq)]
pub struct Phase {
    pub trainable: Vec<usize>,
    pub epochs: usize,
    pub frozen_bn: BnMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegimePlan {
    pub spec: EncoderSpec,
    pub groups: Vec<Range<usize>>,
    pub phases: Vec<Phase>,
    pub supervised: bool,
    pub pretrained: Option<PathBuf>,
}

impl RegimePlan {
    pub fn resolve(cfg: &TrainConfig) -> Result<Self> {
        let mut spec = cfg.encoder.clone();
        spec.validate()?;
        let b = spec.num_blocks();
        let all = |groups: &[Range<usize>]| (0..groups.len()).collect::<Vec<_>>();
        let one_phase = |trainable: Vec<usize>, frozen_bn| {
            vec![Phase {
                trainable,
                epochs: cfg.epochs,
                frozen_bn,
            }]
        };
        let mut pretrained = None;
        let (groups, phases) = match &cfg.regime {
            Regime::EndToEnd => (vec![0..b], one_phase(vec![0], BnMode::Eval)),
            Regime::Simultaneous | Regime::SupervisedBlockwise => {
                let g = spec.training_groups();
                let p = one_phase(all(&g), BnMode::Eval);
                (g, p)
            }
            Regime::Sequential { bn_stats_live } => {
                let g = spec.training_groups();
                let bn = if *bn_stats_live { BnMode::Train } else { BnMode::Eval };
                let phases = sequential_phases(0..g.len(), cfg.epochs, bn)?;
                (g, phases)
            }
            Regime::RandomFrozen { block } => {
                if !(1..=b).contains(block) {
                    return Err(Error::config(format!("random-frozen block {block} outside 1..={b}")));
                }
                let g: Vec<Range<usize>> = (0..b).map(|k| k..k + 1).collect();
                (g, one_phase(vec![block - 1], BnMode::Train))
            }
            Regime::MergedFirst { blocks } => {
                spec.merge_first(*blocks)?;
                let g = spec.training_groups();
                let p = one_phase(all(&g), BnMode::Eval);
                (g, p)
            }
            Regime::FirstBlockPretrained { checkpoint, sequential } => {
                let g = spec.training_groups();
                if g[0] != (0..1) || g.len() < 2 {
                    return Err(Error::config(
                        "first-block pretraining needs an unmerged block 1 and a block above it",
                    ));
                }
                pretrained = Some(checkpoint.clone());
                let p = if *sequential {
                    sequential_phases(1..g.len(), cfg.epochs, BnMode::Eval)?
                } else {
                    one_phase((1..g.len()).collect(), BnMode::Eval)
                };
                (g, p)
            }
        };
        Ok(Self {
            spec,
            groups,
            phases,
            supervised: cfg.regime.is_supervised(),
            pretrained,
        })
    }
}

/// One phase per group in `groups`, splitting `epochs` equally with the
/// remainder going to the earliest groups.
fn sequential_phases(groups: Range<usize>, epochs: usize, frozen_bn: BnMode) -> Result<Vec<Phase>> {
    let count = groups.len();
    if epochs < count {
        return Err(Error::config(format!(
            "{epochs} epochs cannot be split over {count} sequential blocks"
        )));
    }
    Ok(groups
        .enumerate()
        .map(|(i, g)| Phase {
            trainable: vec![g],
            epochs: epochs / count + usize::from(i < epochs % count),
            frozen_bn,
        })
        .collect())
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    /// 1-based encoder block the head sits on.
    pub block: usize,
    pub loss: f64,
    pub invariance: f64,
    pub redundancy: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepEvent {
    pub phase: usize,
    pub epoch: usize,
    pub step: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub steps: usize,
    /// Number of (step, group) isolation checks that ran.
    pub audits: usize,
    pub metrics: Vec<StepMetrics>,
}

/// Output sinks of a training run; all optional.
#[derive(Default)]
pub struct TrainSinks<'a, E> {
    pub metrics: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<&'a Path>,
    pub observer: Option<&'a mut dyn FnMut(StepEvent, &Model<E>)>,
}

/// Builds the model a config trains, loading pretrained weights if the
/// regime asks for them.
pub fn build_model<E: Element>(cfg: &TrainConfig, data: &Dataset, seed: u64) -> Result<(Model<E>, RegimePlan)> {
    cfg.validate()?;
    let plan = RegimePlan::resolve(cfg)?;
    let [c, h, w] = data.image_dims();
    if c != plan.spec.in_channels {
        return Err(Error::config(format!(
            "images have {c} channels, encoder expects {}",
            plan.spec.in_channels
        )));
    }
    let classes = plan.supervised.then_some(data.classes);
    let mut model = Model::new(&plan.spec, plan.groups.clone(), &cfg.heads, (h, w), classes, seed)?;
    if let Some(path) = &plan.pretrained {
        if !path.exists() {
            return Err(Error::MissingArtifacts(vec![path.display().to_string()]));
        }
        let entries = checkpoint::read(path)?;
        let n = checkpoint::load_into(&mut model.store, &entries, "block1/")?;
        if n == 0 {
            return Err(Error::config(format!("{} has no block1 tensors", path.display())));
        }
    }
    Ok((model, plan))
}

/// Trains a fresh model on `data`.
pub fn train<E: Element>(
    cfg: &TrainConfig,
    data: &Dataset,
    seed: u64,
    sinks: TrainSinks<'_, E>,
) -> Result<(Model<E>, TrainReport)> {
    let (mut model, plan) = build_model(cfg, data, seed)?;
    let report = train_model(cfg, &plan, &mut model, data, seed, sinks)?;
    Ok((model, report))
}

struct Pass {
    pipeline: ViewPipeline,
    pipeline_index: usize,
    groups: Vec<usize>,
}

/// Groups sharing an augmentation pipeline share one forward pass.
fn passes_for(schedule: &AugmentationSchedule, model_heads: &[usize], trainable: &[usize]) -> Result<Vec<Pass>> {
    let mut distinct: Vec<ViewPipeline> = Vec::new();
    let mut passes: Vec<Pass> = Vec::new();
    for &g in trainable {
        let p = schedule.for_block(model_heads[g])?;
        let index = match distinct.iter().position(|d| *d == p) {
            Some(i) => i,
            None => {
                distinct.push(p.clone());
                distinct.len() - 1
            }
        };
        match passes.iter_mut().find(|pass| pass.pipeline_index == index) {
            Some(pass) => pass.groups.push(g),
            None => passes.push(Pass {
                pipeline: p,
                pipeline_index: index,
                groups: vec![g],
            }),
        }
    }
    Ok(passes)
}

pub fn train_model<E: Element>(
    cfg: &TrainConfig,
    plan: &RegimePlan,
    model: &mut Model<E>,
    data: &Dataset,
    seed: u64,
    mut sinks: TrainSinks<'_, E>,
) -> Result<TrainReport> {
    let n = data.len();
    let steps_per_epoch = n / cfg.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::config(format!(
            "batch size {} exceeds the {n} training images",
            cfg.batch_size
        )));
    }
    let num_groups = model.groups.len();
    let head_blocks: Vec<usize> = model.heads.iter().map(|h| h.block).collect();
    let mut report = TrainReport::default();
    let mut difficulty = vec![f64::NAN; n];
    let mut global_step = 0;
    let mut global_epoch = 0;
    let mut optimizers: Vec<Lars<E>> = (0..num_groups).map(|_| Lars::new(cfg.optimizer.lars)).collect();

    for (phase_index, phase) in plan.phases.iter().enumerate() {
        let trainable: HashSet<usize> = phase.trainable.iter().copied().collect();
        let top_group = *phase.trainable.iter().max().expect("phase trains a group");
        // groups below the top trainable one that do not learn are frozen
        for g in 0..num_groups {
            let ids = model.group_params(g);
            model.store.set_frozen(&ids, !trainable.contains(&g));
        }
        let passes = passes_for(&cfg.augment, &head_blocks, &phase.trainable)?;
        let schedule = CosineSchedule {
            base: cfg.optimizer.lr,
            total: phase.epochs * steps_per_epoch,
            warmup: cfg.optimizer.warmup_steps,
        };
        let mut phase_step = 0;
        for _ in 0..phase.epochs {
            let epoch = global_epoch;
            let mut order: Vec<usize> = (0..n).collect();
            shuffle(&mut order, &mut stream(seed, "shuffle", epoch as u64));
            let assignment = if cfg.routing.enabled {
                Some(assign_blocks(&difficulty, num_groups, seed, epoch)?)
            } else {
                None
            };
            for chunk in order.chunks_exact(cfg.batch_size) {
                let lr = schedule.lr(phase_step)?;
                let (images, labels) = data.batch(chunk)?;
                let weights = assignment.as_ref().map(|a| {
                    (0..num_groups)
                        .map(|g| {
                            chunk
                                .iter()
                                .map(|&i| block_weights(&cfg.routing, a[i], num_groups)[g])
                                .collect::<Vec<f64>>()
                        })
                        .collect::<Vec<_>>()
                });
                let audit = cfg.audit_every > 0 && global_step % cfg.audit_every == 0;
                let ctx = StepContext {
                    cfg,
                    phase,
                    trainable: &trainable,
                    top_group,
                    seed,
                    epoch,
                    step: global_step,
                    supervised: plan.supervised,
                };
                let outcome = run_step(&ctx, model, &passes, &images, &labels, chunk, weights.as_deref(), audit)?;
                report.audits += outcome.audits;
                if let Some(d) = outcome.difficulty {
                    for (&i, v) in chunk.iter().zip(d) {
                        difficulty[i] = v;
                    }
                }
                for &g in &phase.trainable {
                    let ids: Vec<ParamId> = model.group_params(g);
                    optimizers[g].step(&mut model.store, &ids, lr)?;
                }
                model.store.zero_grad();
                for (g, parts) in outcome.losses {
                    let m = StepMetrics {
                        step: global_step,
                        block: head_blocks[g] + 1,
                        loss: parts[0],
                        invariance: parts[1],
                        redundancy: parts[2],
                        lr,
                    };
                    if let Some(w) = sinks.metrics.as_deref_mut() {
                        serde_json::to_writer(&mut *w, &m)?;
                        writeln!(w).map_err(|e| Error::io("metrics log", e))?;
                    }
                    report.metrics.push(m);
                }
                if let Some(obs) = sinks.observer.as_deref_mut() {
                    obs(
                        StepEvent {
                            phase: phase_index,
                            epoch,
                            step: global_step,
                        },
                        model,
                    );
                }
                global_step += 1;
                phase_step += 1;
            }
            global_epoch += 1;
            if let Some(dir) = sinks.checkpoint_dir {
                if cfg.checkpoint_every > 0 && global_epoch % cfg.checkpoint_every == 0 {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                    checkpoint::save(&model.store, &dir.join(format!("epoch{global_epoch}.ckpt")))?;
                }
            }
        }
    }
    for g in 0..num_groups {
        let ids = model.group_params(g);
        model.store.set_frozen(&ids, false);
    }
    report.steps = global_step;
    Ok(report)
}

fn shuffle(order: &mut [usize], rng: &mut crate::rng::Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// Routing assignment for an epoch: by last epoch's difficulties, or
/// uniformly at random while any example has none yet.
fn assign_blocks(difficulty: &[f64], groups: usize, seed: u64, epoch: usize) -> Result<Vec<usize>> {
    if difficulty.iter().any(|d| d.is_nan()) {
        let mut rng = stream(seed, "routing", epoch as u64);
        return Ok(difficulty.iter().map(|_| rng.random_range(0..groups)).collect());
    }
    route_examples(difficulty, groups)
}

struct StepContext<'a> {
    cfg: &'a TrainConfig,
    phase: &'a Phase,
    trainable: &'a HashSet<usize>,
    top_group: usize,
    seed: u64,
    epoch: usize,
    step: usize,
    supervised: bool,
}

struct StepOutcome {
    losses: Vec<(usize, [f64; 3])>,
    difficulty: Option<Vec<f64>>,
    audits: usize,
}

#[allow(clippy::too_many_arguments)]
fn run_step<E: Element>(
    ctx: &StepContext<'_>,
    model: &mut Model<E>,
    passes: &[Pass],
    images: &Tensor<f32>,
    labels: &[usize],
    rows: &[usize],
    weights: Option<&[Vec<f64>]>,
    audit: bool,
) -> Result<StepOutcome> {
    let cfg = ctx.cfg;
    let Model {
        store,
        encoder,
        heads,
        groups,
    } = model;
    let keys: Vec<u64> = rows.iter().map(|&i| ((ctx.epoch as u64) << 32) | i as u64).collect();
    let mut session = Session::new(store);
    if audit {
        session = session.grad_all();
    }
    let mut losses: Vec<(usize, LossParts)> = Vec::new();
    let mut difficulty = None;
    let group_start: HashSet<usize> = groups.iter().map(|g| g.start).collect();

    for (pass_index, pass) in passes.iter().enumerate() {
        let name = format!("augment/{}", pass.pipeline_index);
        let (va, vb) = augment_batch(images, &keys, &pass.pipeline, ctx.seed, &name)?;
        let upto = pass
            .groups
            .iter()
            .map(|&g| groups[g].end)
            .max()
            .expect("pass has groups");
        let in_pass: HashSet<usize> = pass.groups.iter().copied().collect();
        let passes_plan: Vec<BlockPass> = (0..upto)
            .map(|b| {
                let g = groups.iter().position(|r| r.contains(&b)).expect("covered");
                let bn = if in_pass.contains(&g) {
                    BnMode::Train
                } else if ctx.trainable.contains(&g) {
                    BnMode::TrainStatsFrozen
                } else {
                    ctx.phase.frozen_bn
                };
                BlockPass {
                    bn,
                    isolate: b > 0 && group_start.contains(&b),
                }
            })
            .collect();
        let mut outs = Vec::with_capacity(2);
        for (view_index, view) in [va, vb].into_iter().enumerate() {
            let x = session.tape.constant(view.cast::<E>());
            let mut rng = stream(ctx.seed, "noise", (ctx.step * 16 + pass_index * 2 + view_index) as u64);
            let mut plan = ForwardPlan {
                passes: passes_plan.clone(),
                noise: None,
            }
            .with_noise(cfg.noise, &mut rng);
            outs.push(encoder.forward(&mut session, x, &mut plan)?);
        }
        for &g in &pass.groups {
            let head = &heads[g];
            let za = head.forward(&mut session, outs[0][head.block], BnMode::Train)?;
            let zb = head.forward(&mut session, outs[1][head.block], BnMode::Train)?;
            if g == ctx.top_group && cfg.routing.enabled {
                difficulty = Some(if ctx.supervised {
                    per_example_cross_entropy(session.tape.value(za), labels)?
                } else {
                    view_disagreement(session.tape.value(za), session.tape.value(zb))?
                });
            }
            let w = weights.map(|w| w[g].as_slice());
            if let Some(w) = w {
                if w.iter().filter(|&&x| x > 0.0).count() < 2 {
                    continue;
                }
            }
            let w = w.filter(|w| w.iter().any(|&x| x != 1.0));
            let parts = head.loss(&mut session, za, zb, ctx.supervised.then_some(labels), w)?;
            let value = session.tape.value(parts.total).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss of block {} at step {}",
                    head.block + 1,
                    ctx.step
                )));
            }
            losses.push((g, parts));
        }
    }

    let mut audits = 0;
    if audit {
        for &(g, parts) in &losses {
            let grads = session.tape.backward(parts.total)?;
            let own: HashSet<ParamId> = group_param_set(encoder, heads, groups, g);
            for (id, grad) in session.param_grads(&grads) {
                if !own.contains(&id) && grad.data().iter().any(|v| v.as_f64().to_bits() != 0) {
                    return Err(Error::Audit(format!(
                        "loss of block {} reached {} at step {}",
                        heads[g].block + 1,
                        session.store().param(id).name,
                        ctx.step
                    )));
                }
            }
            audits += 1;
        }
    }

    if cfg.combined_backward && !losses.is_empty() {
        let mut total: Var = losses[0].1.total;
        for &(_, parts) in &losses[1..] {
            total = session.tape.add(total, parts.total)?;
        }
        session.backward(total)?;
    } else {
        for &(_, parts) in &losses {
            session.backward(parts.total)?;
        }
    }
    let summary = losses
        .iter()
        .map(|&(g, p)| {
            let v = session.tape.value(p.total).data()[0].as_f64();
            (g, [v, p.invariance, p.redundancy])
        })
        .collect();
    Ok(StepOutcome {
        losses: summary,
        difficulty,
        audits,
    })
}

fn group_param_set(
    encoder: &crate::nn::Encoder,
    heads: &[crate::model::Head],
    groups: &[Range<usize>],
    g: usize,
) -> HashSet<ParamId> {
    let mut set: HashSet<ParamId> = groups[g]
        .clone()
        .flat_map(|b| encoder.block_params(b).iter().copied())
        .collect();
    set.extend(&heads[g].params);
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_shapes;
    use crate::nn::{Linear, ParamKind, ParamStore};
    use crate::optim::LarsConfig;

    fn tiny(regime: Regime, epochs: usize) -> (TrainConfig, Dataset) {
        let mut cfg = TrainConfig::new(regime, epochs);
        cfg.encoder = EncoderSpec::with_blocks(&[(4, 2), (8, 2)]);
        cfg.heads = vec![HeadConfig::gsp(16, 16)];
        cfg.batch_size = 8;
        cfg.augment = AugmentationSchedule::Uniform(ViewPipeline::full());
        let data = synthetic_shapes(16, 4, [3, 8, 8], 0).unwrap();
        (cfg, data)
    }

    #[test]
    fn sequential_split_and_freeze() {
        let (cfg, data) = tiny(Regime::Sequential { bn_stats_live: false }, 4);
        let plan = RegimePlan::resolve(&cfg).unwrap();
        assert_eq!(plan.phases.iter().map(|p| p.epochs).collect::<Vec<_>>(), vec![2, 2]);
        let mut snapshots: Vec<(usize, u64)> = Vec::new();
        let mut obs = |ev: StepEvent, m: &Model<f32>| {
            let ids = m.group_params(0);
            let mut sub = ParamStore::<f32>::new();
            for id in ids {
                let p = m.store.param(id);
                sub.add_param(p.name.clone(), p.kind, p.value.clone());
            }
            for b in m.store.buffers().iter().filter(|b| b.name.starts_with("block1/")) {
                sub.add_buffer(b.name.clone(), b.value.clone());
            }
            snapshots.push((ev.phase, sub.checksum()));
        };
        let sinks = TrainSinks {
            observer: Some(&mut obs),
            ..Default::default()
        };
        train::<f32>(&cfg, &data, 1, sinks).unwrap();
        let phase1: Vec<u64> = snapshots.iter().filter(|s| s.0 == 1).map(|s| s.1).collect();
        let last0 = snapshots.iter().filter(|s| s.0 == 0).last().unwrap().1;
        assert!(phase1.iter().all(|&c| c == last0));
    }

    #[test]
    fn live_bn_stats_keep_moving_in_frozen_blocks() {
        let (cfg, data) = tiny(Regime::Sequential { bn_stats_live: true }, 4);
        let mut weights: Vec<(usize, u64)> = Vec::new();
        let mut stats: Vec<(usize, u64)> = Vec::new();
        let mut obs = |ev: StepEvent, m: &Model<f32>| {
            let mut w = ParamStore::<f32>::new();
            for id in m.group_params(0) {
                let p = m.store.param(id);
                w.add_param(p.name.clone(), p.kind, p.value.clone());
            }
            let mut s = ParamStore::<f32>::new();
            for b in m.store.buffers().iter().filter(|b| b.name.starts_with("block1/")) {
                s.add_buffer(b.name.clone(), b.value.clone());
            }
            weights.push((ev.phase, w.checksum()));
            stats.push((ev.phase, s.checksum()));
        };
        let sinks = TrainSinks {
            observer: Some(&mut obs),
            ..Default::default()
        };
        train::<f32>(&cfg, &data, 1, sinks).unwrap();
        let in_phase1 = |v: &[(usize, u64)]| v.iter().filter(|s| s.0 == 1).map(|s| s.1).collect::<Vec<_>>();
        let w1 = in_phase1(&weights);
        assert!(w1.len() > 1 && w1.iter().all(|&c| c == w1[0]));
        let s1 = in_phase1(&stats);
        assert!(s1.windows(2).any(|p| p[0] != p[1]), "running statistics never changed");
    }

    #[test]
    fn merged_first_has_fewer_groups() {
        let (mut cfg, _) = tiny(Regime::MergedFirst { blocks: 2 }, 1);
        cfg.encoder = EncoderSpec::desk();
        let plan = RegimePlan::resolve(&cfg).unwrap();
        assert_eq!(plan.groups.len(), 3);
    }

    #[test]
    fn missing_pretrained_checkpoint_is_reported() {
        let (cfg, data) = tiny(
            Regime::FirstBlockPretrained {
                checkpoint: PathBuf::from("/nonexistent/e2e.ckpt"),
                sequential: false,
            },
            1,
        );
        assert!(matches!(
            train::<f32>(&cfg, &data, 0, TrainSinks::default()),
            Err(Error::MissingArtifacts(_))
        ));
    }

    #[test]
    fn audit_runs_and_passes() {
        let (mut cfg, data) = tiny(Regime::Simultaneous, 1);
        cfg.audit_every = 1;
        let (_, report) = train::<f32>(&cfg, &data, 0, TrainSinks::default()).unwrap();
        assert_eq!(report.steps, 2);
        assert_eq!(report.audits, 4);
    }

    #[test]
    fn regime_names_parse() {
        let r: Regime = serde_json::from_str(r#"{"kind":"random-frozen","block":3}"#).unwrap();
        assert_eq!(r, Regime::RandomFrozen { block: 3 });
        assert!(serde_json::from_str::<Regime>(r#"{"kind":"greedy"}"#).is_err());
    }

    /// Two scalar "blocks" `h = a*x`, `y = b*sg(h)` with losses
    /// `(h - 1)^2` and `(y - 1)^2`, one LARS step each, against hand algebra.
    #[test]
    fn two_block_linear_hand_trace() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = stream(0, "t", 0);
        let l1 = Linear::new(&mut store, "block1", 1, 1, false, &mut rng);
        let l2 = Linear::new(&mut store, "block2", 1, 1, false, &mut rng);
        store.param_mut(l1.weight).value = Tensor::from_f64(&[1, 1], &[0.5]).unwrap();
        store.param_mut(l2.weight).value = Tensor::from_f64(&[1, 1], &[2.0]).unwrap();
        assert_eq!(store.param(l1.weight).kind, ParamKind::Weight);
        let mut s = Session::new(&mut store);
        let x = s.tape.constant(Tensor::from_f64(&[1, 1], &[3.0]).unwrap());
        let h = l1.forward(&mut s, x).unwrap();
        let hs = s.tape.stop_gradient(h);
        let y = l2.forward(&mut s, hs).unwrap();
        let one = s.tape.constant(Tensor::from_f64(&[1, 1], &[1.0]).unwrap());
        let d1 = s.tape.sub(h, one).unwrap();
        let l_1 = s.tape.square(d1);
        let l_1 = s.tape.sum_all(l_1).unwrap();
        let d2 = s.tape.sub(y, one).unwrap();
        let l_2 = s.tape.square(d2);
        let l_2 = s.tape.sum_all(l_2).unwrap();
        let total = s.tape.add(l_1, l_2).unwrap();
        s.backward(total).unwrap();
        // h = 1.5, dL1/da = 2(h-1)x = 3; y = 3, dL2/db = 2(y-1)h = 6
        assert_eq!(store.param(l1.weight).grad.data(), &[3.0]);
        assert_eq!(store.param(l2.weight).grad.data(), &[6.0]);
        let cfg = LarsConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            trust: 1.0,
            eps: 0.0,
            excluded_lr_scale: 1.0,
        };
        Lars::new(cfg).step(&mut store, &[l1.weight], 0.1).unwrap();
        Lars::new(cfg).step(&mut store, &[l2.weight], 0.1).unwrap();
        // local rate |w|/|g|: block 1 0.5/3, block 2 2/6; step = rate*lr*g
        assert!((store.param(l1.weight).value.data()[0] - (0.5 - 0.05)).abs() < 1e-15);
        assert!((store.param(l2.weight).value.data()[0] - (2.0 - 0.2)).abs() < 1e-15);
    }
}
