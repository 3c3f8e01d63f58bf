//! An encoder plus one head per training block.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{block_loss, LossConfig, LossKind, LossParts};
use crate::nn::{BnMode, Encoder, EncoderSpec, ParamId, ParamStore, Projector, ProjectorSpec, Session};
use crate::pooling::{Pooler, PoolingConfig, PoolingKind};
use crate::rng::stream;
use crate::tensor::{Element, Var};

/// Pooling, projector and loss of one block head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    #[serde(default = "default_pooling")]
    pub pooling: PoolingConfig,
    #[serde(default = "default_projector")]
    pub projector: ProjectorSpec,
    #[serde(default)]
    pub loss: LossConfig,
}

fn default_pooling() -> PoolingConfig {
    PoolingConfig::cbe(PoolingKind::CbeGsp, 256)
}

fn default_projector() -> ProjectorSpec {
    ProjectorSpec::new(512, 512)
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            pooling: default_pooling(),
            projector: default_projector(),
            loss: LossConfig::default(),
        }
    }
}

impl HeadConfig {
    /// Global pooling straight into the projector.
    pub fn gsp(hidden: usize, output: usize) -> Self {
        Self {
            pooling: PoolingConfig::gsp(),
            projector: ProjectorSpec::new(hidden, output),
            loss: LossConfig::default(),
        }
    }
}

/// Either one head configuration shared by every block or one per encoder
/// block.
pub fn head_for_block(heads: &[HeadConfig], block: usize, blocks: usize) -> Result<&HeadConfig> {
    match heads.len() {
        1 => Ok(&heads[0]),
        n if n == blocks => Ok(&heads[block]),
        n => Err(Error::config(format!(
            "{n} head configurations for {blocks} encoder blocks (give 1 or {blocks})"
        ))),
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    /// 0-based encoder block whose output feeds this head.
    pub block: usize,
    pub pooler: Pooler,
    pub projector: Projector,
    pub loss: LossConfig,
    pub params: Vec<ParamId>,
}

impl Head {
    pub fn forward<E: Element>(&self, s: &mut Session<'_, E>, features: Var, bn: BnMode) -> Result<Var> {
        let pooled = self.pooler.forward(s, features)?;
        self.projector.forward(s, pooled, bn)
    }

    pub fn loss<E: Element>(
        &self,
        s: &mut Session<'_, E>,
        za: Var,
        zb: Var,
        labels: Option<&[usize]>,
        weights: Option<&[f64]>,
    ) -> Result<LossParts> {
        block_loss(&mut s.tape, &self.loss, za, zb, labels, weights)
    }
}

/// Parameters, encoder and heads. `groups[g]` is the range of encoder
/// blocks trained by `heads[g]`.
#[derive(Clone, Debug)]
pub struct Model<E> {
    pub store: ParamStore<E>,
    pub encoder: Encoder,
    pub heads: Vec<Head>,
    pub groups: Vec<Range<usize>>,
}

impl<E: Element> Model<E> {
    /// Builds the encoder, then a head on the last block of every group.
    /// `classes` switches heads to supervised classifiers.
    pub fn new(
        spec: &EncoderSpec,
        groups: Vec<Range<usize>>,
        heads: &[HeadConfig],
        input_hw: (usize, usize),
        classes: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, spec, &mut stream(seed, "init/encoder", 0))?;
        let shapes = spec.block_shapes(input_hw.0, input_hw.1)?;
        check_groups(&groups, spec.num_blocks())?;
        let mut built = Vec::with_capacity(groups.len());
        for g in &groups {
            let block = g.end - 1;
            let cfg = head_for_block(heads, block, spec.num_blocks())?;
            let mut loss = cfg.loss.clone();
            if classes.is_some() {
                loss.kind = LossKind::SupervisedCe;
            }
            loss.validate()?;
            let name = format!("head{}", block + 1);
            let first = store.len();
            let mut rng = stream(seed, "init/head", block as u64);
            let pooler = Pooler::new(
                &mut store,
                &name,
                &cfg.pooling,
                shapes[block],
                cfg.projector.hidden,
                &mut rng,
            )?;
            let projector = match classes {
                Some(k) => Projector::classifier(
                    &mut store,
                    &format!("{name}/proj"),
                    pooler.out_width(),
                    &cfg.projector,
                    k,
                    &mut rng,
                )?,
                None => Projector::new(
                    &mut store,
                    &format!("{name}/proj"),
                    pooler.out_width(),
                    &cfg.projector,
                    &mut rng,
                )?,
            };
            let params = (first..store.len()).map(ParamId).collect();
            built.push(Head {
                block,
                pooler,
                projector,
                loss,
                params,
            });
        }
        Ok(Self {
            store,
            encoder,
            heads: built,
            groups,
        })
    }

    /// Encoder plus head parameters trained by group `g`.
    pub fn group_params(&self, g: usize) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.groups[g]
            .clone()
            .flat_map(|b| self.encoder.block_params(b).iter().copied())
            .collect();
        ids.extend(&self.heads[g].params);
        ids
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.encoder.all_params()
    }

    pub fn encoder_param_count(&self) -> usize {
        self.store.count(&self.encoder_params())
    }

    /// Group containing encoder block `b`.
    pub fn group_of(&self, b: usize) -> usize {
        self.groups
            .iter()
            .position(|g| g.contains(&b))
            .expect("groups cover every block")
    }
}

fn check_groups(groups: &[Range<usize>], blocks: usize) -> Result<()> {
    let mut next = 0;
    for g in groups {
        if g.start != next || g.end <= g.start {
            return Err(Error::config(format!(
                "training groups {groups:?} must tile 0..{blocks}"
            )));
        }
        next = g.end;
    }
    if next != blocks {
        return Err(Error::config(format!(
            "training groups {groups:?} must tile 0..{blocks}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heads_attach_to_group_ends() {
        let spec = EncoderSpec::desk();
        let m = Model::<f32>::new(
            &spec,
            spec.training_groups(),
            &[HeadConfig::gsp(32, 32)],
            (32, 32),
            None,
            0,
        )
        .unwrap();
        assert_eq!(m.heads.iter().map(|h| h.block).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        let e2e = Model::<f32>::new(&spec, vec![0..4], &[HeadConfig::gsp(32, 32)], (32, 32), None, 0).unwrap();
        assert_eq!(e2e.heads.len(), 1);
        assert_eq!(e2e.encoder_param_count(), m.encoder_param_count());
    }

    #[test]
    fn groups_partition_parameters() {
        let spec = EncoderSpec::desk();
        let m = Model::<f32>::new(
            &spec,
            spec.training_groups(),
            &[HeadConfig::default()],
            (32, 32),
            None,
            0,
        )
        .unwrap();
        let mut all: Vec<ParamId> = (0..m.groups.len()).flat_map(|g| m.group_params(g)).collect();
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
        assert_eq!(n, m.store.len());
    }

    #[test]
    fn supervised_heads_emit_classes() {
        let spec = EncoderSpec::desk();
        let m = Model::<f32>::new(
            &spec,
            spec.training_groups(),
            &[HeadConfig::gsp(32, 32)],
            (32, 32),
            Some(7),
            0,
        )
        .unwrap();
        assert!(m
            .heads
            .iter()
            .all(|h| h.projector.output_width() == 7 && h.loss.kind == LossKind::SupervisedCe));
    }

    #[test]
    fn bad_head_list_rejected() {
        let spec = EncoderSpec::desk();
        let heads = vec![HeadConfig::default(); 2];
        assert!(Model::<f32>::new(&spec, spec.training_groups(), &heads, (32, 32), None, 0).is_err());
        assert!(Model::<f32>::new(&spec, vec![0..2, 3..4], &heads[..1], (32, 32), None, 0).is_err());
    }
}
