//! Assigning training examples to blocks by difficulty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoutingScheme {
    /// Weight 1 on the assigned block and every block below it.
    #[default]
    TrainAllBelow,
    /// Weight 1 on the assigned block, `weight` on every other block.
    WeightedOthers,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingConfig {
    pub enabled: bool,
    pub scheme: RoutingScheme,
    pub weight: f64,
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.weight) {
            return Err(Error::config(format!(
                "routing weight must lie in [0, 1], got {}",
                self.weight
            )));
        }
        Ok(())
    }
}

/// 0-based block of each example: examples sorted by ascending difficulty
/// (ties by index) are cut into `blocks` equal quantile groups.
pub fn route_examples(difficulties: &[f64], blocks: usize) -> Result<Vec<usize>> {
    if blocks == 0 {
        return Err(Error::config("routing needs at least one block"));
    }
    if let Some(d) = difficulties.iter().find(|d| !d.is_finite()) {
        return Err(Error::NonFinite(format!("routing difficulty {d}")));
    }
    let n = difficulties.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| difficulties[a].total_cmp(&difficulties[b]).then(a.cmp(&b)));
    let mut out = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank * blocks / n;
    }
    Ok(out)
}

/// Training weight of each block for an example assigned to `assigned`.
pub fn block_weights(cfg: &RoutingConfig, assigned: usize, blocks: usize) -> Vec<f64> {
    (0..blocks)
        .map(|b| match cfg.scheme {
            RoutingScheme::TrainAllBelow => {
                if b <= assigned {
                    1.0
                } else {
                    0.0
                }
            }
            RoutingScheme::WeightedOthers => {
                if b == assigned {
                    1.0
                } else {
                    cfg.weight
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_order_assignment() {
        assert_eq!(route_examples(&[0.1, 0.9, 0.5, 0.3], 4).unwrap(), vec![0, 3, 2, 1]);
        assert_eq!(route_examples(&[1.0, 1.0, 0.0], 1).unwrap(), vec![0, 0, 0]);
        assert!(route_examples(&[f64::NAN], 2).is_err());
    }

    #[test]
    fn scheme_weights() {
        let below = RoutingConfig {
            enabled: true,
            scheme: RoutingScheme::TrainAllBelow,
            weight: 0.0,
        };
        assert_eq!(block_weights(&below, 2, 4), vec![1.0, 1.0, 1.0, 0.0]);
        let uniform = RoutingConfig {
            scheme: RoutingScheme::WeightedOthers,
            weight: 1.0,
            ..below
        };
        for a in 0..4 {
            assert_eq!(block_weights(&uniform, a, 4), vec![1.0; 4]);
        }
    }
}
