//! Client-side gradient perturbation applied before upload.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GradientUpdate;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", deny_unknown_fields)]
pub enum DefenseKind {
    None,
    /// Per-tensor clipping to Frobenius norm `clip`, then i.i.d. N(0, σ²) noise.
    Dp { sigma: f64, clip: f64 },
    /// Keep the largest-magnitude `1 − beta` fraction of each tensor.
    Gp { beta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    #[serde(default)]
    pub noise_seed: u64,
}

impl DefenseConfig {
    pub const NONE: DefenseConfig = DefenseConfig {
        kind: DefenseKind::None,
        noise_seed: 0,
    };

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            DefenseKind::None => Ok(()),
            DefenseKind::Dp { sigma, clip } => {
                if !(sigma.is_finite() && sigma >= 0.0) {
                    return Err(Error::validation(format!("dp sigma must be >= 0, got {sigma}")));
                }
                if !(clip.is_finite() && clip > 0.0) {
                    return Err(Error::validation(format!("dp clip must be > 0, got {clip}")));
                }
                Ok(())
            }
            DefenseKind::Gp { beta } => {
                if !(0.0..1.0).contains(&beta) {
                    return Err(Error::validation(format!("gp beta must be in [0, 1), got {beta}")));
                }
                Ok(())
            }
        }
    }

    /// Short identifier used in file names and result rows.
    pub fn label(&self) -> String {
        match self.kind {
            DefenseKind::None => "none".into(),
            DefenseKind::Dp { sigma, clip } => format!("dp-sigma{sigma}-clip{clip}"),
            DefenseKind::Gp { beta } => format!("gp-beta{beta}"),
        }
    }

    /// Applies the defense to one client's upload. The noise stream is keyed
    /// by (noise_seed, round, client), so reruns are bit-identical.
    pub fn apply(&self, grad: &GradientUpdate) -> Result<GradientUpdate> {
        self.validate()?;
        match self.kind {
            DefenseKind::None => Ok(grad.clone()),
            DefenseKind::Dp { sigma, clip } => {
                let seed = rng::derive_seed(self.noise_seed, &[grad.round as u64, grad.client as u64]);
                Ok(dp_transform(grad, sigma, clip, seed))
            }
            DefenseKind::Gp { beta } => Ok(gp_transform(grad, beta)),
        }
    }
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self::NONE
    }
}

pub fn dp_transform(grad: &GradientUpdate, sigma: f64, clip: f64, seed: u64) -> GradientUpdate {
    let mut out = grad.clone();
    for (t, m) in out.per_module.values_mut().enumerate() {
        let norm = m.frobenius_norm();
        if norm > clip {
            m.scale(clip / norm);
        }
        if sigma > 0.0 {
            let mut r = rng::stream(seed, &[rng::TAG_NOISE, t as u64]);
            for v in m.as_mut_slice() {
                let z: f64 = r.sample(StandardNormal);
                *v += sigma * z;
            }
        }
    }
    out
}

/// Number of entries that survive pruning at rate `beta`: ⌈(1 − β)·count⌉.
pub fn gp_survivors(beta: f64, count: usize) -> usize {
    // guard the ceiling against representation error in 1 − β
    let keep = ((1.0 - beta) * count as f64 - 1e-9).ceil();
    (keep.max(0.0) as usize).min(count)
}

pub fn gp_transform(grad: &GradientUpdate, beta: f64) -> GradientUpdate {
    let mut out = grad.clone();
    for m in out.per_module.values_mut() {
        let data = m.as_mut_slice();
        let keep = gp_survivors(beta, data.len());
        if keep == data.len() {
            continue;
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.sort_by(|&a, &b| data[b].abs().total_cmp(&data[a].abs()).then(a.cmp(&b)));
        for &i in &order[keep..] {
            data[i] = 0.0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use std::collections::BTreeMap;

    fn update(values: Vec<f64>) -> GradientUpdate {
        let n = values.len();
        let mut per_module = BTreeMap::new();
        per_module.insert("w".to_string(), Matrix::new(1, n, values).unwrap());
        GradientUpdate {
            per_module,
            round: 3,
            client: 1,
        }
    }

    #[test]
    fn dp_without_noise_below_clip_is_identity() {
        let g = update(vec![0.1, -0.2, 0.3]);
        assert_eq!(dp_transform(&g, 0.0, 1.0, 9), g);
    }

    #[test]
    fn dp_clips_to_bound() {
        // Frobenius norm 4
        let g = update(vec![2.0, 2.0, 2.0, 2.0]);
        let out = dp_transform(&g, 0.0, 1.0, 9);
        assert!((out.frobenius_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dp_is_deterministic_per_seed() {
        let g = update(vec![1.0; 10]);
        assert_eq!(dp_transform(&g, 0.5, 1.0, 4), dp_transform(&g, 0.5, 1.0, 4));
        assert_ne!(dp_transform(&g, 0.5, 1.0, 4), dp_transform(&g, 0.5, 1.0, 5));
    }

    #[test]
    fn gp_hand_quantile() {
        let out = gp_transform(&update(vec![1.0, -4.0, 2.0, -3.0]), 0.5);
        assert_eq!(out.per_module["w"].as_slice(), &[0.0, -4.0, 0.0, -3.0]);
        let g = update(vec![1.0, -4.0, 2.0, -3.0]);
        assert_eq!(gp_transform(&g, 0.0), g);
    }

    #[test]
    fn gp_ties_break_by_index() {
        let out = gp_transform(&update(vec![1.0, -1.0, 1.0, 1.0]), 0.5);
        assert_eq!(out.per_module["w"].as_slice(), &[1.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn gp_survivor_counts() {
        assert_eq!(gp_survivors(0.7, 10), 3);
        assert_eq!(gp_survivors(0.999, 2048), 3);
        assert_eq!(gp_survivors(0.9, 10), 1);
        assert_eq!(gp_survivors(0.0, 7), 7);
        assert_eq!(gp_survivors(0.99, 50), 1);
    }

    #[test]
    fn config_validation() {
        let bad = [
            DefenseKind::Dp { sigma: -1.0, clip: 1.0 },
            DefenseKind::Dp { sigma: 1.0, clip: 0.0 },
            DefenseKind::Gp { beta: 1.0 },
            DefenseKind::Gp { beta: -0.1 },
        ];
        for kind in bad {
            assert!(DefenseConfig { kind, noise_seed: 0 }.validate().is_err());
        }
    }

    proptest::proptest! {
        #[test]
        fn gp_sparsity_is_exact(beta in 0.0f64..0.9999, len in 1usize..300, seed in 0u64..1000) {
            let mut r = rng::stream(seed, &[]);
            let g = update(Matrix::random_normal(1, len, 1.0, &mut r).into_vec());
            let out = gp_transform(&g, beta);
            let nonzero = out.per_module["w"].as_slice().iter().filter(|v| **v != 0.0).count();
            proptest::prop_assert_eq!(nonzero, gp_survivors(beta, len));
        }
    }
}
