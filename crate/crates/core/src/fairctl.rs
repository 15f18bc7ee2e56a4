//! Outer-loop control of the group sampling distribution.
//!
//! After each training epoch the per-group G-BCE loss over observed train
//! positives stands in for each group's recall. Groups above the mean loss
//! get a positive gradient, and the momentum step `p <- p - v` lowers their
//! negative-sampling probability.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{ln_sigmoid, Embeddings};
use crate::dataset::{GroupMap, InteractionTable};
use crate::error::{Error, Result};
use crate::samplers::GroupDistribution;

/// Per-group G-BCE losses at one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupLossVector {
    pub losses: Vec<f64>,
    pub epoch: usize,
}

/// Bounds on how many positives enter a G-BCE evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbceSampling {
    /// Above this many train positives, a uniform subsample is used.
    pub cap: usize,
    pub subsample: usize,
    pub seed: u64,
}

impl Default for GbceSampling {
    fn default() -> Self {
        GbceSampling {
            cap: 500_000,
            subsample: 200_000,
            seed: 0,
        }
    }
}

/// Checks that every group owns at least one train positive.
pub fn check_groups_present(train: &InteractionTable, groups: &GroupMap) -> Result<()> {
    let mut seen = vec![false; groups.num_groups()];
    for it in train.interactions() {
        seen[groups.group_of(it.item)] = true;
    }
    match seen.iter().position(|s| !s) {
        Some(g) => Err(Error::Data(format!(
            "group {:?} has no train positives",
            groups.labels()[g]
        ))),
        None => Ok(()),
    }
}

/// `L_a = -(1/|Y_a|) * sum ln s(y_uv)` over the train positives of each
/// group.
pub fn gbce_losses(
    emb: &Embeddings<'_>,
    train: &InteractionTable,
    groups: &GroupMap,
    sampling: &GbceSampling,
    epoch: usize,
) -> Result<GroupLossVector> {
    check_groups_present(train, groups)?;
    let all = train.interactions();
    let picked: Vec<usize> = if all.len() > sampling.cap {
        let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut idx = rand::seq::index::sample(&mut rng, all.len(), sampling.subsample.min(all.len())).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..all.len()).collect()
    };
    let terms: Vec<f64> = picked
        .par_iter()
        .map(|&k| ln_sigmoid(emb.score(all[k].user, all[k].item)))
        .collect();
    let mut sums = vec![0.0; groups.num_groups()];
    let mut counts = vec![0usize; groups.num_groups()];
    for (&k, t) in picked.iter().zip(&terms) {
        let g = groups.group_of(all[k].item);
        sums[g] += t;
        counts[g] += 1;
    }
    let losses = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { 0.0 } else { -s / c as f64 })
        .collect();
    Ok(GroupLossVector { losses, epoch })
}

/// Deviation of each group's loss from the mean loss.
pub fn group_gradients(losses: &GroupLossVector) -> Vec<f64> {
    let mean = mean(&losses.losses);
    losses.losses.iter().map(|l| l - mean).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sum of absolute deviations of the group losses from their mean; the
/// outer objective.
pub fn recall_disp_loss(losses: &GroupLossVector) -> f64 {
    let mean = mean(&losses.losses);
    losses.losses.iter().map(|l| (l - mean).abs()).sum()
}

/// Momentum state of the outer optimizer: one velocity per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumBank {
    velocity: Vec<f64>,
    pub gamma: f64,
    pub alpha: f64,
}

impl MomentumBank {
    pub fn new(groups: usize, gamma: f64, alpha: f64) -> Self {
        MomentumBank {
            velocity: vec![0.0; groups],
            gamma,
            alpha,
        }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    /// `v <- gamma * v + alpha * grad`, returning the unprojected
    /// `p - v`.
    pub fn step(&mut self, p: &GroupDistribution, grads: &[f64]) -> Vec<f64> {
        assert_eq!(grads.len(), self.velocity.len());
        for (v, g) in self.velocity.iter_mut().zip(grads) {
            *v = self.gamma * *v + self.alpha * g;
        }
        p.probs().iter().zip(&self.velocity).map(|(p, v)| p - v).collect()
    }
}

/// One momentum step followed by projection back onto the floored simplex.
pub fn momentum_update(bank: &mut MomentumBank, p: &GroupDistribution, grads: &[f64]) -> Result<GroupDistribution> {
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("group gradients".into()));
    }
    let raw = bank.step(p, grads);
    Ok(project_simplex(&raw, p.floor()))
}

/// Clamps entries to at least `floor` and renormalizes to sum 1.
///
/// Renormalizing can push a clamped entry back under the floor, so entries
/// pinned at the floor are held there and only the remaining mass is
/// rescaled, repeating until no free entry falls below the floor.
pub fn project_simplex(raw: &[f64], floor: f64) -> GroupDistribution {
    let a = raw.len();
    if a as f64 * floor >= 1.0 {
        return GroupDistribution::uniform(a, floor);
    }
    let x: Vec<f64> = raw
        .iter()
        .map(|&v| if v.is_finite() { v.max(floor) } else { floor })
        .collect();
    let mut pinned = vec![false; a];
    loop {
        let free_mass = 1.0 - pinned.iter().filter(|p| **p).count() as f64 * floor;
        let free_sum: f64 = x.iter().zip(&pinned).filter(|(_, p)| !**p).map(|(v, _)| v).sum();
        let scale = free_mass / free_sum;
        let mut changed = false;
        for i in 0..a {
            if !pinned[i] && x[i] * scale < floor {
                pinned[i] = true;
                changed = true;
            }
        }
        if !changed {
            let probs = x
                .iter()
                .zip(&pinned)
                .map(|(v, p)| if *p { floor } else { v * scale })
                .collect();
            return GroupDistribution::new(probs, floor).expect("projection yields a floored simplex");
        }
    }
}
