//! Negative samplers.
//!
//! Every sampler draws one item from a user's train-unobserved set. The
//! distribution-based strategies (NNCF, FairStatic, FairNeg) build an
//! explicit probability vector over the candidates in ascending item order
//! and draw from it by inverse CDF, so a seeded RNG reproduces the draw.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Embeddings;
use crate::dataset::{GroupMap, InteractionTable};
use crate::error::{Error, Result};

/// Default lower bound on any group's sampling probability.
pub const DEFAULT_FLOOR: f64 = 1e-3;

/// Group-level negative sampling probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDistribution {
    probs: Vec<f64>,
    floor: f64,
}

impl GroupDistribution {
    /// Validates a simplex whose entries are all at least `floor`.
    pub fn new(probs: Vec<f64>, floor: f64) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Data("empty group distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < floor) {
            return Err(Error::Data(format!("group probabilities {probs:?} below floor {floor}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Data(format!("group probabilities sum to {sum}")));
        }
        Ok(GroupDistribution { probs, floor })
    }

    pub fn uniform(groups: usize, floor: f64) -> Self {
        GroupDistribution {
            probs: vec![1.0 / groups as f64; groups],
            floor,
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn num_groups(&self) -> usize {
        self.probs.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Uns,
    Nncf,
    Dns,
    FairStatic,
    FairNeg,
}

impl Strategy {
    /// Strategies whose group distribution stays at its initial value.
    pub fn is_baseline(self) -> bool {
        self != Strategy::FairNeg
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Uns => "uns",
            Strategy::Nncf => "nncf",
            Strategy::Dns => "dns",
            Strategy::FairStatic => "fairstatic",
            Strategy::FairNeg => "fairneg",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uns" => Ok(Strategy::Uns),
            "nncf" => Ok(Strategy::Nncf),
            "dns" => Ok(Strategy::Dns),
            "fairstatic" => Ok(Strategy::FairStatic),
            "fairneg" => Ok(Strategy::FairNeg),
            other => Err(Error::Config(format!("unknown sampling strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    /// Mixup weight on the fairness-aware distribution.
    pub beta: f64,
    /// Softmax temperature of the importance-aware distribution.
    pub tau: f64,
    pub dns_pool: usize,
    pub popularity_exponent: f64,
    /// When set, FairNeg mixes over a uniform pool of this many distinct
    /// candidates instead of the whole unobserved set (an approximation for
    /// large catalogs).
    pub candidate_pool: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            strategy: Strategy::FairNeg,
            beta: 0.5,
            tau: 1.0,
            dns_pool: 16,
            popularity_exponent: 1.0,
            candidate_pool: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.dns_pool == 0 {
            return Err(Error::Config("dns_pool must be at least 1".into()));
        }
        if !self.popularity_exponent.is_finite() {
            return Err(Error::Config("popularity_exponent must be finite".into()));
        }
        if self.candidate_pool == Some(0) {
            return Err(Error::Config("candidate_pool must be at least 1".into()));
        }
        Ok(())
    }
}

/// A probability vector over a user's candidate items (ascending order).
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateDistribution {
    pub items: Vec<usize>,
    pub probs: Vec<f64>,
}

impl CandidateDistribution {
    pub fn prob_of(&self, item: usize) -> Option<f64> {
        self.items.binary_search(&item).ok().map(|k| self.probs[k])
    }

    /// Inverse-CDF draw.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.items[inverse_cdf(&self.probs, rng)]
    }
}

/// Index drawn from unnormalized non-negative `weights` by inverse CDF.
pub fn inverse_cdf<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = k;
        if target < acc {
            return k;
        }
    }
    // target landed on the rounding slack at the top
    last
}

fn ensure_candidates(user: usize, table: &InteractionTable) -> Result<usize> {
    match table.num_negatives(user) {
        0 => Err(Error::NoCandidates(user)),
        n => Ok(n),
    }
}

/// Uniform draw from the user's unobserved items.
pub fn sample_uns<R: Rng + ?Sized>(user: usize, table: &InteractionTable, rng: &mut R) -> Result<usize> {
    let n = ensure_candidates(user, table)?;
    let rank = rng.random_range(0..n);
    Ok(table.nth_negative(user, rank).expect("rank within candidate count"))
}

/// Popularity weights `max(count, 1)^exponent` per item, from train counts.
#[derive(Debug, Clone)]
pub struct PopularityWeights(Vec<f64>);

impl PopularityWeights {
    pub fn new(train: &InteractionTable, exponent: f64) -> Self {
        PopularityWeights(
            train
                .item_counts()
                .into_iter()
                .map(|c| (c.max(1) as f64).powf(exponent))
                .collect(),
        )
    }

    pub fn from_weights(weights: Vec<f64>) -> Self {
        PopularityWeights(weights)
    }

    pub fn weight(&self, item: usize) -> f64 {
        self.0[item]
    }
}

/// Popularity-proportional distribution over the user's candidates.
pub fn popularity_prob(user: usize, table: &InteractionTable, weights: &PopularityWeights) -> Result<CandidateDistribution> {
    ensure_candidates(user, table)?;
    let items: Vec<usize> = table.negatives(user).collect();
    let raw: Vec<f64> = items.iter().map(|&i| weights.weight(i)).collect();
    let total: f64 = raw.iter().sum();
    let probs = raw.into_iter().map(|w| w / total).collect();
    Ok(CandidateDistribution { items, probs })
}

pub fn sample_popularity<R: Rng + ?Sized>(
    user: usize,
    table: &InteractionTable,
    weights: &PopularityWeights,
    rng: &mut R,
) -> Result<usize> {
    ensure_candidates(user, table)?;
    let items: Vec<usize> = table.negatives(user).collect();
    let raw: Vec<f64> = items.iter().map(|&i| weights.weight(i)).collect();
    Ok(items[inverse_cdf(&raw, rng)])
}

/// Draws `pool_size` uniform candidates with replacement and keeps the
/// highest-scored one (smallest item index on ties).
pub fn sample_dns<R: Rng + ?Sized>(
    user: usize,
    emb: &Embeddings<'_>,
    table: &InteractionTable,
    rng: &mut R,
    pool_size: usize,
) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for _ in 0..pool_size.max(1) {
        let item = sample_uns(user, table, rng)?;
        let score = emb.score(user, item);
        best = match best {
            Some((b, s)) if s > score || (s == score && b <= item) => Some((b, s)),
            _ => Some((item, score)),
        };
    }
    Ok(best.expect("pool is non-empty").0)
}

fn fair_over(items: &[usize], groups: &GroupMap, p: &GroupDistribution) -> Vec<f64> {
    let mut counts = vec![0usize; groups.num_groups()];
    for &i in items {
        counts[groups.group_of(i)] += 1;
    }
    // Groups without candidates hand their mass to the others in
    // proportion to their probabilities.
    let live_mass: f64 = p
        .probs()
        .iter()
        .zip(&counts)
        .filter(|(_, &c)| c > 0)
        .map(|(p, _)| p)
        .sum();
    items
        .iter()
        .map(|&i| {
            let g = groups.group_of(i);
            p.probs()[g] / live_mass / counts[g] as f64
        })
        .collect()
}

/// Fairness-aware distribution: a group's probability split evenly over the
/// user's candidates in that group.
pub fn fair_prob(
    user: usize,
    groups: &GroupMap,
    table: &InteractionTable,
    p: &GroupDistribution,
) -> Result<CandidateDistribution> {
    ensure_candidates(user, table)?;
    let items: Vec<usize> = table.negatives(user).collect();
    let probs = fair_over(&items, groups, p);
    Ok(CandidateDistribution { items, probs })
}

fn softmax_over(user: usize, items: &[usize], emb: &Embeddings<'_>, tau: f64) -> Vec<f64> {
    let urow = emb.users.row(user);
    let logits: Vec<f64> = items.iter().map(|&i| urow.dot(&emb.items.row(i)) / tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Importance-aware distribution: softmax of raw scores over temperature.
pub fn importance_prob(
    user: usize,
    emb: &Embeddings<'_>,
    table: &InteractionTable,
    tau: f64,
) -> Result<CandidateDistribution> {
    ensure_candidates(user, table)?;
    let items: Vec<usize> = table.negatives(user).collect();
    let probs = softmax_over(user, &items, emb, tau);
    Ok(CandidateDistribution { items, probs })
}

/// `beta * fair + (1 - beta) * imp` over a shared candidate list.
pub fn mixup_prob(
    fair: &CandidateDistribution,
    imp: &CandidateDistribution,
    beta: f64,
) -> Result<CandidateDistribution> {
    if fair.items != imp.items || fair.probs.len() != imp.probs.len() {
        return Err(Error::CandidateMismatch);
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("beta must lie in [0, 1], got {beta}")));
    }
    let probs = fair
        .probs
        .iter()
        .zip(&imp.probs)
        .map(|(f, i)| beta * f + (1.0 - beta) * i)
        .collect();
    Ok(CandidateDistribution {
        items: fair.items.clone(),
        probs,
    })
}

/// The mixup distribution FairNeg samples from, over `items`.
fn mixup_over(
    user: usize,
    items: Vec<usize>,
    emb: &Embeddings<'_>,
    groups: &GroupMap,
    p: &GroupDistribution,
    beta: f64,
    tau: f64,
) -> CandidateDistribution {
    let probs = if beta >= 1.0 {
        fair_over(&items, groups, p)
    } else if beta <= 0.0 {
        softmax_over(user, &items, emb, tau)
    } else {
        let fair = fair_over(&items, groups, p);
        let imp = softmax_over(user, &items, emb, tau);
        fair.iter().zip(&imp).map(|(f, i)| beta * f + (1.0 - beta) * i).collect()
    };
    CandidateDistribution { items, probs }
}

/// Candidate list for FairNeg: all unobserved items, or a sorted uniform
/// pool of distinct ones when `pool` is set.
fn fairneg_candidates<R: Rng + ?Sized>(
    user: usize,
    table: &InteractionTable,
    pool: Option<usize>,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let n = ensure_candidates(user, table)?;
    match pool {
        Some(size) if size < n => {
            let mut ranks = rand::seq::index::sample(rng, n, size).into_vec();
            ranks.sort_unstable();
            Ok(ranks
                .into_iter()
                .map(|r| table.nth_negative(user, r).expect("rank in range"))
                .collect())
        }
        _ => Ok(table.negatives(user).collect()),
    }
}

/// One FairNeg draw from the mixup of fairness- and importance-aware
/// distributions.
pub fn sample_fairneg<R: Rng + ?Sized>(
    user: usize,
    emb: &Embeddings<'_>,
    groups: &GroupMap,
    table: &InteractionTable,
    p: &GroupDistribution,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<usize> {
    let items = fairneg_candidates(user, table, config.candidate_pool, rng)?;
    let dist = mixup_over(user, items, emb, groups, p, config.beta, config.tau);
    Ok(dist.draw(rng))
}

/// The distribution [`sample_fairneg`] draws from when no candidate pool is
/// configured.
pub fn fairneg_prob(
    user: usize,
    emb: &Embeddings<'_>,
    groups: &GroupMap,
    table: &InteractionTable,
    p: &GroupDistribution,
    config: &SamplerConfig,
) -> Result<CandidateDistribution> {
    ensure_candidates(user, table)?;
    let items = table.negatives(user).collect();
    Ok(mixup_over(user, items, emb, groups, p, config.beta, config.tau))
}

/// FairStatic draw: fairness-aware distribution under a frozen `p`.
pub fn sample_fairstatic<R: Rng + ?Sized>(
    user: usize,
    groups: &GroupMap,
    table: &InteractionTable,
    p: &GroupDistribution,
    rng: &mut R,
) -> Result<usize> {
    ensure_candidates(user, table)?;
    let items: Vec<usize> = table.negatives(user).collect();
    let probs = fair_over(&items, groups, p);
    Ok(CandidateDistribution { items, probs }.draw(rng))
}

/// Each group's share of the train interactions. Shares below `floor` are
/// lifted by clamp-and-renormalize.
pub fn fairstatic_distribution(train: &InteractionTable, groups: &GroupMap, floor: f64) -> Result<GroupDistribution> {
    if train.is_empty() {
        return Err(Error::Data("no train interactions".into()));
    }
    let mut counts = vec![0usize; groups.num_groups()];
    for it in train.interactions() {
        counts[groups.group_of(it.item)] += 1;
    }
    let total = train.len() as f64;
    let probs: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
    if probs.iter().any(|&p| p < floor) {
        return Ok(crate::fairctl::project_simplex(&probs, floor));
    }
    let sum: f64 = probs.iter().sum();
    GroupDistribution::new(probs.iter().map(|p| p / sum).collect(), floor)
}

/// A configured sampler bound to its train data.
#[derive(Debug, Clone)]
pub struct NegativeSampler<'a> {
    config: SamplerConfig,
    train: &'a InteractionTable,
    groups: &'a GroupMap,
    popularity: Option<PopularityWeights>,
}

impl<'a> NegativeSampler<'a> {
    pub fn new(config: SamplerConfig, train: &'a InteractionTable, groups: &'a GroupMap) -> Result<Self> {
        config.validate()?;
        let popularity = (config.strategy == Strategy::Nncf)
            .then(|| PopularityWeights::new(train, config.popularity_exponent));
        Ok(NegativeSampler {
            config,
            train,
            groups,
            popularity,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    /// Draws one negative for `user`. `emb` is only read by DNS and FairNeg.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        user: usize,
        emb: &Embeddings<'_>,
        p: &GroupDistribution,
        rng: &mut R,
    ) -> Result<usize> {
        match self.config.strategy {
            Strategy::Uns => sample_uns(user, self.train, rng),
            Strategy::Nncf => sample_popularity(user, self.train, self.popularity.as_ref().expect("built for nncf"), rng),
            Strategy::Dns => sample_dns(user, emb, self.train, rng, self.config.dns_pool),
            Strategy::FairStatic => sample_fairstatic(user, self.groups, self.train, p, rng),
            Strategy::FairNeg => sample_fairneg(user, emb, self.groups, self.train, p, &self.config, rng),
        }
    }
}
