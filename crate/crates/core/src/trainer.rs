//! Inner BPR training and the bi-level loop around it.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    ln_sigmoid, AdamConfig, AdamState, BackboneKind, EmbeddingModel, Gradients, NormalizedAdjacency, Triple,
};
use crate::dataset::{DataSplit, GroupMap, InteractionTable};
use crate::error::{Error, Result};
use crate::fairctl::{
    check_groups_present, gbce_losses, group_gradients, momentum_update, recall_disp_loss, GbceSampling, MomentumBank,
};
use crate::metrics::{recall_at_k, topk_recommend};
use crate::samplers::{fairstatic_distribution, GroupDistribution, NegativeSampler, SamplerConfig, Strategy, DEFAULT_FLOOR};

/// Settings of the outer (group distribution) optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterConfig {
    /// Momentum coefficient.
    pub gamma: f64,
    /// Outer learning rate.
    pub alpha: f64,
    pub floor: f64,
    /// When false the distribution stays at its initialization even for
    /// FairNeg.
    pub dynamic: bool,
    pub gbce_cap: usize,
    pub gbce_subsample: usize,
}

impl Default for OuterConfig {
    fn default() -> Self {
        OuterConfig {
            gamma: 0.1,
            alpha: 0.1,
            floor: DEFAULT_FLOOR,
            dynamic: true,
            gbce_cap: 500_000,
            gbce_subsample: 200_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub backbone: BackboneKind,
    pub dim: usize,
    pub layers: usize,
    pub l2: f64,
    pub adam: AdamConfig,
    pub epochs_max: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub eval_k: usize,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub outer: OuterConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            backbone: BackboneKind::Mf,
            dim: 64,
            layers: 3,
            l2: 0.01,
            adam: AdamConfig::for_backbone(BackboneKind::Mf),
            epochs_max: 100,
            batch_size: 1024,
            patience: 10,
            eval_k: 20,
            seed: 2023,
            sampler: SamplerConfig::default(),
            outer: OuterConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_max == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config("epochs_max, batch_size and patience must be at least 1".into()));
        }
        if self.dim == 0 || self.eval_k == 0 {
            return Err(Error::Config("dim and eval_k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.outer.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1], got {}", self.outer.gamma)));
        }
        if !(self.outer.alpha >= 0.0 && self.outer.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.outer.alpha)));
        }
        if !(self.outer.floor > 0.0 && self.outer.floor < 1.0) {
            return Err(Error::Config(format!("floor must lie in (0, 1), got {}", self.outer.floor)));
        }
        if !(self.adam.lr > 0.0) || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config("invalid Adam settings".into()));
        }
        if self.l2 < 0.0 {
            return Err(Error::Config("l2 must be non-negative".into()));
        }
        self.sampler.validate()
    }

    /// Whether the outer loop updates the group distribution.
    pub fn updates_distribution(&self) -> bool {
        self.sampler.strategy == Strategy::FairNeg && self.outer.dynamic
    }
}

/// Per-group gradient-norm totals of one epoch, split by item role.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GradNormStats {
    pub pos_sum: Vec<f64>,
    pub pos_count: Vec<usize>,
    pub neg_sum: Vec<f64>,
    pub neg_count: Vec<usize>,
}

impl GradNormStats {
    pub fn new(groups: usize) -> Self {
        GradNormStats {
            pos_sum: vec![0.0; groups],
            pos_count: vec![0; groups],
            neg_sum: vec![0.0; groups],
            neg_count: vec![0; groups],
        }
    }

    fn mean(sum: &[f64], count: &[usize]) -> Vec<f64> {
        sum.iter()
            .zip(count)
            .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect()
    }

    /// Average positive-role gradient norm per group.
    pub fn pos_mean(&self) -> Vec<f64> {
        Self::mean(&self.pos_sum, &self.pos_count)
    }

    pub fn neg_mean(&self) -> Vec<f64> {
        Self::mean(&self.neg_sum, &self.neg_count)
    }
}

/// What one pass over the train positives produced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochStats {
    pub triples: usize,
    pub bpr_loss: f64,
    pub reg_loss: f64,
    pub grad_norms: GradNormStats,
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub bpr_loss: f64,
    pub reg_loss: f64,
    pub validation_recall: f64,
    pub gbce: Vec<f64>,
    pub recall_disp_loss: f64,
    /// Distribution the epoch sampled with.
    pub p: Vec<f64>,
    /// Momentum velocity after the epoch's outer update.
    pub v: Vec<f64>,
    pub grad_norms: GradNormStats,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_model: EmbeddingModel,
    pub best_epoch: usize,
    pub best_validation_recall: f64,
    pub logs: Vec<EpochLog>,
    pub final_distribution: GroupDistribution,
}

/// Mean `-ln s(y_ui - y_uj)` over a batch, without regularization.
pub fn bpr_loss(model: &EmbeddingModel, triples: &[Triple]) -> Result<f64> {
    if triples.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let emb = model.embeddings();
    let total: f64 = triples
        .iter()
        .map(|t| -ln_sigmoid(emb.score(t.user, t.pos) - emb.score(t.user, t.neg)))
        .sum();
    Ok(total / triples.len() as f64)
}

/// SplitMix64 finalizer over a combination of inputs.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One shuffled pass over the train positives with one sampled negative
/// each, updating the model per mini-batch.
///
/// Negatives for a batch are drawn in parallel, each from its own RNG
/// derived from `(seed, epoch, position)`, so results do not depend on the
/// thread count. MF samplers score with the parameters at batch start;
/// LightGCN samplers use a propagation snapshot taken at epoch start.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &mut EmbeddingModel,
    adam: &mut AdamState,
    train: &InteractionTable,
    groups: &GroupMap,
    sampler: &NegativeSampler<'_>,
    p: &GroupDistribution,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<EpochStats> {
    let mut stats = EpochStats {
        grad_norms: GradNormStats::new(groups.num_groups()),
        ..Default::default()
    };
    if train.is_empty() {
        return Ok(stats);
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64, u64::MAX)));

    let snapshot = match model.kind() {
        BackboneKind::LightGcn => Some(model.embeddings().into_owned()),
        BackboneKind::Mf => None,
    };
    let mut grads = Gradients::zeros(model.num_users(), model.num_items(), model.dim());
    let interactions = train.interactions();

    for (b, batch) in order.chunks(batch_size).enumerate() {
        grads.fill_zero();
        {
            let emb = model.embeddings();
            let sample_emb = snapshot.as_ref().unwrap_or(&emb);
            let offset = b * batch_size;
            let negatives: Vec<usize> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &idx)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64, (offset + k) as u64));
                    sampler.sample(interactions[idx].user, sample_emb, p, &mut rng)
                })
                .collect::<Result<_>>()?;
            let triples: Vec<Triple> = batch
                .iter()
                .zip(&negatives)
                .map(|(&idx, &neg)| Triple {
                    user: interactions[idx].user,
                    pos: interactions[idx].item,
                    neg,
                })
                .collect();
            let norms = &mut stats.grad_norms;
            let loss = model.accumulate_gradients(&emb, &triples, &mut grads, |t, n| {
                let gp = groups.group_of(t.pos);
                let gn = groups.group_of(t.neg);
                norms.pos_sum[gp] += n.pos;
                norms.pos_count[gp] += 1;
                norms.neg_sum[gn] += n.neg;
                norms.neg_count[gn] += 1;
            });
            stats.bpr_loss += loss.bpr;
            stats.reg_loss += loss.reg;
            stats.triples += triples.len();
        }
        adam.step(model, &grads)?;
    }
    stats.bpr_loss /= stats.triples as f64;
    stats.reg_loss /= stats.triples as f64;
    Ok(stats)
}

/// Builds a freshly initialized model for `config` over the split's train
/// graph.
pub fn init_model(config: &TrainConfig, train: &InteractionTable) -> Result<EmbeddingModel> {
    let graph = (config.backbone == BackboneKind::LightGcn).then(|| NormalizedAdjacency::from_table(train));
    EmbeddingModel::init_xavier(
        config.backbone,
        train.num_users(),
        train.num_items(),
        config.dim,
        config.seed,
        config.l2,
        config.layers,
        graph,
    )
}

/// Validation Recall@k with train positives masked.
pub fn validation_recall(model: &EmbeddingModel, split: &DataSplit, k: usize) -> Result<f64> {
    let emb = model.embeddings();
    let lists = topk_recommend(&emb, &[&split.train], &split.validation, k)?;
    Ok(recall_at_k(&lists, &split.validation, k))
}

/// Bi-level training: epochs of BPR updates under the current group
/// distribution, each followed by a momentum update of that distribution
/// from the per-group G-BCE losses. Stops after `patience` epochs without
/// a validation Recall@k improvement and returns the best epoch's model.
pub fn bilevel_train(config: &TrainConfig, split: &DataSplit, groups: &GroupMap) -> Result<TrainOutcome> {
    config.validate()?;
    let train = &split.train;
    if groups.num_items() != train.num_items() {
        return Err(Error::Data("group map does not cover the item catalog".into()));
    }
    check_groups_present(train, groups)?;

    let mut model = init_model(config, train)?;
    let mut adam = AdamState::new(config.adam, &model);
    let mut p = fairstatic_distribution(train, groups, config.outer.floor)?;
    let mut bank = MomentumBank::new(groups.num_groups(), config.outer.gamma, config.outer.alpha);
    let sampler = NegativeSampler::new(config.sampler.clone(), train, groups)?;
    let gbce_sampling = GbceSampling {
        cap: config.outer.gbce_cap,
        subsample: config.outer.gbce_subsample,
        seed: config.seed,
    };

    let mut logs = Vec::new();
    let mut best: Option<(f64, usize, EmbeddingModel)> = None;
    let mut since_best = 0;
    for epoch in 1..=config.epochs_max {
        let stats = train_epoch(
            &mut model,
            &mut adam,
            train,
            groups,
            &sampler,
            &p,
            config.batch_size,
            config.seed,
            epoch,
        )?;
        let losses = gbce_losses(&model.embeddings(), train, groups, &gbce_sampling, epoch)?;
        let disp = recall_disp_loss(&losses);
        let val = validation_recall(&model, split, config.eval_k)?;
        let used = p.probs().to_vec();
        if config.updates_distribution() && groups.num_groups() >= 2 {
            p = momentum_update(&mut bank, &p, &group_gradients(&losses))?;
        }
        log::info!(
            "epoch {epoch}: bpr {:.5} val R@{} {:.5} gbce {:?} p {:?}",
            stats.bpr_loss,
            config.eval_k,
            val,
            losses.losses,
            used
        );
        logs.push(EpochLog {
            epoch,
            bpr_loss: stats.bpr_loss,
            reg_loss: stats.reg_loss,
            validation_recall: val,
            gbce: losses.losses,
            recall_disp_loss: disp,
            p: used,
            v: bank.velocity().to_vec(),
            grad_norms: stats.grad_norms,
        });

        let improved = best.as_ref().is_none_or(|(b, _, _)| val > *b);
        if improved {
            best = Some((val, epoch, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let (best_validation_recall, best_epoch, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best_model,
        best_epoch,
        best_validation_recall,
        logs,
        final_distribution: p,
    })
}

/// The FairNeg base config with its ablations: `-Dynamic` (frozen
/// distribution), `-Imp` (no importance term), `-Momentum` (no momentum),
/// and the UNS baseline.
pub fn ablation_variants(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut fairneg = base.clone();
    fairneg.sampler.strategy = Strategy::FairNeg;

    let mut no_dynamic = fairneg.clone();
    no_dynamic.outer.dynamic = false;
    let mut no_imp = fairneg.clone();
    no_imp.sampler.beta = 1.0;
    let mut no_momentum = fairneg.clone();
    no_momentum.outer.gamma = 0.0;
    let mut uns = fairneg.clone();
    uns.sampler.strategy = Strategy::Uns;

    vec![
        ("fairneg".into(), fairneg),
        ("-dynamic".into(), no_dynamic),
        ("-imp".into(), no_imp),
        ("-momentum".into(), no_momentum),
        ("uns".into(), uns),
    ]
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn join_usize(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Renders the epoch log as CSV with per-group columns.
pub fn epoch_log_csv(logs: &[EpochLog], labels: &[String]) -> String {
    let mut header = vec!["epoch".to_string(), "bpr_loss".into(), "reg_loss".into(), "validation_recall".into(), "recall_disp_loss".into()];
    for prefix in ["gbce", "p", "v", "gradnorm_pos", "gradnorm_neg", "count_pos", "count_neg"] {
        header.extend(labels.iter().map(|l| format!("{prefix}[{l}]")));
    }
    let mut out = header.join(",");
    out.push('\n');
    for log in logs {
        let g = &log.grad_norms;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            log.epoch,
            log.bpr_loss,
            log.reg_loss,
            log.validation_recall,
            log.recall_disp_loss,
            join(&log.gbce),
            join(&log.p),
            join(&log.v),
            join(&g.pos_mean()),
            join(&g.neg_mean()),
            join_usize(&g.pos_count),
            join_usize(&g.neg_count),
        ));
    }
    out
}

pub fn write_epoch_log(path: &Path, logs: &[EpochLog], labels: &[String]) -> Result<()> {
    fs::write(path, epoch_log_csv(logs, labels)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{split, Interaction};
    use crate::synth::{generate, SynthConfig};

    fn toy() -> (DataSplit, GroupMap) {
        let data = generate(&SynthConfig {
            users: 40,
            items: 30,
            density: 0.15,
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        (split(&data.table, 1).unwrap(), data.groups)
    }

    fn quick(strategy: Strategy) -> TrainConfig {
        TrainConfig {
            dim: 8,
            epochs_max: 4,
            batch_size: 64,
            patience: 10,
            eval_k: 10,
            sampler: SamplerConfig { strategy, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn bpr_loss_values() {
        let m = EmbeddingModel::from_parts(BackboneKind::Mf, ndarray::array![[1.0]], ndarray::array![[0.0], [0.0], [3f64.ln()]], 0.0, 0, None).unwrap();
        let tie = [Triple { user: 0, pos: 0, neg: 1 }];
        assert!((bpr_loss(&m, &tie).unwrap() - 2f64.ln()).abs() < 1e-15);
        let gap = [Triple { user: 0, pos: 2, neg: 0 }, Triple { user: 0, pos: 2, neg: 1 }];
        assert!((bpr_loss(&m, &gap).unwrap() + 0.75f64.ln()).abs() < 1e-15);
        assert!(bpr_loss(&m, &[]).is_err());
    }

    #[test]
    fn empty_epoch_is_noop() {
        let train = InteractionTable::new(2, 3, []).unwrap();
        let groups = GroupMap::new(vec![0, 1, 1], vec!["a".into(), "b".into()]).unwrap();
        let cfg = quick(Strategy::Uns);
        let mut model = init_model(&cfg, &train).unwrap();
        let before = model.clone();
        let mut adam = AdamState::new(cfg.adam, &model);
        let sampler = NegativeSampler::new(cfg.sampler.clone(), &train, &groups).unwrap();
        let p = GroupDistribution::uniform(2, DEFAULT_FLOOR);
        let stats = train_epoch(&mut model, &mut adam, &train, &groups, &sampler, &p, 8, 0, 1).unwrap();
        assert_eq!(stats.triples, 0);
        assert_eq!(model.user_factors(), before.user_factors());
    }

    #[test]
    fn training_descends_on_toy_data() {
        // two users with disjoint tastes
        let pairs = [(0, 0), (0, 1), (0, 2), (0, 3), (0, 4), (1, 5), (1, 6), (1, 7), (1, 8), (1, 9)];
        let train = InteractionTable::new(2, 14, pairs.map(|(user, item)| Interaction { user, item })).unwrap();
        let groups = GroupMap::new((0..14).map(|i| i % 2).collect(), vec!["a".into(), "b".into()]).unwrap();
        let all: Vec<Triple> = train
            .interactions()
            .iter()
            .flat_map(|it| train.negatives(it.user).map(move |neg| Triple { user: it.user, pos: it.item, neg }))
            .collect();
        let cfg = TrainConfig { dim: 8, l2: 0.0, ..quick(Strategy::Uns) };
        let mut model = init_model(&cfg, &train).unwrap();
        let before = bpr_loss(&model, &all).unwrap();
        let mut adam = AdamState::new(AdamConfig { lr: 0.05, ..cfg.adam }, &model);
        let sampler = NegativeSampler::new(cfg.sampler.clone(), &train, &groups).unwrap();
        let p = GroupDistribution::uniform(2, DEFAULT_FLOOR);
        for epoch in 1..=20 {
            let stats = train_epoch(&mut model, &mut adam, &train, &groups, &sampler, &p, 2, 3, epoch).unwrap();
            assert_eq!(stats.triples, 10);
        }
        let after = bpr_loss(&model, &all).unwrap();
        assert!(after < 0.5 * before, "{before} -> {after}");
    }

    #[test]
    fn training_is_deterministic() {
        let (s, g) = toy();
        let cfg = quick(Strategy::FairNeg);
        let a = bilevel_train(&cfg, &s, &g).unwrap();
        let b = bilevel_train(&cfg, &s, &g).unwrap();
        assert_eq!(a.logs, b.logs);
        assert_eq!(a.best_model.user_factors(), b.best_model.user_factors());
    }

    #[test]
    fn baselines_freeze_distribution() {
        let (s, g) = toy();
        let init = fairstatic_distribution(&s.train, &g, DEFAULT_FLOOR).unwrap();
        for strategy in [Strategy::Uns, Strategy::Nncf, Strategy::Dns, Strategy::FairStatic] {
            let out = bilevel_train(&quick(strategy), &s, &g).unwrap();
            for log in &out.logs {
                assert_eq!(log.p, init.probs());
                assert_eq!(log.gbce.len(), 2);
            }
        }
    }

    #[test]
    fn fairneg_moves_distribution() {
        let (s, g) = toy();
        let out = bilevel_train(&quick(Strategy::FairNeg), &s, &g).unwrap();
        assert_ne!(out.logs[0].p, out.logs.last().unwrap().p);
    }

    #[test]
    fn frozen_fairneg_with_beta_one_equals_fairstatic() {
        let (s, g) = toy();
        let mut frozen = quick(Strategy::FairNeg);
        frozen.outer.dynamic = false;
        frozen.sampler.beta = 1.0;
        let a = bilevel_train(&frozen, &s, &g).unwrap();
        let b = bilevel_train(&quick(Strategy::FairStatic), &s, &g).unwrap();
        assert_eq!(a.logs, b.logs);
    }

    #[test]
    fn gradient_role_counts_match() {
        let (s, g) = toy();
        let out = bilevel_train(&quick(Strategy::FairNeg), &s, &g).unwrap();
        for log in &out.logs {
            let pos: usize = log.grad_norms.pos_count.iter().sum();
            let neg: usize = log.grad_norms.neg_count.iter().sum();
            assert_eq!(pos, neg);
            assert_eq!(pos, s.train.len());
        }
    }

    #[test]
    fn early_stopping_bounds() {
        let (s, g) = toy();
        let cfg = TrainConfig { epochs_max: 30, patience: 2, ..quick(Strategy::Uns) };
        let out = bilevel_train(&cfg, &s, &g).unwrap();
        assert!(out.logs.len() <= 30);
        assert!(out.logs.len() - out.best_epoch <= 2);
    }

    #[test]
    fn ablation_set() {
        let base = quick(Strategy::FairNeg);
        let v = ablation_variants(&base);
        assert_eq!(v.len(), 5);
        let momentum = &v.iter().find(|(n, _)| n == "-momentum").unwrap().1;
        let mut expect = base.clone();
        expect.outer.gamma = 0.0;
        assert_eq!(momentum, &expect);
        assert_eq!(v.iter().find(|(n, _)| n == "-imp").unwrap().1.sampler.beta, 1.0);
        assert!(!v.iter().find(|(n, _)| n == "-dynamic").unwrap().1.outer.dynamic);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = TrainConfig::default();
        c.sampler.beta = 1.5;
        assert!(c.validate().is_err());
        let c = TrainConfig { patience: 0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn absent_group_is_setup_error() {
        let train = InteractionTable::new(1, 2, [Interaction { user: 0, item: 0 }]).unwrap();
        let s = DataSplit {
            validation: InteractionTable::new(1, 2, []).unwrap(),
            test: InteractionTable::new(1, 2, []).unwrap(),
            train,
            seed: 0,
        };
        let g = GroupMap::new(vec![0, 1], vec!["a".into(), "b".into()]).unwrap();
        assert!(bilevel_train(&quick(Strategy::Uns), &s, &g).is_err());
    }

    #[test]
    fn csv_has_one_row_per_epoch() {
        let (s, g) = toy();
        let out = bilevel_train(&quick(Strategy::FairNeg), &s, &g).unwrap();
        let csv = epoch_log_csv(&out.logs, g.labels());
        assert_eq!(csv.lines().count(), out.logs.len() + 1);
        let cols = csv.lines().next().unwrap().split(',').count();
        assert!(csv.lines().all(|l| l.split(',').count() == cols));
    }
}
