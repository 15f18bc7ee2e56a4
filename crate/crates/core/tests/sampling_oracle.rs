mod common;

use common::*;
use fairneg::samplers::{
    fair_prob, fairneg_prob, importance_prob, mixup_prob, popularity_prob, sample_dns, GroupDistribution,
    NegativeSampler, PopularityWeights, SamplerConfig, Strategy,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DRAWS: usize = 100_000;
const TV: f64 = 0.02;

fn empirical(inst: &SamplingInstance, strategy: Strategy, user: usize, p: &GroupDistribution, seed: u64) -> Vec<f64> {
    let config = SamplerConfig { strategy, ..Default::default() };
    let sampler = NegativeSampler::new(config, &inst.train, &inst.groups).unwrap();
    let emb = inst.model.embeddings();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    frequencies(&candidates(&inst.train, user), DRAWS, || sampler.sample(user, &emb, p, &mut rng).unwrap())
}

fn group_p() -> GroupDistribution {
    GroupDistribution::new(vec![0.3, 0.7], 1e-3).unwrap()
}

#[test]
fn uns_matches_uniform() {
    let inst = sampling_instance(42);
    for user in [0, 17, 49] {
        let cands = candidates(&inst.train, user);
        let tv = total_variation(&empirical(&inst, Strategy::Uns, user, &group_p(), user as u64), &oracle_uniform(&cands));
        assert!(tv <= TV, "user {user}: tv {tv}");
    }
}

#[test]
fn nncf_matches_popularity() {
    let inst = sampling_instance(42);
    for user in [3, 21] {
        let cands = candidates(&inst.train, user);
        let oracle = oracle_popularity(&inst.train, &cands, 1.0);
        let closed = popularity_prob(user, &inst.train, &PopularityWeights::new(&inst.train, 1.0)).unwrap();
        assert_eq!(closed.items, cands);
        assert!(total_variation(&closed.probs, &oracle) < 1e-12);
        let tv = total_variation(&empirical(&inst, Strategy::Nncf, user, &group_p(), 7), &oracle);
        assert!(tv <= TV, "user {user}: tv {tv}");
    }
}

#[test]
fn fairstatic_matches_group_split() {
    let inst = sampling_instance(42);
    let p = group_p();
    for user in [5, 30] {
        let cands = candidates(&inst.train, user);
        let oracle = oracle_fair(&inst.groups, &cands, p.probs());
        let closed = fair_prob(user, &inst.groups, &inst.train, &p).unwrap();
        assert!(total_variation(&closed.probs, &oracle) < 1e-12);
        let tv = total_variation(&empirical(&inst, Strategy::FairStatic, user, &p, 9), &oracle);
        assert!(tv <= TV, "user {user}: tv {tv}");
    }
}

#[test]
fn fairneg_matches_mixup() {
    let inst = sampling_instance(42);
    let p = group_p();
    let emb = inst.model.embeddings();
    let items = to_matrix(inst.model.item_factors());
    let users = to_matrix(inst.model.user_factors());
    for user in [2, 44] {
        let cands = candidates(&inst.train, user);
        let fair = fair_prob(user, &inst.groups, &inst.train, &p).unwrap();
        let imp = importance_prob(user, &emb, &inst.train, 1.0).unwrap();
        let mixed = mixup_prob(&fair, &imp, 0.5).unwrap();
        let oracle: Vec<f64> = oracle_fair(&inst.groups, &cands, p.probs())
            .iter()
            .zip(oracle_softmax(&users[user], &items, &cands, 1.0))
            .map(|(f, s)| 0.5 * f + 0.5 * s)
            .collect();
        assert!(total_variation(&mixed.probs, &oracle) < 1e-12);
        let via_sampler = fairneg_prob(user, &emb, &inst.groups, &inst.train, &p, &SamplerConfig::default()).unwrap();
        assert!(total_variation(&via_sampler.probs, &mixed.probs) < 1e-12);
        let tv = total_variation(&empirical(&inst, Strategy::FairNeg, user, &p, 11), &mixed.probs);
        assert!(tv <= TV, "user {user}: tv {tv}");
    }
}

#[test]
fn dns_matches_enumerated_argmax() {
    let inst = sampling_instance(42);
    let emb = inst.model.embeddings();
    for user in 0..50 {
        let cands = candidates(&inst.train, user);
        let scores: Vec<f64> = (0..inst.train.num_items()).map(|i| emb.score(user, i)).collect();
        for pool in [1, 4, 16] {
            let mut lib_rng = ChaCha8Rng::seed_from_u64(user as u64 * 31 + pool as u64);
            let mut oracle_rng = lib_rng.clone();
            for _ in 0..20 {
                let got = sample_dns(user, &emb, &inst.train, &mut lib_rng, pool).unwrap();
                assert_eq!(got, oracle_dns(&mut oracle_rng, &cands, &scores, pool));
            }
        }
    }
}

#[test]
fn dns_breaks_ties_toward_small_indices() {
    let mut inst = sampling_instance(3);
    inst.model.item_factors_mut().fill(0.0);
    let emb = inst.model.embeddings();
    let cands = candidates(&inst.train, 0);
    let scores = vec![0.0; inst.train.num_items()];
    let mut a = ChaCha8Rng::seed_from_u64(1);
    let mut b = a.clone();
    for _ in 0..50 {
        assert_eq!(sample_dns(0, &emb, &inst.train, &mut a, 8).unwrap(), oracle_dns(&mut b, &cands, &scores, 8));
    }
}
