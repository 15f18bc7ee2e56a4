//! Seeded synthetic implicit-feedback data with item groups.
//!
//! Users and items get Gaussian latent factors. Within each group, exactly
//! `round(total * interaction_share)` user-item pairs are drawn without
//! replacement with probability proportional to `exp(signal * u.v + b_i)`
//! (Gumbel top-k), where `b_i` is a per-item popularity offset. This gives
//! exact group interaction shares and a low-rank structure a model can learn.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{GroupMap, Interaction, InteractionTable};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub groups: usize,
    /// Fraction of the user-item matrix that is observed.
    pub density: f64,
    pub seed: u64,
    /// Fraction of the catalog per group. Empty means equal shares.
    pub item_shares: Vec<f64>,
    /// Fraction of the interactions per group. Empty means proportional
    /// to item shares.
    pub interaction_shares: Vec<f64>,
    pub latent_dim: usize,
    /// Scale of the latent affinity term.
    pub signal: f64,
    /// Std of the per-item popularity offset.
    pub popularity_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 200,
            items: 120,
            groups: 2,
            density: 0.05,
            seed: 0,
            item_shares: Vec::new(),
            interaction_shares: Vec::new(),
            latent_dim: 8,
            signal: 2.0,
            popularity_std: 1.0,
        }
    }
}

impl SynthConfig {
    /// Two groups where the smaller group owns 80% of the feedback.
    pub fn imbalanced(users: usize, items: usize, density: f64, seed: u64) -> Self {
        SynthConfig {
            users,
            items,
            density,
            seed,
            item_shares: vec![0.45, 0.55],
            interaction_shares: vec![0.8, 0.2],
            ..Default::default()
        }
    }

    fn shares(v: &[f64], groups: usize, what: &str) -> Result<Option<Vec<f64>>> {
        if v.is_empty() {
            return Ok(None);
        }
        if v.len() != groups {
            return Err(Error::Config(format!("{what} has {} entries for {groups} groups", v.len())));
        }
        let total: f64 = v.iter().sum();
        if v.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("{what} must be positive and sum to 1")));
        }
        Ok(Some(v.to_vec()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.groups == 0 || self.items < self.groups {
            return Err(Error::Config("synthetic data needs users >= 1 and items >= groups >= 1".into()));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config(format!("density must lie in (0, 1], got {}", self.density)));
        }
        if self.latent_dim == 0 || !(self.signal >= 0.0) || !(self.popularity_std >= 0.0) {
            return Err(Error::Config("invalid latent settings".into()));
        }
        Self::shares(&self.item_shares, self.groups, "item_shares")?;
        Self::shares(&self.interaction_shares, self.groups, "interaction_shares")?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub table: InteractionTable,
    pub groups: GroupMap,
}

/// Splits `total` into integer parts proportional to `shares` by largest
/// remainder, then lifts empty parts to `min` at the expense of the largest.
fn apportion(total: usize, shares: &[f64], min: usize) -> Vec<usize> {
    let raw: Vec<f64> = shares.iter().map(|s| s * total as f64).collect();
    let mut parts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut left = total - parts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &g in order.iter().cycle() {
        if left == 0 {
            break;
        }
        parts[g] += 1;
        left -= 1;
    }
    for g in 0..parts.len() {
        while parts[g] < min {
            let big = (0..parts.len()).max_by_key(|&j| (parts[j], std::cmp::Reverse(j))).expect("non-empty");
            if parts[big] <= min {
                break;
            }
            parts[big] -= 1;
            parts[g] += 1;
        }
    }
    parts
}

pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let a = config.groups;
    let item_shares = SynthConfig::shares(&config.item_shares, a, "item_shares")?.unwrap_or_else(|| vec![1.0 / a as f64; a]);
    let sizes = apportion(config.items, &item_shares, 1);
    let item_group: Vec<usize> = sizes.iter().enumerate().flat_map(|(g, &n)| std::iter::repeat_n(g, n)).collect();
    let labels = (0..a).map(|g| format!("g{g}")).collect();
    let groups = GroupMap::new(item_group, labels)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1.0 / (config.latent_dim as f64).sqrt()).expect("valid std");
    let user_f: Vec<Vec<f64>> = (0..config.users)
        .map(|_| (0..config.latent_dim).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let item_f: Vec<Vec<f64>> = (0..config.items)
        .map(|_| (0..config.latent_dim).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let pop = Normal::new(0.0, config.popularity_std).expect("valid std");
    let bias: Vec<f64> = (0..config.items).map(|_| pop.sample(&mut rng)).collect();
    let gumbel = Gumbel::new(0.0, 1.0).expect("valid scale");

    let cells = config.users * config.items;
    let total = ((config.density * cells as f64).round() as usize).clamp(a, cells);
    let inter_shares = SynthConfig::shares(&config.interaction_shares, a, "interaction_shares")?
        .unwrap_or_else(|| sizes.iter().map(|&n| n as f64 / config.items as f64).collect());
    let targets = apportion(total, &inter_shares, 1);

    let mut pairs = Vec::with_capacity(total);
    let mut start = 0;
    for (g, &n_items) in sizes.iter().enumerate() {
        let range = start..start + n_items;
        start += n_items;
        let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(config.users * n_items);
        for (u, uf) in user_f.iter().enumerate() {
            for i in range.clone() {
                let dot: f64 = uf.iter().zip(&item_f[i]).map(|(x, y)| x * y).sum();
                let key = config.signal * dot + bias[i] + gumbel.sample(&mut rng);
                keyed.push((key, u, i));
            }
        }
        let want = targets[g].min(keyed.len());
        if want < targets[g] {
            log::warn!("group g{g} can hold only {want} interactions, {} requested", targets[g]);
        }
        keyed.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
        pairs.extend(keyed[..want].iter().map(|&(_, user, item)| Interaction { user, item }));
    }
    let table = InteractionTable::new(config.users, config.items, pairs)?;
    Ok(SynthData { table, groups })
}

/// Writes `ratings.dat` (`user::item`) and `items.csv` (`item,label`) in
/// the default ingestion formats.
pub fn write_raw(dir: &Path, data: &SynthData) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut ratings = String::new();
    for it in data.table.interactions() {
        ratings.push_str(&format!("u{}::i{}\n", it.user, it.item));
    }
    let mut items = String::new();
    for (i, &g) in data.groups.item_groups().iter().enumerate() {
        items.push_str(&format!("i{i},{}\n", data.groups.labels()[g]));
    }
    let r = dir.join("ratings.dat");
    fs::write(&r, ratings).map_err(|e| Error::io(&r, e))?;
    let a = dir.join("items.csv");
    fs::write(&a, items).map_err(|e| Error::io(&a, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apportion_sums() {
        assert_eq!(apportion(10, &[0.5, 0.5], 1), vec![5, 5]);
        assert_eq!(apportion(7, &[0.8, 0.2], 1), vec![6, 1]);
        assert_eq!(apportion(4, &[0.9, 0.05, 0.05], 1), vec![2, 1, 1]);
        assert_eq!(apportion(3, &[1.0 / 3.0; 3], 1), vec![1, 1, 1]);
    }

    #[test]
    fn reproducible() {
        let c = SynthConfig { seed: 9, ..Default::default() };
        assert_eq!(generate(&c).unwrap(), generate(&c).unwrap());
        let d = SynthConfig { seed: 10, ..Default::default() };
        assert_ne!(generate(&c).unwrap().table, generate(&d).unwrap().table);
    }

    #[test]
    fn exact_shares() {
        let data = generate(&SynthConfig::imbalanced(100, 50, 0.1, 3)).unwrap();
        assert_eq!(data.table.len(), 500);
        assert_eq!(data.groups.group_sizes(), vec![22, 28]);
        let mut per = [0usize; 2];
        for it in data.table.interactions() {
            per[data.groups.group_of(it.item)] += 1;
        }
        assert_eq!(per, [400, 100]);
    }

    #[test]
    fn balanced_default() {
        let data = generate(&SynthConfig { users: 30, items: 20, density: 0.2, ..Default::default() }).unwrap();
        assert_eq!(data.groups.group_sizes(), vec![10, 10]);
        assert_eq!(data.table.len(), 120);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate(&SynthConfig { density: 0.0, ..Default::default() }).is_err());
        assert!(generate(&SynthConfig { interaction_shares: vec![0.5, 0.4], ..Default::default() }).is_err());
        assert!(generate(&SynthConfig { items: 1, ..Default::default() }).is_err());
    }
}
