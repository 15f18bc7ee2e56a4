//! Independent reference implementations shared by the integration tests.
//! Everything here works on plain `Vec`s and naive loops.

#![allow(dead_code)]

use fairneg::backbone::{BackboneKind, EmbeddingModel, NormalizedAdjacency, Triple};
use fairneg::dataset::{GroupMap, Interaction, InteractionTable};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Matrix = Vec<Vec<f64>>;

pub fn to_matrix(a: &Array2<f64>) -> Matrix {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense symmetric-normalized adjacency of the user-item graph, users first.
pub fn dense_adjacency(num_users: usize, num_items: usize, pairs: &[(usize, usize)]) -> Matrix {
    let n = num_users + num_items;
    let mut a = vec![vec![0.0; n]; n];
    for &(u, i) in pairs {
        a[u][num_users + i] = 1.0;
        a[num_users + i][u] = 1.0;
    }
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    for r in 0..n {
        for c in 0..n {
            if a[r][c] != 0.0 {
                a[r][c] /= (deg[r] * deg[c]).sqrt();
            }
        }
    }
    a
}

fn matmul(a: &Matrix, x: &Matrix) -> Matrix {
    let d = x[0].len();
    a.iter()
        .map(|row| {
            let mut out = vec![0.0; d];
            for (k, &w) in row.iter().enumerate() {
                if w != 0.0 {
                    for j in 0..d {
                        out[j] += w * x[k][j];
                    }
                }
            }
            out
        })
        .collect()
}

/// Layer-mean propagation `(1/(L+1)) * sum_l A^l X`.
pub fn dense_layer_mean(adj: &Matrix, x: &Matrix, layers: usize) -> Matrix {
    let mut acc = x.clone();
    let mut cur = x.clone();
    for _ in 0..layers {
        cur = matmul(adj, &cur);
        for (a, c) in acc.iter_mut().zip(&cur) {
            for (av, cv) in a.iter_mut().zip(c) {
                *av += cv;
            }
        }
    }
    let scale = 1.0 / (layers + 1) as f64;
    acc.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect()
}

/// A tiny model in plain form.
#[derive(Clone, Debug)]
pub struct PlainModel {
    pub users: Matrix,
    pub items: Matrix,
    pub l2: f64,
    /// `(adjacency, layers)` for the graph model.
    pub graph: Option<(Matrix, usize)>,
}

impl PlainModel {
    pub fn final_embeddings(&self) -> (Matrix, Matrix) {
        match &self.graph {
            None => (self.users.clone(), self.items.clone()),
            Some((adj, layers)) => {
                let mut stacked = self.users.clone();
                stacked.extend(self.items.iter().cloned());
                let out = dense_layer_mean(adj, &stacked, *layers);
                let (u, i) = out.split_at(self.users.len());
                (u.to_vec(), i.to_vec())
            }
        }
    }

    /// `-ln(1 / (1 + exp(-(y_ui - y_uj)))) + l2 * (|e_u|^2 + |e_i|^2 + |e_j|^2)`.
    pub fn triple_loss(&self, t: Triple) -> f64 {
        let (u, i) = self.final_embeddings();
        let x = dot(&u[t.user], &i[t.pos]) - dot(&u[t.user], &i[t.neg]);
        let bpr = (1.0 + (-x).exp()).ln();
        let sq = |v: &[f64]| dot(v, v);
        bpr + self.l2 * (sq(&self.users[t.user]) + sq(&self.items[t.pos]) + sq(&self.items[t.neg]))
    }

    /// Central finite differences of `triple_loss` over every parameter,
    /// users first then items, row-major.
    pub fn finite_difference(&self, t: Triple, h: f64) -> Vec<f64> {
        let mut out = Vec::new();
        for table in 0..2 {
            let rows = if table == 0 { self.users.len() } else { self.items.len() };
            let dim = self.users[0].len();
            for r in 0..rows {
                for c in 0..dim {
                    let mut plus = self.clone();
                    let mut minus = self.clone();
                    let (p, m) = if table == 0 {
                        (&mut plus.users[r][c], &mut minus.users[r][c])
                    } else {
                        (&mut plus.items[r][c], &mut minus.items[r][c])
                    };
                    *p += h;
                    *m -= h;
                    out.push((plus.triple_loss(t) - minus.triple_loss(t)) / (2.0 * h));
                }
            }
        }
        out
    }
}

/// A random tiny instance: the library model, its plain twin and a triple.
pub fn random_instance(seed: u64, kind: BackboneKind, layers: usize) -> (EmbeddingModel, PlainModel, Triple) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nu = rng.random_range(2..5);
    let ni = rng.random_range(3..7);
    let d = rng.random_range(1..5);
    let l2 = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..0.1) };
    let users: Matrix = (0..nu).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let items: Matrix = (0..ni).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    // every node gets at least one edge so degrees are positive
    let mut pairs: Vec<(usize, usize)> = (0..nu.max(ni)).map(|k| (k % nu, k % ni)).collect();
    for u in 0..nu {
        for i in 0..ni {
            if rng.random_bool(0.3) {
                pairs.push((u, i));
            }
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    let user = rng.random_range(0..nu);
    let pos = rng.random_range(0..ni);
    let neg = (pos + rng.random_range(1..ni)) % ni;
    let t = Triple { user, pos, neg };

    let to_array = |m: &Matrix| Array2::from_shape_vec((m.len(), d), m.concat()).unwrap();
    let (graph, plain_graph) = match kind {
        BackboneKind::Mf => (None, None),
        BackboneKind::LightGcn => {
            let table = InteractionTable::new(nu, ni, pairs.iter().map(|&(user, item)| Interaction { user, item })).unwrap();
            (
                Some(NormalizedAdjacency::from_table(&table)),
                Some((dense_adjacency(nu, ni, &pairs), layers)),
            )
        }
    };
    let model = EmbeddingModel::from_parts(kind, to_array(&users), to_array(&items), l2, layers, graph).unwrap();
    let plain = PlainModel {
        users,
        items,
        l2,
        graph: plain_graph,
    };
    (model, plain, t)
}

/// `|a - b| / max(|a|, |b|)` over whole vectors (absolute when both vanish).
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| dot(v, v).sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// The seeded 50-user, 40-item, 2-group sampling instance, with random
/// MF embeddings.
pub struct SamplingInstance {
    pub train: InteractionTable,
    pub groups: GroupMap,
    pub model: EmbeddingModel,
}

pub fn sampling_instance(seed: u64) -> SamplingInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nu, ni, d) = (50, 40, 4);
    let mut pairs = Vec::new();
    for user in 0..nu {
        for item in 0..ni {
            // group 0 (even items) is the popular one
            let p = if item % 2 == 0 { 0.25 } else { 0.08 };
            if rng.random_bool(p) {
                pairs.push(Interaction { user, item });
            }
        }
    }
    let train = InteractionTable::new(nu, ni, pairs).unwrap();
    let groups = GroupMap::new((0..ni).map(|i| i % 2).collect(), vec!["even".into(), "odd".into()]).unwrap();
    let u = Array2::from_shape_fn((nu, d), |_| rng.random_range(-1.0..1.0));
    let i = Array2::from_shape_fn((ni, d), |_| rng.random_range(-1.0..1.0));
    let model = EmbeddingModel::from_parts(BackboneKind::Mf, u, i, 0.0, 0, None).unwrap();
    SamplingInstance { train, groups, model }
}

/// Unobserved items of `user`, ascending.
pub fn candidates(train: &InteractionTable, user: usize) -> Vec<usize> {
    (0..train.num_items()).filter(|&i| !train.contains(user, i)).collect()
}

pub fn oracle_uniform(cands: &[usize]) -> Vec<f64> {
    vec![1.0 / cands.len() as f64; cands.len()]
}

pub fn oracle_popularity(train: &InteractionTable, cands: &[usize], exponent: f64) -> Vec<f64> {
    let mut counts = vec![0usize; train.num_items()];
    for it in train.interactions() {
        counts[it.item] += 1;
    }
    let w: Vec<f64> = cands.iter().map(|&i| (counts[i].max(1) as f64).powf(exponent)).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

/// Group probability split evenly over the group's candidates, renormalized
/// over groups that have candidates.
pub fn oracle_fair(groups: &GroupMap, cands: &[usize], p: &[f64]) -> Vec<f64> {
    let mut counts = vec![0usize; p.len()];
    for &i in cands {
        counts[groups.group_of(i)] += 1;
    }
    let live: f64 = (0..p.len()).filter(|&g| counts[g] > 0).map(|g| p[g]).sum();
    cands
        .iter()
        .map(|&i| {
            let g = groups.group_of(i);
            p[g] / live / counts[g] as f64
        })
        .collect()
}

pub fn oracle_softmax(user_row: &[f64], items: &Matrix, cands: &[usize], tau: f64) -> Vec<f64> {
    let e: Vec<f64> = cands.iter().map(|&i| (dot(user_row, &items[i]) / tau).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|x| x / total).collect()
}

/// Total-variation distance between two distributions over the same support.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Empirical frequencies of `draws` samples over `cands`.
pub fn frequencies(cands: &[usize], draws: usize, mut draw: impl FnMut() -> usize) -> Vec<f64> {
    let mut counts = vec![0usize; cands.len()];
    for _ in 0..draws {
        let item = draw();
        let k = cands.binary_search(&item).expect("draw outside the candidate set");
        counts[k] += 1;
    }
    counts.iter().map(|&c| c as f64 / draws as f64).collect()
}

/// DNS by enumeration: replays the uniform rank draws, then takes the
/// highest-scored pooled item with the smallest index on ties.
pub fn oracle_dns<R: Rng>(rng: &mut R, cands: &[usize], scores: &[f64], pool: usize) -> usize {
    let pooled: Vec<usize> = (0..pool).map(|_| cands[rng.random_range(0..cands.len())]).collect();
    let mut best = pooled[0];
    for &i in &pooled[1..] {
        if scores[i] > scores[best] || (scores[i] == scores[best] && i < best) {
            best = i;
        }
    }
    best
}
