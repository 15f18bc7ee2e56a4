//! Scoring backbones and their BPR gradients.
//!
//! Two backbones share one parameter layout: a `num_users x d` and a
//! `num_items x d` table. Matrix factorization scores with those tables
//! directly. LightGCN treats them as layer-0 embeddings, propagates them over
//! the symmetric-normalized user-item graph and averages the layers.
//! Because that propagation is linear and symmetric, gradients w.r.t. the
//! propagated embeddings map back to the base tables by propagating them the
//! same way.

use std::borrow::Cow;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::InteractionTable;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Mf,
    LightGcn,
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mf" => Ok(BackboneKind::Mf),
            "lightgcn" => Ok(BackboneKind::LightGcn),
            other => Err(Error::Config(format!("unknown backbone {other:?}"))),
        }
    }
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackboneKind::Mf => "mf",
            BackboneKind::LightGcn => "lightgcn",
        })
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))` without overflow for large `|x|`.
#[inline]
pub fn ln_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Symmetric-normalized adjacency `D^-1/2 A D^-1/2` of the bipartite
/// user-item graph, in CSR form over `num_users + num_items` nodes (users
/// first).
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    num_users: usize,
    num_items: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn from_table(train: &InteractionTable) -> Self {
        let (nu, ni) = (train.num_users(), train.num_items());
        let n = nu + ni;
        let mut neighbours: Vec<Vec<usize>> = vec![Vec::new(); n];
        for it in train.interactions() {
            neighbours[it.user].push(nu + it.item);
            neighbours[nu + it.item].push(it.user);
        }
        let degree: Vec<f64> = neighbours.iter().map(|v| v.len() as f64).collect();
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        indptr.push(0);
        for (row, nb) in neighbours.iter_mut().enumerate() {
            nb.sort_unstable();
            for &col in nb.iter() {
                indices.push(col);
                weights.push(1.0 / (degree[row] * degree[col]).sqrt());
            }
            indptr.push(indices.len());
        }
        NormalizedAdjacency {
            num_users: nu,
            num_items: ni,
            indptr,
            indices,
            weights,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    /// Entry `(row, col)` of the normalized matrix.
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        let (a, b) = (self.indptr[row], self.indptr[row + 1]);
        match self.indices[a..b].binary_search(&col) {
            Ok(k) => self.weights[a + k],
            Err(_) => 0.0,
        }
    }

    /// `A_hat * x` for a node-major `num_nodes x d` matrix.
    pub fn propagate(&self, x: &Array2<f64>) -> Array2<f64> {
        let d = x.ncols();
        let n = self.num_nodes();
        assert_eq!(x.nrows(), n);
        let src = x.as_standard_layout();
        let src = src.as_slice().expect("standard layout");
        let mut out = vec![0.0; n * d];
        out.par_chunks_mut(d.max(1)).enumerate().for_each(|(row, dst)| {
            for k in self.indptr[row]..self.indptr[row + 1] {
                let w = self.weights[k];
                let col = self.indices[k];
                for (o, v) in dst.iter_mut().zip(&src[col * d..(col + 1) * d]) {
                    *o += w * v;
                }
            }
        });
        Array2::from_shape_vec((n, d), out).expect("shape")
    }

    /// Layer mean `(1/(L+1)) * sum_{l=0..L} A_hat^l x`. The operator is
    /// symmetric, so it also maps output gradients back to layer 0.
    pub fn layer_mean(&self, x: &Array2<f64>, layers: usize) -> Array2<f64> {
        let mut acc = x.clone();
        let mut cur = Cow::Borrowed(x);
        for _ in 0..layers {
            let next = self.propagate(&cur);
            acc += &next;
            cur = Cow::Owned(next);
        }
        acc /= (layers + 1) as f64;
        acc
    }
}

/// User and item embeddings as used for scoring.
#[derive(Debug, Clone)]
pub struct Embeddings<'a> {
    pub users: Cow<'a, Array2<f64>>,
    pub items: Cow<'a, Array2<f64>>,
}

impl Embeddings<'_> {
    #[inline]
    pub fn score(&self, user: usize, item: usize) -> f64 {
        self.users.row(user).dot(&self.items.row(item))
    }

    /// Scores of `user` against every item.
    pub fn user_scores(&self, user: usize) -> Vec<f64> {
        self.items.dot(&self.users.row(user)).to_vec()
    }

    pub fn into_owned(self) -> Embeddings<'static> {
        Embeddings {
            users: Cow::Owned(self.users.into_owned()),
            items: Cow::Owned(self.items.into_owned()),
        }
    }
}

/// Model parameters: base embedding tables plus, for LightGCN, the train
/// graph they propagate over.
#[derive(Debug, Clone)]
pub struct EmbeddingModel {
    kind: BackboneKind,
    user_factors: Array2<f64>,
    item_factors: Array2<f64>,
    l2: f64,
    layers: usize,
    graph: Option<NormalizedAdjacency>,
}

/// A `(user, positive, negative)` training triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

/// Dense gradients shaped like the model's base tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub users: Array2<f64>,
    pub items: Array2<f64>,
}

impl Gradients {
    pub fn zeros(num_users: usize, num_items: usize, dim: usize) -> Self {
        Gradients {
            users: Array2::zeros((num_users, dim)),
            items: Array2::zeros((num_items, dim)),
        }
    }

    pub fn fill_zero(&mut self) {
        self.users.fill(0.0);
        self.items.fill(0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.users.iter().chain(self.items.iter()).all(|v| v.is_finite())
    }
}

/// Per-triple output-space gradient norms on the two item rows, reported to
/// the gradient-norm diagnostic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItemGradNorms {
    pub pos: f64,
    pub neg: f64,
}

/// Summed BPR loss of a batch, without regularization.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchLoss {
    pub bpr: f64,
    pub reg: f64,
}

fn xavier_table(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    // fan_in = fan_out = dim
    let bound = (6.0 / (2.0 * dim as f64)).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((rows, dim), || dist.sample(rng))
}

impl EmbeddingModel {
    /// Xavier-uniform initialization of both tables from one seeded stream.
    /// `graph` is required for LightGCN and ignored for MF.
    #[allow(clippy::too_many_arguments)]
    pub fn init_xavier(
        kind: BackboneKind,
        num_users: usize,
        num_items: usize,
        dim: usize,
        seed: u64,
        l2: f64,
        layers: usize,
        graph: Option<NormalizedAdjacency>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("latent dimension must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let user_factors = xavier_table(num_users, dim, &mut rng);
        let item_factors = xavier_table(num_items, dim, &mut rng);
        Self::from_parts(kind, user_factors, item_factors, l2, layers, graph)
    }

    pub fn from_parts(
        kind: BackboneKind,
        user_factors: Array2<f64>,
        item_factors: Array2<f64>,
        l2: f64,
        layers: usize,
        graph: Option<NormalizedAdjacency>,
    ) -> Result<Self> {
        if user_factors.ncols() != item_factors.ncols() {
            return Err(Error::Data("user and item tables differ in dimension".into()));
        }
        let graph = match kind {
            BackboneKind::Mf => None,
            BackboneKind::LightGcn => {
                let g = graph.ok_or_else(|| Error::Config("LightGCN needs a train graph".into()))?;
                if g.num_users != user_factors.nrows() || g.num_items != item_factors.nrows() {
                    return Err(Error::Data("graph does not match embedding tables".into()));
                }
                Some(g)
            }
        };
        Ok(EmbeddingModel {
            kind,
            user_factors,
            item_factors,
            l2,
            layers,
            graph,
        })
    }

    pub fn kind(&self) -> BackboneKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.user_factors.ncols()
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn l2(&self) -> f64 {
        self.l2
    }

    pub fn num_users(&self) -> usize {
        self.user_factors.nrows()
    }

    pub fn num_items(&self) -> usize {
        self.item_factors.nrows()
    }

    pub fn user_factors(&self) -> &Array2<f64> {
        &self.user_factors
    }

    pub fn item_factors(&self) -> &Array2<f64> {
        &self.item_factors
    }

    pub fn user_factors_mut(&mut self) -> &mut Array2<f64> {
        &mut self.user_factors
    }

    pub fn item_factors_mut(&mut self) -> &mut Array2<f64> {
        &mut self.item_factors
    }

    pub fn is_finite(&self) -> bool {
        self.user_factors.iter().chain(self.item_factors.iter()).all(|v| v.is_finite())
    }

    fn stacked(&self, users: &Array2<f64>, items: &Array2<f64>) -> Array2<f64> {
        ndarray::concatenate(Axis(0), &[users.view(), items.view()]).expect("same width")
    }

    fn unstack(&self, all: Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let nu = self.num_users();
        let users = all.slice(s![..nu, ..]).to_owned();
        let items = all.slice(s![nu.., ..]).to_owned();
        (users, items)
    }

    /// Propagated LightGCN embeddings. Errors for MF.
    pub fn lightgcn_forward(&self) -> Result<(Array2<f64>, Array2<f64>)> {
        let graph = self
            .graph
            .as_ref()
            .ok_or_else(|| Error::Config("lightgcn_forward on a non-LightGCN model".into()))?;
        let all = self.stacked(&self.user_factors, &self.item_factors);
        Ok(self.unstack(graph.layer_mean(&all, self.layers)))
    }

    /// Embeddings used for scoring: the base tables for MF, the propagated
    /// layer mean for LightGCN.
    pub fn embeddings(&self) -> Embeddings<'_> {
        match self.kind {
            BackboneKind::Mf => Embeddings {
                users: Cow::Borrowed(&self.user_factors),
                items: Cow::Borrowed(&self.item_factors),
            },
            BackboneKind::LightGcn => {
                let (users, items) = self.lightgcn_forward().expect("graph present");
                Embeddings {
                    users: Cow::Owned(users),
                    items: Cow::Owned(items),
                }
            }
        }
    }

    /// Raw pre-sigmoid score. Propagates the whole graph for LightGCN; use
    /// [`EmbeddingModel::embeddings`] when scoring many pairs.
    pub fn score(&self, user: usize, item: usize) -> f64 {
        self.embeddings().score(user, item)
    }

    /// Per-triple loss `-ln s(y_ui - y_uj) + l2 * (|e_u|^2 + |e_i|^2 + |e_j|^2)`
    /// with the norms taken on base rows.
    pub fn triple_loss(&self, t: Triple) -> f64 {
        let emb = self.embeddings();
        let x = emb.score(t.user, t.pos) - emb.score(t.user, t.neg);
        -ln_sigmoid(x) + self.reg_term(t)
    }

    fn reg_term(&self, t: Triple) -> f64 {
        let sq = |v: ArrayView1<f64>| v.dot(&v);
        self.l2
            * (sq(self.user_factors.row(t.user))
                + sq(self.item_factors.row(t.pos))
                + sq(self.item_factors.row(t.neg)))
    }

    /// Accumulates the gradients of the summed triple losses into `grads`
    /// (w.r.t. the base tables) and returns the summed loss parts.
    ///
    /// `emb` must be [`EmbeddingModel::embeddings`] of the current
    /// parameters. `on_item_norms` receives the output-space gradient norms
    /// of each triple's positive and negative item rows.
    pub fn accumulate_gradients(
        &self,
        emb: &Embeddings<'_>,
        triples: &[Triple],
        grads: &mut Gradients,
        mut on_item_norms: impl FnMut(&Triple, ItemGradNorms),
    ) -> BatchLoss {
        let mut loss = BatchLoss::default();
        // Output-space gradients. For MF these are already the base
        // gradients.
        let mut out_users = Array2::<f64>::zeros(self.user_factors.raw_dim());
        let mut out_items = Array2::<f64>::zeros(self.item_factors.raw_dim());
        for t in triples {
            let eu = emb.users.row(t.user);
            let ei = emb.items.row(t.pos);
            let ej = emb.items.row(t.neg);
            let x = eu.dot(&ei) - eu.dot(&ej);
            loss.bpr -= ln_sigmoid(x);
            loss.reg += self.reg_term(*t);
            // c = s(y_uj - y_ui)
            let c = sigmoid(-x);
            {
                let mut gu = out_users.row_mut(t.user);
                gu.scaled_add(-c, &ei);
                gu.scaled_add(c, &ej);
            }
            out_items.row_mut(t.pos).scaled_add(-c, &eu);
            out_items.row_mut(t.neg).scaled_add(c, &eu);
            let norm = c * eu.dot(&eu).sqrt();
            on_item_norms(t, ItemGradNorms { pos: norm, neg: norm });
        }

        match &self.graph {
            None => {
                grads.users += &out_users;
                grads.items += &out_items;
            }
            Some(graph) => {
                let all = self.stacked(&out_users, &out_items);
                let (gu, gi) = self.unstack(graph.layer_mean(&all, self.layers));
                grads.users += &gu;
                grads.items += &gi;
            }
        }

        let two_l2 = 2.0 * self.l2;
        if two_l2 != 0.0 {
            for t in triples {
                grads.users.row_mut(t.user).scaled_add(two_l2, &self.user_factors.row(t.user));
                grads.items.row_mut(t.pos).scaled_add(two_l2, &self.item_factors.row(t.pos));
                grads.items.row_mut(t.neg).scaled_add(two_l2, &self.item_factors.row(t.neg));
            }
        }
        loss
    }

    /// Gradients of a single triple's loss w.r.t. all base parameters.
    pub fn bpr_triple_gradients(&self, t: Triple) -> Gradients {
        let mut grads = Gradients::zeros(self.num_users(), self.num_items(), self.dim());
        let emb = self.embeddings();
        self.accumulate_gradients(&emb, &[t], &mut grads, |_, _| {});
        grads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// Defaults for a backbone: lr 0.01 for MF and 0.001 for LightGCN.
    pub fn for_backbone(kind: BackboneKind) -> Self {
        AdamConfig {
            lr: match kind {
                BackboneKind::Mf => 0.01,
                BackboneKind::LightGcn => 0.001,
            },
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Dense bias-corrected Adam over both embedding tables.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    m: Gradients,
    v: Gradients,
    step: u64,
}

fn adam_update(
    params: &mut Array2<f64>,
    grads: &Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    c: &AdamConfig,
    bc1: f64,
    bc2: f64,
) {
    ndarray::Zip::from(params)
        .and(grads)
        .and(m)
        .and(v)
        .for_each(|p, &g, m, v| {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        });
}

impl AdamState {
    pub fn new(config: AdamConfig, model: &EmbeddingModel) -> Self {
        let zeros = Gradients::zeros(model.num_users(), model.num_items(), model.dim());
        AdamState {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Non-finite gradients abort without touching the
    /// parameters.
    pub fn step(&mut self, model: &mut EmbeddingModel, grads: &Gradients) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite(format!("gradients at optimizer step {}", self.step + 1)));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.config.beta1.powi(t);
        let bc2 = 1.0 - self.config.beta2.powi(t);
        let c = self.config;
        adam_update(&mut model.user_factors, &grads.users, &mut self.m.users, &mut self.v.users, &c, bc1, bc2);
        adam_update(&mut model.item_factors, &grads.items, &mut self.m.items, &mut self.v.items, &c, bc1, bc2);
        if !model.is_finite() {
            return Err(Error::NonFinite(format!("parameters after optimizer step {}", self.step)));
        }
        Ok(())
    }
}

/// Identifying metadata stored with a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub backbone: BackboneKind,
    pub dim: usize,
    pub layers: usize,
    pub num_users: usize,
    pub num_items: usize,
    pub seed: u64,
    pub l2: f64,
    pub epoch: usize,
    pub config_hash: String,
    pub data_hash: String,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
struct CheckpointFile {
    header: CheckpointHeader,
    user_factors: Vec<Vec<f64>>,
    item_factors: Vec<Vec<f64>>,
}

fn write_matrix(out: &mut String, m: &Array2<f64>) {
    out.push('[');
    for (r, row) in m.rows().into_iter().enumerate() {
        if r > 0 {
            out.push(',');
        }
        out.push_str("\n  [");
        for (c, v) in row.iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            // 17 significant digits
            out.push_str(&format!("{v:.16e}"));
        }
        out.push(']');
    }
    out.push_str("\n]");
}

fn read_matrix(rows: Vec<Vec<f64>>, expect_rows: usize, dim: usize) -> Result<Array2<f64>> {
    if rows.len() != expect_rows || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Data("checkpoint matrix shape disagrees with header".into()));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((expect_rows, dim), flat).map_err(|e| Error::Data(e.to_string()))
}

/// Renders a checkpoint as JSON text with row-major factor matrices.
pub fn checkpoint_json(model: &EmbeddingModel, header: &CheckpointHeader) -> Result<String> {
    let mut out = String::from("{\n\"header\": ");
    out.push_str(&serde_json::to_string(header)?);
    out.push_str(",\n\"user_factors\": ");
    write_matrix(&mut out, &model.user_factors);
    out.push_str(",\n\"item_factors\": ");
    write_matrix(&mut out, &model.item_factors);
    out.push_str("\n}\n");
    Ok(out)
}

pub fn save_checkpoint(path: &Path, model: &EmbeddingModel, header: &CheckpointHeader) -> Result<()> {
    let text = checkpoint_json(model, header)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses a checkpoint. LightGCN checkpoints need the train table to
/// rebuild their propagation graph.
pub fn parse_checkpoint(text: &str, train: Option<&InteractionTable>) -> Result<(EmbeddingModel, CheckpointHeader)> {
    let file: CheckpointFile = serde_json::from_str(text)?;
    let h = file.header;
    let users = read_matrix(file.user_factors, h.num_users, h.dim)?;
    let items = read_matrix(file.item_factors, h.num_items, h.dim)?;
    let graph = match (h.backbone, train) {
        (BackboneKind::LightGcn, Some(t)) => {
            if t.num_users() != h.num_users || t.num_items() != h.num_items {
                return Err(Error::Data("train table does not match checkpoint".into()));
            }
            Some(NormalizedAdjacency::from_table(t))
        }
        (BackboneKind::LightGcn, None) => {
            return Err(Error::Config("LightGCN checkpoint needs the train table".into()))
        }
        (BackboneKind::Mf, _) => None,
    };
    let model = EmbeddingModel::from_parts(h.backbone, users, items, h.l2, h.layers, graph)?;
    Ok((model, h))
}

pub fn load_checkpoint(path: &Path, train: Option<&InteractionTable>) -> Result<(EmbeddingModel, CheckpointHeader)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text, train)
}
