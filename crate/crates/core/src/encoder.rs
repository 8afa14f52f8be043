//! LightGCN propagation over the bipartite graph.
//!
//! Layer `l + 1` is the normalized neighborhood sum of layer `l`, optionally
//! plus a scaled additive perturbation; the final representation is the
//! uniform mean of layers `0..=L`.

use ndarray::{Array2, ArrayView1, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::InteractionGraph;
use crate::projection::{ProjectionPerturbator, ProjectionVariant};

/// A user block and an item block of row vectors sharing one width.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeMatrix {
    pub user: Array2<f64>,
    pub item: Array2<f64>,
}

/// Base (layer-0) embeddings.
pub type EmbeddingTable = NodeMatrix;

/// Which half of the bipartite node set a block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    User,
    Item,
}

impl NodeMatrix {
    pub fn zeros(num_users: usize, num_items: usize, dim: usize) -> Self {
        NodeMatrix {
            user: Array2::zeros((num_users, dim)),
            item: Array2::zeros((num_items, dim)),
        }
    }

    pub fn zeros_like(other: &NodeMatrix) -> Self {
        Self::zeros(other.num_users(), other.num_items(), other.dim())
    }

    pub fn num_users(&self) -> usize {
        self.user.nrows()
    }

    pub fn num_items(&self) -> usize {
        self.item.nrows()
    }

    pub fn dim(&self) -> usize {
        self.user.ncols()
    }

    pub fn side(&self, side: Side) -> &Array2<f64> {
        match side {
            Side::User => &self.user,
            Side::Item => &self.item,
        }
    }

    pub fn side_mut(&mut self, side: Side) -> &mut Array2<f64> {
        match side {
            Side::User => &mut self.user,
            Side::Item => &mut self.item,
        }
    }

    pub fn same_shape(&self, other: &NodeMatrix) -> bool {
        self.user.dim() == other.user.dim() && self.item.dim() == other.item.dim()
    }

    pub fn add_assign(&mut self, other: &NodeMatrix) {
        self.user += &other.user;
        self.item += &other.item;
    }

    pub fn scaled_add(&mut self, alpha: f64, other: &NodeMatrix) {
        self.user.scaled_add(alpha, &other.user);
        self.item.scaled_add(alpha, &other.item);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.user *= alpha;
        self.item *= alpha;
    }

    pub fn is_finite(&self) -> bool {
        self.user.iter().chain(self.item.iter()).all(|x| x.is_finite())
    }

    pub fn squared_norm(&self) -> f64 {
        self.user.iter().chain(self.item.iter()).map(|x| x * x).sum()
    }

    /// Rounds every entry to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        round_to_f32(&mut self.user);
        round_to_f32(&mut self.item);
    }
}

pub(crate) fn round_to_f32(a: &mut Array2<f64>) {
    a.mapv_inplace(|x| x as f32 as f64);
}

/// Xavier-normal initialization with `fan_in = fan_out = dim`, i.e.
/// standard deviation `sqrt(1 / dim)`.
pub fn init_embeddings<R: Rng + ?Sized>(
    num_users: usize,
    num_items: usize,
    dim: usize,
    rng: &mut R,
) -> EmbeddingTable {
    assert!(dim >= 1, "embedding dimension must be positive");
    let std = (2.0 / (dim + dim) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut draw = |rows: usize| {
        Array2::from_shape_simple_fn((rows, dim), || normal.sample(rng) as f32 as f64)
    };
    let user = draw(num_users);
    let item = draw(num_items);
    NodeMatrix { user, item }
}

/// One application of the normalized adjacency: users gather from items and
/// items gather from users. The operator is symmetric, so this is also its
/// own adjoint for back-propagation.
pub fn propagate(graph: &InteractionGraph, x: &NodeMatrix) -> NodeMatrix {
    let dim = x.dim();
    let mut out = NodeMatrix::zeros(x.num_users(), x.num_items(), dim);
    gather(&mut out.user, dim, |u| graph.user_row(u), &x.item);
    gather(&mut out.item, dim, |i| graph.item_row(i), &x.user);
    out
}

fn gather<'g, F>(out: &mut Array2<f64>, dim: usize, row: F, src: &Array2<f64>)
where
    F: Fn(usize) -> (&'g [u32], &'g [f64]) + Sync,
{
    if dim == 0 {
        return;
    }
    let src = src.as_slice().expect("standard layout");
    out.as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(dim)
        .with_min_len(64)
        .enumerate()
        .for_each(|(r, dst)| {
            let (nbrs, coef) = row(r);
            for (&n, &c) in nbrs.iter().zip(coef) {
                let s = &src[n as usize * dim..(n as usize + 1) * dim];
                for (d, v) in dst.iter_mut().zip(s) {
                    *d += c * v;
                }
            }
        });
}

/// Per-layer random tensors for the noise-based view generators.
pub type LayerNoise = Vec<NodeMatrix>;

/// Additive term injected after each propagation step.
#[derive(Clone, Copy)]
pub enum Perturbation<'a> {
    None,
    /// `omega * Q^l` from the trainable projection perturbator.
    Projection {
        perturbator: &'a ProjectionPerturbator,
        variant: ProjectionVariant,
    },
    /// `omega * sign(A E^l) ⊙ noise^l`, noise rows unit-normalized.
    SignedNoise { noise: &'a [NodeMatrix], omega: f64 },
    /// `omega * noise^l`.
    Additive { noise: &'a [NodeMatrix], omega: f64 },
}

impl Perturbation<'_> {
    pub fn omega(&self) -> f64 {
        match self {
            Perturbation::None => 0.0,
            Perturbation::Projection { perturbator, .. } => perturbator.omega,
            Perturbation::SignedNoise { omega, .. } | Perturbation::Additive { omega, .. } => *omega,
        }
    }

    fn is_active(&self) -> bool {
        !matches!(self, Perturbation::None) && self.omega() != 0.0
    }
}

/// All propagated layers of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `layers[0]` is the input table, `layers[l]` the `l`-th propagation.
    pub layers: Vec<NodeMatrix>,
    /// Uniform mean of all layers.
    pub final_emb: NodeMatrix,
    pub perturbed: bool,
    pub graph_hash: u64,
}

impl ForwardTrace {
    pub fn num_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn layer(&self, l: usize) -> Result<&NodeMatrix> {
        self.layers.get(l).ok_or(Error::MissingLayer(l))
    }
}

pub fn forward(
    graph: &InteractionGraph,
    table: &EmbeddingTable,
    num_layers: usize,
    perturbation: Perturbation<'_>,
) -> Result<ForwardTrace> {
    if table.num_users() != graph.num_users() || table.num_items() != graph.num_items() {
        return Err(Error::Shape(format!(
            "embedding table {}x{} users, {}x{} items vs graph {} users, {} items",
            table.num_users(),
            table.dim(),
            table.num_items(),
            table.dim(),
            graph.num_users(),
            graph.num_items()
        )));
    }
    check_perturbation(&perturbation, table, num_layers)?;

    let active = perturbation.is_active();
    let mut layers = Vec::with_capacity(num_layers + 1);
    layers.push(table.clone());
    for l in 0..num_layers {
        let prev = &layers[l];
        let mut next = propagate(graph, prev);
        if active {
            match perturbation {
                Perturbation::None => {}
                Perturbation::Projection {
                    perturbator,
                    variant,
                } => {
                    let omega = perturbator.omega;
                    for side in [Side::User, Side::Item] {
                        let q = perturbator.layer_perturbation(side, variant, prev.side(side));
                        next.side_mut(side).scaled_add(omega, &q);
                    }
                }
                Perturbation::SignedNoise { noise, omega } => {
                    for side in [Side::User, Side::Item] {
                        Zip::from(next.side_mut(side))
                            .and(noise[l].side(side))
                            .for_each(|x, &n| *x += omega * sign(*x) * n);
                    }
                }
                Perturbation::Additive { noise, omega } => next.scaled_add(omega, &noise[l]),
            }
        }
        layers.push(next);
    }
    let final_emb = layer_mean(&layers);
    Ok(ForwardTrace {
        layers,
        final_emb,
        perturbed: active,
        graph_hash: graph.content_hash(),
    })
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_perturbation(p: &Perturbation<'_>, table: &EmbeddingTable, num_layers: usize) -> Result<()> {
    match p {
        Perturbation::None => Ok(()),
        Perturbation::Projection { perturbator, .. } => perturbator.check_shapes(table),
        Perturbation::SignedNoise { noise, .. } | Perturbation::Additive { noise, .. } => {
            if noise.len() != num_layers {
                return Err(Error::Shape(format!(
                    "{} noise layers for {} propagation layers",
                    noise.len(),
                    num_layers
                )));
            }
            if noise.iter().any(|n| !n.same_shape(table)) {
                return Err(Error::Shape("noise tensor does not match the embedding table".into()));
            }
            Ok(())
        }
    }
}

pub(crate) fn layer_mean(layers: &[NodeMatrix]) -> NodeMatrix {
    let mut acc = NodeMatrix::zeros_like(&layers[0]);
    for layer in layers {
        acc.add_assign(layer);
    }
    acc.scale(1.0 / layers.len() as f64);
    acc
}

/// Inner product of the final user and item representations.
pub fn score(trace: &ForwardTrace, user: usize, item: usize) -> f64 {
    trace
        .final_emb
        .user
        .row(user)
        .dot(&trace.final_emb.item.row(item))
}

/// Scores of `user` against every item.
pub fn user_scores(final_emb: &NodeMatrix, user: usize) -> Vec<f64> {
    let u: ArrayView1<f64> = final_emb.user.row(user);
    final_emb.item.dot(&u).to_vec()
}

/// Top-`n` items by descending score, skipping `exclude` (sorted ascending).
/// Ties go to the smaller item index.
pub fn rank_items(trace: &ForwardTrace, user: usize, exclude: &[u32], n: usize) -> Vec<usize> {
    top_n(&user_scores(&trace.final_emb, user), |i| exclude.binary_search(&(i as u32)).is_ok(), n)
}

pub(crate) fn top_n(scores: &[f64], excluded: impl Fn(usize) -> bool, n: usize) -> Vec<usize> {
    let mut cand: Vec<usize> = (0..scores.len()).filter(|&i| !excluded(i)).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if n == 0 {
        return Vec::new();
    }
    if cand.len() > n {
        cand.select_nth_unstable_by(n - 1, cmp);
        cand.truncate(n);
    }
    cand.sort_unstable_by(cmp);
    cand
}
