//! Adversarial structure perturbator.
//!
//! A small MLP scores `(user, item)` pairs from detached node embeddings. It
//! is fit with binary cross-entropy on a fresh sample of observed edges
//! (label 1) and unobserved pairs (label 0); the observed edges it is most
//! sure about are deleted and the unobserved pairs it is most sure about are
//! inserted. Edits are always applied to the original graph.

use std::collections::HashSet;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::encoder::NodeMatrix;
use crate::error::{Error, Result};
use crate::graph::{EditPlan, InteractionGraph, PerturbedGraph};
use crate::objectives::{sigmoid, softplus};
use crate::optim::{adam_step, AdamState};

/// Two-layer perceptron `[e_u ; e_i] -> hidden (ReLU) -> 1 (sigmoid)`.
///
/// Parameters live in one flat buffer laid out as
/// `w1 (hidden x 2d) | b1 (hidden) | w2 (hidden) | b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    dim: usize,
    hidden: usize,
    pub params: Vec<f64>,
}

impl Discriminator {
    pub fn num_params(dim: usize, hidden: usize) -> usize {
        hidden * 2 * dim + hidden + hidden + 1
    }

    /// Xavier-normal weights, zero biases; hidden width equals `dim`.
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let hidden = dim;
        let mut d = Self::zeros(dim, hidden);
        let n1 = Normal::new(0.0, (2.0 / (2 * dim + hidden) as f64).sqrt()).expect("finite");
        let n2 = Normal::new(0.0, (2.0 / (hidden + 1) as f64).sqrt()).expect("finite");
        let (w1, rest) = d.params.split_at_mut(hidden * 2 * dim);
        for w in w1 {
            *w = n1.sample(rng) as f32 as f64;
        }
        for w in &mut rest[hidden..2 * hidden] {
            *w = n2.sample(rng) as f32 as f64;
        }
        d
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Discriminator {
            dim,
            hidden,
            params: vec![0.0; Self::num_params(dim, hidden)],
        }
    }

    pub fn from_params(dim: usize, hidden: usize, params: Vec<f64>) -> Result<Self> {
        if params.len() != Self::num_params(dim, hidden) {
            return Err(Error::Shape(format!(
                "discriminator {dim}/{hidden} needs {} parameters, got {}",
                Self::num_params(dim, hidden),
                params.len()
            )));
        }
        Ok(Discriminator { dim, hidden, params })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    fn w1(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.hidden, 2 * self.dim), &self.params[..self.hidden * 2 * self.dim])
            .expect("layout")
    }

    fn b1(&self) -> ArrayView1<'_, f64> {
        let o = self.hidden * 2 * self.dim;
        ArrayView1::from(&self.params[o..o + self.hidden])
    }

    fn w2(&self) -> ArrayView1<'_, f64> {
        let o = self.hidden * 2 * self.dim + self.hidden;
        ArrayView1::from(&self.params[o..o + self.hidden])
    }

    fn b2(&self) -> f64 {
        self.params[self.params.len() - 1]
    }

    /// Pre-activations, hidden activations and logits for each input row.
    fn layers(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let mut z = x.dot(&self.w1().t());
        z += &self.b1();
        let h = z.mapv(|v| v.max(0.0));
        let logits = h.dot(&self.w2()) + self.b2();
        (z, h, logits)
    }

    /// Hidden pre-activations, one row per input.
    pub fn pre_activations(&self, x: &Array2<f64>) -> Array2<f64> {
        self.layers(x).0
    }

    pub fn logits(&self, x: &Array2<f64>) -> Array1<f64> {
        self.layers(x).2
    }

    /// Edge probabilities for each row of `x = [e_u ; e_i]`.
    pub fn predict(&self, x: &Array2<f64>) -> Array1<f64> {
        self.logits(x).mapv(sigmoid)
    }

    /// Mean BCE against `labels` and its gradient with respect to `params`.
    pub fn bce_and_grad(&self, x: &Array2<f64>, labels: &[f64]) -> (f64, Vec<f64>) {
        let n = x.nrows().max(1) as f64;
        let (z, h, logits) = self.layers(x);
        let mut loss = 0.0;
        let mut d_logit = Array1::zeros(logits.len());
        for (k, (&s, &y)) in logits.iter().zip(labels).enumerate() {
            loss += y * softplus(-s) + (1.0 - y) * softplus(s);
            d_logit[k] = (sigmoid(s) - y) / n;
        }
        let mut grad = vec![0.0; self.params.len()];
        let o_b1 = self.hidden * 2 * self.dim;
        let o_w2 = o_b1 + self.hidden;
        let last = grad.len() - 1;

        let d_w2 = h.t().dot(&d_logit);
        grad[o_w2..o_w2 + self.hidden].copy_from_slice(d_w2.as_slice().expect("contiguous"));
        grad[last] = d_logit.sum();

        let mut d_z = d_logit
            .view()
            .insert_axis(Axis(1))
            .dot(&self.w2().insert_axis(Axis(0)));
        d_z.zip_mut_with(&z, |g, &zv| {
            if zv <= 0.0 {
                *g = 0.0;
            }
        });
        let d_w1 = d_z.t().dot(x);
        grad[..o_b1].copy_from_slice(d_w1.as_standard_layout().as_slice().expect("contiguous"));
        let d_b1 = d_z.sum_axis(Axis(0));
        grad[o_b1..o_w2].copy_from_slice(d_b1.as_slice().expect("contiguous"));
        (loss / n, grad)
    }
}

/// Score of a single pair.
pub fn discriminator_score(d: &Discriminator, e_u: ArrayView1<f64>, e_i: ArrayView1<f64>) -> f64 {
    let mut x = Array2::zeros((1, e_u.len() + e_i.len()));
    x.slice_mut(s![0, ..e_u.len()]).assign(&e_u);
    x.slice_mut(s![0, e_u.len()..]).assign(&e_i);
    d.predict(&x)[0]
}

/// Concatenated `[e_u ; e_i]` rows for a list of pairs.
pub fn pair_features(emb: &NodeMatrix, pairs: &[(usize, usize)]) -> Array2<f64> {
    let d = emb.dim();
    let mut x = Array2::zeros((pairs.len(), 2 * d));
    for (k, &(u, i)) in pairs.iter().enumerate() {
        x.slice_mut(s![k, ..d]).assign(&emb.user.row(u));
        x.slice_mut(s![k, d..]).assign(&emb.item.row(i));
    }
    x
}

/// Observed and unobserved candidate pairs of equal size.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateSets {
    pub pos: Vec<(usize, usize)>,
    pub neg: Vec<(usize, usize)>,
    pub alpha: f64,
}

impl CandidateSets {
    pub fn is_empty(&self) -> bool {
        self.pos.is_empty() && self.neg.is_empty()
    }
}

/// Samples `round(alpha * |E|)` distinct edges and as many distinct non-edges.
pub fn sample_candidates<R: Rng + ?Sized>(
    graph: &InteractionGraph,
    alpha: f64,
    rng: &mut R,
) -> Result<CandidateSets> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let m = (alpha * graph.num_edges() as f64).round() as usize;
    if m == 0 {
        return Ok(CandidateSets {
            alpha,
            ..CandidateSets::default()
        });
    }
    let pos: Vec<(usize, usize)> = index::sample(rng, graph.num_edges(), m)
        .into_iter()
        .map(|k| graph.edge_at(k))
        .collect();
    let neg = sample_non_edges(graph, m, &HashSet::new(), rng)?;
    Ok(CandidateSets { pos, neg, alpha })
}

/// `count` distinct uniformly drawn pairs that are neither edges nor in `avoid`.
pub(crate) fn sample_non_edges<R: Rng + ?Sized>(
    graph: &InteractionGraph,
    count: usize,
    avoid: &HashSet<(usize, usize)>,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let cells = graph.num_users() * graph.num_items();
    let available = cells.saturating_sub(graph.num_edges() + avoid.len());
    if count > available {
        return Err(Error::TooDense {
            found: available,
            wanted: count,
        });
    }
    let max_attempts = count.saturating_mul(graph.num_items().max(1)).max(64);
    let mut chosen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        if attempts >= max_attempts {
            return Err(Error::TooDense {
                found: out.len(),
                wanted: count,
            });
        }
        attempts += 1;
        let pair = (rng.random_range(0..graph.num_users()), rng.random_range(0..graph.num_items()));
        if !graph.has_edge(pair.0, pair.1) && !avoid.contains(&pair) && chosen.insert(pair) {
            out.push(pair);
        }
    }
    Ok(out)
}

/// Fits the discriminator on the candidates with full-batch Adam steps.
/// Returns the mean BCE before each step followed by the final value.
pub fn train_discriminator(
    d: &mut Discriminator,
    adam: &mut AdamState,
    candidates: &CandidateSets,
    emb: &NodeMatrix,
    steps: usize,
    lr: f64,
) -> Vec<f64> {
    let pairs: Vec<(usize, usize)> = candidates.pos.iter().chain(&candidates.neg).copied().collect();
    if pairs.is_empty() {
        return Vec::new();
    }
    let x = pair_features(emb, &pairs);
    let labels: Vec<f64> = std::iter::repeat_n(1.0, candidates.pos.len())
        .chain(std::iter::repeat_n(0.0, candidates.neg.len()))
        .collect();
    train_on_features(d, adam, &x, &labels, steps, lr)
}

pub(crate) fn train_on_features(
    d: &mut Discriminator,
    adam: &mut AdamState,
    x: &Array2<f64>,
    labels: &[f64],
    steps: usize,
    lr: f64,
) -> Vec<f64> {
    let mut history = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let (loss, grad) = d.bce_and_grad(x, labels);
        history.push(loss);
        adam_step(&mut d.params, &grad, adam, lr);
    }
    history.push(d.bce_and_grad(x, labels).0);
    history
}

fn ranked(pairs: &[(usize, usize)], scores: &[f64], descending: bool) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| {
        let by_score = if descending {
            scores[b].total_cmp(&scores[a])
        } else {
            scores[a].total_cmp(&scores[b])
        };
        by_score.then(pairs[a].cmp(&pairs[b]))
    });
    order.into_iter().map(|k| pairs[k]).collect()
}

/// Number of candidates kept for a selection fraction.
pub fn selection_count(fraction: f64, m: usize) -> usize {
    ((fraction * m as f64 - 1e-9).ceil().max(0.0) as usize).min(m)
}

/// Edits the discriminator is most confident about.
pub fn select_edits_by_score(
    candidates: &CandidateSets,
    pos_scores: &[f64],
    neg_scores: &[f64],
    fraction: f64,
) -> EditPlan {
    let mut deletions = ranked(&candidates.pos, pos_scores, true);
    deletions.truncate(selection_count(fraction, candidates.pos.len()));
    let mut insertions = ranked(&candidates.neg, neg_scores, false);
    insertions.truncate(selection_count(fraction, candidates.neg.len()));
    EditPlan {
        deletions,
        insertions,
    }
}

pub fn select_edits(
    d: &Discriminator,
    candidates: &CandidateSets,
    emb: &NodeMatrix,
    fraction: f64,
) -> EditPlan {
    let score = |pairs: &[(usize, usize)]| {
        if pairs.is_empty() {
            Vec::new()
        } else {
            d.predict(&pair_features(emb, pairs)).to_vec()
        }
    };
    select_edits_by_score(candidates, &score(&candidates.pos), &score(&candidates.neg), fraction)
}

/// A random plan with the given numbers of deletions and insertions.
pub fn random_plan<R: Rng + ?Sized>(
    graph: &InteractionGraph,
    deletions: usize,
    insertions: usize,
    rng: &mut R,
) -> Result<EditPlan> {
    let deletions = index::sample(rng, graph.num_edges(), deletions.min(graph.num_edges()))
        .into_iter()
        .map(|k| graph.edge_at(k))
        .collect();
    let insertions = sample_non_edges(graph, insertions, &HashSet::new(), rng)?;
    Ok(EditPlan {
        deletions,
        insertions,
    })
}

/// Random deletion of `round(ratio * |E|)` edges.
pub fn drop_edges<R: Rng + ?Sized>(graph: &InteractionGraph, ratio: f64, rng: &mut R) -> Result<EditPlan> {
    let count = (ratio.clamp(0.0, 1.0) * graph.num_edges() as f64).round() as usize;
    random_plan(graph, count, 0, rng)
}

/// Settings of one structure perturbation round.
#[derive(Debug, Clone, Copy)]
pub struct StructureSettings {
    pub alpha: f64,
    pub select_fraction: f64,
    pub steps: usize,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct PerturbOutcome {
    pub graph: PerturbedGraph,
    pub plan: EditPlan,
    /// Mean BCE trajectory of the discriminator update (empty if skipped).
    pub bce: Vec<f64>,
}

/// Sample, fit, select and apply against the original `graph`.
pub fn perturb<R: Rng + ?Sized>(
    graph: &InteractionGraph,
    d: &mut Discriminator,
    adam: &mut AdamState,
    settings: &StructureSettings,
    emb: &NodeMatrix,
    epoch: usize,
    rng: &mut R,
) -> Result<PerturbOutcome> {
    let candidates = sample_candidates(graph, settings.alpha, rng)?;
    if candidates.is_empty() {
        return Ok(PerturbOutcome {
            graph: graph.apply_edits(&EditPlan::default(), epoch)?,
            plan: EditPlan::default(),
            bce: Vec::new(),
        });
    }
    let bce = train_discriminator(d, adam, &candidates, emb, settings.steps, settings.lr);
    let plan = select_edits(d, &candidates, emb, settings.select_fraction);
    let graph = graph.apply_edits(&plan, epoch)?;
    Ok(PerturbOutcome { graph, plan, bce })
}
