//! Training objectives and their analytic gradients.
//!
//! The joint loss is `bpr + lambda1 * (cl_user + cl_item) + lambda2 * reg`.
//! Gradients flow from the final and per-layer representations back through
//! the mean merge and every propagation step to the layer-0 table; when the
//! projection perturbator is active the same reverse sweep also yields the
//! gradient of the contrastive part with respect to its projections.

use std::sync::atomic::{AtomicBool, Ordering};

use log::warn;
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::BprBatch;
use crate::encoder::{forward, propagate, EmbeddingTable, ForwardTrace, NodeMatrix, Perturbation, Side};
use crate::error::{Error, Result};
use crate::graph::InteractionGraph;

/// `-ln sigma(x)` without overflow.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    softplus(-x)
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Summed BPR loss over the batch and its gradient with respect to the
/// final representations.
pub fn bpr_loss(final_emb: &NodeMatrix, batch: &BprBatch) -> (f64, NodeMatrix) {
    let mut grad = NodeMatrix::zeros_like(final_emb);
    let mut loss = 0.0;
    for t in &batch.triples {
        let u = final_emb.user.row(t.user);
        let i = final_emb.item.row(t.pos);
        let j = final_emb.item.row(t.neg);
        let x = u.dot(&i) - u.dot(&j);
        loss += neg_log_sigmoid(x);
        let g = -sigmoid(-x);
        grad.user.row_mut(t.user).scaled_add(g, &(&i - &j));
        grad.item.row_mut(t.pos).scaled_add(g, &u);
        grad.item.row_mut(t.neg).scaled_add(-g, &u);
    }
    (loss, grad)
}

/// Which nodes serve as contrastive negatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativePool {
    /// Distinct users / positive items of the current batch.
    InBatch,
    /// Every user / item.
    Full,
}

#[derive(Debug, Clone)]
pub struct InfoNce {
    pub loss: f64,
    /// Same shape as the input views; zero outside the pooled rows.
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
}

static ZERO_ROW_WARNED: AtomicBool = AtomicBool::new(false);

fn normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut out = x.clone();
    for (mut row, &n) in out.rows_mut().into_iter().zip(norms.iter()) {
        if n > 0.0 {
            row /= n;
        } else {
            row.fill(0.0);
            if !ZERO_ROW_WARNED.swap(true, Ordering::Relaxed) {
                warn!("zero embedding in a contrastive view; its cosine is taken as 0");
            }
        }
    }
    (out, norms)
}

/// Gradient through `x / |x|` given the normalized row and the norm.
fn unnormalize_grad(normed: &Array2<f64>, norms: &Array1<f64>, g: &Array2<f64>) -> Array2<f64> {
    let mut out = g.clone();
    for ((mut row, a), &n) in out.rows_mut().into_iter().zip(normed.rows()).zip(norms.iter()) {
        if n > 0.0 {
            let proj = a.dot(&row);
            row.scaled_add(-proj, &a);
            row /= n;
        } else {
            row.fill(0.0);
        }
    }
    out
}

/// Summed InfoNCE over `nodes`: for each node `n` the positive is the same
/// node in the other view and the denominator ranges over every pooled node
/// of view `b`. Similarities are cosines scaled by `1 / tau`.
pub fn infonce_loss(view_a: &Array2<f64>, view_b: &Array2<f64>, nodes: &[usize], tau: f64) -> InfoNce {
    assert!(tau > 0.0, "temperature must be positive");
    let mut grad_a = Array2::zeros(view_a.raw_dim());
    let mut grad_b = Array2::zeros(view_b.raw_dim());
    if nodes.is_empty() {
        return InfoNce {
            loss: 0.0,
            grad_a,
            grad_b,
        };
    }
    let a = view_a.select(Axis(0), nodes);
    let b = view_b.select(Axis(0), nodes);
    let (an, a_norm) = normalize_rows(&a);
    let (bn, b_norm) = normalize_rows(&b);

    let mut sim = an.dot(&bn.t());
    sim /= tau;
    let mut loss = 0.0;
    for (n, mut row) in sim.rows_mut().into_iter().enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|s| (s - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[n];
        // row becomes d loss / d sim
        row.mapv_inplace(|s| (s - lse).exp());
        row[n] -= 1.0;
    }
    let d_sim = sim;
    let mut d_an = d_sim.dot(&bn);
    d_an /= tau;
    let mut d_bn = d_sim.t().dot(&an);
    d_bn /= tau;
    let d_a = unnormalize_grad(&an, &a_norm, &d_an);
    let d_b = unnormalize_grad(&bn, &b_norm, &d_bn);
    for (k, &node) in nodes.iter().enumerate() {
        grad_a.row_mut(node).scaled_add(1.0, &d_a.row(k));
        grad_b.row_mut(node).scaled_add(1.0, &d_b.row(k));
    }
    InfoNce { loss, grad_a, grad_b }
}

/// Squared norm of the layer-0 rows touched by the batch, one term per
/// occurrence, and its gradient.
pub fn batch_regularizer(table: &EmbeddingTable, batch: &BprBatch) -> (f64, NodeMatrix) {
    let mut grad = NodeMatrix::zeros_like(table);
    let mut reg = 0.0;
    for t in &batch.triples {
        for (side, idx) in [(Side::User, t.user), (Side::Item, t.pos), (Side::Item, t.neg)] {
            let row = table.side(side).row(idx);
            reg += row.dot(&row);
            grad.side_mut(side).row_mut(idx).scaled_add(2.0, &row);
        }
    }
    (reg, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bpr: f64,
    pub cl_user: f64,
    pub cl_item: f64,
    pub reg: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
}

impl LossBreakdown {
    pub fn new(bpr: f64, cl_user: f64, cl_item: f64, reg: f64, cfg: &LossConfig) -> Self {
        LossBreakdown {
            bpr,
            cl_user,
            cl_item,
            reg,
            total: bpr + cfg.lambda1 * (cl_user + cl_item) + cfg.lambda2 * reg,
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
            tau: cfg.tau,
        }
    }

    pub fn contrastive(&self) -> f64 {
        self.cl_user + self.cl_item
    }

    /// Component-wise sum, used to aggregate mini-batches.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.bpr += other.bpr;
        self.cl_user += other.cl_user;
        self.cl_item += other.cl_item;
        self.reg += other.reg;
        self.total += other.total;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub pool: NegativePool,
}

/// The pair of representations contrasted by InfoNCE.
#[derive(Clone, Copy)]
pub enum ContrastViews<'a> {
    None,
    /// Final representation vs. layer `l` of the same forward pass.
    FinalVsLayer(usize),
    /// Final representations of two extra passes over augmented graphs.
    TwoGraphs {
        a: &'a InteractionGraph,
        b: &'a InteractionGraph,
    },
}

/// Everything the joint objective needs besides parameters and the batch.
#[derive(Clone, Copy)]
pub struct ModelViews<'a> {
    /// Graph of the recommendation pass.
    pub graph: &'a InteractionGraph,
    pub num_layers: usize,
    pub perturbation: Perturbation<'a>,
    pub contrast: ContrastViews<'a>,
}

/// Upstream gradients arriving at a trace.
#[derive(Debug, Clone, Default)]
pub struct TraceGrad {
    pub final_grad: Option<NodeMatrix>,
    pub layer_grads: Vec<(usize, NodeMatrix)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    pub emb: NodeMatrix,
    pub k_user: Option<Array2<f64>>,
    pub k_item: Option<Array2<f64>>,
}

impl GradBuffer {
    pub fn is_finite(&self) -> bool {
        self.emb.is_finite()
            && self
                .k_user
                .iter()
                .chain(self.k_item.iter())
                .all(|k| k.iter().all(|x| x.is_finite()))
    }
}

/// Reverse sweep through the mean merge and the propagation recurrence.
pub fn backward(
    graph: &InteractionGraph,
    trace: &ForwardTrace,
    perturbation: Perturbation<'_>,
    upstream: &TraceGrad,
) -> Result<GradBuffer> {
    let num_layers = trace.num_layers();
    for (l, _) in &upstream.layer_grads {
        trace.layer(*l)?;
    }
    let base = &trace.layers[0];
    let share = upstream.final_grad.as_ref().map(|g| {
        let mut s = g.clone();
        s.scale(1.0 / (num_layers + 1) as f64);
        s
    });
    let direct = |l: usize, acc: &mut NodeMatrix| {
        if let Some(s) = &share {
            acc.add_assign(s);
        }
        for (idx, g) in &upstream.layer_grads {
            if *idx == l {
                acc.add_assign(g);
            }
        }
    };

    let (projection, omega) = match perturbation {
        Perturbation::Projection {
            perturbator,
            variant,
        } if perturbator.omega != 0.0 => (Some((perturbator, variant)), perturbator.omega),
        _ => (None, 0.0),
    };
    let d = base.dim();
    let mut k_user = projection.map(|_| Array2::zeros((d, d)));
    let mut k_item = projection.map(|_| Array2::zeros((d, d)));

    let mut g = NodeMatrix::zeros_like(base);
    direct(num_layers, &mut g);
    for l in (0..num_layers).rev() {
        let mut prev = propagate(graph, &g);
        if let Some((p, variant)) = projection {
            for side in [Side::User, Side::Item] {
                let up = g.side(side) * omega;
                let (d_layer, d_k) =
                    p.layer_perturbation_backward(side, variant, trace.layers[l].side(side), &up);
                if let Some(d_layer) = d_layer {
                    *prev.side_mut(side) += &d_layer;
                }
                let acc = match side {
                    Side::User => k_user.as_mut(),
                    Side::Item => k_item.as_mut(),
                };
                *acc.expect("allocated with projection") += &d_k;
            }
        }
        direct(l, &mut prev);
        g = prev;
    }
    Ok(GradBuffer {
        emb: g,
        k_user,
        k_item,
    })
}

/// Result of one evaluation of the joint objective.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub losses: LossBreakdown,
    /// Gradient of the total loss for the table; gradient of the
    /// contrastive part alone for the projections.
    pub grads: GradBuffer,
    pub trace: ForwardTrace,
}

/// Forward pass, joint loss and all gradients for one batch.
pub fn joint_step(
    views: &ModelViews<'_>,
    table: &EmbeddingTable,
    batch: &BprBatch,
    cfg: &LossConfig,
) -> Result<StepOutput> {
    let trace = forward(views.graph, table, views.num_layers, views.perturbation)?;
    let (bpr, d_final) = bpr_loss(&trace.final_emb, batch);
    let (reg, d_reg) = batch_regularizer(table, batch);

    let (users, items) = match cfg.pool {
        NegativePool::InBatch => (batch.unique_users(), batch.unique_pos_items()),
        NegativePool::Full => ((0..table.num_users()).collect(), (0..table.num_items()).collect()),
    };
    let contrast_pair = |a: &NodeMatrix, b: &NodeMatrix| {
        let u = infonce_loss(&a.user, &b.user, &users, cfg.tau);
        let i = infonce_loss(&a.item, &b.item, &items, cfg.tau);
        let ga = NodeMatrix {
            user: u.grad_a,
            item: i.grad_a,
        };
        let gb = NodeMatrix {
            user: u.grad_b,
            item: i.grad_b,
        };
        (u.loss, i.loss, ga, gb)
    };

    let bpr_up = TraceGrad {
        final_grad: Some(d_final),
        layer_grads: vec![],
    };
    let mut grads = backward(views.graph, &trace, views.perturbation, &bpr_up)?;
    grads.k_user = None;
    grads.k_item = None;

    let (cl_user, cl_item) = match views.contrast {
        ContrastViews::None => (0.0, 0.0),
        ContrastViews::FinalVsLayer(l) => {
            let layer = trace.layer(l)?;
            let (lu, li, ga, gb) = contrast_pair(&trace.final_emb, layer);
            let cl_up = TraceGrad {
                final_grad: Some(ga),
                layer_grads: vec![(l, gb)],
            };
            let cl = backward(views.graph, &trace, views.perturbation, &cl_up)?;
            grads.emb.scaled_add(cfg.lambda1, &cl.emb);
            grads.k_user = cl.k_user;
            grads.k_item = cl.k_item;
            (lu, li)
        }
        ContrastViews::TwoGraphs { a, b } => {
            let ta = forward(a, table, views.num_layers, Perturbation::None)?;
            let tb = forward(b, table, views.num_layers, Perturbation::None)?;
            let (lu, li, ga, gb) = contrast_pair(&ta.final_emb, &tb.final_emb);
            for (g, t, up) in [(a, &ta, ga), (b, &tb, gb)] {
                let cl_up = TraceGrad {
                    final_grad: Some(up),
                    layer_grads: vec![],
                };
                let cl = backward(g, t, Perturbation::None, &cl_up)?;
                grads.emb.scaled_add(cfg.lambda1, &cl.emb);
            }
            (lu, li)
        }
    };
    grads.emb.scaled_add(cfg.lambda2, &d_reg);

    let losses = LossBreakdown::new(bpr, cl_user, cl_item, reg, cfg);
    if !losses.total.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            loss: losses.total,
        });
    }
    Ok(StepOutput {
        losses,
        grads,
        trace,
    })
}
