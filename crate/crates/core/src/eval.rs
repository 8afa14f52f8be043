//! Full-ranking top-N evaluation and the robustness experiments.

use std::collections::HashSet;
use std::fmt::Write as _;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSplit;
use crate::encoder::{top_n, user_scores, NodeMatrix, Side};
use crate::error::{Error, Result};
use crate::graph::InteractionGraph;
use crate::structure::sample_non_edges;

/// Fraction of `relevant` found in the first `n` entries of `ranked`.
/// `relevant` must be sorted ascending and non-empty.
pub fn recall_at(ranked: &[usize], relevant: &[usize], n: usize) -> f64 {
    hits(ranked, relevant, n).count() as f64 / relevant.len() as f64
}

fn hits<'a>(ranked: &'a [usize], relevant: &'a [usize], n: usize) -> impl Iterator<Item = usize> + 'a {
    ranked
        .iter()
        .take(n)
        .enumerate()
        .filter(move |(_, item)| relevant.binary_search(item).is_ok())
        .map(|(r, _)| r)
}

fn discount(rank0: usize) -> f64 {
    1.0 / ((rank0 + 2) as f64).log2()
}

/// Binary-relevance NDCG with the ideal ranking truncated at
/// `min(n, |relevant|)`. `relevant` must be sorted ascending and non-empty.
pub fn ndcg_at(ranked: &[usize], relevant: &[usize], n: usize) -> f64 {
    let dcg: f64 = hits(ranked, relevant, n).map(discount).sum();
    let idcg: f64 = (0..n.min(relevant.len())).map(discount).sum();
    dcg / idcg
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Val,
    Test,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Val => "val",
            Phase::Test => "test",
        }
    }
}

/// Per-user train, validation and test item lists, sorted ascending.
#[derive(Debug, Clone)]
pub struct EvalIndex {
    pub train: Vec<Vec<usize>>,
    pub val: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
    pub num_items: usize,
}

fn by_user(num_users: usize, pairs: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); num_users];
    for &(u, i) in pairs {
        out[u].push(i);
    }
    for row in &mut out {
        row.sort_unstable();
        row.dedup();
    }
    out
}

impl EvalIndex {
    pub fn new(split: &DatasetSplit) -> Self {
        EvalIndex {
            train: by_user(split.num_users, &split.train),
            val: by_user(split.num_users, &split.val),
            test: by_user(split.num_users, &split.test),
            num_items: split.num_items,
        }
    }

    pub fn num_users(&self) -> usize {
        self.train.len()
    }

    pub fn ground_truth(&self, phase: Phase, user: usize) -> &[usize] {
        match phase {
            Phase::Val => &self.val[user],
            Phase::Test => &self.test[user],
        }
    }

    /// Items hidden from the ranking: train items, plus validation items in
    /// the test phase.
    pub fn is_excluded(&self, phase: Phase, user: usize, item: usize) -> bool {
        self.train[user].binary_search(&item).is_ok()
            || (phase == Phase::Test && self.val[user].binary_search(&item).is_ok())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffMetrics {
    pub n: usize,
    pub recall: f64,
    pub ndcg: f64,
}

/// Metrics of one user at every requested cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct UserMetrics {
    pub user: usize,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub side: String,
    pub name: String,
    pub nodes: usize,
    pub users_evaluated: usize,
    pub metrics: Vec<CutoffMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub phase: Phase,
    pub metrics: Vec<CutoffMetrics>,
    pub users_evaluated: usize,
    pub users_skipped: usize,
    pub buckets: Vec<BucketReport>,
}

pub const CSV_HEADER: &str = "mode,dataset,seed,phase,bucket,n,recall,ndcg,users";

impl EvalReport {
    pub fn at(&self, n: usize) -> Option<&CutoffMetrics> {
        self.metrics.iter().find(|m| m.n == n)
    }

    pub fn recall(&self, n: usize) -> Option<f64> {
        self.at(n).map(|m| m.recall)
    }

    pub fn ndcg(&self, n: usize) -> Option<f64> {
        self.at(n).map(|m| m.ndcg)
    }

    /// One CSV row per cutoff and per bucket cutoff, matching [`CSV_HEADER`].
    pub fn csv_rows(&self, mode: &str, dataset: &str, seed: u64) -> String {
        let mut out = String::new();
        let mut row = |bucket: &str, users: usize, m: &CutoffMetrics| {
            let _ = writeln!(
                out,
                "{mode},{dataset},{seed},{},{bucket},{},{:.6},{:.6},{users}",
                self.phase.name(),
                m.n,
                m.recall,
                m.ndcg
            );
        };
        for m in &self.metrics {
            row("all", self.users_evaluated, m);
        }
        for b in &self.buckets {
            for m in &b.metrics {
                row(&format!("{}_{}", b.side, b.name), b.users_evaluated, m);
            }
        }
        out
    }
}

fn average(cutoffs: &[usize], rows: &[&UserMetrics]) -> Vec<CutoffMetrics> {
    let n = rows.len().max(1) as f64;
    cutoffs
        .iter()
        .enumerate()
        .map(|(k, &c)| CutoffMetrics {
            n: c,
            recall: rows.iter().map(|r| r.recall[k]).sum::<f64>() / n,
            ndcg: rows.iter().map(|r| r.ndcg[k]).sum::<f64>() / n,
        })
        .collect()
}

/// Ranks all non-excluded items for every user with non-empty ground truth.
/// `keep` restricts each user's ground truth (used for item buckets).
pub fn per_user_metrics(
    final_emb: &NodeMatrix,
    index: &EvalIndex,
    phase: Phase,
    cutoffs: &[usize],
    keep: Option<&HashSet<usize>>,
) -> Vec<UserMetrics> {
    let max_n = cutoffs.iter().copied().max().unwrap_or(0);
    (0..index.num_users())
        .into_par_iter()
        .with_min_len(16)
        .filter_map(|u| {
            let relevant: Vec<usize> = index
                .ground_truth(phase, u)
                .iter()
                .copied()
                .filter(|i| keep.is_none_or(|k| k.contains(i)))
                .collect();
            if relevant.is_empty() {
                return None;
            }
            let scores = user_scores(final_emb, u);
            let ranked = top_n(&scores, |i| index.is_excluded(phase, u, i), max_n);
            Some(UserMetrics {
                user: u,
                recall: cutoffs.iter().map(|&n| recall_at(&ranked, &relevant, n)).collect(),
                ndcg: cutoffs.iter().map(|&n| ndcg_at(&ranked, &relevant, n)).collect(),
            })
        })
        .collect()
}

/// Averages over users with non-empty ground truth in `phase`.
pub fn evaluate_full_ranking(
    final_emb: &NodeMatrix,
    index: &EvalIndex,
    phase: Phase,
    cutoffs: &[usize],
) -> EvalReport {
    let rows = per_user_metrics(final_emb, index, phase, cutoffs, None);
    let refs: Vec<&UserMetrics> = rows.iter().collect();
    EvalReport {
        phase,
        metrics: average(cutoffs, &refs),
        users_evaluated: rows.len(),
        users_skipped: index.num_users() - rows.len(),
        buckets: Vec::new(),
    }
}

/// Global report plus five-way sparsity breakdowns on both sides.
pub fn evaluate_with_buckets(
    final_emb: &NodeMatrix,
    split: &DatasetSplit,
    index: &EvalIndex,
    phase: Phase,
    cutoffs: &[usize],
    k: usize,
) -> EvalReport {
    let rows = per_user_metrics(final_emb, index, phase, cutoffs, None);
    let refs: Vec<&UserMetrics> = rows.iter().collect();
    let mut report = EvalReport {
        phase,
        metrics: average(cutoffs, &refs),
        users_evaluated: rows.len(),
        users_skipped: index.num_users() - rows.len(),
        buckets: Vec::new(),
    };
    for (b, members) in sparsity_buckets(split, Side::User, k).into_iter().enumerate() {
        let set: HashSet<usize> = members.iter().copied().collect();
        let sel: Vec<&UserMetrics> = rows.iter().filter(|r| set.contains(&r.user)).collect();
        report.buckets.push(BucketReport {
            side: "user".into(),
            name: format!("test{}", b + 1),
            nodes: members.len(),
            users_evaluated: sel.len(),
            metrics: average(cutoffs, &sel),
        });
    }
    for (b, members) in sparsity_buckets(split, Side::Item, k).into_iter().enumerate() {
        let set: HashSet<usize> = members.iter().copied().collect();
        let sub = per_user_metrics(final_emb, index, phase, cutoffs, Some(&set));
        let sel: Vec<&UserMetrics> = sub.iter().collect();
        report.buckets.push(BucketReport {
            side: "item".into(),
            name: format!("test{}", b + 1),
            nodes: members.len(),
            users_evaluated: sel.len(),
            metrics: average(cutoffs, &sel),
        });
    }
    report
}

/// Splits the nodes of one side into `k` equal-population groups ordered by
/// ascending train degree (ties by index). The first `n mod k` groups get
/// one extra node.
pub fn sparsity_buckets(split: &DatasetSplit, side: Side, k: usize) -> Vec<Vec<usize>> {
    let n = match side {
        Side::User => split.num_users,
        Side::Item => split.num_items,
    };
    let mut counts = vec![0usize; n];
    for &(u, i) in &split.train {
        counts[match side {
            Side::User => u,
            Side::Item => i,
        }] += 1;
    }
    buckets_by_count(&counts, k)
}

pub fn buckets_by_count(counts: &[usize], k: usize) -> Vec<Vec<usize>> {
    let k = k.max(1);
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&v| (counts[v], v));
    let base = counts.len() / k;
    let extra = counts.len() % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for b in 0..k {
        let len = base + usize::from(b < extra);
        out.push(order[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Mean per-row cosine similarity. Rows where either side is zero count
/// as 0.
pub fn view_similarity(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("views {:?} and {:?} differ", a.dim(), b.dim())));
    }
    if a.nrows() == 0 {
        return Ok(0.0);
    }
    let mut zero = false;
    let total: f64 = a
        .rows()
        .into_iter()
        .zip(b.rows())
        .map(|(x, y)| {
            let nx = x.dot(&x).sqrt();
            let ny = y.dot(&y).sqrt();
            if nx == 0.0 || ny == 0.0 {
                zero = true;
                0.0
            } else {
                x.dot(&y) / (nx * ny)
            }
        })
        .sum();
    if zero {
        log::warn!("zero vector in view similarity; counted as 0");
    }
    Ok(total / a.nrows() as f64)
}

/// Cosine similarity averaged over all users and items.
pub fn node_view_similarity(a: &NodeMatrix, b: &NodeMatrix) -> Result<f64> {
    let su = view_similarity(&a.user, &b.user)?;
    let si = view_similarity(&a.item, &b.item)?;
    let (nu, ni) = (a.num_users() as f64, a.num_items() as f64);
    Ok(if nu + ni == 0.0 {
        0.0
    } else {
        (su * nu + si * ni) / (nu + ni)
    })
}

/// Adds `ceil(ratio * |E|)` uniformly drawn non-edges.
pub fn inject_noise<R: Rng + ?Sized>(
    graph: &InteractionGraph,
    ratio: f64,
    rng: &mut R,
) -> Result<InteractionGraph> {
    if !(ratio >= 0.0 && ratio.is_finite()) {
        return Err(Error::Config(format!("noise ratio must be non-negative, got {ratio}")));
    }
    let count = (ratio * graph.num_edges() as f64 - 1e-9).ceil().max(0.0) as usize;
    let extra = sample_non_edges(graph, count, &HashSet::new(), rng)?;
    graph.with_extra_edges(&extra)
}

/// Like [`inject_noise`], on the train portion of a split.
pub fn inject_noise_split<R: Rng + ?Sized>(
    split: &DatasetSplit,
    ratio: f64,
    rng: &mut R,
) -> Result<DatasetSplit> {
    let graph = split.train_graph()?;
    let noisy = inject_noise(&graph, ratio, rng)?;
    let mut out = split.clone();
    out.train = noisy.edges().collect();
    Ok(out)
}
