//! Sparse bipartite user-item interaction graph.
//!
//! Adjacency is kept in compressed sorted form in both directions so that
//! propagation can walk either side and non-edge checks are a binary search.
//! Every stored edge carries the symmetric normalization weight
//! `1 / sqrt(deg(u) * deg(i))`.

use std::collections::HashSet;
use std::hash::{DefaultHasher, Hash, Hasher};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionGraph {
    num_users: usize,
    num_items: usize,
    user_offsets: Vec<usize>,
    user_items: Vec<u32>,
    user_coef: Vec<f64>,
    item_offsets: Vec<usize>,
    item_users: Vec<u32>,
    item_coef: Vec<f64>,
}

impl InteractionGraph {
    /// Builds a graph from `(user, item)` pairs. Duplicates are collapsed.
    pub fn build(edges: &[(usize, usize)], num_users: usize, num_items: usize) -> Result<Self> {
        for &(user, item) in edges {
            if user >= num_users || item >= num_items {
                return Err(Error::EdgeOutOfRange {
                    user,
                    item,
                    num_users,
                    num_items,
                });
            }
        }
        let mut sorted: Vec<(u32, u32)> = edges
            .iter()
            .map(|&(u, i)| (u as u32, i as u32))
            .collect();
        sorted.sort_unstable();
        sorted.dedup();
        Ok(Self::from_sorted_unique(&sorted, num_users, num_items))
    }

    fn from_sorted_unique(edges: &[(u32, u32)], num_users: usize, num_items: usize) -> Self {
        let mut user_offsets = vec![0usize; num_users + 1];
        let mut item_offsets = vec![0usize; num_items + 1];
        for &(u, i) in edges {
            user_offsets[u as usize + 1] += 1;
            item_offsets[i as usize + 1] += 1;
        }
        for k in 0..num_users {
            user_offsets[k + 1] += user_offsets[k];
        }
        for k in 0..num_items {
            item_offsets[k + 1] += item_offsets[k];
        }

        let user_items: Vec<u32> = edges.iter().map(|&(_, i)| i).collect();

        // Edges arrive user-major, so filling item rows in that order keeps
        // every item row sorted by user.
        let mut item_users = vec![0u32; edges.len()];
        let mut cursor = item_offsets.clone();
        for &(u, i) in edges {
            item_users[cursor[i as usize]] = u;
            cursor[i as usize] += 1;
        }

        let user_deg = |u: usize| user_offsets[u + 1] - user_offsets[u];
        let item_deg = |i: usize| item_offsets[i + 1] - item_offsets[i];
        let coef = |u: usize, i: usize| 1.0 / ((user_deg(u) * item_deg(i)) as f64).sqrt();

        let user_coef = edges
            .iter()
            .map(|&(u, i)| coef(u as usize, i as usize))
            .collect();
        let mut item_coef = vec![0.0; edges.len()];
        for i in 0..num_items {
            for k in item_offsets[i]..item_offsets[i + 1] {
                item_coef[k] = coef(item_users[k] as usize, i);
            }
        }

        InteractionGraph {
            num_users,
            num_items,
            user_offsets,
            user_items,
            user_coef,
            item_offsets,
            item_users,
            item_coef,
        }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_edges(&self) -> usize {
        self.user_items.len()
    }

    pub fn user_degree(&self, user: usize) -> usize {
        self.user_offsets[user + 1] - self.user_offsets[user]
    }

    pub fn item_degree(&self, item: usize) -> usize {
        self.item_offsets[item + 1] - self.item_offsets[item]
    }

    /// Sorted items adjacent to `user`.
    pub fn user_items(&self, user: usize) -> &[u32] {
        &self.user_items[self.user_offsets[user]..self.user_offsets[user + 1]]
    }

    /// Sorted users adjacent to `item`.
    pub fn item_users(&self, item: usize) -> &[u32] {
        &self.item_users[self.item_offsets[item]..self.item_offsets[item + 1]]
    }

    /// Neighbors of `user` with their normalization weights.
    pub fn user_row(&self, user: usize) -> (&[u32], &[f64]) {
        let range = self.user_offsets[user]..self.user_offsets[user + 1];
        (&self.user_items[range.clone()], &self.user_coef[range])
    }

    /// Neighbors of `item` with their normalization weights.
    pub fn item_row(&self, item: usize) -> (&[u32], &[f64]) {
        let range = self.item_offsets[item]..self.item_offsets[item + 1];
        (&self.item_users[range.clone()], &self.item_coef[range])
    }

    pub fn has_edge(&self, user: usize, item: usize) -> bool {
        user < self.num_users
            && item < self.num_items
            && self.user_items(user).binary_search(&(item as u32)).is_ok()
    }

    pub fn normalized_coefficient(&self, user: usize, item: usize) -> Result<f64> {
        if !self.has_edge(user, item) {
            return Err(Error::NotAnEdge { user, item });
        }
        let pos = self.user_offsets[user]
            + self
                .user_items(user)
                .binary_search(&(item as u32))
                .expect("edge checked above");
        Ok(self.user_coef[pos])
    }

    /// All edges in user-major, item-ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_users)
            .flat_map(move |u| self.user_items(u).iter().map(move |&i| (u, i as usize)))
    }

    /// The `k`-th edge in [`edges`](Self::edges) order.
    pub fn edge_at(&self, k: usize) -> (usize, usize) {
        let user = self.user_offsets.partition_point(|&off| off <= k) - 1;
        (user, self.user_items[k] as usize)
    }

    /// Stable fingerprint of the edge set and node counts.
    pub fn content_hash(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        self.num_users.hash(&mut hasher);
        self.num_items.hash(&mut hasher);
        self.user_offsets.hash(&mut hasher);
        self.user_items.hash(&mut hasher);
        hasher.finish()
    }

    /// Returns `edges \ deletions ∪ insertions` with weights recomputed from
    /// the new degrees.
    pub fn apply_edits(&self, plan: &EditPlan, epoch: usize) -> Result<PerturbedGraph> {
        plan.validate_against(self)?;
        let deleted: HashSet<(usize, usize)> = plan.deletions.iter().copied().collect();
        let mut edges: Vec<(u32, u32)> = self
            .edges()
            .filter(|e| !deleted.contains(e))
            .chain(plan.insertions.iter().copied())
            .map(|(u, i)| (u as u32, i as u32))
            .collect();
        edges.sort_unstable();
        Ok(PerturbedGraph {
            graph: Self::from_sorted_unique(&edges, self.num_users, self.num_items),
            source_hash: self.content_hash(),
            epoch,
        })
    }

    /// Graph with additional edges (used for noise injection).
    pub(crate) fn with_extra_edges(&self, extra: &[(usize, usize)]) -> Result<Self> {
        let mut edges: Vec<(usize, usize)> = self.edges().collect();
        edges.extend_from_slice(extra);
        Self::build(&edges, self.num_users, self.num_items)
    }
}

/// Edges to remove from and add to a graph.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EditPlan {
    pub deletions: Vec<(usize, usize)>,
    pub insertions: Vec<(usize, usize)>,
}

impl EditPlan {
    pub fn is_empty(&self) -> bool {
        self.deletions.is_empty() && self.insertions.is_empty()
    }

    /// The plan that undoes this one.
    pub fn inverse(&self) -> EditPlan {
        EditPlan {
            deletions: self.insertions.clone(),
            insertions: self.deletions.clone(),
        }
    }

    pub fn validate_against(&self, graph: &InteractionGraph) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.deletions.len() + self.insertions.len());
        for &(u, i) in &self.deletions {
            if !graph.has_edge(u, i) {
                return Err(Error::InvalidEdit(format!(
                    "deletion ({u}, {i}) is not an edge"
                )));
            }
            if !seen.insert((u, i)) {
                return Err(Error::InvalidEdit(format!("deletion ({u}, {i}) repeated")));
            }
        }
        for &(u, i) in &self.insertions {
            if u >= graph.num_users() || i >= graph.num_items() {
                return Err(Error::EdgeOutOfRange {
                    user: u,
                    item: i,
                    num_users: graph.num_users(),
                    num_items: graph.num_items(),
                });
            }
            if graph.has_edge(u, i) {
                return Err(Error::InvalidEdit(format!(
                    "insertion ({u}, {i}) is already an edge"
                )));
            }
            if !seen.insert((u, i)) {
                return Err(Error::InvalidEdit(format!(
                    "insertion ({u}, {i}) repeated or also deleted"
                )));
            }
        }
        Ok(())
    }
}

/// A graph derived from an original graph by one edit plan.
#[derive(Debug, Clone)]
pub struct PerturbedGraph {
    pub graph: InteractionGraph,
    /// `content_hash` of the graph the edits were applied to.
    pub source_hash: u64,
    pub epoch: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_graph(rng: &mut ChaCha8Rng, nu: usize, ni: usize, edges: usize) -> InteractionGraph {
        let mut set = HashSet::new();
        while set.len() < edges {
            set.insert((rng.random_range(0..nu), rng.random_range(0..ni)));
        }
        let list: Vec<_> = set.into_iter().collect();
        InteractionGraph::build(&list, nu, ni).unwrap()
    }

    #[test]
    fn minimal_graph() {
        let g = InteractionGraph::build(&[(0, 0)], 1, 1).unwrap();
        assert_eq!(g.num_edges(), 1);
        assert_eq!(g.user_degree(0), 1);
        assert_eq!(g.item_degree(0), 1);
        assert_eq!(g.normalized_coefficient(0, 0).unwrap(), 1.0);
    }

    #[test]
    fn duplicates_collapse() {
        let g = InteractionGraph::build(&[(0, 0), (0, 0)], 1, 1).unwrap();
        assert_eq!(g.num_edges(), 1);
    }

    #[test]
    fn out_of_range_rejected() {
        let err = InteractionGraph::build(&[(0, 0), (2, 0)], 2, 1).unwrap_err();
        assert!(matches!(err, Error::EdgeOutOfRange { user: 2, item: 0, .. }));
    }

    #[test]
    fn yelp_shaped_counts() {
        // 45,478 users x 30,709 items with 1,777,765 interactions.
        let (nu, ni, ne) = (45_478usize, 30_709usize, 1_777_765usize);
        let edges: Vec<(usize, usize)> = (0..ne)
            .map(|k| (k % nu, (k / nu * 7919 + k * 31) % ni))
            .collect();
        let g = InteractionGraph::build(&edges, nu, ni).unwrap();
        let mut unique = edges.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(g.num_edges(), unique.len());
        let total_user: usize = (0..nu).map(|u| g.user_degree(u)).sum();
        let total_item: usize = (0..ni).map(|i| g.item_degree(i)).sum();
        assert_eq!(total_user, g.num_edges());
        assert_eq!(total_item, g.num_edges());
    }

    #[test]
    fn coefficient_values() {
        // user 0 has degree 4, item 0 degree 1
        let g = InteractionGraph::build(&[(0, 0), (0, 1), (0, 2), (0, 3)], 1, 4).unwrap();
        assert_eq!(g.normalized_coefficient(0, 0).unwrap(), 0.5);

        // user 0 degree 3, item 0 degree 5
        let mut edges = vec![(0, 0), (0, 1), (0, 2)];
        edges.extend((1..5).map(|u| (u, 0)));
        let g = InteractionGraph::build(&edges, 5, 3).unwrap();
        let c = g.normalized_coefficient(0, 0).unwrap();
        assert!((c - 1.0 / 15f64.sqrt()).abs() < 1e-15);
        assert!((c - 0.2582).abs() < 1e-4);
        assert!(matches!(
            g.normalized_coefficient(1, 1),
            Err(Error::NotAnEdge { user: 1, item: 1 })
        ));
    }

    #[test]
    fn edge_at_matches_iteration_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_graph(&mut rng, 17, 23, 90);
        for (k, e) in g.edges().enumerate() {
            assert_eq!(g.edge_at(k), e);
        }
    }

    #[test]
    fn empty_plan_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_graph(&mut rng, 10, 10, 30);
        let p = g.apply_edits(&EditPlan::default(), 0).unwrap();
        assert_eq!(p.graph, g);
        assert_eq!(p.source_hash, g.content_hash());
    }

    #[test]
    fn deleting_only_edge_isolates_user() {
        let g = InteractionGraph::build(&[(0, 0), (1, 0), (1, 1)], 2, 2).unwrap();
        let plan = EditPlan {
            deletions: vec![(0, 0)],
            insertions: vec![],
        };
        let p = g.apply_edits(&plan, 0).unwrap();
        assert_eq!(p.graph.user_degree(0), 0);
        assert_eq!(p.graph.item_degree(0), 1);
        assert_eq!(p.graph.normalized_coefficient(1, 0).unwrap(), 1.0 / 2f64.sqrt());
    }

    #[test]
    fn balanced_edits_keep_edge_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = random_graph(&mut rng, 60, 80, 1000);
        let edges: Vec<_> = g.edges().collect();
        let deletions: Vec<_> = edges.iter().step_by(50).copied().take(20).collect();
        let mut insertions = Vec::new();
        while insertions.len() < 20 {
            let e = (rng.random_range(0..60), rng.random_range(0..80));
            if !g.has_edge(e.0, e.1) && !insertions.contains(&e) {
                insertions.push(e);
            }
        }
        let p = g.apply_edits(&EditPlan { deletions, insertions }, 3).unwrap();
        assert_eq!(p.graph.num_edges(), 1000);
        assert_eq!(p.epoch, 3);
    }

    #[test]
    fn invalid_plans_rejected() {
        let g = InteractionGraph::build(&[(0, 0), (1, 1)], 2, 2).unwrap();
        let bad_delete = EditPlan {
            deletions: vec![(0, 1)],
            insertions: vec![],
        };
        assert!(matches!(g.apply_edits(&bad_delete, 0), Err(Error::InvalidEdit(_))));
        let bad_insert = EditPlan {
            deletions: vec![],
            insertions: vec![(1, 1)],
        };
        assert!(matches!(g.apply_edits(&bad_insert, 0), Err(Error::InvalidEdit(_))));
    }

    proptest! {
        #[test]
        fn structure_invariants(raw in prop::collection::vec((0usize..12, 0usize..9), 0..80)) {
            let g = InteractionGraph::build(&raw, 12, 9).unwrap();
            let mut from_items = 0;
            for i in 0..9 {
                let users = g.item_users(i);
                prop_assert!(users.windows(2).all(|w| w[0] < w[1]));
                for &u in users {
                    prop_assert!(g.user_items(u as usize).binary_search(&(i as u32)).is_ok());
                }
                from_items += users.len();
            }
            for u in 0..12 {
                prop_assert!(g.user_items(u).windows(2).all(|w| w[0] < w[1]));
            }
            prop_assert_eq!(from_items, g.num_edges());
            // weight * sqrt(deg u * deg i) sums to the edge count
            let total: f64 = g
                .edges()
                .map(|(u, i)| {
                    g.normalized_coefficient(u, i).unwrap()
                        * ((g.user_degree(u) * g.item_degree(i)) as f64).sqrt()
                })
                .sum();
            prop_assert!((total - g.num_edges() as f64).abs() < 1e-9);
        }

        #[test]
        fn inverse_plan_round_trips(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(&mut rng, 15, 15, 60);
            let edges: Vec<_> = g.edges().collect();
            let deletions: Vec<_> = edges.iter().copied().filter(|_| rng.random_bool(0.2)).collect();
            let mut insertions = Vec::new();
            for _ in 0..10 {
                let e = (rng.random_range(0..15), rng.random_range(0..15));
                if !g.has_edge(e.0, e.1) && !insertions.contains(&e) {
                    insertions.push(e);
                }
            }
            let plan = EditPlan { deletions, insertions };
            let forward = g.apply_edits(&plan, 0).unwrap();
            let back = forward.graph.apply_edits(&plan.inverse(), 0).unwrap();
            prop_assert_eq!(back.graph, g);
        }
    }
}
