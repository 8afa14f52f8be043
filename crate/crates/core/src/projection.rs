//! Trainable embedding perturbator.
//!
//! Each side owns a `d x d` projection `K`. Combined with the previous
//! epoch's final embeddings `P` it yields `K' = P K`, and the perturbation
//! for layer `l` is `Q^l = K' (K'^T E^l)`, evaluated right-to-left so the
//! cost stays `O(N d^2)`. The perturbator plays the maximizing side of the
//! contrastive game: its projections take gradient-ascent steps.

use log::warn;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::encoder::{round_to_f32, EmbeddingTable, ForwardTrace, NodeMatrix, Side};
use crate::error::{Error, Result};

/// Global-norm bound applied to the ascent direction.
pub const GRAD_CLIP_NORM: f64 = 5.0;

/// How the per-layer perturbation is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionVariant {
    /// `K'(K'^T E^l)` with `K' = P K`.
    Full,
    /// `K'(K'^T P)`: previous-epoch target only, identical for every layer.
    EpochOnly,
    /// `K''(K''^T E^l)` with `K'' = E^l K`: current layer only.
    LayerOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPerturbator {
    pub k_user: Array2<f64>,
    pub k_item: Array2<f64>,
    /// Final embeddings of the previous epoch; treated as constants.
    pub prev: NodeMatrix,
    pub omega: f64,
    pub adv_lr: f64,
}

impl ProjectionPerturbator {
    /// Projections drawn from `N(0, (1/d)^2)`, zero snapshot.
    pub fn new<R: Rng + ?Sized>(
        num_users: usize,
        num_items: usize,
        dim: usize,
        omega: f64,
        adv_lr: f64,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0, 1.0 / dim as f64).expect("finite std");
        let mut draw = || Array2::from_shape_simple_fn((dim, dim), || normal.sample(rng) as f32 as f64);
        let k_user = draw();
        let k_item = draw();
        ProjectionPerturbator {
            k_user,
            k_item,
            prev: NodeMatrix::zeros(num_users, num_items, dim),
            omega,
            adv_lr,
        }
    }

    pub fn dim(&self) -> usize {
        self.k_user.nrows()
    }

    pub fn k(&self, side: Side) -> &Array2<f64> {
        match side {
            Side::User => &self.k_user,
            Side::Item => &self.k_item,
        }
    }

    pub(crate) fn check_shapes(&self, table: &EmbeddingTable) -> Result<()> {
        let d = table.dim();
        if self.k_user.dim() != (d, d) || self.k_item.dim() != (d, d) {
            return Err(Error::Shape(format!(
                "projection matrices must be {d}x{d}, got {:?} and {:?}",
                self.k_user.dim(),
                self.k_item.dim()
            )));
        }
        if !self.prev.same_shape(table) {
            return Err(Error::Shape(
                "previous-epoch snapshot does not match the embedding table".into(),
            ));
        }
        Ok(())
    }

    /// Stores the trace's final embeddings as the new target.
    pub fn snapshot_targets(&mut self, trace: &ForwardTrace) -> Result<()> {
        if !trace.final_emb.same_shape(&self.prev) {
            return Err(Error::Shape(format!(
                "snapshot {}x{} / {}x{} does not match perturbator {}x{} / {}x{}",
                trace.final_emb.num_users(),
                trace.final_emb.dim(),
                trace.final_emb.num_items(),
                trace.final_emb.dim(),
                self.prev.num_users(),
                self.prev.dim(),
                self.prev.num_items(),
                self.prev.dim()
            )));
        }
        self.prev = trace.final_emb.clone();
        self.prev.round_to_f32();
        Ok(())
    }

    /// `Q^l` for one side given that side's layer-`l` block.
    pub fn layer_perturbation(
        &self,
        side: Side,
        variant: ProjectionVariant,
        layer: &Array2<f64>,
    ) -> Array2<f64> {
        let k = self.k(side);
        let prev = self.prev.side(side);
        match variant {
            ProjectionVariant::Full => {
                let kp = prev.dot(k);
                kp.dot(&kp.t().dot(layer))
            }
            ProjectionVariant::EpochOnly => {
                let kp = prev.dot(k);
                kp.dot(&kp.t().dot(prev))
            }
            ProjectionVariant::LayerOnly => {
                let gram = layer.t().dot(layer);
                layer.dot(&k.dot(&k.t().dot(&gram)))
            }
        }
    }

    /// Pulls `upstream = dL/dQ^l` back to `dL/dE^l` (when the perturbation
    /// depends on the layer) and `dL/dK`.
    pub fn layer_perturbation_backward(
        &self,
        side: Side,
        variant: ProjectionVariant,
        layer: &Array2<f64>,
        upstream: &Array2<f64>,
    ) -> (Option<Array2<f64>>, Array2<f64>) {
        let k = self.k(side);
        let prev = self.prev.side(side);
        match variant {
            ProjectionVariant::Full => {
                let kp = prev.dot(k);
                let m = kp.t().dot(layer);
                let c = kp.t().dot(upstream);
                let d_layer = kp.dot(&c);
                let d_k = prev.t().dot(upstream).dot(&m.t()) + prev.t().dot(layer).dot(&c.t());
                (Some(d_layer), d_k)
            }
            ProjectionVariant::EpochOnly => {
                let kp = prev.dot(k);
                let m = kp.t().dot(prev);
                let c = kp.t().dot(upstream);
                let d_k = prev.t().dot(upstream).dot(&m.t()) + prev.t().dot(prev).dot(&c.t());
                (None, d_k)
            }
            ProjectionVariant::LayerOnly => {
                let w = k.dot(&k.t());
                let gram = layer.t().dot(layer);
                let h = w.dot(&layer.t().dot(upstream));
                let d_layer = upstream.dot(&gram.dot(&w)) + layer.dot(&(&h + &h.t()));
                let z = layer.t().dot(upstream).dot(&gram);
                let d_k = (&z + &z.t()).dot(k);
                (Some(d_layer), d_k)
            }
        }
    }

    /// One ascent step `K += adv_lr * clip(grad)` on both projections.
    /// Returns `false` (and leaves `K` untouched) for non-finite gradients.
    pub fn adversarial_step(&mut self, d_k_user: &Array2<f64>, d_k_item: &Array2<f64>) -> bool {
        if !d_k_user.iter().chain(d_k_item.iter()).all(|g| g.is_finite()) {
            warn!("non-finite perturbator gradient, ascent step skipped");
            return false;
        }
        let norm = d_k_user
            .iter()
            .chain(d_k_item.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let scale = if norm > GRAD_CLIP_NORM {
            GRAD_CLIP_NORM / norm
        } else {
            1.0
        };
        self.k_user.scaled_add(self.adv_lr * scale, d_k_user);
        self.k_item.scaled_add(self.adv_lr * scale, d_k_item);
        round_to_f32(&mut self.k_user);
        round_to_f32(&mut self.k_item);
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    fn perturbator(prev_user: Array2<f64>, k: Array2<f64>) -> ProjectionPerturbator {
        let d = k.nrows();
        ProjectionPerturbator {
            k_user: k.clone(),
            k_item: k,
            prev: NodeMatrix {
                user: prev_user,
                item: Array2::zeros((1, d)),
            },
            omega: 1.0,
            adv_lr: 1e-3,
        }
    }

    #[test]
    fn zero_projection_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = perturbator(random(5, 3, &mut rng), Array2::zeros((3, 3)));
        let e = random(5, 3, &mut rng);
        for v in [ProjectionVariant::Full, ProjectionVariant::EpochOnly, ProjectionVariant::LayerOnly] {
            assert!(p.layer_perturbation(Side::User, v, &e).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn identity_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prev = random(6, 4, &mut rng);
        let p = perturbator(prev.clone(), Array2::eye(4));
        let e = random(6, 4, &mut rng);
        let q = p.layer_perturbation(Side::User, ProjectionVariant::Full, &e);
        let expected = prev.dot(&prev.t().dot(&e));
        assert!((&q - &expected).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn hand_computed_two_by_two() {
        // P = [[1,2],[0,1]], K = [[1,0],[1,1]] -> K' = [[3,2],[1,1]]
        // E = [[1,0],[0,1]] -> K'^T E = [[3,1],[2,1]], Q = K'(K'^T E) = [[13,5],[5,2]]
        let p = perturbator(array![[1.0, 2.0], [0.0, 1.0]], array![[1.0, 0.0], [1.0, 1.0]]);
        let q = p.layer_perturbation(Side::User, ProjectionVariant::Full, &Array2::eye(2));
        let expected = array![[13.0, 5.0], [5.0, 2.0]];
        assert!((&q - &expected).iter().all(|x| x.abs() < 1e-10));
    }

    #[test]
    fn two_stage_product_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for d in 1..=8 {
            let prev = random(10, d, &mut rng);
            let k = random(d, d, &mut rng);
            let e = random(10, d, &mut rng);
            let p = perturbator(prev.clone(), k.clone());
            let kp = prev.dot(&k);
            let naive = kp.dot(&kp.t()).dot(&e);
            let q = p.layer_perturbation(Side::User, ProjectionVariant::Full, &e);
            assert!((&q - &naive).iter().all(|x| x.abs() < 1e-6));
        }
    }

    #[test]
    fn snapshot_overwrites() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ProjectionPerturbator::new(2, 3, 4, 0.1, 1e-3, &mut rng);
        let mk = |v: f64| ForwardTrace {
            layers: vec![],
            final_emb: NodeMatrix {
                user: Array2::from_elem((2, 4), v),
                item: Array2::from_elem((3, 4), v),
            },
            perturbed: false,
            graph_hash: 0,
        };
        p.snapshot_targets(&mk(0.5)).unwrap();
        assert_eq!(p.prev, mk(0.5).final_emb);
        p.snapshot_targets(&mk(0.25)).unwrap();
        assert_eq!(p.prev, mk(0.25).final_emb);
        let wrong = ForwardTrace {
            final_emb: NodeMatrix::zeros(3, 3, 4),
            ..mk(0.0)
        };
        assert!(p.snapshot_targets(&wrong).is_err());
    }

    #[test]
    fn zero_gradient_leaves_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ProjectionPerturbator::new(2, 2, 3, 0.1, 1e-3, &mut rng);
        let before = p.clone();
        assert!(p.adversarial_step(&Array2::zeros((3, 3)), &Array2::zeros((3, 3))));
        assert_eq!(p, before);
    }

    #[test]
    fn clipping_bounds_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ProjectionPerturbator::new(2, 2, 2, 0.1, 1e-3, &mut rng);
        p.k_user.fill(0.0);
        p.k_item.fill(0.0);
        // global norm 50
        let g = array![[30.0, 0.0], [0.0, 0.0]];
        let h = array![[0.0, 40.0], [0.0, 0.0]];
        p.adversarial_step(&g, &h);
        let norm = p.k_user.iter().chain(p.k_item.iter()).map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1e-3 * 5.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = ProjectionPerturbator::new(2, 2, 2, 0.1, 1e-3, &mut rng);
        let before = p.clone();
        let bad = array![[f64::NAN, 0.0], [0.0, 0.0]];
        assert!(!p.adversarial_step(&bad, &Array2::zeros((2, 2))));
        assert_eq!(p, before);
    }
}
