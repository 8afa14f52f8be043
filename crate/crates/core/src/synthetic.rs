//! Seeded synthetic interaction data with power-law degrees and latent
//! tastes.
//!
//! Every user and item gets a unit taste vector scattered around one of a
//! few cluster centres. A user with budget `c` picks `c` distinct items by
//! Gumbel top-k over `ln(popularity_i) + <a_u, b_i> / temperature`, i.e. a
//! Plackett-Luce draw without replacement.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::RawInteraction;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub num_items: usize,
    /// Target number of distinct interactions.
    pub interactions: usize,
    pub latent_dim: usize,
    pub clusters: usize,
    /// Scale of each node's deviation from its cluster centre.
    pub spread: f64,
    /// Lower values make choices follow taste more closely.
    pub temperature: f64,
    /// Zipf exponent of user activity.
    pub user_exponent: f64,
    /// Zipf exponent of item popularity.
    pub item_exponent: f64,
    pub min_per_user: usize,
}

impl Default for SyntheticSpec {
    /// Roughly the size of MovieLens-100K.
    fn default() -> Self {
        SyntheticSpec {
            num_users: 943,
            num_items: 1682,
            interactions: 100_000,
            latent_dim: 16,
            clusters: 20,
            spread: 1.0,
            temperature: 0.25,
            user_exponent: 0.6,
            item_exponent: 0.8,
            min_per_user: 10,
        }
    }
}

fn zipf_weights<R: Rng + ?Sized>(n: usize, exponent: f64, rng: &mut R) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n).map(|r| ((r + 1) as f64).powf(-exponent)).collect();
    w.shuffle(rng);
    w
}

fn gaussian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn tastes<R: Rng + ?Sized>(n: usize, centres: &[Vec<f64>], spread: f64, rng: &mut R) -> Vec<Vec<f64>> {
    let dim = centres[0].len();
    let scale = spread / (dim as f64).sqrt();
    (0..n)
        .map(|_| {
            let c = &centres[rng.random_range(0..centres.len())];
            let noise = gaussian(dim, rng);
            normalized(c.iter().zip(&noise).map(|(a, b)| a + scale * b).collect())
        })
        .collect()
}

/// Generates distinct `(u<k>, i<k>)` interactions without ratings.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> Vec<RawInteraction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nu = spec.num_users.max(1);
    let ni = spec.num_items.max(1);
    let dim = spec.latent_dim.max(1);
    let user_w = zipf_weights(nu, spec.user_exponent, &mut rng);
    let log_pop: Vec<f64> = zipf_weights(ni, spec.item_exponent, &mut rng)
        .into_iter()
        .map(f64::ln)
        .collect();
    let centres: Vec<Vec<f64>> = (0..spec.clusters.max(1))
        .map(|_| normalized(gaussian(dim, &mut rng)))
        .collect();
    let users = tastes(nu, &centres, spec.spread, &mut rng);
    let items = tastes(ni, &centres, spec.spread, &mut rng);
    let inv_t = 1.0 / spec.temperature.max(1e-6);

    let total_w: f64 = user_w.iter().sum();
    let cap = (ni / 2).max(1);
    let mut out = Vec::with_capacity(spec.interactions);
    let mut keys: Vec<(f64, usize)> = Vec::with_capacity(ni);
    for u in 0..nu {
        let share = (user_w[u] / total_w * spec.interactions as f64).round() as usize;
        let count = share.max(spec.min_per_user).min(cap);
        keys.clear();
        for (i, b) in items.iter().enumerate() {
            let affinity: f64 = users[u].iter().zip(b).map(|(x, y)| x * y).sum();
            let g: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            keys.push((log_pop[i] + affinity * inv_t - (-g.ln()).ln(), i));
        }
        keys.select_nth_unstable_by(count - 1, |a, b| b.0.total_cmp(&a.0));
        let mut chosen: Vec<usize> = keys[..count].iter().map(|&(_, i)| i).collect();
        chosen.sort_unstable();
        out.extend(
            chosen
                .into_iter()
                .map(|i| RawInteraction::implicit(format!("u{u}"), format!("i{i}"))),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            num_users: 50,
            num_items: 70,
            interactions: 800,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn seeded_and_distinct() {
        let a = generate(&small(), 3);
        assert_eq!(a, generate(&small(), 3));
        assert_ne!(a, generate(&small(), 4));
        let pairs: HashSet<_> = a.iter().map(|r| (&r.user_key, &r.item_key)).collect();
        assert_eq!(pairs.len(), a.len());
    }

    #[test]
    fn every_user_meets_the_minimum() {
        let raw = generate(&small(), 5);
        for u in 0..50 {
            let key = format!("u{u}");
            assert!(raw.iter().filter(|r| r.user_key == key).count() >= 10);
        }
    }

    #[test]
    fn default_scale_is_near_target() {
        let raw = generate(&SyntheticSpec::default(), 0);
        assert!(raw.len() > 90_000 && raw.len() < 115_000, "{}", raw.len());
    }
}
