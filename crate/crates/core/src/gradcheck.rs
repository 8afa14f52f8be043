//! Central finite-difference checks of every analytic gradient.
//!
//! Instances are tiny random graphs. Draws that sit within reach of a
//! non-differentiable point (a noise sign flip or a ReLU hinge) are redrawn,
//! since a difference quotient straddling a kink measures nothing useful.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::Mode;
use crate::data::sample_bpr_batch;
use crate::encoder::{init_embeddings, propagate, EmbeddingTable, NodeMatrix, Perturbation, Side};
use crate::error::{Error, Result};
use crate::graph::InteractionGraph;
use crate::objectives::{joint_step, ContrastViews, LossConfig, ModelViews, NegativePool};
use crate::projection::ProjectionPerturbator;
use crate::structure::{drop_edges, Discriminator};
use crate::train::{gaussian_noise, projection_variant, uniform_sphere_noise};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Magnitudes below this are compared on an absolute scale.
pub const FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub instance: usize,
    pub mode: String,
    pub tensor: String,
    pub entries: usize,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

fn central(mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    Ok((f(STEP)? - f(-STEP)?) / (2.0 * STEP))
}

fn random_graph<R: Rng + ?Sized>(rng: &mut R, max_nodes: usize) -> Result<InteractionGraph> {
    let max_nodes = max_nodes.max(4);
    let nu = rng.random_range(2..=max_nodes / 2);
    let ni = rng.random_range(2..=max_nodes - nu);
    let mut edges = Vec::new();
    for u in 0..nu {
        for i in 0..ni {
            if rng.random_bool(0.4) {
                edges.push((u, i));
            }
        }
    }
    // Every user needs a positive and a negative for the BPR sampler.
    for u in 0..nu {
        let i = rng.random_range(0..ni);
        if !edges.contains(&(u, i)) {
            edges.push((u, i));
        }
    }
    edges.retain(|&(u, i)| !(i == (u + 1) % ni));
    InteractionGraph::build(&edges, nu, ni)
}

fn random_nodes<R: Rng + ?Sized>(nu: usize, ni: usize, d: usize, scale: f64, rng: &mut R) -> NodeMatrix {
    NodeMatrix {
        user: Array2::from_shape_simple_fn((nu, d), || rng.random_range(-scale..scale)),
        item: Array2::from_shape_simple_fn((ni, d), || rng.random_range(-scale..scale)),
    }
}

/// Smallest `|A E^l|` entry along the noise-free part of a signed-noise
/// forward pass.
fn sign_margin(graph: &InteractionGraph, table: &EmbeddingTable, noise: &[NodeMatrix], omega: f64) -> Result<f64> {
    let trace = crate::encoder::forward(
        graph,
        table,
        noise.len(),
        Perturbation::SignedNoise { noise, omega },
    )?;
    let mut margin = f64::INFINITY;
    for l in 0..noise.len() {
        let pre = propagate(graph, &trace.layers[l]);
        // Isolated nodes stay exactly zero whatever the input, so they are
        // not kinks.
        for (u, row) in pre.user.rows().into_iter().enumerate() {
            if graph.user_degree(u) > 0 {
                margin = row.iter().fold(margin, |m, x| m.min(x.abs()));
            }
        }
        for (i, row) in pre.item.rows().into_iter().enumerate() {
            if graph.item_degree(i) > 0 {
                margin = row.iter().fold(margin, |m, x| m.min(x.abs()));
            }
        }
    }
    Ok(margin)
}

/// Checks the table gradient and, for projection modes, both projection
/// gradients on one random instance with at most `max_nodes` nodes.
pub fn check_model_instance(mode: Mode, max_nodes: usize, seed: u64, instance: usize) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = random_graph(&mut rng, max_nodes)?;
    let (nu, ni) = (graph.num_users(), graph.num_items());
    let d = rng.random_range(1..=8);
    let layers = rng.random_range(1..=3);
    let l_star = rng.random_range(1..=layers);
    let cfg = LossConfig {
        lambda1: rng.random_range(0.1..2.0),
        lambda2: 1e-2,
        tau: rng.random_range(0.2..1.0),
        pool: if rng.random_bool(0.5) {
            NegativePool::InBatch
        } else {
            NegativePool::Full
        },
    };
    let batch = sample_bpr_batch(&graph, 6, &mut rng)?;

    let mut table = init_embeddings(nu, ni, d, &mut rng);
    let mut perturbator = ProjectionPerturbator::new(nu, ni, d, 0.5, 1e-3, &mut rng);
    perturbator.prev = random_nodes(nu, ni, d, 1.0, &mut rng);
    let views_a = graph.apply_edits(&drop_edges(&graph, 0.2, &mut rng)?, 0)?.graph;
    let views_b = graph.apply_edits(&drop_edges(&graph, 0.2, &mut rng)?, 0)?.graph;

    let omega = 0.3;
    let mut noise = Vec::new();
    match mode {
        Mode::XsimgclUniform => {
            let mut tries = 0;
            loop {
                noise = uniform_sphere_noise(nu, ni, d, layers, &mut rng);
                if sign_margin(&graph, &table, &noise, omega)? > 100.0 * STEP {
                    break;
                }
                tries += 1;
                if tries > 200 {
                    return Err(Error::Config("could not draw a kink-free instance".into()));
                }
                table = init_embeddings(nu, ni, d, &mut rng);
            }
        }
        Mode::Gaussian => noise = gaussian_noise(nu, ni, d, layers, &mut rng),
        _ => {}
    }

    let variant = projection_variant(mode);
    let cfg = if mode == Mode::Lightgcn {
        LossConfig { lambda1: 0.0, ..cfg }
    } else {
        cfg
    };
    let run = |table: &EmbeddingTable, p: &ProjectionPerturbator| {
        let perturbation = match mode {
            Mode::XsimgclUniform => Perturbation::SignedNoise { noise: &noise, omega },
            Mode::Gaussian => Perturbation::Additive { noise: &noise, omega },
            _ => match variant {
                Some(variant) => Perturbation::Projection { perturbator: p, variant },
                None => Perturbation::None,
            },
        };
        let contrast = match mode {
            Mode::Lightgcn => ContrastViews::None,
            Mode::SglEdgeDrop | Mode::SglcCurriculum => ContrastViews::TwoGraphs {
                a: &views_a,
                b: &views_b,
            },
            _ => ContrastViews::FinalVsLayer(l_star),
        };
        let views = ModelViews {
            graph: &graph,
            num_layers: layers,
            perturbation,
            contrast,
        };
        joint_step(&views, table, &batch, &cfg)
    };
    let loss_of = |table: &EmbeddingTable, p: &ProjectionPerturbator| -> Result<(f64, f64)> {
        let out = run(table, p)?;
        Ok((out.losses.total, out.losses.contrastive()))
    };
    let analytic = run(&table, &perturbator)?.grads;

    let mut results = Vec::new();
    let mut worst = 0.0f64;
    let mut entries = 0;
    for side in [Side::User, Side::Item] {
        let (rows, cols) = table.side(side).dim();
        for r in 0..rows {
            for c in 0..cols {
                let numeric = central(|h| {
                    let mut t = table.clone();
                    t.side_mut(side)[[r, c]] += h;
                    Ok(loss_of(&t, &perturbator)?.0)
                })?;
                worst = worst.max(relative_error(analytic.emb.side(side)[[r, c]], numeric));
                entries += 1;
            }
        }
    }
    results.push(CheckResult {
        instance,
        mode: mode.name().into(),
        tensor: "embeddings".into(),
        entries,
        max_rel_err: worst,
    });

    if variant.is_some() {
        for (side, name, grad) in [
            (Side::User, "k_user", analytic.k_user.as_ref()),
            (Side::Item, "k_item", analytic.k_item.as_ref()),
        ] {
            let grad = grad.ok_or_else(|| Error::Shape(format!("missing {name} gradient")))?;
            let mut worst = 0.0f64;
            for r in 0..d {
                for c in 0..d {
                    let numeric = central(|h| {
                        let mut p = perturbator.clone();
                        match side {
                            Side::User => p.k_user[[r, c]] += h,
                            Side::Item => p.k_item[[r, c]] += h,
                        }
                        Ok(loss_of(&table, &p)?.1)
                    })?;
                    worst = worst.max(relative_error(grad[[r, c]], numeric));
                }
            }
            results.push(CheckResult {
                instance,
                mode: mode.name().into(),
                tensor: name.into(),
                entries: d * d,
                max_rel_err: worst,
            });
        }
    }
    Ok(results)
}

/// Checks the discriminator's BCE gradient on random pair features.
pub fn check_discriminator_instance(seed: u64, instance: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..200 {
        let d = rng.random_range(1..=4);
        let n = rng.random_range(2..=12);
        let disc = Discriminator::new(d, &mut rng);
        let x = Array2::from_shape_simple_fn((n, 2 * d), || rng.random_range(-1.0..1.0));
        let margin = disc.pre_activations(&x).iter().fold(f64::INFINITY, |m, z| m.min(z.abs()));
        if margin < 100.0 * STEP {
            continue;
        }
        let labels: Vec<f64> = (0..n).map(|k| (k % 2) as f64).collect();
        let (_, grad) = disc.bce_and_grad(&x, &labels);
        let mut worst = 0.0f64;
        for k in 0..grad.len() {
            let numeric = central(|h| {
                let mut p = disc.clone();
                p.params[k] += h;
                Ok(p.bce_and_grad(&x, &labels).0)
            })?;
            worst = worst.max(relative_error(grad[k], numeric));
        }
        return Ok(CheckResult {
            instance,
            mode: "discriminator".into(),
            tensor: "discriminator".into(),
            entries: grad.len(),
            max_rel_err: worst,
        });
    }
    Err(Error::Config("could not draw a kink-free discriminator instance".into()))
}

/// `instances` model instances cycling through every mode, plus as many
/// discriminator instances.
pub fn run_suite(max_nodes: usize, instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for k in 0..instances {
        let mode = Mode::ALL[k % Mode::ALL.len()];
        let s = seed.wrapping_mul(1_000_003).wrapping_add(k as u64);
        out.extend(check_model_instance(mode, max_nodes, s, k)?);
        out.push(check_discriminator_instance(s, k)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-9, 0.0) < 1e-3);
    }

    #[test]
    fn one_instance_per_mode_passes() {
        for (k, mode) in Mode::ALL.into_iter().enumerate() {
            for r in check_model_instance(mode, 12, 40 + k as u64, k).unwrap() {
                assert!(r.passed(), "{r:?}");
            }
        }
        assert!(check_discriminator_instance(3, 0).unwrap().passed());
    }
}
