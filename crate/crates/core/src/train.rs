//! Epoch loop for every training mode.
//!
//! Per epoch: build the contrast graph(s), run `ceil(|train| / batch)`
//! mini-batches of the joint objective with Adam on the embedding table,
//! take the perturbator ascent step, snapshot the clean final embeddings as
//! the next target, validate, and decide whether to stop.

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{AdvCadence, Mode, StructureOrder, TrainConfig, VALIDATION_CUTOFF};
use crate::data::{sample_bpr_batch, DatasetSplit};
use crate::encoder::{forward, init_embeddings, EmbeddingTable, NodeMatrix, Perturbation};
use crate::error::{Error, Result};
use crate::eval::{evaluate_full_ranking, node_view_similarity, view_similarity, CutoffMetrics, EvalIndex, Phase};
use crate::graph::{EditPlan, InteractionGraph};
use crate::objectives::{joint_step, ContrastViews, LossBreakdown, ModelViews};
use crate::optim::{adam_step, curriculum_drop_ratio, early_stop, AdamState, StopDecision};
use crate::projection::{ProjectionPerturbator, ProjectionVariant};
use crate::structure::{
    drop_edges, random_plan, sample_candidates, select_edits, selection_count, train_discriminator,
    Discriminator,
};

/// Abort when the epoch loss exceeds its first value by this factor.
pub const DIVERGENCE_FACTOR: f64 = 100.0;

/// Independent random streams derived from the master seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RngStreams {
    /// Mini-batch triples.
    pub sampling: ChaCha8Rng,
    /// Structure candidates and random edits.
    pub structure: ChaCha8Rng,
    /// Per-layer noise of the noise-based modes.
    pub noise: ChaCha8Rng,
    /// Edge-drop views of the augmentation baselines.
    pub augment: ChaCha8Rng,
}

pub const STREAM_INIT: u64 = 0;
pub const STREAM_SAMPLING: u64 = 2;
pub const STREAM_STRUCTURE: u64 = 3;
pub const STREAM_NOISE: u64 = 4;
pub const STREAM_DISCRIMINATOR: u64 = 5;
pub const STREAM_PERTURBATOR: u64 = 6;
pub const STREAM_AUGMENT: u64 = 7;

/// Generator for one named stream of the master seed.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        RngStreams {
            sampling: stream(seed, STREAM_SAMPLING),
            structure: stream(seed, STREAM_STRUCTURE),
            noise: stream(seed, STREAM_NOISE),
            augment: stream(seed, STREAM_AUGMENT),
        }
    }
}

/// Best validation model so far.
#[derive(Debug, Clone, PartialEq)]
pub struct BestModel {
    pub epoch: usize,
    pub recall: f64,
    pub table: EmbeddingTable,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub table: EmbeddingTable,
    pub adam_user: AdamState,
    pub adam_item: AdamState,
    pub perturbator: ProjectionPerturbator,
    pub disc: Discriminator,
    pub disc_adam: AdamState,
    pub rngs: RngStreams,
    /// Completed epochs.
    pub epoch: usize,
    pub val_history: Vec<f64>,
    pub best: Option<BestModel>,
    pub initial_loss: Option<f64>,
    pub stopped: bool,
}

impl TrainState {
    pub fn new(config: TrainConfig, num_users: usize, num_items: usize) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let table = init_embeddings(num_users, num_items, d, &mut stream(config.seed, STREAM_INIT));
        let perturbator = ProjectionPerturbator::new(
            num_users,
            num_items,
            d,
            config.omega,
            config.adv_lr,
            &mut stream(config.seed, STREAM_PERTURBATOR),
        );
        let disc = Discriminator::new(d, &mut stream(config.seed, STREAM_DISCRIMINATOR));
        Ok(TrainState {
            adam_user: AdamState::new(num_users * d),
            adam_item: AdamState::new(num_items * d),
            disc_adam: AdamState::new(disc.params.len()),
            rngs: RngStreams::new(config.seed),
            table,
            perturbator,
            disc,
            config,
            epoch: 0,
            val_history: Vec::new(),
            best: None,
            initial_loss: None,
            stopped: false,
        })
    }

    pub fn num_users(&self) -> usize {
        self.table.num_users()
    }

    pub fn num_items(&self) -> usize {
        self.table.num_items()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub deletions: usize,
    pub insertions: usize,
}

impl From<&EditPlan> for EditCounts {
    fn from(p: &EditPlan) -> Self {
        EditCounts {
            deletions: p.deletions.len(),
            insertions: p.insertions.len(),
        }
    }
}

/// Summary of one epoch. Wall time is kept out of the serialized form so
/// that logs of identical runs are identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mode: Mode,
    /// Mean over the epoch's mini-batches.
    pub losses: LossBreakdown,
    pub batches: usize,
    pub val: Option<Vec<CutoffMetrics>>,
    pub edits: EditCounts,
    pub view_similarity: Option<f64>,
    pub disc_bce: Option<f64>,
    pub drop_ratio: Option<f64>,
    pub graph_hash: u64,
    pub best_epoch: Option<usize>,
    pub stop: bool,
    #[serde(skip)]
    pub wall_secs: f64,
}

impl EpochReport {
    pub fn val_recall(&self) -> Option<f64> {
        self.val
            .as_ref()
            .and_then(|v| v.iter().find(|m| m.n == VALIDATION_CUTOFF))
            .map(|m| m.recall)
    }
}

/// Unit-normalized uniform noise rows, one tensor per layer.
pub fn uniform_sphere_noise<R: Rng + ?Sized>(
    num_users: usize,
    num_items: usize,
    dim: usize,
    layers: usize,
    rng: &mut R,
) -> Vec<NodeMatrix> {
    let mut draw = |n: usize| {
        let mut a = Array2::from_shape_simple_fn((n, dim), || rng.random::<f64>());
        for mut row in a.rows_mut() {
            let norm = row.dot(&row).sqrt().max(1e-12);
            row /= norm;
        }
        a
    };
    (0..layers)
        .map(|_| NodeMatrix {
            user: draw(num_users),
            item: draw(num_items),
        })
        .collect()
}

/// Standard normal noise, one tensor per layer.
pub fn gaussian_noise<R: Rng + ?Sized>(
    num_users: usize,
    num_items: usize,
    dim: usize,
    layers: usize,
    rng: &mut R,
) -> Vec<NodeMatrix> {
    let mut draw = |n: usize| Array2::from_shape_simple_fn((n, dim), || StandardNormal.sample(rng));
    (0..layers)
        .map(|_| NodeMatrix {
            user: draw(num_users),
            item: draw(num_items),
        })
        .collect()
}

pub fn projection_variant(mode: Mode) -> Option<ProjectionVariant> {
    match mode {
        Mode::Avogcl => Some(ProjectionVariant::Full),
        Mode::AdvEpoch => Some(ProjectionVariant::EpochOnly),
        Mode::AdvLayer => Some(ProjectionVariant::LayerOnly),
        _ => None,
    }
}

fn adam_table(table: &mut EmbeddingTable, grad: &NodeMatrix, au: &mut AdamState, ai: &mut AdamState, lr: f64) {
    let gu = grad.user.as_standard_layout();
    let gi = grad.item.as_standard_layout();
    adam_step(
        table.user.as_slice_mut().expect("contiguous table"),
        gu.as_slice().expect("contiguous"),
        au,
        lr,
    );
    adam_step(
        table.item.as_slice_mut().expect("contiguous table"),
        gi.as_slice().expect("contiguous"),
        ai,
        lr,
    );
}

/// Graphs and structure statistics of one epoch.
struct EpochGraphs {
    main: Option<InteractionGraph>,
    views: Option<(InteractionGraph, InteractionGraph)>,
    edits: EditCounts,
    disc_bce: Option<f64>,
    drop_ratio: Option<f64>,
}

pub struct Trainer<'a> {
    pub split: &'a DatasetSplit,
    pub graph: InteractionGraph,
    pub index: EvalIndex,
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, split: &'a DatasetSplit) -> Result<Self> {
        let state = TrainState::new(config, split.num_users, split.num_items)?;
        Self::from_state(state, split)
    }

    /// Continues from a saved state; the split must have the same shape.
    pub fn from_state(state: TrainState, split: &'a DatasetSplit) -> Result<Self> {
        if state.num_users() != split.num_users || state.num_items() != split.num_items {
            return Err(Error::Checkpoint(format!(
                "state has {} users / {} items, split has {} / {}",
                state.num_users(),
                state.num_items(),
                split.num_users,
                split.num_items
            )));
        }
        state.config.validate()?;
        let graph = split.train_graph()?;
        if graph.num_edges() == 0 {
            return Err(Error::EmptyDataset("training split has no interactions".into()));
        }
        Ok(Trainer {
            split,
            index: EvalIndex::new(split),
            graph,
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.state.config
    }

    pub fn is_finished(&self) -> bool {
        self.state.stopped || self.state.epoch >= self.state.config.max_epochs
    }

    fn uses_target(&self) -> bool {
        let c = &self.state.config;
        (c.mode.is_adversarial() && c.embed_perturb) || self.uses_structure()
    }

    fn uses_structure(&self) -> bool {
        let c = &self.state.config;
        c.mode == Mode::Avogcl && c.structure_perturb
    }

    fn clean_forward(&self, table: &EmbeddingTable) -> Result<NodeMatrix> {
        Ok(forward(&self.graph, table, self.state.config.layers, Perturbation::None)?.final_emb)
    }

    fn epoch_graphs(&mut self) -> Result<EpochGraphs> {
        let cfg = self.state.config.clone();
        let mut out = EpochGraphs {
            main: None,
            views: None,
            edits: EditCounts::default(),
            disc_bce: None,
            drop_ratio: None,
        };
        match cfg.mode {
            Mode::Avogcl if cfg.structure_perturb => {
                let st = &mut self.state;
                let candidates = sample_candidates(&self.graph, cfg.alpha, &mut st.rngs.structure)?;
                if candidates.is_empty() {
                    return Ok(out);
                }
                let bce = train_discriminator(
                    &mut st.disc,
                    &mut st.disc_adam,
                    &candidates,
                    &st.perturbator.prev,
                    cfg.disc_steps,
                    cfg.disc_lr,
                );
                out.disc_bce = bce.last().copied();
                let plan = match cfg.structure_order {
                    StructureOrder::Guided => {
                        select_edits(&st.disc, &candidates, &st.perturbator.prev, cfg.select_fraction)
                    }
                    StructureOrder::Random => {
                        let n = selection_count(cfg.select_fraction, candidates.pos.len());
                        random_plan(&self.graph, n, n, &mut st.rngs.structure)?
                    }
                };
                out.edits = EditCounts::from(&plan);
                out.main = Some(self.graph.apply_edits(&plan, st.epoch)?.graph);
            }
            Mode::SglEdgeDrop | Mode::SglcCurriculum => {
                let ratio = if cfg.mode == Mode::SglEdgeDrop {
                    cfg.drop_ratio
                } else {
                    curriculum_drop_ratio(self.state.epoch, cfg.max_epochs, cfg.drop_ratio)
                };
                let rng = &mut self.state.rngs.augment;
                let a = drop_edges(&self.graph, ratio, rng)?;
                let b = drop_edges(&self.graph, ratio, rng)?;
                out.edits = EditCounts::from(&a);
                out.drop_ratio = Some(ratio);
                out.views = Some((
                    self.graph.apply_edits(&a, self.state.epoch)?.graph,
                    self.graph.apply_edits(&b, self.state.epoch)?.graph,
                ));
            }
            _ => {}
        }
        Ok(out)
    }

    /// Runs one epoch. On error the state is left as it was before the epoch.
    pub fn step_epoch(&mut self) -> Result<EpochReport> {
        let snapshot = self.state.clone();
        let result = self.run_epoch();
        if result.is_err() {
            self.state = snapshot;
        }
        result
    }

    fn run_epoch(&mut self) -> Result<EpochReport> {
        let started = Instant::now();
        let cfg = self.state.config.clone();
        let epoch = self.state.epoch;
        let (nu, ni) = (self.state.num_users(), self.state.num_items());

        if epoch == 0 && self.uses_target() {
            let trace = forward(&self.graph, &self.state.table, cfg.layers, Perturbation::None)?;
            self.state.perturbator.snapshot_targets(&trace)?;
        }
        self.state.perturbator.omega = cfg.omega;
        self.state.perturbator.adv_lr = cfg.adv_lr;

        let graphs = self.epoch_graphs()?;
        let main_graph = graphs.main.as_ref().unwrap_or(&self.graph);
        let loss_cfg = cfg.loss_config();
        let variant = projection_variant(cfg.mode).filter(|_| cfg.embed_perturb);
        let batches = self.split.train.len().div_ceil(cfg.batch_size).max(1);

        let mut sum: Option<LossBreakdown> = None;
        let mut k_acc: Option<(Array2<f64>, Array2<f64>)> = None;
        for _ in 0..batches {
            let batch = sample_bpr_batch(&self.graph, cfg.batch_size, &mut self.state.rngs.sampling)?;
            let noise = match cfg.mode {
                Mode::XsimgclUniform => Some(uniform_sphere_noise(nu, ni, cfg.d, cfg.layers, &mut self.state.rngs.noise)),
                Mode::Gaussian => Some(gaussian_noise(nu, ni, cfg.d, cfg.layers, &mut self.state.rngs.noise)),
                _ => None,
            };
            let st = &self.state;
            let perturbation = match (cfg.mode, &noise, variant) {
                (Mode::XsimgclUniform, Some(n), _) => Perturbation::SignedNoise { noise: n, omega: cfg.omega },
                (Mode::Gaussian, Some(n), _) => Perturbation::Additive { noise: n, omega: cfg.omega },
                (_, _, Some(variant)) => Perturbation::Projection {
                    perturbator: &st.perturbator,
                    variant,
                },
                _ => Perturbation::None,
            };
            let contrast = match (&cfg.mode, &graphs.views) {
                (Mode::Lightgcn, _) => ContrastViews::None,
                (_, Some((a, b))) => ContrastViews::TwoGraphs { a, b },
                _ => ContrastViews::FinalVsLayer(cfg.l_star),
            };
            let views = ModelViews {
                graph: main_graph,
                num_layers: cfg.layers,
                perturbation,
                contrast,
            };
            let out = joint_step(&views, &st.table, &batch, &loss_cfg).map_err(|e| match e {
                Error::Diverged { loss, .. } => Error::Diverged { epoch: epoch + 1, loss },
                other => other,
            })?;
            match &mut sum {
                Some(s) => s.accumulate(&out.losses),
                None => sum = Some(out.losses),
            }

            if let (Some(gu), Some(gi)) = (&out.grads.k_user, &out.grads.k_item) {
                match cfg.adv_cadence {
                    AdvCadence::Batch => {
                        self.state.perturbator.adversarial_step(gu, gi);
                    }
                    AdvCadence::Epoch => match &mut k_acc {
                        Some((au, ai)) => {
                            *au += gu;
                            *ai += gi;
                        }
                        None => k_acc = Some((gu.clone(), gi.clone())),
                    },
                }
            }
            let st = &mut self.state;
            adam_table(&mut st.table, &out.grads.emb, &mut st.adam_user, &mut st.adam_item, cfg.lr);
        }
        if let Some((gu, gi)) = &k_acc {
            self.state.perturbator.adversarial_step(gu, gi);
        }

        let mut losses = sum.expect("at least one batch");
        let n = batches as f64;
        losses.bpr /= n;
        losses.cl_user /= n;
        losses.cl_item /= n;
        losses.reg /= n;
        losses.total /= n;
        if !losses.total.is_finite() {
            return Err(Error::Diverged {
                epoch: epoch + 1,
                loss: losses.total,
            });
        }
        match self.state.initial_loss {
            None => self.state.initial_loss = Some(losses.total),
            Some(first) if losses.total > DIVERGENCE_FACTOR * first.abs() => {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    loss: losses.total,
                })
            }
            _ => {}
        }

        let view_similarity = self.contrast_similarity(&graphs, main_graph, variant)?;
        let main_hash = main_graph.content_hash();

        let clean = forward(&self.graph, &self.state.table, cfg.layers, Perturbation::None)?;
        if self.uses_target() {
            self.state.perturbator.snapshot_targets(&clean)?;
        }

        let completed = epoch + 1;
        let mut val = None;
        if completed % cfg.eval_every == 0 || completed == cfg.max_epochs {
            let report = evaluate_full_ranking(&clean.final_emb, &self.index, Phase::Val, &cfg.report_cutoffs());
            let recall = report.recall(VALIDATION_CUTOFF).unwrap_or(0.0);
            self.state.val_history.push(recall);
            if self.state.best.as_ref().is_none_or(|b| recall > b.recall) {
                self.state.best = Some(BestModel {
                    epoch: completed,
                    recall,
                    table: self.state.table.clone(),
                });
            }
            if early_stop(&self.state.val_history, cfg.patience) == StopDecision::Stop {
                self.state.stopped = true;
            }
            val = Some(report.metrics);
        }
        self.state.epoch = completed;
        if completed >= cfg.max_epochs {
            self.state.stopped = true;
        }

        Ok(EpochReport {
            epoch: completed,
            mode: cfg.mode,
            losses,
            batches,
            val,
            edits: graphs.edits,
            view_similarity,
            disc_bce: graphs.disc_bce,
            drop_ratio: graphs.drop_ratio,
            graph_hash: main_hash,
            best_epoch: self.state.best.as_ref().map(|b| b.epoch),
            stop: self.state.stopped,
            wall_secs: started.elapsed().as_secs_f64(),
        })
    }

    /// Mean cosine similarity of the two contrasted views under the table
    /// as it stands after the epoch's updates.
    fn contrast_similarity(
        &self,
        graphs: &EpochGraphs,
        main_graph: &InteractionGraph,
        variant: Option<ProjectionVariant>,
    ) -> Result<Option<f64>> {
        let cfg = &self.state.config;
        let table = &self.state.table;
        match (cfg.mode, &graphs.views) {
            (Mode::Lightgcn, _) => Ok(None),
            (_, Some((a, b))) => {
                let fa = forward(a, table, cfg.layers, Perturbation::None)?.final_emb;
                let fb = forward(b, table, cfg.layers, Perturbation::None)?.final_emb;
                node_view_similarity(&fa, &fb).map(Some)
            }
            (Mode::XsimgclUniform | Mode::Gaussian, _) => Ok(None),
            _ => {
                let perturbation = match variant {
                    Some(variant) => Perturbation::Projection {
                        perturbator: &self.state.perturbator,
                        variant,
                    },
                    None => Perturbation::None,
                };
                let trace = forward(main_graph, table, cfg.layers, perturbation)?;
                let layer = trace.layer(cfg.l_star)?;
                let su = view_similarity(&trace.final_emb.user, &layer.user)?;
                let si = view_similarity(&trace.final_emb.item, &layer.item)?;
                let (nu, ni) = (table.num_users() as f64, table.num_items() as f64);
                Ok(Some((su * nu + si * ni) / (nu + ni)))
            }
        }
    }

    /// Trains until early stopping or `max_epochs`, calling `on_epoch`
    /// after every completed epoch.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochReport, &TrainState) -> Result<()>) -> Result<Vec<EpochReport>> {
        let mut reports = Vec::new();
        while !self.is_finished() {
            let report = self.step_epoch()?;
            on_epoch(&report, &self.state)?;
            reports.push(report);
        }
        Ok(reports)
    }

    /// The selected model: best validation table, or the current one if no
    /// validation has run yet.
    pub fn best_table(&self) -> &EmbeddingTable {
        self.state.best.as_ref().map_or(&self.state.table, |b| &b.table)
    }

    /// Final merged embeddings of the selected model on the train graph.
    pub fn best_embeddings(&self) -> Result<NodeMatrix> {
        self.clean_forward(self.best_table())
    }
}

/// Trains from scratch and returns the selected table with all reports.
pub fn train(config: TrainConfig, split: &DatasetSplit) -> Result<(EmbeddingTable, Vec<EpochReport>)> {
    let mut trainer = Trainer::new(config, split)?;
    let reports = trainer.run(|_, _| Ok(()))?;
    Ok((trainer.best_table().clone(), reports))
}
