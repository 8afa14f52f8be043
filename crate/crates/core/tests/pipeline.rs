use std::collections::HashSet;

use avogcl::checkpoint::{decode, encode, load_checkpoint, save_checkpoint};
use avogcl::config::{Mode, TrainConfig};
use avogcl::data::{split, DatasetSplit, RawInteraction};
use avogcl::eval::{ndcg_at, recall_at};
use avogcl::graph::{EditPlan, InteractionGraph};
use avogcl::synthetic::{generate, SyntheticSpec};
use avogcl::train::{EpochReport, Trainer};
use proptest::prelude::*;

fn small_split(seed: u64) -> DatasetSplit {
    let spec = SyntheticSpec {
        num_users: 40,
        num_items: 60,
        interactions: 700,
        ..SyntheticSpec::default()
    };
    split(&generate(&spec, seed), [8.0, 1.0, 1.0], seed).unwrap()
}

fn small_config(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        d: 8,
        batch_size: 128,
        max_epochs: 4,
        patience: 50,
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn manifest_round_trip() {
    let sp = small_split(1);
    let dir = tempfile::tempdir().unwrap();
    sp.write_manifest(dir.path()).unwrap();
    assert_eq!(DatasetSplit::read_manifest(dir.path()).unwrap(), sp);
}

#[test]
fn checkpoint_mid_run_resumes_identically() {
    let sp = small_split(2);
    for mode in [Mode::Lightgcn, Mode::Avogcl, Mode::SglcCurriculum] {
        let mut straight = Trainer::new(small_config(mode), &sp).unwrap();
        let full: Vec<_> = (0..4).map(|_| straight.step_epoch().unwrap()).collect();

        let mut first = Trainer::new(small_config(mode), &sp).unwrap();
        first.step_epoch().unwrap();
        first.step_epoch().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        save_checkpoint(&first.state, &path).unwrap();
        let restored = load_checkpoint(&path).unwrap();
        assert_eq!(restored, first.state, "{mode}");
        assert_eq!(encode(&decode(&encode(&restored).unwrap()).unwrap()).unwrap(), encode(&restored).unwrap());

        let mut second = Trainer::from_state(restored, &sp).unwrap();
        let tail: Vec<_> = (0..2).map(|_| second.step_epoch().unwrap()).collect();
        let timeless = |r: &[EpochReport]| {
            r.iter().map(|r| EpochReport { wall_secs: 0.0, ..r.clone() }).collect::<Vec<_>>()
        };
        assert_eq!(timeless(&full[2..]), timeless(&tail), "{mode}");
        assert_eq!(straight.state, second.state, "{mode}");
    }
}

#[test]
fn every_mode_trains_and_reports_finite_losses() {
    let sp = small_split(3);
    for mode in Mode::ALL {
        let mut t = Trainer::new(small_config(mode), &sp).unwrap();
        for _ in 0..2 {
            let r = t.step_epoch().unwrap();
            assert!(r.losses.total.is_finite(), "{mode}");
            let v = r.val_recall().unwrap();
            assert!((0.0..=1.0).contains(&v), "{mode}: {v}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_distinct_pairs(
        pairs in prop::collection::vec((0u8..12, 0u8..15), 1..120),
        seed in any::<u64>(),
    ) {
        let raw: Vec<RawInteraction> = pairs
            .iter()
            .map(|(u, i)| RawInteraction::implicit(format!("u{u}"), format!("i{i}")))
            .collect();
        let sp = split(&raw, [8.0, 1.0, 1.0], seed).unwrap();
        let distinct: HashSet<_> = pairs.iter().collect();
        let all: Vec<_> = sp.train.iter().chain(&sp.val).chain(&sp.test).collect();
        let unique: HashSet<_> = all.iter().collect();
        prop_assert_eq!(all.len(), distinct.len());
        prop_assert_eq!(unique.len(), all.len());
        for &&(u, i) in &all {
            prop_assert!(u < sp.num_users && i < sp.num_items);
        }
    }

    #[test]
    fn edits_and_their_inverse_restore_the_graph(
        edges in prop::collection::hash_set((0usize..8, 0usize..9), 2..40),
        del_mask in any::<u64>(),
        ins_mask in any::<u128>(),
    ) {
        let list: Vec<_> = edges.iter().copied().collect();
        let g = InteractionGraph::build(&list, 8, 9).unwrap();
        let deletions: Vec<_> = list.iter().enumerate().filter(|(k, _)| del_mask >> (k % 64) & 1 == 1).map(|(_, e)| *e).collect();
        let insertions: Vec<_> = (0..8)
            .flat_map(|u| (0..9).map(move |i| (u, i)))
            .filter(|e| !edges.contains(e))
            .enumerate()
            .filter(|(k, _)| ins_mask >> (k % 128) & 1 == 1)
            .map(|(_, e)| e)
            .collect();
        let plan = EditPlan { deletions, insertions };
        let edited = g.apply_edits(&plan, 0).unwrap().graph;
        prop_assert_eq!(edited.num_edges(), g.num_edges() - plan.deletions.len() + plan.insertions.len());
        let back = edited.apply_edits(&plan.inverse(), 0).unwrap().graph;
        prop_assert_eq!(back.edges().collect::<Vec<_>>(), g.edges().collect::<Vec<_>>());
        prop_assert_eq!(back.content_hash(), g.content_hash());
    }

    #[test]
    fn ranking_metrics_are_bounded(
        ranked in prop::collection::vec(0usize..30, 0..30),
        relevant in prop::collection::hash_set(0usize..30, 1..10),
        n in 1usize..25,
    ) {
        let mut seen = HashSet::new();
        let ranked: Vec<_> = ranked.into_iter().filter(|x| seen.insert(*x)).collect();
        let relevant: Vec<_> = relevant.into_iter().collect();
        let r = recall_at(&ranked, &relevant, n);
        let g = ndcg_at(&ranked, &relevant, n);
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&g));
        prop_assert_eq!(r == 0.0, g == 0.0);
    }
}
