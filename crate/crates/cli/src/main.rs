//! Command-line entry point: prepare data, train, evaluate, sweep, and
//! self-check gradients.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use avogcl::ablation::{parse_grid, parse_variants, run_sweep, to_csv};
use avogcl::checkpoint::{load_checkpoint, save_checkpoint};
use avogcl::config::TrainConfig;
use avogcl::data::{ingest, kcore_filter, split, DatasetSplit, DatasetStats, FieldLayout};
use avogcl::encoder::{forward, Perturbation};
use avogcl::eval::{evaluate_with_buckets, EvalIndex, Phase, CSV_HEADER};
use avogcl::gradcheck::{run_suite, TOLERANCE};
use avogcl::synthetic::{generate, SyntheticSpec};
use avogcl::train::{EpochReport, Trainer};

#[derive(Parser)]
#[command(name = "avogcl", version, about = "Adversarial graph contrastive recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter, split and index an interaction file.
    Prepare(PrepareArgs),
    /// Train a model from a prepared split.
    Train(TrainArgs),
    /// Evaluate a checkpoint with full ranking.
    Evaluate(EvaluateArgs),
    /// Run a mode x grid sweep and write a comparison table.
    Ablate(AblateArgs),
    /// Compare analytic gradients with finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct OutArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct PrepareArgs {
    /// Delimited interaction file (user, item, rating, timestamp columns).
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    input: Option<PathBuf>,
    /// Generate a seeded synthetic dataset instead of reading a file.
    #[arg(long)]
    synthetic: bool,
    /// Synthetic dataset size as users,items,interactions.
    #[arg(long, default_value = "943,1682,100000")]
    synthetic_size: String,
    /// Minimum interactions per user and item (k-core).
    #[arg(long)]
    min_interactions: Option<usize>,
    /// Drop rated interactions below this rating.
    #[arg(long)]
    rating_threshold: Option<f64>,
    /// Train, validation and test proportions.
    #[arg(long, default_value = "8,1,1")]
    ratios: String,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    /// Field delimiter of the input file.
    #[arg(long, default_value = "\t")]
    delimiter: char,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Prepared split (the `prepare` output or its manifest directory).
    #[arg(long)]
    split: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from the last checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Stop this invocation after the given number of epochs.
    #[arg(long)]
    halt_after: Option<usize>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Comma-separated cutoffs.
    #[arg(long, default_value = "10,20")]
    topk: String,
    /// `test` or `val`.
    #[arg(long, default_value = "test")]
    phase: String,
    /// Number of sparsity groups per side.
    #[arg(long, default_value_t = 5)]
    buckets: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct AblateArgs {
    /// Base configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// `key=v1,v2;key2=w1,w2`, expanded as a cartesian product.
    #[arg(long, default_value = "")]
    grid: String,
    /// Modes or ablations (`wo_sp`, `wo_ep`, `wo_both`), comma-separated.
    #[arg(long)]
    modes: String,
    /// Comma-separated seeds; defaults to the configured one.
    #[arg(long)]
    seeds: Option<String>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Maximum number of nodes per instance.
    #[arg(long, default_value_t = 12)]
    size: usize,
    #[arg(long, default_value_t = 24)]
    instances: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| anyhow::anyhow!("invalid {what} `{t}`")))
        .collect()
}

/// Refuses to reuse a non-empty output location unless forced.
fn claim(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!("{} already exists; pass --force to overwrite", path.display());
    }
    Ok(())
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn manifest_dir(path: &Path) -> PathBuf {
    let nested = path.join("manifest");
    if nested.join("meta.txt").exists() {
        nested
    } else {
        path.to_path_buf()
    }
}

fn load_split(path: &Path) -> Result<DatasetSplit> {
    let dir = manifest_dir(path);
    DatasetSplit::read_manifest(&dir).with_context(|| format!("loading split from {}", dir.display()))
}

fn stats_text(stats: &DatasetStats, min_interactions: usize, skipped: usize) -> String {
    format!(
        "min_interactions\t{min_interactions}\nusers\t{}\nitems\t{}\ninteractions\t{}\nsparsity\t{:.2}%\nskipped_lines\t{skipped}\n",
        stats.users,
        stats.items,
        stats.interactions,
        stats.sparsity * 100.0
    )
}

fn prepare(args: PrepareArgs) -> Result<()> {
    let manifest = args.out.out.join("manifest");
    claim(&manifest, args.out.force)?;
    let ratios: Vec<f64> = parse_list(&args.ratios, "ratio")?;
    let ratios: [f64; 3] = ratios
        .try_into()
        .map_err(|_| anyhow::anyhow!("--ratios needs exactly three values"))?;

    let (records, skipped, default_min) = match &args.input {
        Some(path) => {
            let layout = FieldLayout {
                delimiter: args.delimiter,
                ..FieldLayout::default()
            };
            let report = ingest(path, &layout)?;
            (report.records, report.skipped, 15)
        }
        None => {
            let size: Vec<usize> = parse_list(&args.synthetic_size, "size")?;
            let [num_users, num_items, interactions] = size[..] else {
                bail!("--synthetic-size needs users,items,interactions");
            };
            let spec = SyntheticSpec {
                num_users,
                num_items,
                interactions,
                ..SyntheticSpec::default()
            };
            (generate(&spec, args.seed), 0, 1)
        }
    };
    let min = args.min_interactions.unwrap_or(default_min);
    let before = records.len();
    let filtered = kcore_filter(records, min, args.rating_threshold);
    if filtered.is_empty() {
        bail!("no interactions left after filtering ({before} read, min_interactions {min})");
    }
    let split = split(&filtered, ratios, args.seed)?;
    split.write_manifest(&manifest)?;
    let stats = split.stats();
    let text = stats_text(&stats, min, skipped);
    let json = serde_json::json!({
        "min_interactions": min,
        "rating_threshold": args.rating_threshold,
        "skipped_lines": skipped,
        "stats": stats,
        "train": split.train.len(),
        "val": split.val.len(),
        "test": split.test.len(),
    });
    write(&manifest.join("stats.json"), serde_json::to_string_pretty(&json)?)?;
    print!("{text}");
    info!(
        "split into {} / {} / {} interactions",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}

fn report_line(r: &EpochReport) -> Result<String> {
    Ok(serde_json::to_string(r)? + "\n")
}

fn train(args: TrainArgs) -> Result<()> {
    let mut config = TrainConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let split = load_split(&args.split)?;
    let out = &args.out.out;
    let ckpt_dir = out.join("checkpoints");
    let last = ckpt_dir.join("last.ckpt");
    let metrics = out.join("logs").join("metrics.jsonl");
    let timing = out.join("logs").join("timing.jsonl");

    let mut trainer = if args.resume {
        let state = load_checkpoint(&last).with_context(|| format!("resuming from {}", last.display()))?;
        if state.config != config {
            bail!("configuration differs from the one stored in {}", last.display());
        }
        let trainer = Trainer::from_state(state, &split)?;
        // Drop log lines written after the checkpoint.
        let keep = trainer.state.epoch;
        for path in [&metrics, &timing] {
            let body = fs::read_to_string(path).unwrap_or_default();
            let kept: String = body.lines().take(keep).map(|l| format!("{l}\n")).collect();
            write(path, kept)?;
        }
        trainer
    } else {
        for p in [&ckpt_dir, &out.join("logs"), &out.join("reports")] {
            claim(p, args.out.force)?;
        }
        for p in [&ckpt_dir, &out.join("logs"), &out.join("reports")] {
            if p.exists() {
                fs::remove_dir_all(p).with_context(|| format!("clearing {}", p.display()))?;
            }
        }
        write(&metrics, "")?;
        write(&timing, "")?;
        Trainer::new(config.clone(), &split)?
    };
    fs::create_dir_all(&ckpt_dir)?;
    write(&out.join("config.txt"), config.to_kv_string())?;

    let open = |p: &Path| fs::OpenOptions::new().append(true).create(true).open(p);
    let mut metrics_file = open(&metrics)?;
    let mut timing_file = open(&timing)?;
    let mut ran = 0;
    let result = loop {
        if trainer.is_finished() || args.halt_after.is_some_and(|h| ran >= h) {
            break Ok(());
        }
        match trainer.step_epoch() {
            Ok(report) => {
                ran += 1;
                metrics_file.write_all(report_line(&report)?.as_bytes())?;
                writeln!(
                    timing_file,
                    "{{\"epoch\":{},\"wall_secs\":{:.3}}}",
                    report.epoch, report.wall_secs
                )?;
                save_checkpoint(&trainer.state, &last)?;
                info!(
                    "epoch {} loss {:.4} val recall@20 {}",
                    report.epoch,
                    report.losses.total,
                    report.val_recall().map_or("-".into(), |r| format!("{r:.4}"))
                );
            }
            Err(e) => break Err(e),
        }
    };
    if let Err(e) = result {
        save_checkpoint(&trainer.state, &last)?;
        return Err(anyhow::Error::new(e).context(format!(
            "training aborted; last good state saved to {}",
            last.display()
        )));
    }
    if !trainer.is_finished() {
        println!("halted after epoch {}; resume with --resume", trainer.state.epoch);
        return Ok(());
    }

    if let Some(best) = &trainer.state.best {
        let mut best_state = trainer.state.clone();
        best_state.table = best.table.clone();
        save_checkpoint(&best_state, &ckpt_dir.join("best.ckpt"))?;
    }
    let emb = trainer.best_embeddings()?;
    let cutoffs = trainer.config().report_cutoffs();
    let report = evaluate_with_buckets(&emb, &split, &trainer.index, Phase::Test, &cutoffs, 5);
    let mode = trainer.config().mode.name();
    write(&out.join("reports").join("test.json"), serde_json::to_string_pretty(&report)?)?;
    write(
        &out.join("reports").join("test.csv"),
        format!("{CSV_HEADER}\n{}", report.csv_rows(mode, "split", trainer.config().seed)),
    )?;
    for m in &report.metrics {
        println!("test recall@{} {:.4} ndcg@{} {:.4}", m.n, m.recall, m.n, m.ndcg);
    }
    println!(
        "best epoch {} of {}",
        trainer.state.best.as_ref().map_or(0, |b| b.epoch),
        trainer.state.epoch
    );
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let reports = args.out.out.join("reports");
    let json_path = reports.join("eval.json");
    claim(&json_path, args.out.force)?;
    let state = load_checkpoint(&args.checkpoint)?;
    let split = load_split(&args.split)?;
    let phase = match args.phase.as_str() {
        "test" => Phase::Test,
        "val" => Phase::Val,
        other => bail!("--phase must be test or val, got `{other}`"),
    };
    let cutoffs: Vec<usize> = parse_list(&args.topk, "cutoff")?;
    if cutoffs.is_empty() || cutoffs.contains(&0) {
        bail!("--topk needs positive cutoffs");
    }
    let trainer = Trainer::from_state(state, &split)?;
    let table = trainer.best_table();
    let emb = forward(&trainer.graph, table, trainer.config().layers, Perturbation::None)?.final_emb;
    let index = EvalIndex::new(&split);
    let report = evaluate_with_buckets(&emb, &split, &index, phase, &cutoffs, args.buckets);
    let mode = trainer.config().mode.name();
    write(&json_path, serde_json::to_string_pretty(&report)?)?;
    write(
        &reports.join("eval.csv"),
        format!("{CSV_HEADER}\n{}", report.csv_rows(mode, "split", trainer.config().seed)),
    )?;
    for m in &report.metrics {
        println!("{} recall@{} {:.4} ndcg@{} {:.4}", phase.name(), m.n, m.recall, m.n, m.ndcg);
    }
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<()> {
    let csv_path = args.out.out.join("reports").join("ablation.csv");
    claim(&csv_path, args.out.force)?;
    let base = TrainConfig::load(&args.config)?;
    let variants = parse_variants(&args.modes)?;
    if variants.is_empty() {
        bail!("--modes is empty");
    }
    let grid = parse_grid(&args.grid)?;
    let seeds = match &args.seeds {
        Some(s) => parse_list(s, "seed")?,
        None => vec![base.seed],
    };
    let split = load_split(&args.split)?;
    let rows = run_sweep(&base, &split, &variants, &grid, &seeds, |run| {
        println!(
            "{} [{}] seed {}: {} epochs, test recall@{} {:.4}",
            run.variant,
            run.setting,
            run.config.seed,
            run.reports.len(),
            run.test.metrics.last().map_or(0, |m| m.n),
            run.test.metrics.last().map_or(0.0, |m| m.recall)
        );
    })?;
    write(&csv_path, to_csv(&rows))?;
    println!("wrote {} rows to {}", rows.len(), csv_path.display());
    Ok(())
}

fn grad_check(args: GradCheckArgs) -> Result<bool> {
    let results = run_suite(args.size, args.instances, args.seed)?;
    let mut ok = true;
    for r in &results {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        ok &= r.passed();
        println!(
            "{verdict} rel_err ≤ {TOLERANCE:e} instance={} mode={} tensor={} entries={} max_rel_err={:.3e}",
            r.instance, r.mode, r.tensor, r.entries, r.max_rel_err
        );
    }
    Ok(ok)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("AVOGCL_THREADS") {
        let n: usize = v.parse().with_context(|| format!("AVOGCL_THREADS=`{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = init_threads().and_then(|_| match cli.command {
        Command::Prepare(a) => prepare(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Evaluate(a) => evaluate(a).map(|_| true),
        Command::Ablate(a) => ablate(a).map(|_| true),
        Command::GradCheck(a) => grad_check(a),
    });
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
