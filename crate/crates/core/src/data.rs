//! Interaction log ingestion, k-core filtering, random splitting and BPR
//! batch sampling.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::InteractionGraph;

#[derive(Debug, Clone, PartialEq)]
pub struct RawInteraction {
    pub user_key: String,
    pub item_key: String,
    pub rating: Option<f64>,
    pub timestamp: Option<i64>,
}

impl RawInteraction {
    pub fn implicit(user_key: impl Into<String>, item_key: impl Into<String>) -> Self {
        RawInteraction {
            user_key: user_key.into(),
            item_key: item_key.into(),
            rating: None,
            timestamp: None,
        }
    }
}

/// Column layout of a delimited interaction file.
#[derive(Debug, Clone)]
pub struct FieldLayout {
    pub delimiter: char,
    pub user_col: usize,
    pub item_col: usize,
    pub rating_col: Option<usize>,
    pub timestamp_col: Option<usize>,
    /// Abort on the first malformed line instead of skipping it.
    pub strict: bool,
}

impl Default for FieldLayout {
    /// `user \t item [\t rating [\t timestamp]]`
    fn default() -> Self {
        FieldLayout {
            delimiter: '\t',
            user_col: 0,
            item_col: 1,
            rating_col: Some(2),
            timestamp_col: Some(3),
            strict: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IngestReport {
    pub records: Vec<RawInteraction>,
    pub skipped: usize,
}

pub fn ingest(path: &Path, layout: &FieldLayout) -> Result<IngestReport> {
    let file = fs::File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut records = Vec::new();
    let mut skipped = 0;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line, layout) {
            Ok(rec) => records.push(rec),
            Err(reason) => {
                if layout.strict {
                    return Err(Error::Malformed {
                        path: path.to_path_buf(),
                        line: idx + 1,
                        reason,
                    });
                }
                skipped += 1;
            }
        }
    }
    if skipped > 0 {
        warn!("{}: skipped {skipped} malformed lines", path.display());
    }
    Ok(IngestReport { records, skipped })
}

fn parse_line(line: &str, layout: &FieldLayout) -> std::result::Result<RawInteraction, String> {
    let fields: Vec<&str> = line.split(layout.delimiter).map(str::trim).collect();
    let get = |col: usize| fields.get(col).copied().filter(|s| !s.is_empty());
    let user_key = get(layout.user_col).ok_or("missing user key")?;
    let item_key = get(layout.item_col).ok_or("missing item key")?;
    let rating = match layout.rating_col.and_then(get) {
        Some(s) => Some(
            s.parse::<f64>()
                .ok()
                .filter(|r| r.is_finite())
                .ok_or_else(|| format!("bad rating `{s}`"))?,
        ),
        None => None,
    };
    let timestamp = match layout.timestamp_col.and_then(get) {
        Some(s) => Some(s.parse::<i64>().map_err(|_| format!("bad timestamp `{s}`"))?),
        None => None,
    };
    Ok(RawInteraction {
        user_key: user_key.to_string(),
        item_key: item_key.to_string(),
        rating,
        timestamp,
    })
}

/// Drops interactions rated below `rating_threshold` (unrated ones are kept),
/// then repeatedly removes users and items with fewer than
/// `min_interactions` interactions until nothing changes.
pub fn kcore_filter(
    interactions: Vec<RawInteraction>,
    min_interactions: usize,
    rating_threshold: Option<f64>,
) -> Vec<RawInteraction> {
    let mut current: Vec<RawInteraction> = match rating_threshold {
        Some(t) => interactions
            .into_iter()
            .filter(|r| r.rating.is_none_or(|v| v >= t))
            .collect(),
        None => interactions,
    };
    loop {
        let mut user_count: HashMap<&str, usize> = HashMap::new();
        let mut item_count: HashMap<&str, usize> = HashMap::new();
        for r in &current {
            *user_count.entry(&r.user_key).or_default() += 1;
            *item_count.entry(&r.item_key).or_default() += 1;
        }
        let keep: Vec<bool> = current
            .iter()
            .map(|r| {
                user_count[r.user_key.as_str()] >= min_interactions
                    && item_count[r.item_key.as_str()] >= min_interactions
            })
            .collect();
        if keep.iter().all(|&k| k) {
            return current;
        }
        let mut flags = keep.into_iter();
        current.retain(|_| flags.next().unwrap());
    }
}

/// Train/validation/test partition over dense indices.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub num_users: usize,
    pub num_items: usize,
    pub train: Vec<(usize, usize)>,
    pub val: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    /// Index -> original key, sorted, so the position is the dense index.
    pub user_keys: Vec<String>,
    pub item_keys: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub sparsity: f64,
}

impl DatasetStats {
    pub fn new(users: usize, items: usize, interactions: usize) -> Self {
        let cells = users as f64 * items as f64;
        let sparsity = if cells > 0.0 {
            1.0 - interactions as f64 / cells
        } else {
            1.0
        };
        DatasetStats {
            users,
            items,
            interactions,
            sparsity,
        }
    }
}

/// Randomly assigns each distinct interaction to train, validation or test
/// with probabilities proportional to `ratios`.
pub fn split(interactions: &[RawInteraction], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ratios.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
        return Err(Error::Config(format!("split ratios must be positive, got {ratios:?}")));
    }
    let mut user_keys: Vec<String> = interactions.iter().map(|r| r.user_key.clone()).collect();
    let mut item_keys: Vec<String> = interactions.iter().map(|r| r.item_key.clone()).collect();
    user_keys.sort_unstable();
    user_keys.dedup();
    item_keys.sort_unstable();
    item_keys.dedup();
    let user_index: HashMap<&str, usize> =
        user_keys.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
    let item_index: HashMap<&str, usize> =
        item_keys.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();

    let total: f64 = ratios.iter().sum();
    let cut_train = ratios[0] / total;
    let cut_val = (ratios[0] + ratios[1]) / total;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for r in interactions {
        let pair = (user_index[r.user_key.as_str()], item_index[r.item_key.as_str()]);
        if !seen.insert(pair) {
            continue;
        }
        let x: f64 = rng.random();
        if x < cut_train {
            train.push(pair);
        } else if x < cut_val {
            val.push(pair);
        } else {
            test.push(pair);
        }
    }
    Ok(DatasetSplit {
        num_users: user_keys.len(),
        num_items: item_keys.len(),
        train,
        val,
        test,
        user_keys,
        item_keys,
        seed,
    })
}

impl DatasetSplit {
    pub fn train_graph(&self) -> Result<InteractionGraph> {
        InteractionGraph::build(&self.train, self.num_users, self.num_items)
    }

    pub fn user_index(&self, key: &str) -> Option<usize> {
        self.user_keys.binary_search_by(|k| k.as_str().cmp(key)).ok()
    }

    pub fn item_index(&self, key: &str) -> Option<usize> {
        self.item_keys.binary_search_by(|k| k.as_str().cmp(key)).ok()
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats::new(
            self.num_users,
            self.num_items,
            self.train.len() + self.val.len() + self.test.len(),
        )
    }

    const FILES: [&'static str; 6] = [
        "train.tsv",
        "val.tsv",
        "test.tsv",
        "user_map.tsv",
        "item_map.tsv",
        "meta.txt",
    ];

    /// Writes the three edge lists, the two id maps and a small metadata file.
    pub fn write_manifest(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        let edges = |list: &[(usize, usize)]| {
            list.iter().map(|(u, i)| format!("{u}\t{i}\n")).collect::<String>()
        };
        let keys = |list: &[String]| {
            list.iter()
                .enumerate()
                .map(|(k, s)| format!("{s}\t{k}\n"))
                .collect::<String>()
        };
        let meta = format!(
            "num_users={}\nnum_items={}\nseed={}\n",
            self.num_users, self.num_items, self.seed
        );
        let contents = [
            edges(&self.train),
            edges(&self.val),
            edges(&self.test),
            keys(&self.user_keys),
            keys(&self.item_keys),
            meta,
        ];
        for (name, body) in Self::FILES.iter().zip(contents) {
            write_file(&dir.join(name), body.as_bytes())?;
        }
        Ok(())
    }

    pub fn read_manifest(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<(PathBuf, String)> {
            let path = dir.join(name);
            let body = fs::read_to_string(&path)
                .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
            Ok((path, body))
        };
        let parse_edges = |name: &str| -> Result<Vec<(usize, usize)>> {
            let (path, body) = read(name)?;
            body.lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(n, l)| {
                    let mut it = l.split('\t').map(|s| s.trim().parse::<usize>());
                    match (it.next(), it.next()) {
                        (Some(Ok(u)), Some(Ok(i))) => Ok((u, i)),
                        _ => Err(Error::Malformed {
                            path: path.clone(),
                            line: n + 1,
                            reason: "expected `user \\t item`".into(),
                        }),
                    }
                })
                .collect()
        };
        let parse_keys = |name: &str| -> Result<Vec<String>> {
            let (path, body) = read(name)?;
            let mut keys = Vec::new();
            for (n, l) in body.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let (key, idx) = l.rsplit_once('\t').ok_or_else(|| Error::Malformed {
                    path: path.clone(),
                    line: n + 1,
                    reason: "expected `key \\t index`".into(),
                })?;
                if idx.trim().parse::<usize>().ok() != Some(keys.len()) {
                    return Err(Error::Malformed {
                        path: path.clone(),
                        line: n + 1,
                        reason: format!("index `{idx}` out of sequence"),
                    });
                }
                keys.push(key.to_string());
            }
            Ok(keys)
        };
        let user_keys = parse_keys("user_map.tsv")?;
        let item_keys = parse_keys("item_map.tsv")?;
        let (_, meta) = read("meta.txt")?;
        let seed = meta
            .lines()
            .find_map(|l| l.strip_prefix("seed="))
            .and_then(|s| s.trim().parse().ok())
            .unwrap_or(0);
        let split = DatasetSplit {
            num_users: user_keys.len(),
            num_items: item_keys.len(),
            train: parse_edges("train.tsv")?,
            val: parse_edges("val.tsv")?,
            test: parse_edges("test.tsv")?,
            user_keys,
            item_keys,
            seed,
        };
        for &(u, i) in split.train.iter().chain(&split.val).chain(&split.test) {
            if u >= split.num_users || i >= split.num_items {
                return Err(Error::EdgeOutOfRange {
                    user: u,
                    item: i,
                    num_users: split.num_users,
                    num_items: split.num_items,
                });
            }
        }
        Ok(split)
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f =
        fs::File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    f.write_all(bytes)
        .map_err(|e| Error::io(format!("write {}", path.display()), e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BprTriple {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

#[derive(Debug, Clone, Default)]
pub struct BprBatch {
    pub triples: Vec<BprTriple>,
}

impl BprBatch {
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Distinct users of the batch, ascending.
    pub fn unique_users(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.triples.iter().map(|t| t.user).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Distinct positive items of the batch, ascending.
    pub fn unique_pos_items(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.triples.iter().map(|t| t.pos).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Samples `batch_size` (user, positive, negative) triples: positives
/// uniformly over training edges, one uniform unobserved item per positive.
pub fn sample_bpr_batch<R: Rng + ?Sized>(
    graph: &InteractionGraph,
    batch_size: usize,
    rng: &mut R,
) -> Result<BprBatch> {
    if graph.num_edges() == 0 {
        return Err(Error::EmptyDataset("training graph has no edges".into()));
    }
    let num_items = graph.num_items();
    let mut triples = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let (user, pos) = graph.edge_at(rng.random_range(0..graph.num_edges()));
        let neg = sample_negative(graph, user, rng)?;
        triples.push(BprTriple { user, pos, neg });
    }
    debug_assert!(triples.iter().all(|t| t.pos < num_items));
    Ok(BprBatch { triples })
}

fn sample_negative<R: Rng + ?Sized>(graph: &InteractionGraph, user: usize, rng: &mut R) -> Result<usize> {
    let num_items = graph.num_items();
    for _ in 0..num_items {
        let j = rng.random_range(0..num_items);
        if !graph.has_edge(user, j) {
            return Ok(j);
        }
    }
    // Very dense user: pick uniformly from the explicit complement.
    let seen = graph.user_items(user);
    let complement: Vec<usize> = (0..num_items)
        .filter(|j| seen.binary_search(&(*j as u32)).is_err())
        .collect();
    complement.choose(rng).copied().ok_or(Error::NegativeSampling {
        user,
        attempts: num_items,
    })
}
