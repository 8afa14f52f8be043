//! Binary training checkpoints.
//!
//! Layout: magic `AVGC`, `u32` version, `u32` counts (users, items, d,
//! layers, mode), then little-endian `f32` tensors in fixed order, then a
//! length-prefixed JSON block with the scalar state. Every tensor is kept at
//! single precision during training, so a save/load cycle is lossless.

use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Mode, TrainConfig};
use crate::encoder::NodeMatrix;
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::projection::ProjectionPerturbator;
use crate::structure::Discriminator;
use crate::train::{BestModel, RngStreams, TrainState};

pub const MAGIC: &[u8; 4] = b"AVGC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RngRecord {
    seed: [u8; 32],
    stream: u64,
    word_pos: String,
}

impl RngRecord {
    fn of(rng: &ChaCha8Rng) -> Self {
        RngRecord {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng position `{}`", self.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    epoch: usize,
    val_history: Vec<f64>,
    best_epoch: Option<usize>,
    best_recall: Option<f64>,
    initial_loss: Option<f64>,
    stopped: bool,
    adam_steps: [u64; 3],
    disc_hidden: usize,
    rngs: [RngRecord; 4],
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("count {v} exceeds u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn floats<'a>(&mut self, xs: impl IntoIterator<Item = &'a f64>) {
        for &x in xs {
            self.0.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }

    fn matrix(&mut self, a: &Array2<f64>) {
        self.floats(a.iter());
    }

    fn nodes(&mut self, m: &NodeMatrix) {
        self.matrix(&m.user);
        self.matrix(&m.item);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated checkpoint: needed {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let v = self.floats(rows * cols)?;
        Array2::from_shape_vec((rows, cols), v).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn nodes(&mut self, nu: usize, ni: usize, d: usize) -> Result<NodeMatrix> {
        Ok(NodeMatrix {
            user: self.matrix(nu, d)?,
            item: self.matrix(ni, d)?,
        })
    }
}

pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let c = &state.config;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION as usize)?;
    w.u32(state.num_users())?;
    w.u32(state.num_items())?;
    w.u32(c.d)?;
    w.u32(c.layers)?;
    w.u32(c.mode.code() as usize)?;
    w.u32(usize::from(state.best.is_some()))?;

    w.nodes(&state.table);
    w.floats(&state.adam_user.m);
    w.floats(&state.adam_item.m);
    w.floats(&state.adam_user.v);
    w.floats(&state.adam_item.v);
    w.matrix(&state.perturbator.k_user);
    w.matrix(&state.perturbator.k_item);
    w.nodes(&state.perturbator.prev);
    w.floats(&state.disc.params);
    w.floats(&state.disc_adam.m);
    w.floats(&state.disc_adam.v);
    if let Some(best) = &state.best {
        w.nodes(&best.table);
    }

    let r = &state.rngs;
    let meta = Meta {
        config: c.clone(),
        epoch: state.epoch,
        val_history: state.val_history.clone(),
        best_epoch: state.best.as_ref().map(|b| b.epoch),
        best_recall: state.best.as_ref().map(|b| b.recall),
        initial_loss: state.initial_loss,
        stopped: state.stopped,
        adam_steps: [state.adam_user.step, state.adam_item.step, state.disc_adam.step],
        disc_hidden: state.disc.hidden(),
        rngs: [
            RngRecord::of(&r.sampling),
            RngRecord::of(&r.structure),
            RngRecord::of(&r.noise),
            RngRecord::of(&r.augment),
        ],
    };
    let json = serde_json::to_vec(&meta)?;
    w.u32(json.len())?;
    w.0.extend_from_slice(&json);
    Ok(w.0)
}

pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let nu = r.u32()?;
    let ni = r.u32()?;
    let d = r.u32()?;
    let layers = r.u32()?;
    let mode = Mode::from_code(r.u32()? as u32).ok_or_else(|| Error::Checkpoint("unknown mode code".into()))?;
    let has_best = r.u32()? == 1;

    let table = r.nodes(nu, ni, d)?;
    let mu = r.floats(nu * d)?;
    let mi = r.floats(ni * d)?;
    let vu = r.floats(nu * d)?;
    let vi = r.floats(ni * d)?;
    let k_user = r.matrix(d, d)?;
    let k_item = r.matrix(d, d)?;
    let prev = r.nodes(nu, ni, d)?;

    // Hidden width equals d; the metadata repeats it as a check.
    let hidden_guess = d;
    let np = Discriminator::num_params(d, hidden_guess);
    let params = r.floats(np)?;
    let dm = r.floats(np)?;
    let dv = r.floats(np)?;
    let best_table = if has_best { Some(r.nodes(nu, ni, d)?) } else { None };
    let len = r.u32()?;
    let meta: Meta = serde_json::from_slice(r.take(len)?)?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if meta.disc_hidden != hidden_guess {
        return Err(Error::Checkpoint(format!(
            "discriminator width {} does not match dimension {d}",
            meta.disc_hidden
        )));
    }
    let c = &meta.config;
    if c.d != d || c.layers != layers || c.mode != mode {
        return Err(Error::Checkpoint("header disagrees with stored configuration".into()));
    }

    let best = match (best_table, meta.best_epoch, meta.best_recall) {
        (Some(table), Some(epoch), Some(recall)) => Some(BestModel { epoch, recall, table }),
        (None, None, None) => None,
        _ => return Err(Error::Checkpoint("inconsistent best-model record".into())),
    };
    let [s_user, s_item, s_disc] = meta.adam_steps;
    let [sampling, structure, noise, augment] = &meta.rngs;
    Ok(TrainState {
        table,
        adam_user: AdamState { m: mu, v: vu, step: s_user },
        adam_item: AdamState { m: mi, v: vi, step: s_item },
        perturbator: ProjectionPerturbator {
            k_user,
            k_item,
            prev,
            omega: c.omega,
            adv_lr: c.adv_lr,
        },
        disc: Discriminator::from_params(d, hidden_guess, params)?,
        disc_adam: AdamState { m: dm, v: dv, step: s_disc },
        rngs: RngStreams {
            sampling: sampling.restore()?,
            structure: structure.restore()?,
            noise: noise.restore()?,
            augment: augment.restore()?,
        },
        epoch: meta.epoch,
        val_history: meta.val_history,
        best,
        initial_loss: meta.initial_loss,
        stopped: meta.stopped,
        config: meta.config,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode(state)?;
    let tmp = path.with_extension("tmp");
    crate::data::write_file(&tmp, &bytes)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming {}", tmp.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    decode(&bytes)
}
