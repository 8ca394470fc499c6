//! Binary parameter snapshots with a JSON sidecar.
//!
//! Layout: magic, format version, then `U I D K step` as little-endian
//! `u64`, then `f32` arrays in order: base embeddings, user bank, item bank,
//! and the Adam first/second moments of each of those three blocks.

use crate::config::TrainConfig;
use crate::optim::{AdamConfig, AdamState, ModelState};
use crate::propagation::EmbeddingTable;
use crate::prototypes::{EntityKind, PrototypeBank};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub const MAGIC: &[u8; 8] = b"PAUCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint file")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported checkpoint version {version}")]
    BadVersion { path: PathBuf, version: u32 },
    #[error("{path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("{path}: metadata: {message}")]
    Metadata { path: PathBuf, message: String },
}

/// Training progress stored next to the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub rng_seed: u64,
    pub split_seed: u64,
    /// Epochs completed.
    pub epoch: usize,
    pub step: u64,
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
    pub bad_epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelState<f32>,
    pub opt: AdamState<f32>,
    pub meta: CheckpointMeta,
}

/// Path of the JSON sidecar for a checkpoint at `path`.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

fn write_array<W: Write>(w: &mut W, m: &Array2<f32>) -> std::io::Result<()> {
    for &v in m.iter() {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_array<R: Read>(r: &mut R, rows: usize, cols: usize) -> std::io::Result<Array2<f32>> {
    let mut data = vec![0f32; rows * cols];
    r.read_f32_into::<LittleEndian>(&mut data)?;
    Ok(Array2::from_shape_vec((rows, cols), data).expect("shape"))
}

fn write_atomic(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    let err = io_err(path);
    let f = File::create(&tmp).map_err(&err)?;
    let mut w = BufWriter::new(f);
    body(&mut w).map_err(&err)?;
    w.flush().map_err(&err)?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(&err)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let p = &ckpt.params;
    let o = &ckpt.opt;
    write_atomic(path, |w| {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        for x in [p.num_users() as u64, p.num_items() as u64, p.dim() as u64, p.k() as u64, o.step] {
            w.write_u64::<LittleEndian>(x)?;
        }
        for m in [
            p.embeddings.matrix(),
            p.user_bank.matrix(),
            p.item_bank.matrix(),
            &o.m_embeddings,
            &o.v_embeddings,
            &o.m_user_bank,
            &o.v_user_bank,
            &o.m_item_bank,
            &o.v_item_bank,
        ] {
            write_array(w, m)?;
        }
        Ok(())
    })?;
    let meta = serde_json::to_string_pretty(&ckpt.meta).expect("metadata serializes");
    let mp = meta_path(path);
    write_atomic(&mp, |w| w.write_all(meta.as_bytes()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let err = io_err(path);
    let corrupt = |reason: String| CheckpointError::Corrupt { path: path.to_path_buf(), reason };
    let mut r = BufReader::new(File::open(path).map_err(&err)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(&err)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic { path: path.to_path_buf() });
    }
    let version = r.read_u32::<LittleEndian>().map_err(&err)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion { path: path.to_path_buf(), version });
    }
    let mut hdr = [0u64; 5];
    r.read_u64_into::<LittleEndian>(&mut hdr).map_err(&err)?;
    let [u, i, d, k, step] = hdr;
    let (u, i, d, k) = (u as usize, i as usize, d as usize, k as usize);
    let n = u.checked_add(i).ok_or_else(|| corrupt("row count overflow".into()))?;
    let mut next = |rows| read_array(&mut r, rows, d).map_err(|e| corrupt(format!("truncated arrays: {e}")));
    let e = next(n)?;
    let cu = next(k)?;
    let ci = next(k)?;
    let moments = [next(n)?, next(n)?, next(k)?, next(k)?, next(k)?, next(k)?];
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(&err)?;
    if !rest.is_empty() {
        return Err(corrupt(format!("{} trailing bytes", rest.len())));
    }
    let params = ModelState::from_parts(
        EmbeddingTable::new(e, u).map_err(|e| corrupt(e.to_string()))?,
        PrototypeBank::new(cu, EntityKind::User).map_err(|e| corrupt(e.to_string()))?,
        PrototypeBank::new(ci, EntityKind::Item).map_err(|e| corrupt(e.to_string()))?,
    )
    .map_err(|e| corrupt(e.to_string()))?;

    let mp = meta_path(path);
    let text = std::fs::read_to_string(&mp).map_err(|source| CheckpointError::Io { path: mp.clone(), source })?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| CheckpointError::Metadata { path: mp.clone(), message: e.to_string() })?;
    if meta.step != step {
        return Err(corrupt(format!("header step {step} disagrees with metadata step {}", meta.step)));
    }
    let [m_e, v_e, m_u, v_u, m_i, v_i] = moments;
    let opt = AdamState {
        config: AdamConfig { beta1: meta.config.adam_beta1, beta2: meta.config.adam_beta2, eps: meta.config.adam_eps },
        step,
        m_embeddings: m_e,
        v_embeddings: v_e,
        m_user_bank: m_u,
        v_user_bank: v_u,
        m_item_bank: m_i,
        v_item_bank: v_i,
    };
    Ok(Checkpoint { params, opt, meta })
}
