use super::{DataError, IngestOptions, InputFormat, Interaction, InteractionGraph};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CACHE_FILE: &str = "dataset.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

const MAGIC: &[u8; 8] = b"PAUDATA\0";
const VERSION: u32 = 1;

/// Human-readable summary written next to the binary dataset cache.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub source: String,
    pub source_sha256: String,
    pub format: InputFormat,
    pub rating_threshold: Option<f64>,
    pub kcore: Option<usize>,
    pub num_users: usize,
    pub num_items: usize,
    pub num_interactions: usize,
    pub min_user_degree: usize,
    pub min_item_degree: usize,
    pub id_map_checksum: String,
    pub split_seed: u64,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub cache_file: String,
}

impl Manifest {
    /// True when the cache described by `self` came from these inputs.
    pub fn matches_inputs(&self, source_sha256: &str, format: InputFormat, options: &IngestOptions, split_seed: u64) -> bool {
        self.source_sha256 == source_sha256
            && self.format == format
            && self.rating_threshold == options.rating_threshold
            && self.kcore == options.kcore
            && self.split_seed == split_seed
    }
}

pub fn write_cache(path: &Path, graph: &InteractionGraph) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u64::<LittleEndian>(graph.num_users() as u64)?;
    w.write_u64::<LittleEndian>(graph.num_items() as u64)?;
    w.write_u64::<LittleEndian>(graph.len() as u64)?;
    for id in graph.user_ids().iter().chain(graph.item_ids()) {
        w.write_u32::<LittleEndian>(id.len() as u32)?;
        w.write_all(id.as_bytes())?;
    }
    for it in graph.interactions() {
        w.write_u32::<LittleEndian>(it.user as u32)?;
        w.write_u32::<LittleEndian>(it.item as u32)?;
    }
    w.flush()
}

pub fn read_cache(path: &Path) -> Result<InteractionGraph, DataError> {
    let unreadable = |source| DataError::Unreadable { path: path.to_path_buf(), source };
    let mut r = BufReader::new(File::open(path).map_err(unreadable)?);
    let corrupt = |e: std::io::Error| DataError::CorruptCache(e.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(corrupt)?;
    if &magic != MAGIC {
        return Err(DataError::CorruptCache("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(corrupt)?;
    if version != VERSION {
        return Err(DataError::CorruptCache(format!("unsupported version {version}")));
    }
    let nu = r.read_u64::<LittleEndian>().map_err(corrupt)? as usize;
    let ni = r.read_u64::<LittleEndian>().map_err(corrupt)? as usize;
    let n = r.read_u64::<LittleEndian>().map_err(corrupt)? as usize;
    let mut read_ids = |count: usize| -> Result<Vec<String>, DataError> {
        (0..count)
            .map(|_| {
                let len = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
                let mut buf = vec![0u8; len];
                r.read_exact(&mut buf).map_err(corrupt)?;
                String::from_utf8(buf).map_err(|e| DataError::CorruptCache(e.to_string()))
            })
            .collect()
    };
    let user_ids = read_ids(nu)?;
    let item_ids = read_ids(ni)?;
    let mut interactions = Vec::with_capacity(n);
    for _ in 0..n {
        let u = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
        let i = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
        interactions.push(Interaction::new(u, i));
    }
    InteractionGraph::from_parts(user_ids, item_ids, interactions)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_round_trip() {
        let g = InteractionGraph::from_raw_pairs([("alice", "m1"), ("bob", "m2"), ("alice", "m2")]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(CACHE_FILE);
        write_cache(&p, &g).unwrap();
        assert_eq!(read_cache(&p).unwrap(), g);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(CACHE_FILE);
        std::fs::write(&p, b"NOTADATASET_____").unwrap();
        assert!(matches!(read_cache(&p), Err(DataError::CorruptCache(_))));
    }
}
