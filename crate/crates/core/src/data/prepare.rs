use super::{build_split, ingest_interactions, write_cache, IngestOptions, InputFormat, Manifest, CACHE_FILE, MANIFEST_FILE};
use crate::{Error, Result};
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct PrepareOutcome {
    pub manifest: Manifest,
    /// The cache already matched the inputs and nothing was written.
    pub up_to_date: bool,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let f = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut r = BufReader::new(f);
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = r.read(&mut buf).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn existing_manifest(dir: &Path) -> Option<Manifest> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

/// Ingests `source` into `out_dir` (binary cache plus JSON manifest) unless
/// a cache built from identical inputs is already there.
pub fn prepare_dataset(
    source: &Path,
    format: InputFormat,
    options: &IngestOptions,
    split_seed: u64,
    out_dir: &Path,
) -> Result<PrepareOutcome> {
    let digest = sha256_file(source)?;
    if let Some(m) = existing_manifest(out_dir) {
        if m.matches_inputs(&digest, format, options, split_seed) && out_dir.join(&m.cache_file).exists() {
            return Ok(PrepareOutcome { manifest: m, up_to_date: true });
        }
    }
    let graph = ingest_interactions(source, format, options)?;
    let split = build_split(&graph, split_seed);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let cache = out_dir.join(CACHE_FILE);
    write_cache(&cache, &graph).map_err(|e| Error::io(format!("writing {}", cache.display()), e))?;
    let manifest = Manifest {
        source: source.display().to_string(),
        source_sha256: digest,
        format,
        rating_threshold: options.rating_threshold,
        kcore: options.kcore,
        num_users: graph.num_users(),
        num_items: graph.num_items(),
        num_interactions: graph.len(),
        min_user_degree: graph.min_user_degree(),
        min_item_degree: graph.min_item_degree(),
        id_map_checksum: graph.id_map_checksum(),
        split_seed,
        train: split.train.len(),
        valid: split.valid.len(),
        test: split.test.len(),
        cache_file: CACHE_FILE.to_string(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mp = out_dir.join(MANIFEST_FILE);
    std::fs::write(&mp, text).map_err(|e| Error::io(format!("writing {}", mp.display()), e))?;
    Ok(PrepareOutcome { manifest, up_to_date: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_run_is_up_to_date() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("r.csv");
        std::fs::write(&src, "user,item,rating\na,x,5\nb,x,4\nb,y,2\nc,y,5\n").unwrap();
        let out = dir.path().join("data");
        let opts = IngestOptions { rating_threshold: Some(3.0), kcore: None };
        let first = prepare_dataset(&src, InputFormat::Csv, &opts, 1, &out).unwrap();
        assert!(!first.up_to_date);
        assert_eq!((first.manifest.num_users, first.manifest.num_items, first.manifest.num_interactions), (3, 2, 3));
        let again = prepare_dataset(&src, InputFormat::Csv, &opts, 1, &out).unwrap();
        assert!(again.up_to_date);
        assert_eq!(again.manifest, first.manifest);
        let other = prepare_dataset(&src, InputFormat::Csv, &IngestOptions { rating_threshold: Some(2.0), kcore: None }, 1, &out).unwrap();
        assert!(!other.up_to_date);
        assert_eq!(other.manifest.num_interactions, 4);
    }
}
