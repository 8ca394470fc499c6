use super::{DataError, Interaction, InteractionGraph};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

/// Keeps MovieLens-1M ratings of 3 and above. Of the 1,000,209 ratings,
/// exactly 836,478 survive, over 6,040 users and 3,629 movies.
pub const ML1M_RATING_THRESHOLD: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFormat {
    /// `user::item::rating::timestamp`
    MovielensDat,
    Csv,
    Tsv,
}

impl std::str::FromStr for InputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "movielens-dat" | "dat" => Ok(Self::MovielensDat),
            "csv" => Ok(Self::Csv),
            "tsv" => Ok(Self::Tsv),
            other => Err(format!("unknown input format `{other}` (movielens-dat, csv, tsv)")),
        }
    }
}

impl std::fmt::Display for InputFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::MovielensDat => "movielens-dat",
            Self::Csv => "csv",
            Self::Tsv => "tsv",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawRecord {
    pub user: String,
    pub item: String,
    pub rating: Option<f64>,
    pub timestamp: Option<i64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Records rated strictly below this are dropped. Unrated records are kept.
    pub rating_threshold: Option<f64>,
    /// Iterative k-core threshold; `None` or `Some(0)` disables it.
    pub kcore: Option<usize>,
}

/// Reads, filters, deduplicates, k-core filters and indexes an interaction file.
pub fn ingest_interactions(
    path: &Path,
    format: InputFormat,
    options: &IngestOptions,
) -> Result<InteractionGraph, DataError> {
    let records = read_records(path, format)?;
    ingest_records(&records, options)
}

/// The in-memory half of [`ingest_interactions`].
pub fn ingest_records(records: &[RawRecord], options: &IngestOptions) -> Result<InteractionGraph, DataError> {
    let mut users = Interner::default();
    let mut items = Interner::default();
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    for r in records {
        if let (Some(t), Some(v)) = (options.rating_threshold, r.rating) {
            if v < t {
                continue;
            }
        }
        let p = Interaction::new(users.intern(&r.user), items.intern(&r.item));
        if seen.insert(p) {
            pairs.push(p);
        }
    }
    if let Some(k) = options.kcore {
        pairs = kcore_filter(pairs, k);
    }
    if pairs.is_empty() {
        return Err(DataError::EmptyAfterFiltering);
    }

    // Re-index the survivors so indices are contiguous, in first-appearance order.
    let mut user_map = HashMap::new();
    let mut item_map = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let reindexed = pairs
        .iter()
        .map(|p| {
            let u = *user_map.entry(p.user).or_insert_with(|| {
                user_ids.push(users.ids[p.user].clone());
                user_ids.len() - 1
            });
            let i = *item_map.entry(p.item).or_insert_with(|| {
                item_ids.push(items.ids[p.item].clone());
                item_ids.len() - 1
            });
            Interaction::new(u, i)
        })
        .collect();
    InteractionGraph::from_parts(user_ids, item_ids, reindexed)
}

/// Removes pairs whose user or item has fewer than `k` interactions, repeating
/// until no pair is removed. Order of survivors is preserved.
pub fn kcore_filter(mut pairs: Vec<Interaction>, k: usize) -> Vec<Interaction> {
    if k <= 1 {
        return pairs;
    }
    loop {
        let mut user_deg: HashMap<usize, usize> = HashMap::new();
        let mut item_deg: HashMap<usize, usize> = HashMap::new();
        for p in &pairs {
            *user_deg.entry(p.user).or_default() += 1;
            *item_deg.entry(p.item).or_default() += 1;
        }
        let before = pairs.len();
        pairs.retain(|p| user_deg[&p.user] >= k && item_deg[&p.item] >= k);
        if pairs.len() == before {
            return pairs;
        }
    }
}

/// Interaction counts for every integer rating threshold between the
/// observed minimum and maximum rating, ascending.
pub fn sweep_rating_thresholds(records: &[RawRecord], kcore: Option<usize>) -> Vec<(f64, usize)> {
    let ratings = records.iter().filter_map(|r| r.rating);
    let (lo, hi) = ratings.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut t = lo.floor();
    while t <= hi.ceil() {
        let opts = IngestOptions { rating_threshold: Some(t), kcore };
        let n = ingest_records(records, &opts).map(|g| g.len()).unwrap_or(0);
        out.push((t, n));
        t += 1.0;
    }
    out
}

pub fn read_records(path: &Path, format: InputFormat) -> Result<Vec<RawRecord>, DataError> {
    let file = File::open(path).map_err(|source| DataError::Unreadable { path: path.to_path_buf(), source })?;
    match format {
        InputFormat::MovielensDat => read_dat(path, BufReader::new(file)),
        InputFormat::Csv => read_delimited(path, file, b','),
        InputFormat::Tsv => read_delimited(path, file, b'\t'),
    }
}

fn read_dat(path: &Path, reader: impl BufRead) -> Result<Vec<RawRecord>, DataError> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n as u64 + 1;
        let line = line.map_err(|source| DataError::Unreadable { path: path.to_path_buf(), source })?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split("::").collect();
        out.push(parse_fields(&fields).map_err(|reason| DataError::Malformed {
            path: path.to_path_buf(),
            line: line_no,
            reason,
        })?);
    }
    Ok(out)
}

const HEADER_TOKENS: &[&str] = &[
    "user", "user_id", "userid", "uid", "item", "item_id", "itemid", "iid", "movie", "movie_id",
    "movieid", "rating", "timestamp",
];

fn looks_like_header(fields: &[&str]) -> bool {
    fields.iter().any(|f| HEADER_TOKENS.contains(&f.trim().to_ascii_lowercase().as_str()))
        || fields.get(2).is_some_and(|r| r.trim().parse::<f64>().is_err())
}

fn read_delimited(path: &Path, file: File, delimiter: u8) -> Result<Vec<RawRecord>, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut out = Vec::new();
    let mut first = true;
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            DataError::Malformed { path: path.to_path_buf(), line, reason: e.to_string() }
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let fields: Vec<&str> = rec.iter().collect();
        if fields.iter().all(|f| f.is_empty()) {
            continue;
        }
        if std::mem::take(&mut first) && looks_like_header(&fields) {
            continue;
        }
        out.push(parse_fields(&fields).map_err(|reason| DataError::Malformed {
            path: path.to_path_buf(),
            line,
            reason,
        })?);
    }
    Ok(out)
}

fn parse_fields(fields: &[&str]) -> Result<RawRecord, String> {
    if fields.len() < 2 {
        return Err(format!("expected at least 2 fields, found {}", fields.len()));
    }
    let user = fields[0].trim();
    let item = fields[1].trim();
    if user.is_empty() || item.is_empty() {
        return Err("empty user or item id".into());
    }
    let rating = match fields.get(2).map(|s| s.trim()) {
        None | Some("") => None,
        Some(s) => Some(s.parse::<f64>().map_err(|_| format!("bad rating `{s}`"))?),
    };
    let timestamp = match fields.get(3).map(|s| s.trim()) {
        None | Some("") => None,
        Some(s) => Some(s.parse::<i64>().map_err(|_| format!("bad timestamp `{s}`"))?),
    };
    Ok(RawRecord { user: user.to_owned(), item: item.to_owned(), rating, timestamp })
}

#[derive(Default)]
struct Interner {
    index: HashMap<String, usize>,
    ids: Vec<String>,
}

impl Interner {
    fn intern(&mut self, raw: &str) -> usize {
        if let Some(&i) = self.index.get(raw) {
            return i;
        }
        self.ids.push(raw.to_owned());
        self.index.insert(raw.to_owned(), self.ids.len() - 1);
        self.ids.len() - 1
    }
}
