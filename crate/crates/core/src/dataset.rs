//! Rating data: MovieLens ingestion, temporal batching and semi-synthetic
//! completion of the rating matrix.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use crate::dense;
use crate::error::{Error, Result};
use crate::recommender::{self, TrainingConfig, Variant};

pub const MIN_RATING: f64 = 1.0;
pub const MAX_RATING: f64 = 5.0;
pub const DEFAULT_RELEVANCE_THRESHOLD: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MovieLensFormat {
    /// `user<TAB>item<TAB>rating<TAB>timestamp` (ML-100K `u.data`).
    Tab100k,
    /// `user::item::rating::timestamp` (ML-1M `ratings.dat`).
    ColonColon1m,
}

impl MovieLensFormat {
    fn delimiter(self) -> &'static str {
        match self {
            MovieLensFormat::Tab100k => "\t",
            MovieLensFormat::ColonColon1m => "::",
        }
    }
}

impl FromStr for MovieLensFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tab_100k" | "100k" => Ok(MovieLensFormat::Tab100k),
            "coloncolon_1m" | "1m" => Ok(MovieLensFormat::ColonColon1m),
            other => Err(Error::InvalidArgument(format!(
                "unknown format {other:?} (expected tab_100k or coloncolon_1m)"
            ))),
        }
    }
}

impl fmt::Display for MovieLensFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MovieLensFormat::Tab100k => "tab_100k",
            MovieLensFormat::ColonColon1m => "coloncolon_1m",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub value: f64,
    pub timestamp: Option<i64>,
}

/// Sparse user × item ratings. A missing entry reads as rating `0`.
///
/// Entries keep their insertion order, which is the tie-break order for
/// temporal splitting.
#[derive(Debug, Clone)]
pub struct RatingMatrix {
    n_users: usize,
    n_items: usize,
    entries: Vec<Rating>,
    position: HashMap<(usize, usize), usize>,
    by_user: Vec<Vec<usize>>,
    user_ids: Vec<u64>,
    item_ids: Vec<u64>,
}

impl PartialEq for RatingMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.n_users == other.n_users
            && self.n_items == other.n_items
            && self.entries == other.entries
            && self.user_ids == other.user_ids
            && self.item_ids == other.item_ids
    }
}

impl RatingMatrix {
    pub fn new(n_users: usize, n_items: usize) -> Self {
        Self {
            n_users,
            n_items,
            entries: Vec::new(),
            position: HashMap::new(),
            by_user: vec![Vec::new(); n_users],
            user_ids: (0..n_users as u64).collect(),
            item_ids: (0..n_items as u64).collect(),
        }
    }

    /// Builds a matrix from `(user, item, rating)` triples.
    pub fn from_triples(
        n_users: usize,
        n_items: usize,
        triples: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut m = Self::new(n_users, n_items);
        for (u, i, r) in triples {
            m.insert(u, i, r, None)?;
        }
        Ok(m)
    }

    /// An empty matrix over the same users, items and original ids.
    pub fn empty_like(&self) -> Self {
        Self {
            n_users: self.n_users,
            n_items: self.n_items,
            entries: Vec::new(),
            position: HashMap::new(),
            by_user: vec![Vec::new(); self.n_users],
            user_ids: self.user_ids.clone(),
            item_ids: self.item_ids.clone(),
        }
    }

    pub fn insert(&mut self, user: usize, item: usize, value: f64, timestamp: Option<i64>) -> Result<()> {
        if user >= self.n_users || item >= self.n_items {
            return Err(Error::InvalidArgument(format!(
                "entry ({user}, {item}) outside {}x{} matrix",
                self.n_users, self.n_items
            )));
        }
        if !(MIN_RATING..=MAX_RATING).contains(&value) {
            return Err(Error::Validation(format!(
                "rating {value} at ({user}, {item}) outside [1, 5]"
            )));
        }
        if self.position.contains_key(&(user, item)) {
            return Err(Error::Validation(format!("duplicate rating for ({user}, {item})")));
        }
        self.position.insert((user, item), self.entries.len());
        self.by_user[user].push(item);
        self.entries.push(Rating {
            user,
            item,
            value,
            timestamp,
        });
        Ok(())
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Rating] {
        &self.entries
    }

    /// `R_ui`, or `0.0` when missing.
    pub fn get(&self, user: usize, item: usize) -> f64 {
        self.position
            .get(&(user, item))
            .map_or(0.0, |&p| self.entries[p].value)
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.position.contains_key(&(user, item))
    }

    /// Items rated by `user`, in insertion order.
    pub fn user_items(&self, user: usize) -> &[usize] {
        &self.by_user[user]
    }

    /// Number of stored ratings per item.
    pub fn item_counts(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.n_items];
        for e in &self.entries {
            counts[e.item] += 1.0;
        }
        counts
    }

    pub fn has_timestamps(&self) -> bool {
        self.entries.iter().all(|e| e.timestamp.is_some())
    }

    pub fn user_ids(&self) -> &[u64] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[u64] {
        &self.item_ids
    }

    /// Writes the ratings back out in MovieLens line format with original ids.
    pub fn write_movielens(&self, w: &mut impl Write, format: MovieLensFormat) -> std::io::Result<()> {
        let d = format.delimiter();
        for e in &self.entries {
            writeln!(
                w,
                "{}{d}{}{d}{}{d}{}",
                self.user_ids[e.user],
                self.item_ids[e.item],
                e.value,
                e.timestamp.unwrap_or(0)
            )?;
        }
        Ok(())
    }
}

/// Parses MovieLens rating lines. Users and items are re-indexed densely in
/// ascending order of their original ids.
pub fn parse_movielens(reader: impl BufRead, format: MovieLensFormat) -> Result<RatingMatrix> {
    let delim = format.delimiter();
    let mut raw: Vec<(u64, u64, f64, i64)> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(delim).collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 4 fields separated by {delim:?}, found {}", fields.len()),
            });
        }
        let field = |k: usize, name: &str| -> Result<&str> {
            let f = fields[k].trim();
            if f.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("empty {name} field"),
                });
            }
            Ok(f)
        };
        let bad = |name: &str, v: &str| Error::Parse {
            line: line_no,
            message: format!("cannot parse {name} {v:?}"),
        };
        let user = field(0, "user")?;
        let item = field(1, "item")?;
        let rating = field(2, "rating")?;
        let ts = field(3, "timestamp")?;
        let user: u64 = user.parse().map_err(|_| bad("user", user))?;
        let item: u64 = item.parse().map_err(|_| bad("item", item))?;
        let rating: f64 = rating.parse().map_err(|_| bad("rating", rating))?;
        let ts: i64 = ts.parse().map_err(|_| bad("timestamp", ts))?;
        if !(MIN_RATING..=MAX_RATING).contains(&rating) {
            return Err(Error::Validation(format!(
                "line {line_no}: rating {rating} outside [1, 5]"
            )));
        }
        raw.push((user, item, rating, ts));
    }
    if raw.is_empty() {
        return Err(Error::NoEntries);
    }

    let user_ids: Vec<u64> = raw.iter().map(|r| r.0).collect::<BTreeSet<_>>().into_iter().collect();
    let item_ids: Vec<u64> = raw.iter().map(|r| r.1).collect::<BTreeSet<_>>().into_iter().collect();
    let user_index: HashMap<u64, usize> = user_ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
    let item_index: HashMap<u64, usize> = item_ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();

    let mut m = RatingMatrix::new(user_ids.len(), item_ids.len());
    m.user_ids = user_ids;
    m.item_ids = item_ids;
    for (u, i, r, t) in raw {
        m.insert(user_index[&u], item_index[&i], r, Some(t))?;
    }
    Ok(m)
}

pub fn load_movielens(path: &Path, format: MovieLensFormat) -> Result<RatingMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_movielens(BufReader::new(file), format)
}

/// How entries are assigned to time-ordered batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    /// One global timeline cut into near-equal batches.
    Global,
    /// Each user's own timeline cut into near-equal batches.
    PerUser,
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(SplitMode::Global),
            "per_user" | "per-user" => Ok(SplitMode::PerUser),
            other => Err(Error::InvalidArgument(format!(
                "unknown split mode {other:?} (expected global or per_user)"
            ))),
        }
    }
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMode::Global => "global",
            SplitMode::PerUser => "per_user",
        })
    }
}

#[derive(Debug, Clone)]
pub struct TemporalSplit {
    pub mode: SplitMode,
    pub batches: Vec<RatingMatrix>,
}

impl TemporalSplit {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    /// Union of batches `0..=k`.
    pub fn prefix(&self, k: usize) -> RatingMatrix {
        let mut out = self.batches[0].empty_like();
        for batch in &self.batches[..=k] {
            for e in batch.entries() {
                out.insert(e.user, e.item, e.value, e.timestamp)
                    .expect("batches partition a valid matrix");
            }
        }
        out
    }
}

fn check_split_args(m: &RatingMatrix, n_batches: usize) -> Result<()> {
    if n_batches < 2 {
        return Err(Error::InvalidArgument(format!(
            "temporal split needs at least 2 batches, got {n_batches}"
        )));
    }
    if m.is_empty() {
        return Err(Error::NoEntries);
    }
    if !m.has_timestamps() {
        return Err(Error::MissingTimestamps);
    }
    Ok(())
}

fn timestamp_order(m: &RatingMatrix, positions: &mut [usize]) {
    positions.sort_by_key(|&p| m.entries[p].timestamp);
}

/// Cuts the global timeline into `n_batches` near-equal batches; equal
/// timestamps keep their input order.
pub fn temporal_split(m: &RatingMatrix, n_batches: usize) -> Result<TemporalSplit> {
    check_split_args(m, n_batches)?;
    if m.len() < n_batches {
        return Err(Error::InvalidArgument(format!(
            "{} entries cannot fill {n_batches} batches",
            m.len()
        )));
    }
    let mut order: Vec<usize> = (0..m.len()).collect();
    timestamp_order(m, &mut order);
    let n = order.len();
    let mut batches = vec![m.empty_like(); n_batches];
    for (rank, &p) in order.iter().enumerate() {
        let e = m.entries[p];
        batches[rank * n_batches / n].insert(e.user, e.item, e.value, e.timestamp)?;
    }
    Ok(TemporalSplit {
        mode: SplitMode::Global,
        batches,
    })
}

/// Cuts every user's own rating timeline into `n_batches` near-equal parts,
/// so batch `k` holds each user's `k`-th chronological slice.
pub fn temporal_split_per_user(m: &RatingMatrix, n_batches: usize) -> Result<TemporalSplit> {
    check_split_args(m, n_batches)?;
    let mut batches = vec![m.empty_like(); n_batches];
    for user in 0..m.n_users() {
        let mut order: Vec<usize> = m.user_items(user).iter().map(|&i| m.position[&(user, i)]).collect();
        timestamp_order(m, &mut order);
        let n = order.len();
        for (rank, &p) in order.iter().enumerate() {
            let e = m.entries[p];
            batches[rank * n_batches / n].insert(e.user, e.item, e.value, e.timestamp)?;
        }
    }
    Ok(TemporalSplit {
        mode: SplitMode::PerUser,
        batches,
    })
}

pub fn split(m: &RatingMatrix, n_batches: usize, mode: SplitMode) -> Result<TemporalSplit> {
    match mode {
        SplitMode::Global => temporal_split(m, n_batches),
        SplitMode::PerUser => temporal_split_per_user(m, n_batches),
    }
}

/// Fully observed ground-truth ratings.
#[derive(Debug, Clone, PartialEq)]
pub struct CompleteMatrix {
    n_users: usize,
    n_items: usize,
    values: Vec<f32>,
    pub relevance_threshold: f64,
}

impl CompleteMatrix {
    pub fn from_values(n_users: usize, n_items: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != n_users * n_items {
            return Err(Error::LengthMismatch {
                left: values.len(),
                right: n_users * n_items,
            });
        }
        if let Some(v) = values
            .iter()
            .find(|v| !((MIN_RATING as f32)..=(MAX_RATING as f32)).contains(*v))
        {
            return Err(Error::Validation(format!("complete rating {v} outside [1, 5]")));
        }
        Ok(Self {
            n_users,
            n_items,
            values,
            relevance_threshold: DEFAULT_RELEVANCE_THRESHOLD,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn get(&self, user: usize, item: usize) -> f64 {
        self.values[user * self.n_items + item] as f64
    }

    pub fn is_relevant(&self, user: usize, item: usize) -> bool {
        self.get(user, item) >= self.relevance_threshold
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        dense::write_dense(w, self.n_users, self.n_items, self.values.iter().copied())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        dense::save_dense(path, self.n_users, self.n_items, self.values.iter().copied())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (rows, cols, values) = dense::load_dense(path)?;
        Self::from_values(rows, cols, values)
    }
}

/// Fills every unobserved cell with a vanilla MF prediction clamped to
/// `[1, 5]`; observed cells are copied verbatim.
pub fn complete_semisynthetic(m: &RatingMatrix, trainer: &TrainingConfig, seed: u64) -> Result<CompleteMatrix> {
    if m.is_empty() {
        return Err(Error::NoEntries);
    }
    let cfg = TrainingConfig { seed, ..*trainer };
    let model = recommender::train(m, None, Variant::Mf, &cfg)?;
    let (n_users, n_items) = (m.n_users(), m.n_items());
    let mut values = Vec::with_capacity(n_users * n_items);
    for u in 0..n_users {
        for i in 0..n_items {
            let observed = m.get(u, i);
            let v = if observed != 0.0 {
                observed
            } else {
                let p = model.predict(u, i);
                if !p.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "completion prediction at ({u}, {i}) with {}",
                        cfg.describe()
                    )));
                }
                p.clamp(MIN_RATING, MAX_RATING)
            };
            values.push(v as f32);
        }
    }
    CompleteMatrix::from_values(n_users, n_items, values)
}
