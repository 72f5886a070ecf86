//! Playcount ingestion, activity filtering, binarization and the
//! train / validation / test / held-out split.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One stored raw interaction. Counts are always positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Playcount {
    pub user: usize,
    pub item: usize,
    pub count: u64,
}

/// Sparse user x item playcount matrix with external id tables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlaycountMatrix {
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    entries: Vec<Playcount>,
}

impl PlaycountMatrix {
    pub fn new(
        user_ids: Vec<String>,
        item_ids: Vec<String>,
        entries: Vec<Playcount>,
    ) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if e.user >= user_ids.len() || e.item >= item_ids.len() {
                return Err(Error::Data(format!(
                    "entry ({}, {}) outside a {}x{} matrix",
                    e.user,
                    e.item,
                    user_ids.len(),
                    item_ids.len()
                )));
            }
            if e.count == 0 {
                return Err(Error::Data(format!(
                    "zero playcount stored for ({}, {})",
                    e.user, e.item
                )));
            }
            if !seen.insert((e.user, e.item)) {
                return Err(Error::Data(format!(
                    "duplicate pair ({}, {})",
                    user_ids[e.user], item_ids[e.item]
                )));
            }
        }
        Ok(PlaycountMatrix {
            user_ids,
            item_ids,
            entries,
        })
    }

    pub fn empty() -> Self {
        PlaycountMatrix {
            user_ids: Vec::new(),
            item_ids: Vec::new(),
            entries: Vec::new(),
        }
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn entries(&self) -> &[Playcount] {
        &self.entries
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Raw count for a pair, `None` when absent.
    pub fn get(&self, user: usize, item: usize) -> Option<u64> {
        self.entries
            .iter()
            .find(|e| e.user == user && e.item == item)
            .map(|e| e.count)
    }

    pub fn count_map(&self) -> HashMap<(usize, usize), u64> {
        self.entries
            .iter()
            .map(|e| ((e.user, e.item), e.count))
            .collect()
    }

    /// Total playcount per user and per item.
    fn totals(&self) -> (Vec<u64>, Vec<u64>) {
        let mut users = vec![0u64; self.n_users()];
        let mut items = vec![0u64; self.n_items()];
        for e in &self.entries {
            users[e.user] += e.count;
            items[e.item] += e.count;
        }
        (users, items)
    }

    /// Keeps only the flagged users and items, compacting indices while
    /// preserving relative order.
    fn retain(&self, keep_user: &[bool], keep_item: &[bool]) -> PlaycountMatrix {
        let remap = |keep: &[bool]| {
            let mut next = 0usize;
            keep.iter()
                .map(|&k| {
                    if k {
                        next += 1;
                        Some(next - 1)
                    } else {
                        None
                    }
                })
                .collect::<Vec<_>>()
        };
        let user_map = remap(keep_user);
        let item_map = remap(keep_item);
        let entries = self
            .entries
            .iter()
            .filter_map(|e| {
                Some(Playcount {
                    user: user_map[e.user]?,
                    item: item_map[e.item]?,
                    count: e.count,
                })
            })
            .collect();
        let pick = |ids: &[String], keep: &[bool]| {
            ids.iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(id, _)| id.clone())
                .collect::<Vec<_>>()
        };
        PlaycountMatrix {
            user_ids: pick(&self.user_ids, keep_user),
            item_ids: pick(&self.item_ids, keep_item),
            entries,
        }
    }

    /// Writes the matrix as tab-separated `user_id item_id count` lines.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.entries {
            writeln!(
                out,
                "{}\t{}\t{}",
                self.user_ids[e.user], self.item_ids[e.item], e.count
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Separator {
    Tab,
    Comma,
    Whitespace,
}

impl Separator {
    fn detect(line: &str) -> Self {
        if line.contains('\t') {
            Separator::Tab
        } else if line.contains(',') {
            Separator::Comma
        } else {
            Separator::Whitespace
        }
    }

    fn split<'a>(&self, line: &'a str) -> Vec<&'a str> {
        match self {
            Separator::Tab => line.split('\t').map(str::trim).collect(),
            Separator::Comma => line.split(',').map(str::trim).collect(),
            Separator::Whitespace => line.split_whitespace().collect(),
        }
    }
}

/// Parses `user_id item_id count` triples. The separator (tab, comma or
/// whitespace) is detected from the first non-blank line. Indices are
/// assigned in order of first appearance.
pub fn parse_playcounts(text: &str) -> Result<PlaycountMatrix> {
    read_playcounts(text.as_bytes())
}

pub fn read_playcounts<R: BufRead>(reader: R) -> Result<PlaycountMatrix> {
    let mut sep = None;
    let mut user_index: HashMap<String, usize> = HashMap::new();
    let mut item_index: HashMap<String, usize> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut entries = Vec::new();
    let mut seen = HashSet::new();

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let sep = *sep.get_or_insert_with(|| Separator::detect(line));
        let fields = sep.split(line);
        if fields.len() != 3 {
            return Err(Error::parse(
                lineno,
                format!("expected 3 fields, found {}", fields.len()),
            ));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::parse(lineno, "empty user or item id"));
        }
        let count: u64 = fields[2].parse().ok().filter(|&c| c > 0).ok_or_else(|| {
            Error::parse(
                lineno,
                format!("count `{}` is not a positive integer", fields[2]),
            )
        })?;
        let user = *user_index.entry(fields[0].to_string()).or_insert_with(|| {
            user_ids.push(fields[0].to_string());
            user_ids.len() - 1
        });
        let item = *item_index.entry(fields[1].to_string()).or_insert_with(|| {
            item_ids.push(fields[1].to_string());
            item_ids.len() - 1
        });
        if !seen.insert((user, item)) {
            return Err(Error::Data(format!(
                "line {lineno}: duplicate pair ({}, {})",
                fields[0], fields[1]
            )));
        }
        entries.push(Playcount { user, item, count });
    }
    Ok(PlaycountMatrix {
        user_ids,
        item_ids,
        entries,
    })
}

/// Removes items heard by fewer than `min_users_per_song` users and users
/// with fewer than `min_songs_per_user` songs, alternating until neither
/// rule removes anything. Degrees count distinct raw entries.
pub fn filter_activity(
    m: &PlaycountMatrix,
    min_songs_per_user: usize,
    min_users_per_song: usize,
) -> PlaycountMatrix {
    let min_songs = min_songs_per_user.max(1);
    let min_users = min_users_per_song.max(1);
    let mut keep_user = vec![true; m.n_users()];
    let mut keep_item = vec![true; m.n_items()];

    loop {
        let mut changed = false;

        let mut item_deg = vec![0usize; m.n_items()];
        for e in &m.entries {
            if keep_user[e.user] && keep_item[e.item] {
                item_deg[e.item] += 1;
            }
        }
        for (keep, &deg) in keep_item.iter_mut().zip(&item_deg) {
            if *keep && deg < min_users {
                *keep = false;
                changed = true;
            }
        }

        let mut user_deg = vec![0usize; m.n_users()];
        for e in &m.entries {
            if keep_user[e.user] && keep_item[e.item] {
                user_deg[e.user] += 1;
            }
        }
        for (keep, &deg) in keep_user.iter_mut().zip(&user_deg) {
            if *keep && deg < min_songs {
                *keep = false;
                changed = true;
            }
        }

        if !changed {
            break;
        }
    }
    m.retain(&keep_user, &keep_item)
}

/// Keeps the `top_users` users and `top_items` items with the largest total
/// playcount (ties broken by index). `None` leaves that axis untouched.
pub fn retain_top(
    m: &PlaycountMatrix,
    top_users: Option<usize>,
    top_items: Option<usize>,
) -> PlaycountMatrix {
    let (user_tot, item_tot) = m.totals();
    let top_mask = |totals: &[u64], n: Option<usize>| {
        let mut mask = vec![true; totals.len()];
        if let Some(n) = n {
            if n < totals.len() {
                let mut order: Vec<usize> = (0..totals.len()).collect();
                order.sort_by(|&a, &b| totals[b].cmp(&totals[a]).then(a.cmp(&b)));
                mask.iter_mut().for_each(|k| *k = false);
                for &i in &order[..n] {
                    mask[i] = true;
                }
            }
        }
        mask
    };
    m.retain(
        &top_mask(&user_tot, top_users),
        &top_mask(&item_tot, top_items),
    )
}

/// Binary positive set of a playcount matrix, sorted by (user, item).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMatrix {
    pub n_users: usize,
    pub n_items: usize,
    pub positives: Vec<(usize, usize)>,
}

impl BinaryMatrix {
    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.positives.binary_search(&(user, item)).is_ok()
    }
}

/// Entries with `count >= threshold` become positives; the rest drop out of
/// the positive set.
pub fn binarize(m: &PlaycountMatrix, threshold: u64) -> BinaryMatrix {
    let threshold = threshold.max(1);
    let mut positives: Vec<(usize, usize)> = m
        .entries
        .iter()
        .filter(|e| e.count >= threshold)
        .map(|e| (e.user, e.item))
        .collect();
    positives.sort_unstable();
    BinaryMatrix {
        n_users: m.n_users(),
        n_items: m.n_items(),
        positives,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitLabel {
    Train,
    Validation,
    TestIn,
    TestOut,
}

impl SplitLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitLabel::Train => "train",
            SplitLabel::Validation => "validation",
            SplitLabel::TestIn => "test_in",
            SplitLabel::TestOut => "test_out",
        }
    }
}

impl fmt::Display for SplitLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(SplitLabel::Train),
            "validation" => Ok(SplitLabel::Validation),
            "test_in" => Ok(SplitLabel::TestIn),
            "test_out" => Ok(SplitLabel::TestOut),
            other => Err(format!("unknown split label `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub out_of_matrix_song_fraction: f64,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            out_of_matrix_song_fraction: 0.05,
            train_fraction: 0.70,
            validation_fraction: 0.20,
            test_fraction: 0.10,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        let fr = [
            (
                "out_of_matrix_song_fraction",
                self.out_of_matrix_song_fraction,
            ),
            ("train_fraction", self.train_fraction),
            ("validation_fraction", self.validation_fraction),
            ("test_fraction", self.test_fraction),
        ];
        for (name, v) in fr {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        let sum = self.train_fraction + self.validation_fraction + self.test_fraction;
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "train + validation + test fractions sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }

    /// Number of held-out items, `ceil(fraction * n_items)`. Products within
    /// 1e-9 of an integer are taken as that integer, so 7% of 100 songs
    /// (7.000000000000001 in floating point) gives 7 rather than 8.
    pub fn n_out_of_matrix(&self, n_items: usize) -> usize {
        let x = self.out_of_matrix_song_fraction * n_items as f64;
        let n = if (x - x.round()).abs() < 1e-9 {
            x.round()
        } else {
            x.ceil()
        };
        (n as usize).min(n_items)
    }
}

/// A labelled positive interaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub playcount: u64,
    pub label: SplitLabel,
}

/// Binarized feedback with split labels, plus the raw below-threshold
/// entries which still carry confidence during training.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionSet {
    n_users: usize,
    n_items: usize,
    entries: Vec<Interaction>,
    out_of_matrix: Vec<bool>,
    sub_threshold: Vec<Playcount>,
    config: SplitConfig,
}

impl InteractionSet {
    /// Builds and validates a set from explicit parts.
    pub fn from_parts(
        n_users: usize,
        n_items: usize,
        mut entries: Vec<Interaction>,
        out_of_matrix_items: &[usize],
        mut sub_threshold: Vec<Playcount>,
        config: SplitConfig,
    ) -> Result<Self> {
        let mut out_of_matrix = vec![false; n_items];
        for &i in out_of_matrix_items {
            if i >= n_items {
                return Err(Error::Data(format!("held-out item {i} out of range")));
            }
            out_of_matrix[i] = true;
        }
        entries.sort_by_key(|e| (e.user, e.item));
        for w in entries.windows(2) {
            if (w[0].user, w[0].item) == (w[1].user, w[1].item) {
                return Err(Error::Data(format!(
                    "duplicate labelled pair ({}, {})",
                    w[0].user, w[0].item
                )));
            }
        }
        for e in &entries {
            if e.user >= n_users || e.item >= n_items {
                return Err(Error::Data(format!(
                    "entry ({}, {}) out of range",
                    e.user, e.item
                )));
            }
            if e.playcount == 0 {
                return Err(Error::Data(format!(
                    "positive entry ({}, {}) has zero playcount",
                    e.user, e.item
                )));
            }
            let held_out = out_of_matrix[e.item];
            if held_out != (e.label == SplitLabel::TestOut) {
                return Err(Error::Data(format!(
                    "entry ({}, {}) labelled {} but item is {}held out",
                    e.user,
                    e.item,
                    e.label,
                    if held_out { "" } else { "not " }
                )));
            }
        }
        sub_threshold.sort_by_key(|e| (e.user, e.item));
        Ok(InteractionSet {
            n_users,
            n_items,
            entries,
            out_of_matrix,
            sub_threshold,
            config,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// Positive entries sorted by (user, item).
    pub fn entries(&self) -> &[Interaction] {
        &self.entries
    }

    pub fn sub_threshold(&self) -> &[Playcount] {
        &self.sub_threshold
    }

    pub fn config(&self) -> &SplitConfig {
        &self.config
    }

    pub fn is_out_of_matrix(&self, item: usize) -> bool {
        self.out_of_matrix[item]
    }

    pub fn out_of_matrix_items(&self) -> Vec<usize> {
        (0..self.n_items)
            .filter(|&i| self.out_of_matrix[i])
            .collect()
    }

    pub fn in_matrix_items(&self) -> Vec<usize> {
        (0..self.n_items)
            .filter(|&i| !self.out_of_matrix[i])
            .collect()
    }

    pub fn with_label(&self, label: SplitLabel) -> impl Iterator<Item = &Interaction> {
        self.entries.iter().filter(move |e| e.label == label)
    }

    pub fn count(&self, label: SplitLabel) -> usize {
        self.with_label(label).count()
    }

    /// Writes the split manifest: a `# {json}` header line with the seed and
    /// fractions, then one `user_index item_index label` line per entry.
    pub fn write_manifest<W: Write>(&self, mut out: W, config_hash: &str) -> Result<()> {
        let header = ManifestHeader {
            format: MANIFEST_FORMAT.to_string(),
            version: MANIFEST_VERSION,
            seed: self.config.seed,
            out_of_matrix_song_fraction: self.config.out_of_matrix_song_fraction,
            train_fraction: self.config.train_fraction,
            validation_fraction: self.config.validation_fraction,
            test_fraction: self.config.test_fraction,
            n_users: self.n_users,
            n_items: self.n_items,
            out_of_matrix_items: self.out_of_matrix_items(),
            config_hash: config_hash.to_string(),
        };
        writeln!(out, "# {}", serde_json::to_string(&header)?)?;
        for e in &self.entries {
            writeln!(out, "{} {} {}", e.user, e.item, e.label)?;
        }
        Ok(())
    }

    /// Reloads a manifest against the filtered playcounts it was written
    /// from. Entries absent from the manifest become below-threshold raw
    /// entries.
    pub fn read_manifest<R: BufRead>(
        reader: R,
        raw: &PlaycountMatrix,
    ) -> Result<(Self, ManifestHeader)> {
        let mut lines = reader.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::parse(1, "empty manifest"))??;
        let json = first
            .strip_prefix("# ")
            .ok_or_else(|| Error::parse(1, "missing `# {json}` header"))?;
        let header: ManifestHeader = serde_json::from_str(json)
            .map_err(|e| Error::parse(1, format!("bad manifest header: {e}")))?;
        if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
            return Err(Error::parse(
                1,
                format!("unsupported manifest {} v{}", header.format, header.version),
            ));
        }
        if header.n_users != raw.n_users() || header.n_items != raw.n_items() {
            return Err(Error::Data(format!(
                "manifest is {}x{} but playcounts are {}x{}",
                header.n_users,
                header.n_items,
                raw.n_users(),
                raw.n_items()
            )));
        }
        let counts = raw.count_map();
        let mut entries = Vec::new();
        let mut labelled = HashSet::new();
        for (k, line) in lines.enumerate() {
            let lineno = k + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(Error::parse(lineno, "expected `user item label`"));
            }
            let user: usize = f[0]
                .parse()
                .map_err(|_| Error::parse(lineno, "bad user index"))?;
            let item: usize = f[1]
                .parse()
                .map_err(|_| Error::parse(lineno, "bad item index"))?;
            let label: SplitLabel = f[2].parse().map_err(|m| Error::parse(lineno, m))?;
            let playcount = *counts.get(&(user, item)).ok_or_else(|| {
                Error::Data(format!(
                    "manifest line {lineno}: ({user}, {item}) has no playcount"
                ))
            })?;
            labelled.insert((user, item));
            entries.push(Interaction {
                user,
                item,
                playcount,
                label,
            });
        }
        let sub_threshold = raw
            .entries()
            .iter()
            .filter(|e| !labelled.contains(&(e.user, e.item)))
            .copied()
            .collect();
        let config = SplitConfig {
            out_of_matrix_song_fraction: header.out_of_matrix_song_fraction,
            train_fraction: header.train_fraction,
            validation_fraction: header.validation_fraction,
            test_fraction: header.test_fraction,
            seed: header.seed,
        };
        let set = InteractionSet::from_parts(
            header.n_users,
            header.n_items,
            entries,
            &header.out_of_matrix_items,
            sub_threshold,
            config,
        )?;
        Ok((set, header))
    }
}

const MANIFEST_FORMAT: &str = "avdrec-split-manifest";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub out_of_matrix_song_fraction: f64,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub n_users: usize,
    pub n_items: usize,
    pub out_of_matrix_items: Vec<usize>,
    pub config_hash: String,
}

/// Holds out `ceil(fraction * n_items)` seeded-random songs (all their
/// positives become `test_out`) and partitions the remaining positives per
/// entry into train / validation / test_in.
pub fn make_splits(
    bin: &BinaryMatrix,
    raw: &PlaycountMatrix,
    cfg: &SplitConfig,
) -> Result<InteractionSet> {
    cfg.validate()?;
    if bin.n_items == 0 || bin.positives.is_empty() {
        return Err(Error::Data("cannot split an empty matrix".into()));
    }
    if bin.n_users != raw.n_users() || bin.n_items != raw.n_items() {
        return Err(Error::Shape(
            "binary and raw matrices disagree on dimensions".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut items: Vec<usize> = (0..bin.n_items).collect();
    items.shuffle(&mut rng);
    let mut held_out = items[..cfg.n_out_of_matrix(bin.n_items)].to_vec();
    held_out.sort_unstable();
    let mut is_held = vec![false; bin.n_items];
    for &i in &held_out {
        is_held[i] = true;
    }

    let counts = raw.count_map();
    let playcount = |u: usize, i: usize| -> Result<u64> {
        counts
            .get(&(u, i))
            .copied()
            .ok_or_else(|| Error::Data(format!("positive ({u}, {i}) missing from raw playcounts")))
    };

    let mut entries = Vec::with_capacity(bin.positives.len());
    let mut in_matrix = Vec::new();
    for &(u, i) in &bin.positives {
        if is_held[i] {
            entries.push(Interaction {
                user: u,
                item: i,
                playcount: playcount(u, i)?,
                label: SplitLabel::TestOut,
            });
        } else {
            in_matrix.push((u, i));
        }
    }

    in_matrix.shuffle(&mut rng);
    let n = in_matrix.len();
    let n_train = (cfg.train_fraction * n as f64).round() as usize;
    let n_val = ((cfg.validation_fraction * n as f64).round() as usize).min(n - n_train);
    if n_train == 0 {
        return Err(Error::Config(format!(
            "split leaves no training entries ({n} in-matrix positives, train fraction {})",
            cfg.train_fraction
        )));
    }
    for (k, &(u, i)) in in_matrix.iter().enumerate() {
        let label = if k < n_train {
            SplitLabel::Train
        } else if k < n_train + n_val {
            SplitLabel::Validation
        } else {
            SplitLabel::TestIn
        };
        entries.push(Interaction {
            user: u,
            item: i,
            playcount: playcount(u, i)?,
            label,
        });
    }

    let sub_threshold = raw
        .entries()
        .iter()
        .filter(|e| !bin.contains(e.user, e.item))
        .copied()
        .collect();

    InteractionSet::from_parts(
        bin.n_users,
        bin.n_items,
        entries,
        &held_out,
        sub_threshold,
        *cfg,
    )
}
