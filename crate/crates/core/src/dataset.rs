//! Ingestion, reindexing and splitting of implicit-feedback data.
//!
//! Ratings and item attributes arrive as delimited text keyed by raw ids.
//! [`reindex`] maps both onto contiguous indices, collapses duplicate
//! feedback and assigns every item to exactly one group. [`split`] then cuts
//! a global shuffle of the interactions 60/20/20.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Column layout of a delimited ratings file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordFormat {
    pub separator: String,
    pub user_col: usize,
    pub item_col: usize,
}

impl Default for RecordFormat {
    fn default() -> Self {
        RecordFormat {
            separator: "::".to_string(),
            user_col: 0,
            item_col: 1,
        }
    }
}

/// How to treat attribute fields that carry several labels (e.g. the
/// `Action|Sci-Fi` genre lists of MovieLens).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MultiLabelPolicy {
    /// Keep the item when exactly one of its labels is in the filter set.
    Exclusive,
    /// Keep the item only when it carries a single label and that label is
    /// in the filter set.
    Sole,
}

impl std::str::FromStr for MultiLabelPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exclusive" => Ok(MultiLabelPolicy::Exclusive),
            "sole" => Ok(MultiLabelPolicy::Sole),
            other => Err(Error::Config(format!("unknown multi-label policy {other:?}"))),
        }
    }
}

/// Column layout of a delimited item-attribute file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeFormat {
    pub separator: String,
    pub item_col: usize,
    pub label_col: usize,
    /// Splits the label field into several labels when set.
    pub label_separator: Option<String>,
    pub policy: MultiLabelPolicy,
}

impl Default for AttributeFormat {
    fn default() -> Self {
        AttributeFormat {
            separator: ",".to_string(),
            item_col: 0,
            label_col: 1,
            label_separator: None,
            policy: MultiLabelPolicy::Exclusive,
        }
    }
}

/// One raw attribute line: an item id and its labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeRecord {
    pub item: String,
    pub labels: Vec<String>,
}

fn read_fields<'a>(
    path: &Path,
    line_no: usize,
    line: &'a str,
    separator: &str,
    needed: usize,
) -> Result<Vec<&'a str>> {
    if separator.is_empty() {
        return Err(Error::Config("empty field separator".into()));
    }
    let fields: Vec<&str> = line.split(separator).map(str::trim).collect();
    if fields.len() <= needed {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            line: line_no,
            message: format!("expected at least {} fields, found {}", needed + 1, fields.len()),
        });
    }
    Ok(fields)
}

fn non_empty(path: &Path, line_no: usize, value: &str, what: &str) -> Result<String> {
    if value.is_empty() {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            line: line_no,
            message: format!("empty {what} id"),
        });
    }
    Ok(value.to_string())
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    // Non-UTF-8 bytes (MovieLens titles are Latin-1) are replaced rather
    // than rejected; ids and labels are ASCII.
    Ok(BufReader::new(file).split(b'\n').enumerate().map(|(i, l)| {
        let line = l.map(|bytes| {
            let text = String::from_utf8_lossy(&bytes);
            text.strip_suffix('\r').unwrap_or(&text).to_string()
        });
        (i + 1, line)
    }))
}

/// Reads `(raw_user, raw_item)` pairs in file order. Blank lines are skipped;
/// extra columns (rating, timestamp) are ignored.
pub fn load_interactions(path: &Path, format: &RecordFormat) -> Result<Vec<(String, String)>> {
    let needed = format.user_col.max(format.item_col);
    let mut pairs = Vec::new();
    for (line_no, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields = read_fields(path, line_no, &line, &format.separator, needed)?;
        let user = non_empty(path, line_no, fields[format.user_col], "user")?;
        let item = non_empty(path, line_no, fields[format.item_col], "item")?;
        pairs.push((user, item));
    }
    Ok(pairs)
}

/// Reads item attribute records in file order.
pub fn load_attributes(path: &Path, format: &AttributeFormat) -> Result<Vec<AttributeRecord>> {
    let needed = format.item_col.max(format.label_col);
    let mut records = Vec::new();
    for (line_no, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields = read_fields(path, line_no, &line, &format.separator, needed)?;
        let item = non_empty(path, line_no, fields[format.item_col], "item")?;
        let raw = fields[format.label_col];
        let labels = match &format.label_separator {
            Some(sep) if !sep.is_empty() => raw
                .split(sep.as_str())
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect(),
            _ => vec![raw.to_string()],
        };
        records.push(AttributeRecord { item, labels });
    }
    Ok(records)
}

/// Attribute records after applying a label filter.
#[derive(Debug, Clone, Default)]
pub struct FilteredAttributes {
    /// Retained `(raw_item, label)` pairs in file order.
    pub records: Vec<(String, String)>,
    /// Items that had an attribute record but were dropped by the filter.
    /// Their interactions are discarded at reindex.
    pub excluded: HashSet<String>,
    /// The filter labels, in the order they define group indices.
    pub labels: Vec<String>,
}

/// Keeps only the items whose labels select exactly one of `labels`
/// according to `policy`.
pub fn filter_attributes(
    records: &[AttributeRecord],
    labels: &[String],
    policy: MultiLabelPolicy,
) -> Result<FilteredAttributes> {
    if labels.is_empty() {
        return Err(Error::Config("attribute filter has no labels".into()));
    }
    let wanted: HashSet<&str> = labels.iter().map(String::as_str).collect();
    let mut out = FilteredAttributes {
        labels: labels.to_vec(),
        ..Default::default()
    };
    for rec in records {
        let hits: Vec<&String> = rec.labels.iter().filter(|l| wanted.contains(l.as_str())).collect();
        let keep = match policy {
            MultiLabelPolicy::Exclusive => hits.len() == 1,
            MultiLabelPolicy::Sole => rec.labels.len() == 1 && hits.len() == 1,
        };
        if keep {
            out.records.push((rec.item.clone(), hits[0].clone()));
        } else {
            out.excluded.insert(rec.item.clone());
        }
    }
    Ok(out)
}

/// Wraps single-label records as a filtered attribute set whose group order
/// is the order of first appearance. Used when no label filter is configured.
pub fn unfiltered_attributes(records: &[AttributeRecord]) -> Result<FilteredAttributes> {
    let mut labels: Vec<String> = Vec::new();
    let mut out = FilteredAttributes::default();
    for rec in records {
        match rec.labels.as_slice() {
            [label] => {
                if !labels.contains(label) {
                    labels.push(label.clone());
                }
                out.records.push((rec.item.clone(), label.clone()));
            }
            _ => {
                return Err(Error::Data(format!(
                    "item {} carries {} labels; configure a label filter",
                    rec.item,
                    rec.labels.len()
                )))
            }
        }
    }
    out.labels = labels;
    Ok(out)
}

/// A single binary user-item feedback entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
}

/// Deduplicated positive feedback with per-user sorted positive sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionTable {
    interactions: Vec<Interaction>,
    user_positives: Vec<Vec<usize>>,
    num_users: usize,
    num_items: usize,
}

impl InteractionTable {
    /// Builds a table, collapsing duplicate pairs. Interactions are stored
    /// sorted by `(user, item)`.
    pub fn new(num_users: usize, num_items: usize, pairs: impl IntoIterator<Item = Interaction>) -> Result<Self> {
        let mut interactions: Vec<Interaction> = pairs.into_iter().collect();
        for it in &interactions {
            if it.user >= num_users || it.item >= num_items {
                return Err(Error::Data(format!(
                    "interaction ({}, {}) outside {num_users} users x {num_items} items",
                    it.user, it.item
                )));
            }
        }
        interactions.sort_unstable();
        interactions.dedup();
        let mut user_positives = vec![Vec::new(); num_users];
        for it in &interactions {
            user_positives[it.user].push(it.item);
        }
        Ok(InteractionTable {
            interactions,
            user_positives,
            num_users,
            num_items,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    /// Sorted positive items of `user`.
    pub fn positives(&self, user: usize) -> &[usize] {
        &self.user_positives[user]
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.user_positives[user].binary_search(&item).is_ok()
    }

    pub fn num_negatives(&self, user: usize) -> usize {
        self.num_items - self.user_positives[user].len()
    }

    /// Unobserved items of `user` in ascending order.
    pub fn negatives(&self, user: usize) -> impl Iterator<Item = usize> + '_ {
        let pos = &self.user_positives[user];
        let mut cursor = 0;
        (0..self.num_items).filter(move |&item| {
            while cursor < pos.len() && pos[cursor] < item {
                cursor += 1;
            }
            !(cursor < pos.len() && pos[cursor] == item)
        })
    }

    /// The `rank`-th unobserved item of `user` (0-based, ascending order).
    pub fn nth_negative(&self, user: usize, rank: usize) -> Option<usize> {
        if rank >= self.num_negatives(user) {
            return None;
        }
        // Each positive below the answer shifts it up by one.
        let mut item = rank;
        for &p in &self.user_positives[user] {
            if p <= item {
                item += 1;
            } else {
                break;
            }
        }
        Some(item)
    }

    /// Number of interactions per item.
    pub fn item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_items];
        for it in &self.interactions {
            counts[it.item] += 1;
        }
        counts
    }

    /// SHA-256 over the index space and the sorted interaction list.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(format!("{} {}\n", self.num_users, self.num_items));
        for it in &self.interactions {
            hasher.update(format!("{}\t{}\n", it.user, it.item));
        }
        hex::encode(hasher.finalize())
    }
}

/// Assignment of every item to one of `A` disjoint groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupMap {
    item_group: Vec<usize>,
    labels: Vec<String>,
}

impl GroupMap {
    /// Every item must map into `0..labels.len()` and every group must be
    /// non-empty.
    pub fn new(item_group: Vec<usize>, labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("group map needs at least one group".into()));
        }
        let mut sizes = vec![0usize; labels.len()];
        for (item, &g) in item_group.iter().enumerate() {
            if g >= labels.len() {
                return Err(Error::Data(format!("item {item} has group {g} out of range")));
            }
            sizes[g] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Data(format!("group {:?} has no items", labels[empty])));
        }
        Ok(GroupMap { item_group, labels })
    }

    pub fn num_groups(&self) -> usize {
        self.labels.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_group.len()
    }

    pub fn group_of(&self, item: usize) -> usize {
        self.item_group[item]
    }

    pub fn item_groups(&self) -> &[usize] {
        &self.item_group
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.labels.len()];
        for &g in &self.item_group {
            sizes[g] += 1;
        }
        sizes
    }

    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for label in &self.labels {
            hasher.update(format!("{label}\n"));
        }
        for (item, g) in self.item_group.iter().enumerate() {
            hasher.update(format!("{item}\t{g}\n"));
        }
        hex::encode(hasher.finalize())
    }
}

/// Contiguous index maps back to raw ids.
#[derive(Debug, Clone, Default)]
pub struct IdMaps {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

/// Maps raw ids to contiguous indices and builds the group map.
///
/// Users are numbered in order of first appearance in `pairs`, items in
/// order of first appearance in the attribute records, so items that never
/// received feedback stay in the catalog. Interactions with items dropped by
/// the attribute filter are discarded.
pub fn reindex(
    pairs: &[(String, String)],
    attributes: &FilteredAttributes,
) -> Result<(InteractionTable, GroupMap, IdMaps)> {
    let label_index: HashMap<&str, usize> = attributes
        .labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();

    let mut item_index: HashMap<&str, usize> = HashMap::new();
    let mut item_label: Vec<usize> = Vec::new();
    let mut maps = IdMaps::default();
    for (item, label) in &attributes.records {
        let g = *label_index
            .get(label.as_str())
            .ok_or_else(|| Error::Data(format!("label {label:?} is not a configured group")))?;
        match item_index.get(item.as_str()) {
            Some(&idx) if item_label[idx] != g => {
                return Err(Error::ConflictingAttribute {
                    item: item.clone(),
                    first: attributes.labels[item_label[idx]].clone(),
                    second: label.clone(),
                })
            }
            Some(_) => {}
            None => {
                item_index.insert(item.as_str(), item_label.len());
                item_label.push(g);
                maps.items.push(item.clone());
            }
        }
    }
    // An item filtered out in one record and kept in another is a conflict
    // too.
    if let Some(item) = maps.items.iter().find(|i| attributes.excluded.contains(*i)) {
        return Err(Error::ConflictingAttribute {
            item: item.clone(),
            first: attributes.labels[item_label[item_index[item.as_str()]]].clone(),
            second: "<filtered out>".into(),
        });
    }

    let mut user_index: HashMap<&str, usize> = HashMap::new();
    let mut missing: BTreeMap<&str, ()> = BTreeMap::new();
    let mut interactions = Vec::with_capacity(pairs.len());
    for (user, item) in pairs {
        let Some(&i) = item_index.get(item.as_str()) else {
            if !attributes.excluded.contains(item) {
                missing.insert(item.as_str(), ());
            }
            continue;
        };
        let next = user_index.len();
        let u = *user_index.entry(user.as_str()).or_insert_with(|| {
            maps.users.push(user.clone());
            next
        });
        interactions.push(Interaction { user: u, item: i });
    }
    if !missing.is_empty() {
        return Err(Error::MissingAttribute(missing.keys().map(|s| s.to_string()).collect()));
    }

    // Keep only labels that own at least one item, preserving filter order.
    let mut present = vec![false; attributes.labels.len()];
    for &g in &item_label {
        present[g] = true;
    }
    let mut remap = vec![usize::MAX; attributes.labels.len()];
    let mut labels = Vec::new();
    for (g, &p) in present.iter().enumerate() {
        if p {
            remap[g] = labels.len();
            labels.push(attributes.labels[g].clone());
        }
    }
    let item_group = item_label.iter().map(|&g| remap[g]).collect();

    let table = InteractionTable::new(user_index.len(), maps.items.len(), interactions)?;
    let groups = GroupMap::new(item_group, labels)?;
    Ok((table, groups, maps))
}

/// Train/validation/test parts over a shared index space.
#[derive(Debug, Clone)]
pub struct DataSplit {
    pub train: InteractionTable,
    pub validation: InteractionTable,
    pub test: InteractionTable,
    pub seed: u64,
}

impl DataSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }
}

/// Validation and test each take `floor(n / 5)` interactions of a seeded
/// global shuffle; train keeps the rest.
pub fn split(table: &InteractionTable, seed: u64) -> Result<DataSplit> {
    if table.is_empty() {
        return Err(Error::Data("cannot split an empty interaction table".into()));
    }
    let mut order: Vec<Interaction> = table.interactions().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n = order.len();
    let held_out = n / 5;
    let n_train = n - 2 * held_out;
    let (nu, ni) = (table.num_users(), table.num_items());
    let part = |range: std::ops::Range<usize>| InteractionTable::new(nu, ni, order[range].iter().copied());
    Ok(DataSplit {
        train: part(0..n_train)?,
        validation: part(n_train..n_train + held_out)?,
        test: part(n_train + held_out..n)?,
        seed,
    })
}

/// Per-group catalog and feedback statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub label: String,
    pub items: usize,
    pub feedback: usize,
    pub feedback_per_item: f64,
}

pub fn group_stats(table: &InteractionTable, groups: &GroupMap) -> Vec<GroupStats> {
    let sizes = groups.group_sizes();
    let mut feedback = vec![0usize; groups.num_groups()];
    for it in table.interactions() {
        feedback[groups.group_of(it.item)] += 1;
    }
    groups
        .labels()
        .iter()
        .enumerate()
        .map(|(g, label)| GroupStats {
            label: label.clone(),
            items: sizes[g],
            feedback: feedback[g],
            feedback_per_item: feedback[g] as f64 / sizes[g] as f64,
        })
        .collect()
}

/// Renders group statistics as CSV (`group,items,feedback,feedback_per_item`).
pub fn group_stats_csv(stats: &[GroupStats]) -> String {
    let mut out = String::from("group,items,feedback,feedback_per_item\n");
    for s in stats {
        out.push_str(&format!("{},{},{},{:.4}\n", s.label, s.items, s.feedback, s.feedback_per_item));
    }
    out
}

pub fn write_group_stats(path: &Path, stats: &[GroupStats]) -> Result<()> {
    fs::write(path, group_stats_csv(stats)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitHashes {
    pub train: String,
    pub validation: String,
    pub test: String,
    pub groups: String,
}

/// Reproducibility record written next to a prepared split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub num_users: usize,
    pub num_items: usize,
    pub group_labels: Vec<String>,
    pub sizes: SplitSizes,
    pub hashes: SplitHashes,
}

impl SplitManifest {
    pub fn new(split: &DataSplit, groups: &GroupMap) -> Self {
        SplitManifest {
            seed: split.seed,
            num_users: split.train.num_users(),
            num_items: split.train.num_items(),
            group_labels: groups.labels().to_vec(),
            sizes: SplitSizes {
                train: split.train.len(),
                validation: split.validation.len(),
                test: split.test.len(),
            },
            hashes: SplitHashes {
                train: split.train.content_hash(),
                validation: split.validation.content_hash(),
                test: split.test.content_hash(),
                groups: groups.content_hash(),
            },
        }
    }

    /// A single digest identifying the whole prepared dataset.
    pub fn data_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for h in [&self.hashes.train, &self.hashes.validation, &self.hashes.test, &self.hashes.groups] {
            hasher.update(h.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }
}

pub const MANIFEST_FILE: &str = "split_manifest.json";

fn write_table(path: &Path, table: &InteractionTable) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for it in table.interactions() {
        writeln!(w, "{}\t{}", it.user, it.item).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_table(path: &Path, num_users: usize, num_items: usize) -> Result<InteractionTable> {
    let format = RecordFormat {
        separator: "\t".into(),
        user_col: 0,
        item_col: 1,
    };
    let mut pairs = Vec::new();
    for (n, (u, i)) in load_interactions(path, &format)?.into_iter().enumerate() {
        let parse = |s: &str| {
            s.parse::<usize>().map_err(|_| Error::Malformed {
                path: path.to_path_buf(),
                line: n + 1,
                message: format!("not an index: {s:?}"),
            })
        };
        pairs.push(Interaction {
            user: parse(&u)?,
            item: parse(&i)?,
        });
    }
    InteractionTable::new(num_users, num_items, pairs)
}

/// Writes the reindexed split (`train.tsv`, `validation.tsv`, `test.tsv`,
/// `groups.tsv`) and its manifest into `dir`.
pub fn save_prepared(dir: &Path, split: &DataSplit, groups: &GroupMap) -> Result<SplitManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_table(&dir.join("train.tsv"), &split.train)?;
    write_table(&dir.join("validation.tsv"), &split.validation)?;
    write_table(&dir.join("test.tsv"), &split.test)?;
    let mut g = String::new();
    for (item, &group) in groups.item_groups().iter().enumerate() {
        g.push_str(&format!("{item}\t{}\n", groups.labels()[group]));
    }
    let gpath = dir.join("groups.tsv");
    fs::write(&gpath, g).map_err(|e| Error::io(&gpath, e))?;
    let manifest = SplitManifest::new(split, groups);
    let mpath = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// Loads a prepared split and verifies it against its manifest hashes.
pub fn load_prepared(dir: &Path) -> Result<(DataSplit, GroupMap, SplitManifest)> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: SplitManifest = serde_json::from_str(&text)?;
    let (nu, ni) = (manifest.num_users, manifest.num_items);
    let split = DataSplit {
        train: read_table(&dir.join("train.tsv"), nu, ni)?,
        validation: read_table(&dir.join("validation.tsv"), nu, ni)?,
        test: read_table(&dir.join("test.tsv"), nu, ni)?,
        seed: manifest.seed,
    };

    let gpath = dir.join("groups.tsv");
    let label_index: HashMap<&str, usize> = manifest
        .group_labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let mut item_group = vec![usize::MAX; ni];
    let format = RecordFormat {
        separator: "\t".into(),
        user_col: 0,
        item_col: 1,
    };
    for (n, (item, label)) in load_interactions(&gpath, &format)?.into_iter().enumerate() {
        let bad = |message: String| Error::Malformed {
            path: gpath.clone(),
            line: n + 1,
            message,
        };
        let item: usize = item.parse().map_err(|_| bad(format!("not an index: {item:?}")))?;
        let g = *label_index
            .get(label.as_str())
            .ok_or_else(|| bad(format!("unknown group {label:?}")))?;
        if item >= ni {
            return Err(bad(format!("item {item} out of range")));
        }
        item_group[item] = g;
    }
    if let Some(item) = item_group.iter().position(|&g| g == usize::MAX) {
        return Err(Error::MissingAttribute(vec![item.to_string()]));
    }
    let groups = GroupMap::new(item_group, manifest.group_labels.clone())?;

    let found = SplitManifest::new(&split, &groups);
    if found.hashes != manifest.hashes {
        return Err(Error::HashMismatch {
            what: format!("prepared data in {}", dir.display()),
            expected: manifest.data_hash(),
            found: found.data_hash(),
        });
    }
    Ok((split, groups, manifest))
}
