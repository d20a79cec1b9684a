//! Interaction and relation files, cross-domain alignment, hold-out splits,
//! cold-start labels, and a seeded synthetic domain-pair generator.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::sigmoid;

#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub timestamp: Option<i64>,
}

/// Deduplicated interaction records in first-seen order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InteractionTable {
    pub records: Vec<Interaction>,
}

impl InteractionTable {
    /// Deduplicates by `(user, item)`; a later record replaces an earlier one in place.
    pub fn from_records(records: impl IntoIterator<Item = Interaction>) -> Self {
        let mut map: IndexMap<(String, String), Interaction> = IndexMap::new();
        for r in records {
            map.insert((r.user.clone(), r.item.clone()), r);
        }
        InteractionTable {
            records: map.into_values().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn users(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.user.as_str()).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = write!(out, "{}\t{}\t{}", r.user, r.item, r.rating);
            if let Some(ts) = r.timestamp {
                let _ = write!(out, "\t{ts}");
            }
            out.push('\n');
        }
        out
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses `user<TAB>item<TAB>rating[<TAB>timestamp]` lines. Blank lines are skipped.
pub fn load_interactions(path: &Path) -> Result<InteractionTable> {
    let text = read_text(path)?;
    parse_interactions(&text, path)
}

pub fn parse_interactions(text: &str, path: &Path) -> Result<InteractionTable> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(parse_err(
                lineno,
                format!(
                    "expected 3 or 4 tab-separated fields, found {}",
                    fields.len()
                ),
            ));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(parse_err(lineno, "empty user or item key".into()));
        }
        let rating: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad rating {:?}", fields[2])))?;
        if !rating.is_finite() {
            return Err(parse_err(lineno, format!("non-finite rating {rating}")));
        }
        let timestamp = match fields.get(3) {
            Some(ts) => Some(
                ts.trim()
                    .parse::<i64>()
                    .map_err(|_| parse_err(lineno, format!("bad timestamp {ts:?}")))?,
            ),
            None => None,
        };
        records.push(Interaction {
            user: fields[0].to_string(),
            item: fields[1].to_string(),
            rating,
            timestamp,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyTable(path.to_path_buf()));
    }
    Ok(InteractionTable::from_records(records))
}

/// Every rating becomes 1: presence of a record is the interaction.
pub fn binarize(table: InteractionTable) -> InteractionTable {
    InteractionTable {
        records: table
            .records
            .into_iter()
            .map(|r| Interaction { rating: 1.0, ..r })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RelationKind {
    AlsoBought,
    AlsoViewed,
    BoughtTogether,
}

impl RelationKind {
    pub const ALL: [RelationKind; 3] = [
        RelationKind::AlsoBought,
        RelationKind::AlsoViewed,
        RelationKind::BoughtTogether,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RelationKind::AlsoBought => "also_bought",
            RelationKind::AlsoViewed => "also_viewed",
            RelationKind::BoughtTogether => "bought_together",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        RelationKind::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ItemRelations {
    pub also_bought: BTreeSet<String>,
    pub also_viewed: BTreeSet<String>,
    pub bought_together: BTreeSet<String>,
}

impl ItemRelations {
    fn set_mut(&mut self, kind: RelationKind) -> &mut BTreeSet<String> {
        match kind {
            RelationKind::AlsoBought => &mut self.also_bought,
            RelationKind::AlsoViewed => &mut self.also_viewed,
            RelationKind::BoughtTogether => &mut self.bought_together,
        }
    }

    pub fn get(&self, kind: RelationKind) -> &BTreeSet<String> {
        match kind {
            RelationKind::AlsoBought => &self.also_bought,
            RelationKind::AlsoViewed => &self.also_viewed,
            RelationKind::BoughtTogether => &self.bought_together,
        }
    }

    /// Union of all three relation sets.
    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.also_bought
            .iter()
            .chain(&self.also_viewed)
            .chain(&self.bought_together)
    }
}

/// Catalogue relations keyed by item. Self-relations are never stored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RelationTable {
    pub entries: BTreeMap<String, ItemRelations>,
}

impl RelationTable {
    /// Records `item -kind-> other`; returns false (and stores nothing) for a self-relation.
    pub fn insert(&mut self, item: &str, kind: RelationKind, other: &str) -> bool {
        if item == other {
            return false;
        }
        self.entries
            .entry(item.to_string())
            .or_default()
            .set_mut(kind)
            .insert(other.to_string());
        true
    }

    pub fn get(&self, item: &str) -> Option<&ItemRelations> {
        self.entries.get(item)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (item, rel) in &self.entries {
            for kind in RelationKind::ALL {
                for other in rel.get(kind) {
                    let _ = writeln!(out, "{item}\t{}\t{other}", kind.as_str());
                }
            }
        }
        out
    }
}

/// Parses `item<TAB>relation<TAB>item` lines.
pub fn load_relations(path: &Path) -> Result<RelationTable> {
    parse_relations(&read_text(path)?, path)
}

/// Parses relation lines; `path` only labels errors.
pub fn parse_relations(text: &str, path: &Path) -> Result<RelationTable> {
    let mut table = RelationTable::default();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        if fields.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", fields.len())));
        }
        let kind = RelationKind::parse(fields[1])
            .ok_or_else(|| err(format!("unknown relation {:?}", fields[1])))?;
        table.insert(fields[0], kind, fields[2]);
    }
    Ok(table)
}

/// Two domains over a shared, densely indexed user set.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPair {
    pub users: Vec<String>,
    pub source_items: Vec<String>,
    pub target_items: Vec<String>,
    pub source: Vec<(u32, u32)>,
    pub target: Vec<(u32, u32)>,
}

impl DomainPair {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn target_item_index(&self) -> HashMap<&str, u32> {
        index_of(&self.target_items)
    }

    pub fn source_item_index(&self) -> HashMap<&str, u32> {
        index_of(&self.source_items)
    }
}

fn index_of(keys: &[String]) -> HashMap<&str, u32> {
    keys.iter()
        .enumerate()
        .map(|(i, k)| (k.as_str(), i as u32))
        .collect()
}

/// Keeps only users present in both tables and assigns dense ids.
///
/// Users and items are indexed in lexicographic key order; interactions keep
/// their table order.
pub fn align_domains(source: &InteractionTable, target: &InteractionTable) -> Result<DomainPair> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Alignment("both tables must be non-empty".into()));
    }
    let shared: BTreeSet<&str> = source
        .users()
        .intersection(&target.users())
        .copied()
        .collect();
    if shared.is_empty() {
        return Err(Error::Alignment("no user appears in both domains".into()));
    }
    let users: Vec<String> = shared.iter().map(|s| s.to_string()).collect();
    let user_index = index_of(&users);

    let side = |table: &InteractionTable| {
        let items: Vec<String> = table
            .records
            .iter()
            .filter(|r| shared.contains(r.user.as_str()))
            .map(|r| r.item.as_str())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(String::from)
            .collect();
        let item_index = index_of(&items);
        let pairs = table
            .records
            .iter()
            .filter_map(|r| {
                let u = *user_index.get(r.user.as_str())?;
                Some((u, item_index[r.item.as_str()]))
            })
            .collect::<Vec<_>>();
        (items, pairs)
    };
    let (source_items, source_pairs) = side(source);
    let (target_items, target_pairs) = side(target);
    Ok(DomainPair {
        users,
        source_items,
        target_items,
        source: source_pairs,
        target: target_pairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitRatio {
    pub train: u32,
    pub valid: u32,
    pub test: u32,
}

impl Default for SplitRatio {
    fn default() -> Self {
        SplitRatio {
            train: 8,
            valid: 1,
            test: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Valid,
    Test,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Valid => "valid",
            SplitKind::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(SplitKind::Train),
            "valid" => Some(SplitKind::Valid),
            "test" => Some(SplitKind::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSet {
    pub train: Vec<(u32, u32)>,
    pub valid: Vec<(u32, u32)>,
    pub test: Vec<(u32, u32)>,
    pub seed: u64,
}

pub const MIN_SPLIT_INTERACTIONS: usize = 10;

/// Seeded random hold-out split.
///
/// Sizes: `train = floor(n * train / total)`, `valid = floor(n * valid / total)`,
/// and the remainder goes to test.
pub fn split_holdout(
    interactions: &[(u32, u32)],
    ratio: SplitRatio,
    seed: u64,
) -> Result<SplitSet> {
    let n = interactions.len();
    if n < MIN_SPLIT_INTERACTIONS {
        return Err(Error::Split(format!(
            "{n} interactions, need at least {MIN_SPLIT_INTERACTIONS}"
        )));
    }
    let total = (ratio.train + ratio.valid + ratio.test) as usize;
    if total == 0 {
        return Err(Error::Split("ratio sums to zero".into()));
    }
    let n_train = n * ratio.train as usize / total;
    let n_valid = n * ratio.valid as usize / total;
    let mut shuffled = interactions.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = shuffled.split_off(n_train + n_valid);
    let valid = shuffled.split_off(n_train);
    Ok(SplitSet {
        train: shuffled,
        valid,
        test,
        seed,
    })
}

/// Serialises a split as `#seed=N`, a header row, then `user item split` rows.
pub fn split_manifest_tsv(split: &SplitSet, users: &[String], items: &[String]) -> String {
    let mut out = format!("#seed={}\nuser\titem\tsplit\n", split.seed);
    for (kind, pairs) in [
        (SplitKind::Train, &split.train),
        (SplitKind::Valid, &split.valid),
        (SplitKind::Test, &split.test),
    ] {
        for &(u, i) in pairs {
            let _ = writeln!(
                out,
                "{}\t{}\t{}",
                users[u as usize],
                items[i as usize],
                kind.as_str()
            );
        }
    }
    out
}

/// A split manifest re-indexed from its own keys.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitManifest {
    pub users: Vec<String>,
    pub items: Vec<String>,
    pub split: SplitSet,
}

/// Reads a split manifest. Users and items are re-indexed in lexicographic key
/// order, which reproduces the ids assigned by [`align_domains`].
pub fn load_split_manifest(path: &Path) -> Result<SplitManifest> {
    parse_split_manifest(&read_text(path)?, path)
}

/// Parses a split manifest; `path` only labels errors.
pub fn parse_split_manifest(text: &str, path: &Path) -> Result<SplitManifest> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let seed = match lines.next() {
        Some((_, l)) if l.starts_with("#seed=") => l["#seed=".len()..]
            .trim()
            .parse::<u64>()
            .map_err(|_| err(1, format!("bad seed line {l:?}")))?,
        _ => return Err(err(1, "missing #seed= header".into())),
    };
    match lines.next() {
        Some((_, "user\titem\tsplit")) => {}
        _ => return Err(err(2, "missing column header".into())),
    }
    let mut rows = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(err(n + 1, format!("expected 3 fields, found {}", f.len())));
        }
        let kind =
            SplitKind::parse(f[2]).ok_or_else(|| err(n + 1, format!("bad split {:?}", f[2])))?;
        rows.push((f[0], f[1], kind));
    }
    if rows.is_empty() {
        return Err(Error::EmptyTable(path.to_path_buf()));
    }
    let users: Vec<String> = rows
        .iter()
        .map(|r| r.0)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(String::from)
        .collect();
    let items: Vec<String> = rows
        .iter()
        .map(|r| r.1)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(String::from)
        .collect();
    let (ui, ii) = (index_of(&users), index_of(&items));
    let mut split = SplitSet {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for (u, i, kind) in rows {
        let pair = (ui[u], ii[i]);
        match kind {
            SplitKind::Train => split.train.push(pair),
            SplitKind::Valid => split.valid.push(pair),
            SplitKind::Test => split.test.push(pair),
        }
    }
    Ok(SplitManifest {
        users,
        items,
        split,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UserGroup {
    Cold,
    Regular,
}

impl UserGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            UserGroup::Cold => "cold",
            UserGroup::Regular => "regular",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColdStartLabels {
    pub groups: Vec<UserGroup>,
    pub threshold: usize,
}

impl ColdStartLabels {
    pub fn group(&self, user: u32) -> UserGroup {
        self.groups[user as usize]
    }
}

/// A user is cold iff it has strictly fewer than `threshold` training interactions.
pub fn label_cold_start(train: &[(u32, u32)], n_users: usize, threshold: usize) -> ColdStartLabels {
    let mut counts = vec![0usize; n_users];
    for &(u, _) in train {
        counts[u as usize] += 1;
    }
    ColdStartLabels {
        groups: counts
            .into_iter()
            .map(|c| {
                if c < threshold {
                    UserGroup::Cold
                } else {
                    UserGroup::Regular
                }
            })
            .collect(),
        threshold,
    }
}

/// Parameters of the synthetic two-domain generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_source_items: usize,
    pub n_target_items: usize,
    pub latent_dim: usize,
    pub density: f64,
    pub seed: u64,
    /// Related items linked to each item (split across the three relation kinds).
    pub relations_per_item: usize,
    /// Slope of the interaction logit in the standardised latent affinity.
    pub sharpness: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 200,
            n_source_items: 500,
            n_target_items: 500,
            latent_dim: 8,
            density: 0.02,
            seed: 0,
            relations_per_item: 6,
            sharpness: 2.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config(format!(
                "density {} outside (0, 1]",
                self.density
            )));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        if self.n_users == 0 || self.n_source_items == 0 || self.n_target_items == 0 {
            return Err(Error::Config(
                "user and item counts must be positive".into(),
            ));
        }
        if !(self.sharpness.is_finite() && self.sharpness >= 0.0) {
            return Err(Error::Config(format!("sharpness {}", self.sharpness)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub source: InteractionTable,
    pub target: InteractionTable,
    pub relations: RelationTable,
}

pub fn user_key(u: usize) -> String {
    format!("u{u:05}")
}

fn item_key(prefix: char, i: usize) -> String {
    format!("{prefix}{i:05}")
}

fn latent(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Samples one domain: `P(u, i) = sigmoid(sharpness * z + offset)`, with `z`
/// the standardised latent affinity and `offset` solved so the probabilities
/// average exactly to `density`.
fn sample_domain(
    cfg: &SynthConfig,
    users: &[Vec<f64>],
    items: &[Vec<f64>],
    prefix: char,
    rng: &mut ChaCha8Rng,
) -> InteractionTable {
    let mut records = Vec::new();
    let push = |records: &mut Vec<Interaction>, u: usize, i: usize| {
        records.push(Interaction {
            user: user_key(u),
            item: item_key(prefix, i),
            rating: 1.0,
            timestamp: None,
        })
    };
    if cfg.density >= 1.0 {
        for u in 0..users.len() {
            for i in 0..items.len() {
                push(&mut records, u, i);
            }
        }
        return InteractionTable { records };
    }
    // U(-1, 1) coordinates have variance 1/3, so a k-term dot product has variance k/9.
    let std = (cfg.latent_dim as f64 / 9.0).sqrt();
    let logits: Vec<f64> = users
        .iter()
        .flat_map(|zu| {
            items
                .iter()
                .map(move |zi| cfg.sharpness * dot(zu, zi) / std)
        })
        .collect();
    let mean_p = |offset: f64| {
        logits.iter().map(|&l| sigmoid(l + offset)).sum::<f64>() / logits.len() as f64
    };
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_p(mid) < cfg.density {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let offset = 0.5 * (lo + hi);
    let n_items = items.len();
    for (k, &l) in logits.iter().enumerate() {
        if rng.gen::<f64>() < sigmoid(l + offset) {
            push(&mut records, k / n_items, k % n_items);
        }
    }
    InteractionTable { records }
}

fn add_relations(table: &mut RelationTable, items: &[Vec<f64>], prefix: char, per_item: usize) {
    let norms: Vec<f64> = items.iter().map(|v| dot(v, v).sqrt().max(1e-12)).collect();
    for (a, za) in items.iter().enumerate() {
        let mut sims: Vec<(f64, usize)> = items
            .iter()
            .enumerate()
            .filter(|&(b, _)| b != a)
            .map(|(b, zb)| (dot(za, zb) / (norms[a] * norms[b]), b))
            .collect();
        sims.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        let key = item_key(prefix, a);
        for (rank, &(_, b)) in sims.iter().take(per_item).enumerate() {
            let kind = match rank % 3 {
                0 => RelationKind::AlsoBought,
                1 => RelationKind::AlsoViewed,
                _ => RelationKind::BoughtTogether,
            };
            table.insert(&key, kind, &item_key(prefix, b));
        }
    }
}

/// Generates a source/target pair over one shared user population plus
/// catalogue relations linking latently similar items within each domain.
pub fn generate_synthetic_pair(cfg: &SynthConfig) -> Result<SyntheticPair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let users = latent(&mut rng, cfg.n_users, cfg.latent_dim);
    let source_items = latent(&mut rng, cfg.n_source_items, cfg.latent_dim);
    let target_items = latent(&mut rng, cfg.n_target_items, cfg.latent_dim);
    let source = sample_domain(cfg, &users, &source_items, 's', &mut rng);
    let target = sample_domain(cfg, &users, &target_items, 't', &mut rng);
    let mut relations = RelationTable::default();
    add_relations(&mut relations, &source_items, 's', cfg.relations_per_item);
    add_relations(&mut relations, &target_items, 't', cfg.relations_per_item);
    Ok(SyntheticPair {
        source,
        target,
        relations,
    })
}
