use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{IdMap, InteractionSet};
use crate::error::{Error, Result};
use crate::io::write_atomic;

// Absorbs rounding in products such as 70 * 0.1 or 120 * (5 / 120).
const FLOOR_SLACK: f64 = 1e-9;

fn floor_share(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction + FLOOR_SLACK).floor() as usize
}

/// Warm interactions plus the held-out cold items and all of their interactions.
#[derive(Clone, Debug)]
pub struct ColdSplit {
    pub warm: InteractionSet,
    pub cold_items: BTreeSet<usize>,
    pub cold_test: InteractionSet,
}

/// Samples `⌊fraction · item_count⌋` cold items uniformly without replacement.
pub fn cold_item_split(inters: &InteractionSet, fraction: f64, seed: u64) -> Result<ColdSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "cold fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n = floor_share(inters.item_count(), fraction);
    if n == 0 {
        return Err(Error::InvalidArgument(format!(
            "cold fraction {fraction} of {} items selects no item",
            inters.item_count()
        )));
    }
    cold_item_split_count(inters, n, seed)
}

/// Same as [`cold_item_split`] with an explicit cold-item count.
pub fn cold_item_split_count(inters: &InteractionSet, count: usize, seed: u64) -> Result<ColdSplit> {
    if count == 0 || count >= inters.item_count() {
        return Err(Error::InvalidArgument(format!(
            "cold item count must lie in [1, {}), got {count}",
            inters.item_count()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cold_items: BTreeSet<usize> = rand::seq::index::sample(&mut rng, inters.item_count(), count)
        .into_iter()
        .collect();
    let (cold, warm): (Vec<_>, Vec<_>) = inters.pairs().iter().partition(|(_, i)| cold_items.contains(i));
    Ok(ColdSplit {
        warm: inters.with_pairs(warm),
        cold_items,
        cold_test: inters.with_pairs(cold),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.valid, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split ratios must be non-negative and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }

    /// (train, valid, test) counts for a user with `n` interactions. Train takes
    /// the remainder and never drops to zero while `n > 0`.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let mut valid = floor_share(n, self.valid);
        let mut test = floor_share(n, self.test);
        if valid + test >= n && n > 0 {
            if test > 0 {
                test -= 1;
            } else {
                valid -= 1;
            }
        }
        (n - valid - test, valid, test)
    }
}

#[derive(Clone, Debug)]
pub struct Holdout {
    pub train: InteractionSet,
    pub valid: InteractionSet,
    pub test: InteractionSet,
}

/// Per-user shuffle of each user's interactions, cut by `ratios`.
pub fn holdout_split(warm: &InteractionSet, ratios: SplitRatios, seed: u64) -> Result<Holdout> {
    ratios.validate()?;
    if warm.is_empty() {
        return Err(Error::EmptyInput("no warm interactions to split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Separate stream from the cold-item sampler, which uses the same seed.
    rng.set_stream(1);
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for (u, mut items) in warm.items_by_user().into_iter().enumerate() {
        if items.is_empty() {
            continue;
        }
        items.sort_unstable();
        items.shuffle(&mut rng);
        let (n_train, n_valid, _) = ratios.counts(items.len());
        for (pos, i) in items.into_iter().enumerate() {
            let dst = if pos < n_train {
                &mut train
            } else if pos < n_train + n_valid {
                &mut valid
            } else {
                &mut test
            };
            dst.push((u, i));
        }
    }
    Ok(Holdout {
        train: warm.with_pairs(train),
        valid: warm.with_pairs(valid),
        test: warm.with_pairs(test),
    })
}

/// Train/valid/test over warm items plus the cold-item evaluation set.
#[derive(Clone, Debug)]
pub struct SplitBundle {
    pub train: InteractionSet,
    pub valid: InteractionSet,
    pub test: InteractionSet,
    pub cold_items: BTreeSet<usize>,
    pub cold_test: InteractionSet,
}

const USER_IDS: &str = "user_ids.tsv";
const ITEM_IDS: &str = "item_ids.tsv";
const COLD_ITEMS: &str = "cold_items.tsv";
pub(crate) const SPLIT_FILES: [&str; 4] = ["train.tsv", "valid.tsv", "test.tsv", "cold_test.tsv"];

/// Every file [`SplitBundle::write_dir`] produces.
pub const SPLIT_DIR_FILES: [&str; 7] = [
    USER_IDS,
    ITEM_IDS,
    SPLIT_FILES[0],
    SPLIT_FILES[1],
    SPLIT_FILES[2],
    SPLIT_FILES[3],
    COLD_ITEMS,
];

impl SplitBundle {
    pub fn assemble(cold: ColdSplit, ratios: SplitRatios, seed: u64) -> Result<Self> {
        let holdout = holdout_split(&cold.warm, ratios, seed)?;
        let bundle = Self {
            train: holdout.train,
            valid: holdout.valid,
            test: holdout.test,
            cold_items: cold.cold_items,
            cold_test: cold.cold_test,
        };
        bundle.check_invariants()?;
        Ok(bundle)
    }

    pub fn users(&self) -> &Arc<IdMap> {
        self.train.users()
    }

    pub fn items(&self) -> &Arc<IdMap> {
        self.train.items()
    }

    pub fn is_cold(&self, item: usize) -> bool {
        self.cold_items.contains(&item)
    }

    pub fn warm_items(&self) -> Vec<usize> {
        (0..self.train.item_count()).filter(|i| !self.is_cold(*i)).collect()
    }

    /// Disjointness, cold isolation and shared maps.
    pub fn check_invariants(&self) -> Result<()> {
        let sets = [&self.train, &self.valid, &self.test, &self.cold_test];
        for s in &sets[1..] {
            if !Arc::ptr_eq(s.users(), self.train.users()) && s.users() != self.train.users()
                || !Arc::ptr_eq(s.items(), self.train.items()) && s.items() != self.train.items()
            {
                return Err(Error::Mismatch("split sets use different id maps".into()));
            }
        }
        let mut seen = HashSet::new();
        for s in &sets[..3] {
            for &(u, i) in s.pairs() {
                if self.is_cold(i) {
                    return Err(Error::Mismatch(format!("warm split touches cold item {i}")));
                }
                if !seen.insert((u, i)) {
                    return Err(Error::Mismatch(format!("pair ({u}, {i}) appears in two splits")));
                }
            }
        }
        for &(u, i) in self.cold_test.pairs() {
            if !self.is_cold(i) {
                return Err(Error::Mismatch(format!("cold_test holds warm item {i}")));
            }
            if !seen.insert((u, i)) {
                return Err(Error::Mismatch(format!("pair ({u}, {i}) appears in two splits")));
            }
        }
        Ok(())
    }

    /// Writes id maps, the four pair files (raw IDs) and the cold-item list.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_ids(&dir.join(USER_IDS), self.users())?;
        write_ids(&dir.join(ITEM_IDS), self.items())?;
        let sets = [&self.train, &self.valid, &self.test, &self.cold_test];
        for (name, set) in SPLIT_FILES.iter().zip(sets) {
            let mut out = String::new();
            for &(u, i) in set.pairs() {
                let _ = writeln!(out, "{}\t{}", set.users().raw(u), set.items().raw(i));
            }
            write_atomic(dir.join(name), out.as_bytes())?;
        }
        let mut out = String::new();
        for &i in &self.cold_items {
            let _ = writeln!(out, "{}", self.items().raw(i));
        }
        write_atomic(dir.join(COLD_ITEMS), out.as_bytes())
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let users = Arc::new(read_ids(&dir.join(USER_IDS))?);
        let items = Arc::new(read_ids(&dir.join(ITEM_IDS))?);
        let mut sets = Vec::with_capacity(4);
        for name in SPLIT_FILES {
            let path = dir.join(name);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let mut pairs = Vec::new();
            for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
                let bad = |reason: &str| Error::MalformedLine {
                    path: path.clone(),
                    line: n + 1,
                    reason: reason.into(),
                };
                let (u, i) = line.split_once('\t').ok_or_else(|| bad("expected user<TAB>item"))?;
                let u = users.index_of(u).ok_or_else(|| bad("unknown user id"))?;
                let i = items.index_of(i).ok_or_else(|| bad("unknown item id"))?;
                pairs.push((u, i));
            }
            sets.push(InteractionSet::new(pairs, Arc::clone(&users), Arc::clone(&items))?);
        }
        let path = dir.join(COLD_ITEMS);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let cold_items = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|id| {
                items
                    .index_of(id)
                    .ok_or_else(|| Error::Mismatch(format!("unknown cold item {id:?}")))
            })
            .collect::<Result<BTreeSet<_>>>()?;
        let cold_test = sets.pop().expect("four split files");
        let test = sets.pop().expect("four split files");
        let valid = sets.pop().expect("four split files");
        let train = sets.pop().expect("four split files");
        let bundle = Self {
            train,
            valid,
            test,
            cold_items,
            cold_test,
        };
        bundle.check_invariants()?;
        Ok(bundle)
    }
}

fn write_ids(path: &Path, ids: &IdMap) -> Result<()> {
    let mut out = String::new();
    for (i, id) in ids.raw_ids().iter().enumerate() {
        let _ = writeln!(out, "{i}\t{id}");
    }
    write_atomic(path, out.as_bytes())
}

fn read_ids(path: &Path) -> Result<IdMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let bad = || Error::MalformedLine {
            path: path.to_owned(),
            line: n + 1,
            reason: "expected index<TAB>id in index order".into(),
        };
        let (idx, id) = line.split_once('\t').ok_or_else(bad)?;
        if idx.parse::<usize>().ok() != Some(raw.len()) {
            return Err(bad());
        }
        raw.push(id.to_owned());
    }
    IdMap::from_raw(raw)
}

/// Seed, protocol parameters and resulting counts of one preprocessing run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub k_core: usize,
    pub cold_fraction: f64,
    pub ratios: SplitRatios,
    pub raw_interactions: usize,
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub cold_items: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub cold_test: usize,
}
