//! Interaction ingestion and the preprocessing protocol: k-core filtering,
//! cold-item holdout and the per-user train/valid/test split.

pub(crate) mod embeddings;
mod split;

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};

pub use embeddings::{
    load_embeddings, read_embedding_file, read_embedding_header, write_embedding_file, EmbeddingHeader, EMBEDDING_MAGIC,
};
pub use split::{
    cold_item_split, cold_item_split_count, holdout_split, ColdSplit, Holdout, SplitBundle, SplitManifest, SplitRatios,
    SPLIT_DIR_FILES,
};

/// Bidirectional raw-ID ↔ contiguous index table. Indices follow insertion order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdMap {
    raw: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a map from raw IDs listed in index order. Duplicates are rejected.
    pub fn from_raw(raw: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(raw.len());
        for (i, id) in raw.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate id {id:?}")));
            }
        }
        Ok(Self { raw, index })
    }

    pub fn get_or_insert(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.raw.len();
        self.raw.push(id.to_owned());
        self.index.insert(id.to_owned(), i);
        i
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn raw(&self, index: usize) -> &str {
        &self.raw[index]
    }

    pub fn raw_ids(&self) -> &[String] {
        &self.raw
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// Deduplicated implicit-feedback pairs over shared user/item ID maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionSet {
    pairs: Vec<(usize, usize)>,
    users: Arc<IdMap>,
    items: Arc<IdMap>,
}

impl InteractionSet {
    /// Validates ranges and uniqueness of `pairs` against the maps.
    pub fn new(pairs: Vec<(usize, usize)>, users: Arc<IdMap>, items: Arc<IdMap>) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(pairs.len());
        for &(u, i) in &pairs {
            if u >= users.len() {
                return Err(Error::IndexOutOfRange {
                    kind: "user",
                    index: u,
                    count: users.len(),
                });
            }
            if i >= items.len() {
                return Err(Error::IndexOutOfRange {
                    kind: "item",
                    index: i,
                    count: items.len(),
                });
            }
            if !seen.insert((u, i)) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate pair ({}, {})",
                    users.raw(u),
                    items.raw(i)
                )));
            }
        }
        Ok(Self { pairs, users, items })
    }

    /// Same maps, different pairs. Callers guarantee the pair invariants.
    pub(crate) fn with_pairs(&self, pairs: Vec<(usize, usize)>) -> Self {
        Self {
            pairs,
            users: Arc::clone(&self.users),
            items: Arc::clone(&self.items),
        }
    }

    /// Collapses duplicates and assigns indices in first-seen order.
    pub fn from_raw_pairs<I, U, T>(raw: I) -> Self
    where
        I: IntoIterator<Item = (U, T)>,
        U: AsRef<str>,
        T: AsRef<str>,
    {
        let mut users = IdMap::new();
        let mut items = IdMap::new();
        let mut seen = std::collections::HashSet::new();
        let mut pairs = Vec::new();
        for (u, i) in raw {
            let p = (users.get_or_insert(u.as_ref()), items.get_or_insert(i.as_ref()));
            if seen.insert(p) {
                pairs.push(p);
            }
        }
        Self {
            pairs,
            users: Arc::new(users),
            items: Arc::new(items),
        }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn users(&self) -> &Arc<IdMap> {
        &self.users
    }

    pub fn items(&self) -> &Arc<IdMap> {
        &self.items
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn item_count(&self) -> usize {
        self.items.len()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn user_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.user_count()];
        for &(u, _) in &self.pairs {
            deg[u] += 1;
        }
        deg
    }

    pub fn item_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.item_count()];
        for &(_, i) in &self.pairs {
            deg[i] += 1;
        }
        deg
    }

    /// Items of each user, in pair order.
    pub fn items_by_user(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.user_count()];
        for &(u, i) in &self.pairs {
            out[u].push(i);
        }
        out
    }
}

/// Reads `user<TAB>item[<TAB>...]` lines. Blank lines are skipped.
pub fn load_interactions(path: impl AsRef<Path>) -> Result<InteractionSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let user = cols.next().unwrap_or_default();
        let item = cols.next().ok_or_else(|| Error::MalformedLine {
            path: path.to_owned(),
            line: n + 1,
            reason: "expected user<TAB>item".into(),
        })?;
        if user.is_empty() || item.is_empty() {
            return Err(Error::MalformedLine {
                path: path.to_owned(),
                line: n + 1,
                reason: "empty user or item id".into(),
            });
        }
        raw.push((user, item));
    }
    if raw.is_empty() {
        return Err(Error::EmptyInput(path.display().to_string()));
    }
    Ok(InteractionSet::from_raw_pairs(raw))
}

/// Iteratively drops users and items with fewer than `k` interactions until
/// nothing changes, then remaps the survivors contiguously (relative order kept).
pub fn k_core_filter(inters: &InteractionSet, k: usize) -> Result<InteractionSet> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut user_alive = vec![true; inters.user_count()];
    let mut item_alive = vec![true; inters.item_count()];
    loop {
        let mut user_deg = vec![0usize; inters.user_count()];
        let mut item_deg = vec![0usize; inters.item_count()];
        for &(u, i) in inters.pairs() {
            if user_alive[u] && item_alive[i] {
                user_deg[u] += 1;
                item_deg[i] += 1;
            }
        }
        let mut changed = false;
        for (alive, &d) in user_alive.iter_mut().zip(&user_deg) {
            if *alive && d < k {
                *alive = false;
                changed = true;
            }
        }
        for (alive, &d) in item_alive.iter_mut().zip(&item_deg) {
            if *alive && d < k {
                *alive = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let (user_map, users) = compact(inters.users(), &user_alive);
    let (item_map, items) = compact(inters.items(), &item_alive);
    let pairs: Vec<_> = inters
        .pairs()
        .iter()
        .filter_map(|&(u, i)| Some((user_map[u]?, item_map[i]?)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::KCoreEmpty(k));
    }
    Ok(InteractionSet {
        pairs,
        users: Arc::new(users),
        items: Arc::new(items),
    })
}

fn compact(ids: &IdMap, alive: &[bool]) -> (Vec<Option<usize>>, IdMap) {
    let mut out = IdMap::new();
    let remap = alive
        .iter()
        .enumerate()
        .map(|(old, &keep)| keep.then(|| out.get_or_insert(ids.raw(old))))
        .collect();
    (remap, out)
}

/// Keeps only interactions whose item appears in `allowed`; maps are rebuilt.
pub fn retain_items(inters: &InteractionSet, allowed: impl Fn(&str) -> bool) -> Result<InteractionSet> {
    let raw = inters
        .pairs()
        .iter()
        .filter(|&&(_, i)| allowed(inters.items().raw(i)))
        .map(|&(u, i)| (inters.users().raw(u), inters.items().raw(i)));
    let out = InteractionSet::from_raw_pairs(raw);
    if out.is_empty() {
        return Err(Error::EmptyInput("no interaction has an embedded item".into()));
    }
    Ok(out)
}
