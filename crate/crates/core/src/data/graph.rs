use super::DataError;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};

/// One observed user–item pair in dense index space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
}

impl Interaction {
    pub fn new(user: usize, item: usize) -> Self {
        Self { user, item }
    }
}

/// Deduplicated bipartite interaction set with dense index maps.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionGraph {
    num_users: usize,
    num_items: usize,
    interactions: Vec<Interaction>,
    user_adj: Vec<Vec<usize>>,
    item_adj: Vec<Vec<usize>>,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
}

impl InteractionGraph {
    /// Builds a graph from raw id pairs. Duplicates collapse onto their first
    /// occurrence and dense indices follow first-appearance order.
    pub fn from_raw_pairs<I, S>(pairs: I) -> Result<Self, DataError>
    where
        I: IntoIterator<Item = (S, S)>,
        S: AsRef<str>,
    {
        let mut user_ids = Vec::new();
        let mut item_ids = Vec::new();
        let mut user_index = HashMap::new();
        let mut item_index = HashMap::new();
        let mut seen = HashSet::new();
        let mut interactions = Vec::new();
        for (u, i) in pairs {
            let u = intern(u.as_ref(), &mut user_index, &mut user_ids);
            let i = intern(i.as_ref(), &mut item_index, &mut item_ids);
            if seen.insert((u, i)) {
                interactions.push(Interaction::new(u, i));
            }
        }
        if interactions.is_empty() {
            return Err(DataError::EmptyAfterFiltering);
        }
        Ok(Self::assemble(user_ids, item_ids, user_index, item_index, interactions))
    }

    /// Builds a graph directly in index space; raw ids are the decimal indices.
    /// Duplicate pairs are rejected rather than merged.
    pub fn from_indexed(
        num_users: usize,
        num_items: usize,
        interactions: Vec<Interaction>,
    ) -> Result<Self, DataError> {
        let mut seen = HashSet::with_capacity(interactions.len());
        for it in &interactions {
            check_bounds(*it, num_users, num_items)?;
            if !seen.insert(*it) {
                return Err(DataError::DuplicateInteraction { user: it.user, item: it.item });
            }
        }
        if interactions.is_empty() {
            return Err(DataError::EmptyAfterFiltering);
        }
        let user_ids: Vec<String> = (0..num_users).map(|u| u.to_string()).collect();
        let item_ids: Vec<String> = (0..num_items).map(|i| i.to_string()).collect();
        let user_index = user_ids.iter().cloned().zip(0..).collect();
        let item_index = item_ids.iter().cloned().zip(0..).collect();
        Ok(Self::assemble(user_ids, item_ids, user_index, item_index, interactions))
    }

    pub(crate) fn from_parts(
        user_ids: Vec<String>,
        item_ids: Vec<String>,
        interactions: Vec<Interaction>,
    ) -> Result<Self, DataError> {
        let user_index: HashMap<String, usize> = user_ids.iter().cloned().zip(0..).collect();
        let item_index: HashMap<String, usize> = item_ids.iter().cloned().zip(0..).collect();
        if user_index.len() != user_ids.len() || item_index.len() != item_ids.len() {
            return Err(DataError::CorruptCache("repeated raw id".into()));
        }
        let mut seen = HashSet::with_capacity(interactions.len());
        for it in &interactions {
            check_bounds(*it, user_ids.len(), item_ids.len())?;
            if !seen.insert(*it) {
                return Err(DataError::DuplicateInteraction { user: it.user, item: it.item });
            }
        }
        if interactions.is_empty() {
            return Err(DataError::EmptyAfterFiltering);
        }
        Ok(Self::assemble(user_ids, item_ids, user_index, item_index, interactions))
    }

    fn assemble(
        user_ids: Vec<String>,
        item_ids: Vec<String>,
        user_index: HashMap<String, usize>,
        item_index: HashMap<String, usize>,
        interactions: Vec<Interaction>,
    ) -> Self {
        let num_users = user_ids.len();
        let num_items = item_ids.len();
        let mut user_adj = vec![Vec::new(); num_users];
        let mut item_adj = vec![Vec::new(); num_items];
        for it in &interactions {
            user_adj[it.user].push(it.item);
            item_adj[it.item].push(it.user);
        }
        user_adj.iter_mut().for_each(|v| v.sort_unstable());
        item_adj.iter_mut().for_each(|v| v.sort_unstable());
        Self {
            num_users,
            num_items,
            interactions,
            user_adj,
            item_adj,
            user_ids,
            item_ids,
            user_index,
            item_index,
        }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    /// Sorted items of `user`.
    pub fn user_items(&self, user: usize) -> &[usize] {
        &self.user_adj[user]
    }

    /// Sorted users of `item`.
    pub fn item_users(&self, item: usize) -> &[usize] {
        &self.item_adj[item]
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn user_index(&self, raw: &str) -> Option<usize> {
        self.user_index.get(raw).copied()
    }

    pub fn item_index(&self, raw: &str) -> Option<usize> {
        self.item_index.get(raw).copied()
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.user_adj.get(user).is_some_and(|items| items.binary_search(&item).is_ok())
    }

    pub fn min_user_degree(&self) -> usize {
        self.user_adj.iter().map(Vec::len).min().unwrap_or(0)
    }

    pub fn min_item_degree(&self) -> usize {
        self.item_adj.iter().map(Vec::len).min().unwrap_or(0)
    }

    /// SHA-256 over both id maps in index order, hex encoded.
    pub fn id_map_checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (tag, ids) in [(b'u', &self.user_ids), (b'i', &self.item_ids)] {
            for id in ids {
                h.update([tag]);
                h.update((id.len() as u64).to_le_bytes());
                h.update(id.as_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

fn intern(raw: &str, index: &mut HashMap<String, usize>, ids: &mut Vec<String>) -> usize {
    if let Some(&i) = index.get(raw) {
        return i;
    }
    let i = ids.len();
    ids.push(raw.to_owned());
    index.insert(raw.to_owned(), i);
    i
}

pub(crate) fn check_bounds(it: Interaction, num_users: usize, num_items: usize) -> Result<(), DataError> {
    if it.user >= num_users {
        return Err(DataError::IndexOutOfRange { kind: "user", index: it.user, bound: num_users });
    }
    if it.item >= num_items {
        return Err(DataError::IndexOutOfRange { kind: "item", index: it.item, bound: num_items });
    }
    Ok(())
}
