//! Interaction graph, tripartite knowledge graph, vocabularies, loaders and splitting.
//!
//! Identifiers are dense and role-local: users, items, attributes and relations
//! each live in their own `0..n` range. An entity of the unified graph is the
//! pair (role, local id), expressed by the [`Triplet`] variants.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::DataError;

macro_rules! id_type {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub struct $name(pub u32);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0 as usize
            }

            #[inline]
            pub fn from_index(i: usize) -> Self {
                $name(i as u32)
            }
        }
    };
}

id_type!(UserId);
id_type!(ItemId);
id_type!(AttrId);
id_type!(RelId);

/// Name of the relation linking users to the items they interacted with.
pub const INTERACT: &str = "interact";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RelationKind {
    Interact,
    ItemAttribute,
    ItemItem,
}

/// Bidirectional map between external names and dense ids.
#[derive(Debug, Clone, Default)]
pub struct NameMap {
    names: Vec<String>,
    ids: HashMap<String, u32>,
}

impl NameMap {
    pub fn get_or_insert(&mut self, name: &str) -> (u32, bool) {
        if let Some(&id) = self.ids.get(name) {
            return (id, false);
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_owned());
        self.ids.insert(name.to_owned(), id);
        (id, true)
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone)]
pub struct Vocab {
    pub users: NameMap,
    pub items: NameMap,
    pub attributes: NameMap,
    pub relations: NameMap,
    relation_kinds: Vec<RelationKind>,
    /// For derived item-item relations, the item-attribute relation they come from.
    derived_from: Vec<Option<RelId>>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab {
            users: NameMap::default(),
            items: NameMap::default(),
            attributes: NameMap::default(),
            relations: NameMap::default(),
            relation_kinds: Vec::new(),
            derived_from: Vec::new(),
        };
        v.relations.get_or_insert(INTERACT);
        v.relation_kinds.push(RelationKind::Interact);
        v.derived_from.push(None);
        v
    }

    pub fn interact(&self) -> RelId {
        RelId(0)
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn user(&mut self, name: &str) -> UserId {
        UserId(self.users.get_or_insert(name).0)
    }

    pub fn item(&mut self, name: &str) -> ItemId {
        ItemId(self.items.get_or_insert(name).0)
    }

    pub fn attribute(&mut self, name: &str) -> AttrId {
        AttrId(self.attributes.get_or_insert(name).0)
    }

    /// Registers (or looks up) a relation; fails if the name is already bound
    /// to a different kind.
    pub fn relation(&mut self, name: &str, kind: RelationKind) -> Result<RelId, String> {
        let (id, fresh) = self.relations.get_or_insert(name);
        if fresh {
            self.relation_kinds.push(kind);
            self.derived_from.push(None);
        } else if self.relation_kinds[id as usize] != kind {
            return Err(format!(
                "relation `{name}` already registered as {:?}, not {kind:?}",
                self.relation_kinds[id as usize]
            ));
        }
        Ok(RelId(id))
    }

    pub fn relation_kind(&self, r: RelId) -> RelationKind {
        self.relation_kinds[r.index()]
    }

    pub fn derived_from(&self, r: RelId) -> Option<RelId> {
        self.derived_from[r.index()]
    }

    pub fn find_user(&self, name: &str) -> Option<UserId> {
        self.users.get(name).map(UserId)
    }

    pub fn find_item(&self, name: &str) -> Option<ItemId> {
        self.items.get(name).map(ItemId)
    }

    pub fn find_attribute(&self, name: &str) -> Option<AttrId> {
        self.attributes.get(name).map(AttrId)
    }

    pub fn find_relation(&self, name: &str) -> Option<RelId> {
        self.relations.get(name).map(RelId)
    }

    pub fn user_name(&self, u: UserId) -> &str {
        self.users.name(u.0)
    }

    pub fn item_name(&self, i: ItemId) -> &str {
        self.items.name(i.0)
    }

    pub fn attribute_name(&self, a: AttrId) -> &str {
        self.attributes.name(a.0)
    }

    pub fn relation_name(&self, r: RelId) -> &str {
        self.relations.name(r.0)
    }

    /// Ids of all item-attribute relations, ascending.
    pub fn ia_relations(&self) -> Vec<RelId> {
        (0..self.n_relations())
            .map(RelId::from_index)
            .filter(|&r| self.relation_kind(r) == RelationKind::ItemAttribute)
            .collect()
    }
}

/// `(item, relation, attribute)` fact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IaTriplet {
    pub item: ItemId,
    pub relation: RelId,
    pub attr: AttrId,
}

impl IaTriplet {
    pub fn new(item: ItemId, relation: RelId, attr: AttrId) -> Self {
        IaTriplet {
            item,
            relation,
            attr,
        }
    }
}

/// `(item, relation, item)` correlation; stored with `head < tail`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IiTriplet {
    pub head: ItemId,
    pub relation: RelId,
    pub tail: ItemId,
}

impl IiTriplet {
    /// Canonical form with the smaller item id first.
    pub fn new(a: ItemId, relation: RelId, b: ItemId) -> Self {
        let (head, tail) = if a <= b { (a, b) } else { (b, a) };
        IiTriplet {
            head,
            relation,
            tail,
        }
    }

    pub fn other(&self, item: ItemId) -> Option<ItemId> {
        if self.head == item {
            Some(self.tail)
        } else if self.tail == item {
            Some(self.head)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TripletKind {
    Ui,
    Ia,
    Ii,
}

/// A triplet of the unified graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Triplet {
    Ui(UserId, ItemId),
    Ia(IaTriplet),
    Ii(IiTriplet),
}

impl Triplet {
    pub fn kind(&self) -> TripletKind {
        match self {
            Triplet::Ui(..) => TripletKind::Ui,
            Triplet::Ia(_) => TripletKind::Ia,
            Triplet::Ii(_) => TripletKind::Ii,
        }
    }

    /// `(head, relation, tail)` rendered with external names.
    pub fn names<'v>(&self, vocab: &'v Vocab) -> (&'v str, &'v str, &'v str) {
        match *self {
            Triplet::Ui(u, i) => (vocab.user_name(u), INTERACT, vocab.item_name(i)),
            Triplet::Ia(t) => (
                vocab.item_name(t.item),
                vocab.relation_name(t.relation),
                vocab.attribute_name(t.attr),
            ),
            Triplet::Ii(t) => (
                vocab.item_name(t.head),
                vocab.relation_name(t.relation),
                vocab.item_name(t.tail),
            ),
        }
    }
}

/// Bipartite graph of observed interactions.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionGraph {
    n_users: usize,
    n_items: usize,
    pairs: Vec<(UserId, ItemId)>,
    user_items: Vec<Vec<ItemId>>,
    item_users: Vec<Vec<UserId>>,
}

impl InteractionGraph {
    /// Builds from pairs, collapsing duplicates. Pairs are stored sorted.
    pub fn from_pairs(
        n_users: usize,
        n_items: usize,
        pairs: impl IntoIterator<Item = (UserId, ItemId)>,
    ) -> Self {
        let set: BTreeSet<(UserId, ItemId)> = pairs.into_iter().collect();
        let pairs: Vec<_> = set.into_iter().collect();
        let mut user_items = vec![Vec::new(); n_users];
        let mut item_users = vec![Vec::new(); n_items];
        for &(u, i) in &pairs {
            assert!(
                u.index() < n_users && i.index() < n_items,
                "interaction out of range"
            );
            user_items[u.index()].push(i);
            item_users[i.index()].push(u);
        }
        InteractionGraph {
            n_users,
            n_items,
            pairs,
            user_items,
            item_users,
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn pairs(&self) -> &[(UserId, ItemId)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Items of `u`, ascending.
    pub fn items_of(&self, u: UserId) -> &[ItemId] {
        &self.user_items[u.index()]
    }

    /// Users of `i`, ascending.
    pub fn users_of(&self, i: ItemId) -> &[UserId] {
        &self.item_users[i.index()]
    }

    pub fn contains(&self, u: UserId, i: ItemId) -> bool {
        self.user_items
            .get(u.index())
            .is_some_and(|items| items.binary_search(&i).is_ok())
    }

    pub fn density(&self) -> f64 {
        if self.n_users == 0 || self.n_items == 0 {
            return 0.0;
        }
        self.pairs.len() as f64 / (self.n_users as f64 * self.n_items as f64)
    }
}

/// Result of [`load_interactions`].
#[derive(Debug, Clone)]
pub struct InteractionLoad {
    pub graph: InteractionGraph,
    pub duplicates: usize,
}

fn read_text(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|e| DataError::io(path, e))
}

/// Yields `(line_number, fields)` for non-blank, non-comment lines.
fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(n, raw)| {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            None
        } else {
            Some((n + 1, line.split('\t').collect()))
        }
    })
}

fn fields<'a>(
    path: &Path,
    line: usize,
    f: &[&'a str],
    n: usize,
) -> Result<Vec<&'a str>, DataError> {
    if f.len() != n || f.iter().any(|s| s.trim().is_empty()) {
        return Err(DataError::Malformed {
            path: path.to_owned(),
            line,
            expected: n,
        });
    }
    Ok(f.iter().map(|s| s.trim()).collect())
}

/// Reads `user<TAB>item` lines, registering unseen users and items.
pub fn load_interactions(path: &Path, vocab: &mut Vocab) -> Result<InteractionLoad, DataError> {
    let text = read_text(path)?;
    let mut raw = Vec::new();
    for (line, f) in records(&text) {
        let f = fields(path, line, &f, 2)?;
        raw.push((vocab.user(f[0]), vocab.item(f[1])));
    }
    if raw.is_empty() {
        return Err(DataError::Empty {
            path: path.to_owned(),
        });
    }
    let total = raw.len();
    let graph = InteractionGraph::from_pairs(vocab.n_users(), vocab.n_items(), raw);
    let duplicates = total - graph.len();
    if duplicates > 0 {
        log::info!(
            "{}: collapsed {duplicates} duplicate interaction(s)",
            path.display()
        );
    }
    Ok(InteractionLoad { graph, duplicates })
}

/// Reads `item<TAB>relation<TAB>attribute` lines. Items must already be known.
pub fn load_ia_triplets(path: &Path, vocab: &mut Vocab) -> Result<Vec<IaTriplet>, DataError> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    let mut unknown = Vec::new();
    for (line, f) in records(&text) {
        let f = fields(path, line, &f, 3)?;
        let Some(item) = vocab.find_item(f[0]) else {
            unknown.push(line);
            continue;
        };
        let relation = vocab
            .relation(f[1], RelationKind::ItemAttribute)
            .map_err(|message| DataError::Invalid {
                path: path.to_owned(),
                line,
                message,
            })?;
        let attr = vocab.attribute(f[2]);
        out.push(IaTriplet::new(item, relation, attr));
    }
    if !unknown.is_empty() {
        return Err(DataError::UnknownItems {
            path: path.to_owned(),
            lines: unknown,
        });
    }
    Ok(out)
}

/// Reads `item<TAB>relation<TAB>item` lines, overriding derivation.
pub fn load_ii_triplets(path: &Path, vocab: &mut Vocab) -> Result<Vec<IiTriplet>, DataError> {
    let text = read_text(path)?;
    let mut out = BTreeSet::new();
    let mut unknown = Vec::new();
    for (line, f) in records(&text) {
        let f = fields(path, line, &f, 3)?;
        let (Some(a), Some(b)) = (vocab.find_item(f[0]), vocab.find_item(f[2])) else {
            unknown.push(line);
            continue;
        };
        if a == b {
            return Err(DataError::Invalid {
                path: path.to_owned(),
                line,
                message: "item-item triplet links an item to itself".into(),
            });
        }
        let relation = vocab
            .relation(f[1], RelationKind::ItemItem)
            .map_err(|message| DataError::Invalid {
                path: path.to_owned(),
                line,
                message,
            })?;
        out.insert(IiTriplet::new(a, relation, b));
    }
    if !unknown.is_empty() {
        return Err(DataError::UnknownItems {
            path: path.to_owned(),
            lines: unknown,
        });
    }
    Ok(out.into_iter().collect())
}

/// Item-item relation name derived from an item-attribute relation name:
/// `has_category` becomes `same_category`.
pub fn shared_relation_name(ia_relation: &str) -> String {
    let stem = ia_relation.strip_prefix("has_").unwrap_or(ia_relation);
    format!("same_{stem}")
}

/// Links items that share an attribute under the same relation.
///
/// For each `(relation, attribute)` group with `n` items, emits all
/// `n·(n-1)/2` pairs, or a seeded uniform sample of `cap_per_attribute` of them.
pub fn derive_ii_triplets(
    ia: &[IaTriplet],
    vocab: &mut Vocab,
    cap_per_attribute: usize,
    seed: u64,
) -> Vec<IiTriplet> {
    assert!(
        cap_per_attribute >= 1,
        "cap_per_attribute must be at least 1"
    );
    let mut groups: BTreeMap<(RelId, AttrId), BTreeSet<ItemId>> = BTreeMap::new();
    for t in ia {
        groups
            .entry((t.relation, t.attr))
            .or_default()
            .insert(t.item);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeSet::new();
    for ((rel, _), items) in groups {
        let items: Vec<ItemId> = items.into_iter().collect();
        let n = items.len();
        if n < 2 {
            continue;
        }
        let ii_rel = shared_ii_relation(vocab, rel);
        let total = n * (n - 1) / 2;
        if total <= cap_per_attribute {
            for a in 0..n {
                for b in a + 1..n {
                    out.insert(IiTriplet::new(items[a], ii_rel, items[b]));
                }
            }
        } else {
            let mut picks = sample_indices(&mut rng, total, cap_per_attribute).into_vec();
            picks.sort_unstable();
            for k in picks {
                let (a, b) = pair_from_index(n, k);
                out.insert(IiTriplet::new(items[a], ii_rel, items[b]));
            }
        }
    }
    out.into_iter().collect()
}

fn shared_ii_relation(vocab: &mut Vocab, ia_rel: RelId) -> RelId {
    let name = shared_relation_name(vocab.relation_name(ia_rel));
    let id = vocab
        .relation(&name, RelationKind::ItemItem)
        .unwrap_or_else(|_| {
            let alt = format!("{name}__ii");
            vocab
                .relation(&alt, RelationKind::ItemItem)
                .expect("fresh relation name")
        });
    vocab.derived_from[id.index()] = Some(ia_rel);
    id
}

/// Maps `k` in `0..n(n-1)/2` to the `k`-th pair `(a, b)`, `a < b`, in
/// lexicographic order.
fn pair_from_index(n: usize, mut k: usize) -> (usize, usize) {
    for a in 0..n {
        let row = n - 1 - a;
        if k < row {
            return (a, a + 1 + k);
        }
        k -= row;
    }
    unreachable!("pair index out of range")
}

/// Unified graph: interactions (UI), item-attribute (IA) and item-item (II) triplets.
#[derive(Debug, Clone)]
pub struct TripartiteKg {
    pub vocab: Vocab,
    pub interactions: InteractionGraph,
    ia: Vec<IaTriplet>,
    ii: Vec<IiTriplet>,
    item_ia: Vec<Vec<usize>>,
    item_ii: Vec<Vec<usize>>,
}

impl TripartiteKg {
    pub fn new(
        vocab: Vocab,
        interactions: InteractionGraph,
        ia: Vec<IaTriplet>,
        ii: Vec<IiTriplet>,
    ) -> Self {
        let ia: Vec<IaTriplet> = ia
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let ii: Vec<IiTriplet> = ii
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let n_items = vocab.n_items();
        let mut item_ia = vec![Vec::new(); n_items];
        for (k, t) in ia.iter().enumerate() {
            item_ia[t.item.index()].push(k);
        }
        let mut item_ii = vec![Vec::new(); n_items];
        for (k, t) in ii.iter().enumerate() {
            item_ii[t.head.index()].push(k);
            item_ii[t.tail.index()].push(k);
        }
        let interactions =
            if interactions.n_items() == n_items && interactions.n_users() == vocab.n_users() {
                interactions
            } else {
                InteractionGraph::from_pairs(
                    vocab.n_users(),
                    n_items,
                    interactions.pairs().iter().copied(),
                )
            };
        TripartiteKg {
            vocab,
            interactions,
            ia,
            ii,
            item_ia,
            item_ii,
        }
    }

    /// Loads interactions and item knowledge; II triplets come from `ii_path`
    /// when given, otherwise they are derived from shared attributes.
    pub fn load(
        interactions: &Path,
        ia_path: &Path,
        ii_path: Option<&Path>,
        cap_per_attribute: usize,
        seed: u64,
    ) -> Result<(Self, InteractionLoad), DataError> {
        let mut vocab = Vocab::new();
        let load = load_interactions(interactions, &mut vocab)?;
        let ia = load_ia_triplets(ia_path, &mut vocab)?;
        let ii = match ii_path {
            Some(p) => load_ii_triplets(p, &mut vocab)?,
            None => derive_ii_triplets(&ia, &mut vocab, cap_per_attribute, seed),
        };
        let graph = load.graph.clone();
        Ok((TripartiteKg::new(vocab, graph, ia, ii), load))
    }

    /// IA triplets, sorted and unique.
    pub fn ia(&self) -> &[IaTriplet] {
        &self.ia
    }

    /// II triplets, sorted and unique.
    pub fn ii(&self) -> &[IiTriplet] {
        &self.ii
    }

    pub fn contains_ia(&self, t: &IaTriplet) -> bool {
        self.ia.binary_search(t).is_ok()
    }

    pub fn contains_ii(&self, t: &IiTriplet) -> bool {
        self.ii.binary_search(t).is_ok()
    }

    pub fn ia_of(&self, item: ItemId) -> impl Iterator<Item = &IaTriplet> + '_ {
        self.item_ia[item.index()].iter().map(move |&k| &self.ia[k])
    }

    pub fn ii_of(&self, item: ItemId) -> impl Iterator<Item = &IiTriplet> + '_ {
        self.item_ii[item.index()].iter().map(move |&k| &self.ii[k])
    }

    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary {
            users: self.vocab.n_users(),
            items: self.vocab.n_items(),
            interactions: self.interactions.len(),
            density: self.interactions.density(),
            attributes: self.vocab.n_attributes(),
            relations: self.vocab.n_relations(),
            ia_relations: self.vocab.ia_relations().len(),
            ia_triplets: self.ia.len(),
            ii_triplets: self.ii.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub density: f64,
    pub attributes: usize,
    pub relations: usize,
    pub ia_relations: usize,
    pub ia_triplets: usize,
    pub ii_triplets: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: InteractionGraph,
    pub validation: InteractionGraph,
    pub test: InteractionGraph,
}

/// Splits each user's items into train/validation/test with a seeded shuffle.
///
/// Validation and test sizes are `floor(n·ratio)`; the remainder goes to train.
/// Users with fewer than three interactions keep everything in train.
pub fn split_interactions(
    graph: &InteractionGraph,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !(0.0..=1.0).contains(r)) || ((tr + va + te) - 1.0).abs() > 1e-9
    {
        return Err(DataError::Other(format!(
            "split ratios {ratios:?} must be in [0,1] and sum to 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let mut small = 0usize;
    for u in 0..graph.n_users() {
        let u = UserId::from_index(u);
        let mut items = graph.items_of(u).to_vec();
        let n = items.len();
        if n < 3 {
            small += usize::from(n > 0);
            train.extend(items.into_iter().map(|i| (u, i)));
            continue;
        }
        items.shuffle(&mut rng);
        let n_val = (n as f64 * va + 1e-9).floor() as usize;
        let n_test = (n as f64 * te + 1e-9).floor() as usize;
        let n_train = n - n_val - n_test;
        train.extend(items[..n_train].iter().map(|&i| (u, i)));
        val.extend(items[n_train..n_train + n_val].iter().map(|&i| (u, i)));
        test.extend(items[n_train + n_val..].iter().map(|&i| (u, i)));
    }
    if small > 0 {
        log::info!("{small} user(s) with fewer than 3 interactions kept entirely in train");
    }
    let (nu, ni) = (graph.n_users(), graph.n_items());
    Ok(DatasetSplit {
        train: InteractionGraph::from_pairs(nu, ni, train),
        validation: InteractionGraph::from_pairs(nu, ni, val),
        test: InteractionGraph::from_pairs(nu, ni, test),
    })
}
