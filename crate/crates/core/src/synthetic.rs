//! Seeded synthetic datasets whose interactions are driven by known
//! item-attribute facts, optionally mixed with noise facts.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::DataError;
use crate::kg::{
    derive_ii_triplets, AttrId, IaTriplet, InteractionGraph, ItemId, RelId, RelationKind,
    TripartiteKg, UserId, Vocab,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_attributes: usize,
    /// IA relations; attributes are split evenly between them.
    pub n_relations: usize,
    pub interactions_per_user: usize,
    /// Noise facts as a fraction of the true facts.
    pub noise_ratio: f64,
    /// Sampling weight of an item that matches none of a user's preferences.
    pub background_weight: f64,
    pub ii_cap: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// 20 users, 30 items, 6 attributes.
    pub fn toy(seed: u64) -> Self {
        SyntheticSpec {
            n_users: 20,
            n_items: 30,
            n_attributes: 6,
            n_relations: 2,
            interactions_per_user: 6,
            noise_ratio: 0.1,
            background_weight: 0.05,
            ii_cap: 20,
            seed,
        }
    }

    /// 200 users, 300 items, 40 attributes, 30% noise facts.
    pub fn denoising(seed: u64) -> Self {
        SyntheticSpec {
            n_users: 200,
            n_items: 300,
            n_attributes: 40,
            n_relations: 2,
            interactions_per_user: 15,
            noise_ratio: 0.3,
            background_weight: 0.02,
            ii_cap: 30,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub kg: TripartiteKg,
    pub true_ia: BTreeSet<IaTriplet>,
    pub noise_ia: BTreeSet<IaTriplet>,
}

const RELATION_NAMES: [&str; 4] = ["has_genre", "has_style", "has_era", "has_origin"];

fn relation_name(r: usize) -> String {
    RELATION_NAMES
        .get(r)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("has_facet{r}"))
}

/// Each item gets one true attribute per relation; each user prefers one
/// attribute per relation and picks items weighted by the number of matches.
pub fn generate(spec: &SyntheticSpec) -> SyntheticData {
    assert!(spec.n_relations >= 1 && spec.n_attributes >= spec.n_relations);
    assert!(spec.interactions_per_user <= spec.n_items);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut vocab = Vocab::new();
    let users: Vec<UserId> = (0..spec.n_users)
        .map(|u| vocab.user(&format!("u{u}")))
        .collect();
    let items: Vec<ItemId> = (0..spec.n_items)
        .map(|i| vocab.item(&format!("i{i}")))
        .collect();
    let rels: Vec<RelId> = (0..spec.n_relations)
        .map(|r| {
            vocab
                .relation(&relation_name(r), RelationKind::ItemAttribute)
                .expect("fresh relation")
        })
        .collect();
    let attrs: Vec<AttrId> = (0..spec.n_attributes)
        .map(|a| vocab.attribute(&format!("a{a}")))
        .collect();
    let per = spec.n_attributes / spec.n_relations;
    let range = |r: usize| {
        let hi = if r + 1 == spec.n_relations {
            spec.n_attributes
        } else {
            (r + 1) * per
        };
        r * per..hi
    };

    let mut item_attr = vec![vec![0usize; spec.n_relations]; spec.n_items];
    let mut true_ia = BTreeSet::new();
    for (i, row) in item_attr.iter_mut().enumerate() {
        for (r, slot) in row.iter_mut().enumerate() {
            *slot = rng.gen_range(range(r));
            true_ia.insert(IaTriplet::new(items[i], rels[r], attrs[*slot]));
        }
    }

    let mut pairs = Vec::new();
    let mut seen = vec![false; spec.n_items];
    for &u in &users {
        let pref: Vec<usize> = (0..spec.n_relations)
            .map(|r| rng.gen_range(range(r)))
            .collect();
        let weights: Vec<f64> = item_attr
            .iter()
            .map(|row| {
                spec.background_weight
                    + row.iter().zip(&pref).filter(|(a, p)| a == p).count() as f64
            })
            .collect();
        let chosen = rand::seq::index::sample_weighted(
            &mut rng,
            spec.n_items,
            |i| weights[i],
            spec.interactions_per_user,
        )
        .expect("positive weights");
        for i in chosen {
            seen[i] = true;
            pairs.push((u, items[i]));
        }
    }
    for (i, s) in seen.iter().enumerate() {
        if !s {
            pairs.push((users[rng.gen_range(0..spec.n_users)], items[i]));
        }
    }

    let n_noise = (spec.noise_ratio * true_ia.len() as f64).round() as usize;
    let capacity = spec.n_items * spec.n_attributes - true_ia.len();
    let mut noise_ia = BTreeSet::new();
    while noise_ia.len() < n_noise.min(capacity) {
        let r = rng.gen_range(0..spec.n_relations);
        let t = IaTriplet::new(
            items[rng.gen_range(0..spec.n_items)],
            rels[r],
            attrs[rng.gen_range(range(r))],
        );
        if !true_ia.contains(&t) {
            noise_ia.insert(t);
        }
    }

    let ia: Vec<IaTriplet> = true_ia.union(&noise_ia).copied().collect();
    let ii = derive_ii_triplets(&ia, &mut vocab, spec.ii_cap, spec.seed ^ 0x5eed);
    let graph = InteractionGraph::from_pairs(spec.n_users, spec.n_items, pairs);
    SyntheticData {
        kg: TripartiteKg::new(vocab, graph, ia, ii),
        true_ia,
        noise_ia,
    }
}

/// Paths written by [`write_tsv`].
#[derive(Debug, Clone)]
pub struct DatasetFiles {
    pub interactions: PathBuf,
    pub ia: PathBuf,
    pub ii: PathBuf,
}

/// Writes `interactions.tsv`, `ia.tsv` and `ii.tsv` under `dir`.
pub fn write_tsv(kg: &TripartiteKg, dir: &Path) -> Result<DatasetFiles, DataError> {
    let v = &kg.vocab;
    let mut ui = String::new();
    for &(u, i) in kg.interactions.pairs() {
        let _ = writeln!(ui, "{}\t{}", v.user_name(u), v.item_name(i));
    }
    let mut ia = String::new();
    for t in kg.ia() {
        let _ = writeln!(
            ia,
            "{}\t{}\t{}",
            v.item_name(t.item),
            v.relation_name(t.relation),
            v.attribute_name(t.attr)
        );
    }
    let mut ii = String::new();
    for t in kg.ii() {
        let _ = writeln!(
            ii,
            "{}\t{}\t{}",
            v.item_name(t.head),
            v.relation_name(t.relation),
            v.item_name(t.tail)
        );
    }
    let files = DatasetFiles {
        interactions: dir.join("interactions.tsv"),
        ia: dir.join("ia.tsv"),
        ii: dir.join("ii.tsv"),
    };
    crate::io::write_atomic(&files.interactions, ui.as_bytes())?;
    crate::io::write_atomic(&files.ia, ia.as_bytes())?;
    crate::io::write_atomic(&files.ii, ii.as_bytes())?;
    Ok(files)
}
