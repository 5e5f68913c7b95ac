use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::parse::PoolDelta;
use super::View;
use crate::error::DataError;
use crate::kg::{IaTriplet, InteractionGraph, ItemId, RelationKind, TripartiteKg, UserId, Vocab};

/// The four advice pools. Each entry records the smallest batch id that proposed it.
///
/// Invariants, enforced by [`AugmentationPools::apply`]: add pools hold only IA
/// triplets absent from the knowledge graph; delete pools hold only triplets
/// present in it (UI deletions must be observed interactions).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AugmentationPools {
    pub add_user: BTreeMap<IaTriplet, usize>,
    pub del_user_ia: BTreeMap<IaTriplet, usize>,
    pub del_user_ui: BTreeMap<(UserId, ItemId), usize>,
    pub add_item: BTreeMap<IaTriplet, usize>,
    pub del_item: BTreeMap<IaTriplet, usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ApplyReport {
    pub accepted: usize,
    pub rejected: usize,
}

fn merge<K: Ord>(pool: &mut BTreeMap<K, usize>, key: K, batch: usize) {
    pool.entry(key)
        .and_modify(|b| *b = (*b).min(batch))
        .or_insert(batch);
}

impl AugmentationPools {
    pub fn is_empty(&self) -> bool {
        self.add_user.is_empty()
            && self.del_user_ia.is_empty()
            && self.del_user_ui.is_empty()
            && self.add_item.is_empty()
            && self.del_item.is_empty()
    }

    /// `|P_add_U|`, `|P_del_U|`, `|P_add_I|`, `|P_del_I|`.
    pub fn sizes(&self) -> [usize; 4] {
        [
            self.add_user.len(),
            self.del_user_ia.len() + self.del_user_ui.len(),
            self.add_item.len(),
            self.del_item.len(),
        ]
    }

    /// Inserts parsed advice for `view`, dropping entries that would break the
    /// pool invariants.
    pub fn apply(
        &mut self,
        delta: &PoolDelta,
        view: View,
        batch: usize,
        kg: &TripartiteKg,
        interactions: &InteractionGraph,
    ) -> ApplyReport {
        let mut report = ApplyReport::default();
        let mut take = |ok: bool| {
            if ok {
                report.accepted += 1;
            } else {
                report.rejected += 1;
            }
            ok
        };
        let (add, del) = match view {
            View::User => (&mut self.add_user, &mut self.del_user_ia),
            View::Item => (&mut self.add_item, &mut self.del_item),
        };
        for t in &delta.add_ia {
            if take(!kg.contains_ia(t)) {
                merge(add, *t, batch);
            }
        }
        for t in &delta.del_ia {
            if take(kg.contains_ia(t)) {
                merge(del, *t, batch);
            }
        }
        for &(u, i) in &delta.del_ui {
            if take(view == View::User && interactions.contains(u, i)) {
                merge(&mut self.del_user_ui, (u, i), batch);
            }
        }
        report
    }

    /// Union with another pool set, keeping the smallest batch id per entry.
    pub fn merge_from(&mut self, other: &AugmentationPools) {
        for (t, &b) in &other.add_user {
            merge(&mut self.add_user, *t, b);
        }
        for (t, &b) in &other.del_user_ia {
            merge(&mut self.del_user_ia, *t, b);
        }
        for (t, &b) in &other.del_user_ui {
            merge(&mut self.del_user_ui, *t, b);
        }
        for (t, &b) in &other.add_item {
            merge(&mut self.add_item, *t, b);
        }
        for (t, &b) in &other.del_item {
            merge(&mut self.del_item, *t, b);
        }
    }

    fn records(&self, vocab: &Vocab) -> Vec<PoolRecord> {
        let ia = |view: &str, action: &str, pool: &BTreeMap<IaTriplet, usize>| -> Vec<PoolRecord> {
            pool.iter()
                .map(|(t, &batch)| PoolRecord {
                    view: view.into(),
                    action: action.into(),
                    kind: "IA".into(),
                    h: vocab.item_name(t.item).into(),
                    r: vocab.relation_name(t.relation).into(),
                    t: vocab.attribute_name(t.attr).into(),
                    batch,
                })
                .collect()
        };
        let mut out = ia("user", "add", &self.add_user);
        out.extend(ia("user", "del", &self.del_user_ia));
        out.extend(self.del_user_ui.iter().map(|(&(u, i), &batch)| PoolRecord {
            view: "user".into(),
            action: "del".into(),
            kind: "UI".into(),
            h: vocab.user_name(u).into(),
            r: vocab.relation_name(vocab.interact()).into(),
            t: vocab.item_name(i).into(),
            batch,
        }));
        out.extend(ia("item", "add", &self.add_item));
        out.extend(ia("item", "del", &self.del_item));
        out
    }

    /// JSONL text, one record per pool entry, in a fixed order.
    pub fn to_jsonl(&self, vocab: &Vocab) -> String {
        let mut s = String::new();
        for r in self.records(vocab) {
            s.push_str(&serde_json::to_string(&r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path, vocab: &Vocab) -> Result<(), DataError> {
        crate::io::write_atomic(path, self.to_jsonl(vocab).as_bytes())
    }

    /// Reads a pool file, resolving names against `kg` and re-checking the
    /// pool invariants. Any invalid record is an error.
    pub fn load(
        path: &Path,
        kg: &TripartiteKg,
        interactions: &InteractionGraph,
    ) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::from_jsonl(&text, kg, interactions).map_err(|(line, message)| DataError::Invalid {
            path: path.to_owned(),
            line,
            message,
        })
    }

    pub fn from_jsonl(
        text: &str,
        kg: &TripartiteKg,
        interactions: &InteractionGraph,
    ) -> Result<Self, (usize, String)> {
        let vocab = &kg.vocab;
        let mut pools = AugmentationPools::default();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PoolRecord =
                serde_json::from_str(line).map_err(|e| (line_no, e.to_string()))?;
            let view = match rec.view.as_str() {
                "user" => View::User,
                "item" => View::Item,
                other => return Err((line_no, format!("unknown view `{other}`"))),
            };
            let mut delta = PoolDelta::default();
            match (rec.kind.as_str(), rec.action.as_str()) {
                ("IA", action) => {
                    let t = resolve_ia(vocab, &rec.h, &rec.r, &rec.t).ok_or_else(|| {
                        (
                            line_no,
                            format!("unresolvable IA triplet ({}, {}, {})", rec.h, rec.r, rec.t),
                        )
                    })?;
                    match action {
                        "add" => delta.add_ia.push(t),
                        "del" => delta.del_ia.push(t),
                        other => return Err((line_no, format!("unknown action `{other}`"))),
                    }
                }
                ("UI", "del") => {
                    let (Some(u), Some(i)) = (vocab.find_user(&rec.h), vocab.find_item(&rec.t))
                    else {
                        return Err((
                            line_no,
                            format!("unresolvable UI triplet ({}, {})", rec.h, rec.t),
                        ));
                    };
                    if vocab.find_relation(&rec.r) != Some(vocab.interact()) {
                        return Err((
                            line_no,
                            format!("UI relation must be `{}`", crate::kg::INTERACT),
                        ));
                    }
                    delta.del_ui.push((u, i));
                }
                (kind, action) => {
                    return Err((
                        line_no,
                        format!("unsupported record kind/action {kind}/{action}"),
                    ))
                }
            }
            let report = pools.apply(&delta, view, rec.batch, kg, interactions);
            if report.rejected > 0 {
                return Err((line_no, "record violates pool invariants".into()));
            }
        }
        Ok(pools)
    }
}

pub(crate) fn resolve_ia(vocab: &Vocab, h: &str, r: &str, t: &str) -> Option<IaTriplet> {
    let item = vocab.find_item(h)?;
    let rel = vocab.find_relation(r)?;
    if vocab.relation_kind(rel) != RelationKind::ItemAttribute {
        return None;
    }
    let attr = vocab.find_attribute(t)?;
    Some(IaTriplet::new(item, rel, attr))
}

/// One line of the pool file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PoolRecord {
    pub view: String,
    pub action: String,
    pub kind: String,
    pub h: String,
    pub r: String,
    pub t: String,
    pub batch: usize,
}
