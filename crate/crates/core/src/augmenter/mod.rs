//! LLM-assisted subgraph augmentation: batches of collaborative signals are
//! turned into user-view and item-view prompts, and the parsed advice is
//! accumulated into four pools.

mod backend;
mod parse;
mod pools;
mod subgraph;

pub use backend::{
    prompt_seed, BudgetedBackend, HttpBackend, LlmBackend, RecordingBackend, ReplayBackend,
    StubBackend, TranscriptEntry, ENV_KEY, ENV_MODEL, ENV_URL,
};
pub use parse::{parse_response, ParseOutcome, PoolDelta};
pub use pools::{ApplyReport, AugmentationPools, PoolRecord};
pub use subgraph::{build_prompt, extract_subgraph, Subgraph};

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BackendError, DataError};
use crate::kg::{InteractionGraph, ItemId, TripartiteKg, UserId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    User,
    Item,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AugmentError {
    #[error("signal list is empty")]
    EmptySignals,
    #[error("signal ({0:?}, {1:?}) is not an observed interaction")]
    UnknownSignal(UserId, ItemId),
}

#[derive(Debug, Clone)]
pub struct AugmentOptions {
    /// Collaborative signals per subgraph.
    pub batch_size: usize,
    /// Maximum backend requests in flight.
    pub concurrency: usize,
    /// Seeds the order in which signals are batched.
    pub seed: u64,
    /// Pool file rewritten after every batch; a sidecar `*.meta.json` enables resume.
    pub persist: Option<PathBuf>,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        AugmentOptions {
            batch_size: 32,
            concurrency: 4,
            seed: 0,
            persist: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AugmentReport {
    pub batches: usize,
    pub completed: usize,
    pub resumed: usize,
    pub skipped: Vec<usize>,
    pub accepted: usize,
    pub rejected: usize,
    pub parse_failures: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("resume state does not match this run: {0}")]
    ResumeMismatch(String),
    #[error("batch size must be positive")]
    ZeroBatch,
}

/// Sidecar stored next to the pool file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolMeta {
    pub backend: String,
    pub seed: u64,
    pub batch_size: usize,
    pub batches: usize,
    pub completed: BTreeSet<usize>,
}

pub fn meta_path(pool_path: &Path) -> PathBuf {
    pool_path.with_extension("meta.json")
}

/// Splits the train signals into seeded batches of at most `batch_size`.
pub fn signal_batches(
    train: &InteractionGraph,
    batch_size: usize,
    seed: u64,
) -> Vec<Vec<(UserId, ItemId)>> {
    let mut signals = train.pairs().to_vec();
    signals.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    signals
        .chunks(batch_size.max(1))
        .map(<[_]>::to_vec)
        .collect()
}

struct BatchResult {
    batch: usize,
    outcome: Result<(AugmentationPools, ApplyReport, usize), BackendError>,
}

fn augment_batch(
    kg: &TripartiteKg,
    train: &InteractionGraph,
    backend: &dyn LlmBackend,
    batch: usize,
    signals: &[(UserId, ItemId)],
) -> Result<(AugmentationPools, ApplyReport, usize), BackendError> {
    let mut pools = AugmentationPools::default();
    let mut report = ApplyReport::default();
    let mut parse_failures = 0;
    for view in [View::User, View::Item] {
        let sub = extract_subgraph(kg, train, signals, view)
            .expect("batch signals come from the train graph");
        if sub.is_empty() {
            continue;
        }
        let response = backend.send(&build_prompt(&sub, &kg.vocab))?;
        let parsed = parse_response(&response, &kg.vocab, view);
        if parsed.parse_failed {
            parse_failures += 1;
        }
        let r = pools.apply(&parsed.delta, view, batch, kg, train);
        report.accepted += r.accepted;
        report.rejected += r.rejected + parsed.rejected;
    }
    Ok((pools, report, parse_failures))
}

/// Runs both views over every batch of train signals and accumulates pools.
///
/// A batch whose backend call fails is skipped and logged. With
/// `opts.persist`, pools and progress are saved after each batch and an
/// existing matching sidecar is resumed from.
pub fn run_augmentation(
    kg: &TripartiteKg,
    train: &InteractionGraph,
    backend: &dyn LlmBackend,
    opts: &AugmentOptions,
) -> Result<(AugmentationPools, AugmentReport), RunError> {
    if opts.batch_size == 0 {
        return Err(RunError::ZeroBatch);
    }
    let batches = signal_batches(train, opts.batch_size, opts.seed);
    let mut meta = PoolMeta {
        backend: backend.id().to_owned(),
        seed: opts.seed,
        batch_size: opts.batch_size,
        batches: batches.len(),
        completed: BTreeSet::new(),
    };
    let mut pools = AugmentationPools::default();
    if let Some(path) = &opts.persist {
        let mp = meta_path(path);
        if mp.exists() && path.exists() {
            let text = fs::read_to_string(&mp).map_err(|e| DataError::io(&mp, e))?;
            let old: PoolMeta = serde_json::from_str(&text).map_err(|e| DataError::Invalid {
                path: mp.clone(),
                line: 1,
                message: e.to_string(),
            })?;
            if (old.seed, old.batch_size, old.batches) != (meta.seed, meta.batch_size, meta.batches)
            {
                return Err(RunError::ResumeMismatch(format!(
                    "stored seed/batch_size/batches {}/{}/{}, requested {}/{}/{}",
                    old.seed, old.batch_size, old.batches, meta.seed, meta.batch_size, meta.batches
                )));
            }
            pools = AugmentationPools::load(path, kg, train)?;
            meta.completed = old.completed;
            log::info!(
                "resuming augmentation: {}/{} batches already done",
                meta.completed.len(),
                meta.batches
            );
        }
    }
    let mut report = AugmentReport {
        batches: batches.len(),
        resumed: meta.completed.len(),
        ..Default::default()
    };
    let todo: Vec<usize> = (0..batches.len())
        .filter(|b| !meta.completed.contains(b))
        .collect();
    let next = AtomicUsize::new(0);
    let workers = opts.concurrency.max(1).min(todo.len().max(1));

    let mut persist_err = None;
    std::thread::scope(|s| {
        let (tx, rx) = mpsc::channel::<BatchResult>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (todo, next, batches) = (&todo, &next, &batches);
            s.spawn(move || loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&batch) = todo.get(k) else { break };
                let outcome = augment_batch(kg, train, backend, batch, &batches[batch]);
                if tx.send(BatchResult { batch, outcome }).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for res in rx {
            match res.outcome {
                Ok((delta, r, pf)) => {
                    pools.merge_from(&delta);
                    report.completed += 1;
                    report.accepted += r.accepted;
                    report.rejected += r.rejected;
                    report.parse_failures += pf;
                    meta.completed.insert(res.batch);
                    if let (Some(path), None) = (&opts.persist, &persist_err) {
                        if let Err(e) = persist(path, &pools, &meta, kg) {
                            persist_err = Some(e);
                        }
                    }
                }
                Err(e) => {
                    log::warn!("batch {} skipped: {e}", res.batch);
                    report.skipped.push(res.batch);
                }
            }
        }
    });
    if let Some(e) = persist_err {
        return Err(e.into());
    }
    if let Some(path) = &opts.persist {
        persist(path, &pools, &meta, kg)?;
    }
    report.skipped.sort_unstable();
    Ok((pools, report))
}

fn persist(
    path: &Path,
    pools: &AugmentationPools,
    meta: &PoolMeta,
    kg: &TripartiteKg,
) -> Result<(), DataError> {
    pools.save(path, &kg.vocab)?;
    let body = serde_json::to_string_pretty(meta).expect("meta serializes");
    crate::io::write_atomic(&meta_path(path), body.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{IaTriplet, RelationKind, Vocab};

    fn toy() -> TripartiteKg {
        let mut v = Vocab::new();
        let users: Vec<_> = ["u0", "u1", "u2"].iter().map(|n| v.user(n)).collect();
        let items: Vec<_> = ["apple", "banana", "carrot", "durian"]
            .iter()
            .map(|n| v.item(n))
            .collect();
        let cat = v
            .relation("has_category", RelationKind::ItemAttribute)
            .unwrap();
        let fruit = v.attribute("fruit");
        let veg = v.attribute("vegetable");
        let ia = vec![
            IaTriplet::new(items[0], cat, fruit),
            IaTriplet::new(items[1], cat, fruit),
            IaTriplet::new(items[2], cat, fruit),
            IaTriplet::new(items[3], cat, veg),
        ];
        let pairs = [(0, 0), (0, 1), (1, 1), (1, 2), (2, 3), (2, 0)];
        let g =
            InteractionGraph::from_pairs(3, 4, pairs.iter().map(|&(u, i)| (users[u], items[i])));
        TripartiteKg::new(v, g, ia, vec![])
    }

    #[test]
    fn stub_pools_equal_scripted_advice() {
        let kg = toy();
        let user = r#"{"add_ia":[["durian","has_category","fruit"]],"del_ia":[["carrot","has_category","fruit"]],
                       "del_ui":[["u2","interact","durian"]]}"#;
        let item = r#"{"add_ia":[["carrot","has_category","vegetable"]],"del_ia":[["carrot","has_category","fruit"]]}"#;
        let backend = StubBackend::scripted(user, item);
        let opts = AugmentOptions {
            batch_size: 2,
            concurrency: 3,
            seed: 1,
            persist: None,
        };
        let (pools, report) = run_augmentation(&kg, &kg.interactions, &backend, &opts).unwrap();
        let v = &kg.vocab;
        let ia = |i: &str, a: &str| {
            IaTriplet::new(
                v.find_item(i).unwrap(),
                v.find_relation("has_category").unwrap(),
                v.find_attribute(a).unwrap(),
            )
        };
        assert_eq!(
            pools.add_user.keys().copied().collect::<Vec<_>>(),
            vec![ia("durian", "fruit")]
        );
        assert_eq!(
            pools.del_user_ia.keys().copied().collect::<Vec<_>>(),
            vec![ia("carrot", "fruit")]
        );
        assert_eq!(
            pools.add_item.keys().copied().collect::<Vec<_>>(),
            vec![ia("carrot", "vegetable")]
        );
        assert_eq!(
            pools.del_item.keys().copied().collect::<Vec<_>>(),
            vec![ia("carrot", "fruit")]
        );
        let u2 = v.find_user("u2").unwrap();
        let durian = v.find_item("durian").unwrap();
        assert_eq!(
            pools.del_user_ui.keys().copied().collect::<Vec<_>>(),
            vec![(u2, durian)]
        );
        assert_eq!(report.batches, 3);
        assert_eq!(report.completed, 3);
        // every entry remembers the first batch that proposed it
        assert!(pools.add_user.values().all(|&b| b == 0));
    }

    #[test]
    fn concurrency_does_not_change_pools() {
        let kg = toy();
        let backend = StubBackend::synthetic(9);
        let run = |c| {
            let opts = AugmentOptions {
                batch_size: 1,
                concurrency: c,
                seed: 4,
                persist: None,
            };
            run_augmentation(&kg, &kg.interactions, &backend, &opts)
                .unwrap()
                .0
        };
        let serial = run(1);
        assert_eq!(serial, run(8));
        assert_eq!(serial.to_jsonl(&kg.vocab), run(3).to_jsonl(&kg.vocab));
    }

    #[test]
    fn failed_batches_are_skipped() {
        let kg = toy();
        let backend = BudgetedBackend::new(StubBackend::constant("{}"), 3);
        let opts = AugmentOptions {
            batch_size: 2,
            concurrency: 1,
            seed: 0,
            persist: None,
        };
        let (_, report) = run_augmentation(&kg, &kg.interactions, &backend, &opts).unwrap();
        assert_eq!(report.completed, 1);
        assert_eq!(report.skipped.len(), 2);
    }

    #[test]
    fn persisted_run_resumes() {
        let kg = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pools.jsonl");
        let opts = AugmentOptions {
            batch_size: 2,
            concurrency: 1,
            seed: 0,
            persist: Some(path.clone()),
        };
        let full = run_augmentation(&kg, &kg.interactions, &StubBackend::synthetic(2), &opts)
            .unwrap()
            .0;

        fs::remove_file(&path).unwrap();
        fs::remove_file(meta_path(&path)).unwrap();
        // the budget lets only the first batch through
        let limited = BudgetedBackend::new(StubBackend::synthetic(2), 2);
        let (_, first) = run_augmentation(&kg, &kg.interactions, &limited, &opts).unwrap();
        assert_eq!(first.completed, 1);
        let (resumed, second) =
            run_augmentation(&kg, &kg.interactions, &StubBackend::synthetic(2), &opts).unwrap();
        assert_eq!(second.resumed, 1);
        assert_eq!(second.completed, 2);
        assert_eq!(resumed, full);
    }

    #[test]
    fn replay_reproduces_pools_byte_for_byte() {
        let kg = toy();
        let dir = tempfile::tempdir().unwrap();
        let transcript = dir.path().join("session.jsonl");
        let rec = RecordingBackend::new(StubBackend::synthetic(5));
        let opts = AugmentOptions {
            batch_size: 2,
            concurrency: 2,
            seed: 7,
            persist: None,
        };
        let original = run_augmentation(&kg, &kg.interactions, &rec, &opts)
            .unwrap()
            .0;
        rec.save(&transcript).unwrap();
        let replay = ReplayBackend::load(&transcript).unwrap();
        let again = run_augmentation(&kg, &kg.interactions, &replay, &opts)
            .unwrap()
            .0;
        assert_eq!(original.to_jsonl(&kg.vocab), again.to_jsonl(&kg.vocab));
    }

    #[test]
    fn pool_file_round_trips() {
        let kg = toy();
        let opts = AugmentOptions {
            batch_size: 1,
            concurrency: 2,
            seed: 3,
            persist: None,
        };
        let pools = run_augmentation(&kg, &kg.interactions, &StubBackend::synthetic(11), &opts)
            .unwrap()
            .0;
        let back = AugmentationPools::from_jsonl(&pools.to_jsonl(&kg.vocab), &kg, &kg.interactions)
            .unwrap();
        assert_eq!(back, pools);
    }

    #[test]
    fn item_prompt_never_mentions_users() {
        let kg = toy();
        let signals = kg.interactions.pairs()[..3].to_vec();
        let sub = extract_subgraph(&kg, &kg.interactions, &signals, View::Item).unwrap();
        assert!(sub.ui.is_empty());
        let p = build_prompt(&sub, &kg.vocab);
        assert!(!p.to_lowercase().contains("user"));
        assert_eq!(p, build_prompt(&sub, &kg.vocab));
        let user = build_prompt(
            &extract_subgraph(&kg, &kg.interactions, &signals, View::User).unwrap(),
            &kg.vocab,
        );
        assert!(user.contains("Fact verification") && user.contains("Interaction pruning"));
    }

    #[test]
    fn subgraph_errors() {
        let kg = toy();
        assert_eq!(
            extract_subgraph(&kg, &kg.interactions, &[], View::User),
            Err(AugmentError::EmptySignals)
        );
        let bad = (UserId(0), ItemId(3));
        assert_eq!(
            extract_subgraph(&kg, &kg.interactions, &[bad], View::User),
            Err(AugmentError::UnknownSignal(bad.0, bad.1))
        );
    }
}
