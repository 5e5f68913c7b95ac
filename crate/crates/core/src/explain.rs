//! Confidence-guided explanations: the augmented graph, `u → j → i` reason
//! paths with their witness attributes, the reasoning prompt and the parsed
//! LLM answer.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::augmenter::{AugmentationPools, LlmBackend};
use crate::encoder::{confidence_table, ConfidenceTable};
use crate::error::BackendError;
use crate::kg::{
    shared_relation_name, AttrId, IaTriplet, IiTriplet, InteractionGraph, ItemId, RelId,
    TripartiteKg, UserId, Vocab,
};
use crate::params::ModelParams;

/// First line of every explanation prompt.
pub const EXPLAIN_TAG: &str = "### TASK: EXPLAIN RECOMMENDATION";
pub const SELECTED_PATH: &str = "SELECTED_PATH:";
pub const DEFAULT_CONTEXT_SIZE: usize = 5;

/// The original graph plus the LLM additions with `φ ≥ μ`.
#[derive(Debug, Clone)]
pub struct AugmentedKg {
    pub mu: f64,
    pub ia: BTreeSet<IaTriplet>,
    pub ii: Vec<IiTriplet>,
    /// Added triplets that passed the threshold, ascending.
    pub admitted: Vec<IaTriplet>,
    pub rejected: usize,
    pub confidences: ConfidenceTable,
}

impl AugmentedKg {
    pub fn contains(&self, t: &IaTriplet) -> bool {
        self.ia.contains(t)
    }
}

/// Confidences of every original and proposed IA triplet, with attention over
/// the original IA graph.
pub fn augmented_confidences(
    params: &ModelParams,
    kg: &TripartiteKg,
    pools: &AugmentationPools,
) -> ConfidenceTable {
    let targets: BTreeSet<IaTriplet> = kg
        .ia()
        .iter()
        .chain(pools.add_user.keys())
        .chain(pools.add_item.keys())
        .copied()
        .collect();
    let targets: Vec<IaTriplet> = targets.into_iter().collect();
    confidence_table(params, kg.ia(), &targets)
}

/// Admits each triplet of the two add pools whose confidence is at least `mu`.
/// Pool triplets without a confidence are rejected.
pub fn build_augmented_kg(
    kg: &TripartiteKg,
    pools: &AugmentationPools,
    confidences: &ConfidenceTable,
    mu: f64,
) -> AugmentedKg {
    let candidates: BTreeSet<IaTriplet> = pools
        .add_user
        .keys()
        .chain(pools.add_item.keys())
        .copied()
        .collect();
    let mut ia: BTreeSet<IaTriplet> = kg.ia().iter().copied().collect();
    let mut admitted = Vec::new();
    let mut rejected = 0;
    for t in candidates {
        if ia.contains(&t) {
            continue;
        }
        match confidences.get(&t) {
            Some(phi) if phi >= mu => {
                ia.insert(t);
                admitted.push(t);
            }
            _ => rejected += 1,
        }
    }
    log::info!(
        "augmented graph: {} added triplets admitted, {rejected} rejected at mu = {mu}",
        admitted.len()
    );
    AugmentedKg {
        mu,
        ia,
        ii: kg.ii().to_vec(),
        admitted,
        rejected,
        confidences: confidences.clone(),
    }
}

/// `u → j ↔ i` through II relation `relation`, witnessed by attribute `witness`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReasonPath {
    pub user: UserId,
    pub bridge: ItemId,
    pub target: ItemId,
    pub relation: RelId,
    pub witness: AttrId,
    pub bridge_triplet: IaTriplet,
    pub target_triplet: IaTriplet,
    /// `[φ(j, r_a, a), φ(i, r_a, a)]`.
    pub confidence: [f64; 2],
}

impl ReasonPath {
    pub fn min_confidence(&self) -> f64 {
        self.confidence[0].min(self.confidence[1])
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ExplainError {
    #[error("user {0} has no interactions to explain from")]
    NoHistory(String),
    #[error("no reason path connects user {user} to item {item}")]
    NotExplainable { user: String, item: String },
}

/// IA relations an II relation may be witnessed through.
fn witness_relations(vocab: &Vocab, ii_rel: RelId) -> Vec<RelId> {
    if let Some(r) = vocab.derived_from(ii_rel) {
        return vec![r];
    }
    let name = vocab.relation_name(ii_rel);
    let all = vocab.ia_relations();
    let matched: Vec<RelId> = all
        .iter()
        .copied()
        .filter(|&r| shared_relation_name(vocab.relation_name(r)) == name)
        .collect();
    if matched.is_empty() {
        all
    } else {
        matched
    }
}

/// All paths from `u` to `i` through an item of `history` linked to `i` by an
/// II triplet. Each path carries the shared attribute with the largest
/// `min(φ_j, φ_i)`; ties go to the smaller relation id, then attribute id.
/// II triplets without a shared attribute are dropped.
pub fn extract_reason_paths(
    aug: &AugmentedKg,
    vocab: &Vocab,
    history: &InteractionGraph,
    u: UserId,
    i: ItemId,
) -> Result<Vec<ReasonPath>, ExplainError> {
    let interacted = history.items_of(u);
    if interacted.is_empty() {
        return Err(ExplainError::NoHistory(vocab.user_name(u).to_owned()));
    }
    let mut paths = Vec::new();
    for t in &aug.ii {
        let Some(j) = t.other(i) else { continue };
        if j == i || interacted.binary_search(&j).is_err() {
            continue;
        }
        let mut best: Option<ReasonPath> = None;
        for r in witness_relations(vocab, t.relation) {
            for bt in aug.ia.range(IaTriplet::new(j, r, AttrId(0))..) {
                if bt.item != j || bt.relation != r {
                    break;
                }
                let tt = IaTriplet::new(i, r, bt.attr);
                if !aug.contains(&tt) {
                    continue;
                }
                let (Some(cj), Some(ci)) = (aug.confidences.get(bt), aug.confidences.get(&tt))
                else {
                    log::debug!("witness triplet without confidence skipped");
                    continue;
                };
                let cand = ReasonPath {
                    user: u,
                    bridge: j,
                    target: i,
                    relation: t.relation,
                    witness: bt.attr,
                    bridge_triplet: *bt,
                    target_triplet: tt,
                    confidence: [cj, ci],
                };
                if best
                    .as_ref()
                    .map_or(true, |b| cand.min_confidence() > b.min_confidence())
                {
                    best = Some(cand);
                }
            }
        }
        paths.extend(best);
    }
    if paths.is_empty() {
        return Err(ExplainError::NotExplainable {
            user: vocab.user_name(u).to_owned(),
            item: vocab.item_name(i).to_owned(),
        });
    }
    paths.sort_by_key(|p| (p.bridge, p.relation));
    Ok(paths)
}

/// Up to `n` items of `u`'s history, excluding the target and every bridge,
/// sampled with `seed`; ascending.
pub fn sample_context(
    history: &InteractionGraph,
    u: UserId,
    target: ItemId,
    paths: &[ReasonPath],
    n: usize,
    seed: u64,
) -> Vec<ItemId> {
    let bridges: BTreeSet<ItemId> = paths.iter().map(|p| p.bridge).collect();
    let pool: Vec<ItemId> = history
        .items_of(u)
        .iter()
        .copied()
        .filter(|j| *j != target && !bridges.contains(j))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<ItemId> = sample(&mut rng, pool.len(), n.min(pool.len()))
        .into_iter()
        .map(|k| pool[k])
        .collect();
    picked.sort_unstable();
    picked
}

/// `[2.627, 2.773]`.
pub fn format_confidence_pair(c: [f64; 2]) -> String {
    format!("[{:.3}, {:.3}]", c[0], c[1])
}

/// One-line rendering: `u → j ↔ i (same_x: a) → [φ1, φ2]`.
pub fn render_path(p: &ReasonPath, vocab: &Vocab) -> String {
    format!(
        "{} → {} ↔ {} ({}: {}) → {}",
        vocab.user_name(p.user),
        vocab.item_name(p.bridge),
        vocab.item_name(p.target),
        vocab.relation_name(p.relation),
        vocab.attribute_name(p.witness),
        format_confidence_pair(p.confidence)
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationRequest {
    pub user: UserId,
    pub item: ItemId,
    pub paths: Vec<ReasonPath>,
    pub context: Vec<ItemId>,
    pub prompt: String,
}

/// Renders the candidate paths, their triplets and confidences, and the
/// user's context items into the five-step reasoning prompt.
pub fn build_explanation_prompt(paths: &[ReasonPath], context: &[ItemId], vocab: &Vocab) -> String {
    assert!(!paths.is_empty(), "at least one reason path");
    let (u, i) = (paths[0].user, paths[0].target);
    let (un, inm) = (vocab.user_name(u), vocab.item_name(i));
    let ia = |t: &IaTriplet| {
        format!(
            "({}, {}, {})",
            vocab.item_name(t.item),
            vocab.relation_name(t.relation),
            vocab.attribute_name(t.attr)
        )
    };
    let mut s = String::new();
    let _ = writeln!(s, "{EXPLAIN_TAG}");
    let _ = writeln!(s, "Explain to {un} why {inm} is recommended to them.\n");
    let _ = writeln!(s, "Candidate reason paths (numbers in brackets are confidence scores of the two attribute triplets):");
    for (k, p) in paths.iter().enumerate() {
        let _ = writeln!(s, "Path {k}: {}", render_path(p, vocab));
        let _ = writeln!(s, "  ({un}, interact, {})", vocab.item_name(p.bridge));
        let _ = writeln!(
            s,
            "  ({}, {}, {inm})",
            vocab.item_name(p.bridge),
            vocab.relation_name(p.relation)
        );
        let _ = writeln!(
            s,
            "  {} confidence {:.3}",
            ia(&p.bridge_triplet),
            p.confidence[0]
        );
        let _ = writeln!(
            s,
            "  {} confidence {:.3}",
            ia(&p.target_triplet),
            p.confidence[1]
        );
    }
    let _ = writeln!(s, "\nOther items {un} has interacted with:");
    if context.is_empty() {
        let _ = writeln!(s, "  (none)");
    }
    for j in context {
        let _ = writeln!(s, "  ({un}, interact, {})", vocab.item_name(*j));
    }
    let _ = writeln!(
        s,
        "\nReason step by step:
1. Understand user preferences: summarize what the interactions above say about {un}.
2. Identify item similarities: relate {inm} to the items it is linked with.
3. Attribute-based justification: find the shared attributes that make {inm} appealing.
4. Evaluate confidence scores: prefer paths whose attribute triplets have higher confidence.
5. Generate a colloquial explanation: write a short, natural review of {inm} addressed to {un}, without listing the data above.

Answer with one line `{SELECTED_PATH} <path number>` followed by the explanation."
    );
    s
}

/// Collects paths and context for `(u, i)` and renders the prompt.
pub fn prepare_request(
    aug: &AugmentedKg,
    vocab: &Vocab,
    history: &InteractionGraph,
    u: UserId,
    i: ItemId,
    context_size: usize,
    seed: u64,
) -> Result<ExplanationRequest, ExplainError> {
    let paths = extract_reason_paths(aug, vocab, history, u, i)?;
    let context = sample_context(history, u, i, &paths, context_size, seed);
    let prompt = build_explanation_prompt(&paths, &context, vocab);
    Ok(ExplanationRequest {
        user: u,
        item: i,
        paths,
        context,
        prompt,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Explanation {
    pub selected: usize,
    pub explanation: String,
    /// The response had no usable path index; `selected` is the path with the
    /// highest minimum confidence.
    pub fallback: bool,
    pub response: String,
}

/// Backend failure, with the request kept for a retry.
#[derive(Debug, Error)]
#[error("explanation backend failed: {error}")]
pub struct ExplanationFailure {
    pub error: BackendError,
    pub request: Box<ExplanationRequest>,
}

/// Index of the path with the largest `min(φ)`, first on ties.
pub fn most_confident_path(paths: &[ReasonPath]) -> usize {
    let mut best = 0;
    for (k, p) in paths.iter().enumerate() {
        if p.min_confidence() > paths[best].min_confidence() {
            best = k;
        }
    }
    best
}

/// Splits a response into the selected index (if parseable) and the remaining text.
pub fn parse_explanation(response: &str) -> (Option<usize>, String) {
    let mut index = None;
    let mut rest = Vec::new();
    for line in response.lines() {
        let trimmed = line.trim().trim_matches('`');
        match trimmed.strip_prefix(SELECTED_PATH) {
            Some(v) if index.is_none() => {
                index = v
                    .trim()
                    .trim_start_matches("Path")
                    .trim()
                    .parse::<usize>()
                    .ok();
            }
            _ => rest.push(line),
        }
    }
    (index, rest.join("\n").trim().to_owned())
}

pub fn generate_explanation(
    request: ExplanationRequest,
    backend: &dyn LlmBackend,
) -> Result<(ExplanationRequest, Explanation), ExplanationFailure> {
    let response = match backend.send(&request.prompt) {
        Ok(r) => r,
        Err(error) => {
            return Err(ExplanationFailure {
                error,
                request: Box::new(request),
            })
        }
    };
    let (index, text) = parse_explanation(&response);
    let (selected, fallback) = match index {
        Some(k) if k < request.paths.len() => (k, false),
        _ => {
            log::warn!("explanation response has no valid {SELECTED_PATH} line; using the most confident path");
            (most_confident_path(&request.paths), true)
        }
    };
    Ok((
        request,
        Explanation {
            selected,
            explanation: text,
            fallback,
            response,
        },
    ))
}

/// `{paths, confidences, selected, explanation, fallback, context}` with names.
pub fn explanation_json(
    request: &ExplanationRequest,
    out: &Explanation,
    vocab: &Vocab,
) -> serde_json::Value {
    let paths: Vec<serde_json::Value> = request
        .paths
        .iter()
        .map(|p| {
            serde_json::json!({
                "path": render_path(p, vocab),
                "bridge": vocab.item_name(p.bridge),
                "relation": vocab.relation_name(p.relation),
                "attribute": vocab.attribute_name(p.witness),
                "attribute_relation": vocab.relation_name(p.bridge_triplet.relation),
            })
        })
        .collect();
    let confidences: Vec<[f64; 2]> = request.paths.iter().map(|p| p.confidence).collect();
    serde_json::json!({
        "user": vocab.user_name(request.user),
        "item": vocab.item_name(request.item),
        "paths": paths,
        "confidences": confidences,
        "context": request.context.iter().map(|j| vocab.item_name(*j)).collect::<Vec<_>>(),
        "selected": out.selected,
        "fallback": out.fallback,
        "explanation": out.explanation,
    })
}
