//! Confidence-aware mixture-of-experts knowledge encoder.
//!
//! Three stages over a set of item-attribute triplets:
//!
//! 1. [`gat_aggregate`]: attention pre-aggregation of attribute embeddings into
//!    items, `x_i' = x_i + Σ_k α_ik x_{a_k}` with
//!    `α_ik = softmax_k LeakyReLU(a1ᵀ [W1 x_i ‖ W1 x_{a_k}])`.
//! 2. [`triplet_confidence`]: `f_t = W [x_i' ‖ x_a]`, gates `ω = softmax(W_r f_t + b_r)`,
//!    `φ(t) = Σ_k ω_k · x_rᵀ E_k(f_t)` with linear experts `E_k`.
//! 3. [`confidence_aggregate`]: `x_i'' = x_i' + Σ_k softmax_k(LeakyReLU(φ_k)) x_{a_k}`.
//!
//! Items without neighbors pass through unchanged at every stage.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::Array2;

use crate::autograd::{Tape, Var};
use crate::kg::IaTriplet;
use crate::params::{ModelParams, ParamVars};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Column indices of a triplet list, shared by the tape operations.
#[derive(Debug, Clone)]
pub struct IaIndex {
    pub items: Rc<Vec<usize>>,
    pub relations: Rc<Vec<usize>>,
    pub attrs: Rc<Vec<usize>>,
}

impl IaIndex {
    pub fn new(triplets: &[IaTriplet]) -> Self {
        IaIndex {
            items: Rc::new(triplets.iter().map(|t| t.item.index()).collect()),
            relations: Rc::new(triplets.iter().map(|t| t.relation.index()).collect()),
            attrs: Rc::new(triplets.iter().map(|t| t.attr.index()).collect()),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Sub-index of the given positions, in the given order.
    pub fn select(&self, keep: &[usize]) -> IaIndex {
        IaIndex {
            items: Rc::new(keep.iter().map(|&k| self.items[k]).collect()),
            relations: Rc::new(keep.iter().map(|&k| self.relations[k]).collect()),
            attrs: Rc::new(keep.iter().map(|&k| self.attrs[k]).collect()),
        }
    }
}

pub struct GatOutput<'t> {
    /// `x_i'`, `|I| × d`.
    pub items: Var<'t>,
    /// Attention weight per triplet, `T × 1`.
    pub weights: Var<'t>,
}

/// Attention pre-aggregation over `index`.
pub fn gat_aggregate<'t>(p: &ParamVars<'t>, index: &IaIndex) -> GatOutput<'t> {
    let n_items = p.item.shape().0;
    let w1t = p.att_w.t();
    let hi = p.item.matmul(w1t).gather(index.items.clone());
    let ha = p.attr.matmul(w1t).gather(index.attrs.clone());
    let logits = hi.concat_cols(ha).matmul(p.att_a).leaky_relu(LEAKY_SLOPE);
    let weights = logits.segment_softmax(index.items.clone(), n_items);
    let messages = p.attr.gather(index.attrs.clone()).mul_col(weights);
    let items = p
        .item
        .add(messages.scatter_add(index.items.clone(), n_items));
    GatOutput { items, weights }
}

pub struct ConfidenceOutput<'t> {
    /// `φ(t)` per triplet, `T × 1`.
    pub phi: Var<'t>,
    /// Expert gates per triplet, `T × N_e`.
    pub gates: Var<'t>,
}

/// Mixture-of-experts confidence for every triplet of `index`, given `x_i'`.
pub fn triplet_confidence<'t>(
    p: &ParamVars<'t>,
    items_prime: Var<'t>,
    index: &IaIndex,
) -> ConfidenceOutput<'t> {
    let features = items_prime
        .gather(index.items.clone())
        .concat_cols(p.attr.gather(index.attrs.clone()))
        .matmul(p.transition.t());
    let gates = features
        .matmul(p.gate_w.t())
        .add_row(p.gate_b)
        .softmax_rows();
    let experts = features.matmul(p.expert_w.t()).add_row(p.expert_b);
    let scores = experts.block_row_dot(p.relation.gather(index.relations.clone()));
    let phi = gates.mul(scores).row_sum();
    ConfidenceOutput { phi, gates }
}

pub struct AggregateOutput<'t> {
    /// `x_i''`, `|I| × d`.
    pub items: Var<'t>,
    /// Softmax weight per triplet before any decision factor, `T × 1`.
    pub weights: Var<'t>,
}

/// Confidence-weighted aggregation over the triplets of `index`.
///
/// `phi` holds one confidence per triplet of `index`. When `decisions` is
/// given, each triplet's weight is multiplied by its decision value (this is
/// where straight-through keep decisions enter).
pub fn confidence_aggregate<'t>(
    p: &ParamVars<'t>,
    items_prime: Var<'t>,
    index: &IaIndex,
    phi: Var<'t>,
    decisions: Option<Var<'t>>,
) -> AggregateOutput<'t> {
    let n_items = items_prime.shape().0;
    let weights = phi
        .leaky_relu(LEAKY_SLOPE)
        .segment_softmax(index.items.clone(), n_items);
    let effective = match decisions {
        Some(d) => weights.mul(d),
        None => weights,
    };
    let messages = p.attr.gather(index.attrs.clone()).mul_col(effective);
    let items = items_prime.add(messages.scatter_add(index.items.clone(), n_items));
    AggregateOutput { items, weights }
}

/// Learned confidence per item-attribute triplet.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfidenceTable {
    scores: BTreeMap<IaTriplet, f64>,
}

impl ConfidenceTable {
    pub fn get(&self, t: &IaTriplet) -> Option<f64> {
        self.scores.get(t).copied()
    }

    pub fn insert(&mut self, t: IaTriplet, phi: f64) {
        self.scores.insert(t, phi);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&IaTriplet, &f64)> {
        self.scores.iter()
    }
}

impl FromIterator<(IaTriplet, f64)> for ConfidenceTable {
    fn from_iter<I: IntoIterator<Item = (IaTriplet, f64)>>(iter: I) -> Self {
        ConfidenceTable {
            scores: iter.into_iter().collect(),
        }
    }
}

/// Value-level `x_i'` and attention weights.
pub fn item_prime_values(params: &ModelParams, graph: &[IaTriplet]) -> (Array2<f64>, Vec<f64>) {
    let tape = Tape::new();
    let p = params.vars(&tape);
    let out = gat_aggregate(&p, &IaIndex::new(graph));
    let w = out.weights.value().iter().copied().collect();
    (out.items.value().as_ref().clone(), w)
}

/// Confidences of `targets`, with `x_i'` computed by attention over `graph`.
pub fn confidence_table(
    params: &ModelParams,
    graph: &[IaTriplet],
    targets: &[IaTriplet],
) -> ConfidenceTable {
    let tape = Tape::new();
    let p = params.vars(&tape);
    let prime = gat_aggregate(&p, &IaIndex::new(graph)).items;
    let conf = triplet_confidence(&p, prime, &IaIndex::new(targets));
    let phi = conf.phi.value();
    targets
        .iter()
        .enumerate()
        .map(|(k, t)| (*t, phi[[k, 0]]))
        .collect()
}

/// Expert gate distribution of each target triplet.
pub fn gate_values(
    params: &ModelParams,
    graph: &[IaTriplet],
    targets: &[IaTriplet],
) -> Array2<f64> {
    let tape = Tape::new();
    let p = params.vars(&tape);
    let prime = gat_aggregate(&p, &IaIndex::new(graph)).items;
    let conf = triplet_confidence(&p, prime, &IaIndex::new(targets));
    conf.gates.value().as_ref().clone()
}
