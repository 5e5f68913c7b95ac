//! LightGCN-style propagation over a user-item interaction graph.

use std::rc::Rc;

use ndarray::Array2;

use crate::autograd::{Csr, Tape, Var};
use crate::kg::InteractionGraph;

/// Symmetric-normalized bipartite adjacency, `A[u, i] = 1/√(|N_u||N_i|)`.
#[derive(Debug, Clone)]
pub struct Adjacency {
    /// `|U| × |I|`.
    pub user_item: Rc<Csr>,
    /// `|I| × |U|`.
    pub item_user: Rc<Csr>,
    pub isolated_users: usize,
    pub isolated_items: usize,
}

impl Adjacency {
    pub fn new(graph: &InteractionGraph) -> Self {
        let du: Vec<f64> = (0..graph.n_users())
            .map(|u| graph.items_of(crate::kg::UserId::from_index(u)).len() as f64)
            .collect();
        let di: Vec<f64> = (0..graph.n_items())
            .map(|i| graph.users_of(crate::kg::ItemId::from_index(i)).len() as f64)
            .collect();
        let entries: Vec<(usize, usize, f64)> = graph
            .pairs()
            .iter()
            .map(|&(u, i)| {
                (
                    u.index(),
                    i.index(),
                    1.0 / (du[u.index()] * di[i.index()]).sqrt(),
                )
            })
            .collect();
        let user_item = Csr::from_triplets(graph.n_users(), graph.n_items(), &entries);
        let item_user = user_item.transpose();
        let isolated_users = du.iter().filter(|&&d| d == 0.0).count();
        let isolated_items = di.iter().filter(|&&d| d == 0.0).count();
        if isolated_users + isolated_items > 0 {
            log::trace!("propagation graph has {isolated_users} isolated users and {isolated_items} isolated items");
        }
        Adjacency {
            user_item: Rc::new(user_item),
            item_user: Rc::new(item_user),
            isolated_users,
            isolated_items,
        }
    }
}

/// Per-layer embeddings, index 0 being the inputs.
pub struct PropagationState<'t> {
    pub users: Vec<Var<'t>>,
    pub items: Vec<Var<'t>>,
}

/// `x_u^(l+1) = Σ_{i∈N_u} x_i^(l)/√(|N_u||N_i|)` and symmetrically for items.
pub fn propagate<'t>(
    adj: &Adjacency,
    users: Var<'t>,
    items: Var<'t>,
    layers: usize,
) -> PropagationState<'t> {
    assert!(layers >= 1, "at least one propagation layer");
    let mut state = PropagationState {
        users: vec![users],
        items: vec![items],
    };
    for l in 0..layers {
        let u = state.items[l].spmm(adj.user_item.clone());
        let i = state.users[l].spmm(adj.item_user.clone());
        state.users.push(u);
        state.items.push(i);
    }
    state
}

/// Mean over layers `1..=L`, or `0..=L` with `include_input`.
pub fn final_embeddings<'t>(
    state: &PropagationState<'t>,
    include_input: bool,
) -> (Var<'t>, Var<'t>) {
    let from = if include_input { 0 } else { 1 };
    let mean = |layers: &[Var<'t>]| {
        let picked = &layers[from..];
        let mut acc = picked[0];
        for v in &picked[1..] {
            acc = acc.add(*v);
        }
        acc.scale(1.0 / picked.len() as f64)
    };
    (mean(&state.users), mean(&state.items))
}

/// Value-only propagation and averaging.
pub fn propagate_values(
    adj: &Adjacency,
    users: &Array2<f64>,
    items: &Array2<f64>,
    layers: usize,
    include_input: bool,
) -> (Array2<f64>, Array2<f64>) {
    let tape = Tape::new();
    let state = propagate(
        adj,
        tape.leaf(users.clone()),
        tape.leaf(items.clone()),
        layers,
    );
    let (u, i) = final_embeddings(&state, include_input);
    (u.value().as_ref().clone(), i.value().as_ref().clone())
}
