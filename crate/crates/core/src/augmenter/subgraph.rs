use std::collections::BTreeSet;
use std::fmt::Write as _;

use super::{AugmentError, View};
use crate::kg::{
    IaTriplet, IiTriplet, InteractionGraph, ItemId, TripartiteKg, Triplet, UserId, Vocab,
};

/// Triplets around a batch of collaborative signals, for one view.
///
/// The user view holds UI and IA triplets; the item view holds IA and II triplets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subgraph {
    pub view: View,
    pub signals: Vec<(UserId, ItemId)>,
    pub ui: Vec<(UserId, ItemId)>,
    pub ia: Vec<IaTriplet>,
    pub ii: Vec<IiTriplet>,
}

impl Subgraph {
    pub fn is_empty(&self) -> bool {
        self.ui.is_empty() && self.ia.is_empty() && self.ii.is_empty()
    }

    pub fn len(&self) -> usize {
        self.ui.len() + self.ia.len() + self.ii.len()
    }
}

/// Collects the triplets related to `signals` from `kg`, with UI triplets
/// taken from `interactions`.
///
/// * user view: every interaction of the signal users, plus the IA triplets
///   of all items those users interacted with;
/// * item view: the IA and II triplets incident to the signal items.
pub fn extract_subgraph(
    kg: &TripartiteKg,
    interactions: &InteractionGraph,
    signals: &[(UserId, ItemId)],
    view: View,
) -> Result<Subgraph, AugmentError> {
    if signals.is_empty() {
        return Err(AugmentError::EmptySignals);
    }
    if let Some(&(u, i)) = signals.iter().find(|&&(u, i)| !interactions.contains(u, i)) {
        return Err(AugmentError::UnknownSignal(u, i));
    }
    let mut sub = Subgraph {
        view,
        signals: signals.to_vec(),
        ui: Vec::new(),
        ia: Vec::new(),
        ii: Vec::new(),
    };
    match view {
        View::User => {
            let users: BTreeSet<UserId> = signals.iter().map(|&(u, _)| u).collect();
            let mut items = BTreeSet::new();
            for &u in &users {
                for &i in interactions.items_of(u) {
                    sub.ui.push((u, i));
                    items.insert(i);
                }
            }
            let ia: BTreeSet<IaTriplet> =
                items.iter().flat_map(|&i| kg.ia_of(i).copied()).collect();
            sub.ia = ia.into_iter().collect();
        }
        View::Item => {
            let items: BTreeSet<ItemId> = signals.iter().map(|&(_, i)| i).collect();
            let ia: BTreeSet<IaTriplet> =
                items.iter().flat_map(|&i| kg.ia_of(i).copied()).collect();
            let ii: BTreeSet<IiTriplet> =
                items.iter().flat_map(|&i| kg.ii_of(i).copied()).collect();
            sub.ia = ia.into_iter().collect();
            sub.ii = ii.into_iter().collect();
        }
    }
    Ok(sub)
}

pub(crate) const UI_HEADER: &str = "Interactions (user, interact, item):";
pub(crate) const IA_HEADER: &str = "Item-attribute triplets (item, relation, attribute):";
pub(crate) const II_HEADER: &str = "Item-item triplets (item, relation, item):";
pub(crate) const VIEW_USER_TAG: &str = "Subgraph view: user";
pub(crate) const VIEW_ITEM_TAG: &str = "Subgraph view: item";

fn line(out: &mut String, t: Triplet, vocab: &Vocab) {
    let (h, r, tl) = t.names(vocab);
    let _ = writeln!(out, "({h}, {r}, {tl})");
}

/// Renders the augmentation prompt for `sub`. Deterministic in its input.
pub fn build_prompt(sub: &Subgraph, vocab: &Vocab) -> String {
    let mut p = String::new();
    match sub.view {
        View::User => {
            p.push_str(VIEW_USER_TAG);
            p.push('\n');
            p.push_str(
                "You are curating the knowledge graph of a recommender system. Below are the \
                 interactions of a group of users together with the known attributes of every \
                 item they interacted with.\n\n",
            );
            p.push_str(UI_HEADER);
            p.push('\n');
            for &(u, i) in &sub.ui {
                line(&mut p, Triplet::Ui(u, i), vocab);
            }
            p.push('\n');
            p.push_str(IA_HEADER);
            p.push('\n');
            for &t in &sub.ia {
                line(&mut p, Triplet::Ia(t), vocab);
            }
            p.push_str(
                "\nTasks:\n\
                 1. Fact verification: check every item-attribute triplet against your knowledge. \
                 Propose missing facts to add and wrong or outdated facts to delete.\n\
                 2. Interaction pruning: reason about each user's overall behavior and mark \
                 interactions that look accidental or inconsistent with the user's preferences \
                 for deletion. Never propose new interactions.\n",
            );
        }
        View::Item => {
            p.push_str(VIEW_ITEM_TAG);
            p.push('\n');
            p.push_str(
                "You are curating the knowledge graph of a recommender system. Below are the \
                 known attributes of a set of items and the item-item relations implied by \
                 attributes they share.\n\n",
            );
            p.push_str(IA_HEADER);
            p.push('\n');
            for &t in &sub.ia {
                line(&mut p, Triplet::Ia(t), vocab);
            }
            p.push('\n');
            p.push_str(II_HEADER);
            p.push('\n');
            for &t in &sub.ii {
                line(&mut p, Triplet::Ii(t), vocab);
            }
            p.push_str(
                "\nTask:\n\
                 Rectify the item-attribute triplets with your factual knowledge, using the \
                 item-item relations as supporting context. Propose missing facts to add and \
                 wrong or outdated facts to delete.\n",
            );
        }
    }
    p.push_str(
        "\nUse entity and relation names exactly as written in the known data. \
         Respond with a single JSON object and nothing else, in this schema:\n",
    );
    match sub.view {
        View::User => p.push_str(
            "{\"add_ia\": [[\"item\", \"relation\", \"attribute\"]], \
             \"del_ia\": [[\"item\", \"relation\", \"attribute\"]], \
             \"del_ui\": [[\"user\", \"interact\", \"item\"]]}\n",
        ),
        View::Item => p.push_str(
            "{\"add_ia\": [[\"item\", \"relation\", \"attribute\"]], \
             \"del_ia\": [[\"item\", \"relation\", \"attribute\"]]}\n",
        ),
    }
    p
}

/// Detects the view tag written by [`build_prompt`].
pub(crate) fn prompt_view(prompt: &str) -> Option<View> {
    match prompt.lines().next()? {
        VIEW_USER_TAG => Some(View::User),
        VIEW_ITEM_TAG => Some(View::Item),
        _ => None,
    }
}
